#pragma once

// Dataset loaders (MNIST IDX, CIFAR-10 binary), a synthetic blob dataset and
// seed-deterministic batching. Pixels are stored as float in [0, 1].

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "decorr/detail/binary_io.hpp"
#include "decorr/tensor.hpp"

namespace decorr {

enum class Split { train, test };

struct Dataset {
  std::string name;
  Split split = Split::train;
  Shape sample_shape;        // C x H x W
  std::vector<float> pixels;  // N * C*H*W, row-major
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return numel_of(sample_shape); }

  void validate() const {
    if (pixels.size() != size() * sample_numel())
      throw ContractError("dataset '" + name + "': pixel count does not match labels");
    for (float p : pixels)
      if (!(p >= 0.0f && p <= 1.0f)) throw DomainError("dataset '" + name + "': pixel outside [0,1]");
    for (int l : labels)
      if (l < 0 || l >= 10) throw DomainError("dataset '" + name + "': label outside [0,10)");
  }

  // Batch tensor N x C x H x W for the given sample indices.
  template <class T = float>
  Tensor<T> images(std::span<const std::size_t> idx) const {
    const std::size_t d = sample_numel();
    std::vector<T> v(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= size()) throw IndexError("dataset index " + std::to_string(idx[i]) + " out of range");
      std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, v.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    Shape s{idx.size()};
    s.insert(s.end(), sample_shape.begin(), sample_shape.end());
    return Tensor<T>(std::move(s), std::move(v));
  }
  std::vector<int> labels_at(std::span<const std::size_t> idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels.at(idx[i]);
    return out;
  }

  // First n samples.
  Dataset subset(std::size_t n) const {
    n = std::min(n, size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return take(idx);
  }
  // n samples drawn without replacement.
  Dataset sample(std::size_t n, std::uint64_t seed) const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(n, size()));
    return take(idx);
  }
  Dataset take(std::span<const std::size_t> idx) const {
    Dataset out{name, split, sample_shape, {}, {}};
    const std::size_t d = sample_numel();
    out.pixels.reserve(idx.size() * d);
    for (auto i : idx) {
      out.pixels.insert(out.pixels.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * d),
                        pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                              Split split = Split::train) {
  auto ir = detail::ByteReader::from_file(images_path);
  const auto im = ir.be_u32("image magic");
  if (im != kIdxImageMagic) throw ParseError("bad IDX image magic " + std::to_string(im) + " in " + images_path, 0);
  const auto n = ir.be_u32("image count");
  const auto h = ir.be_u32("row count");
  const auto w = ir.be_u32("column count");
  if (h != 28 || w != 28)
    throw ParseError("IDX images must be 28x28, got " + std::to_string(h) + "x" + std::to_string(w), 8);

  auto lr = detail::ByteReader::from_file(labels_path);
  const auto lm = lr.be_u32("label magic");
  if (lm != kIdxLabelMagic) throw ParseError("bad IDX label magic " + std::to_string(lm) + " in " + labels_path, 0);
  const auto ln = lr.be_u32("label count");
  if (ln != n)
    throw ParseError("label count " + std::to_string(ln) + " does not match image count " + std::to_string(n), 4);

  Dataset ds{"mnist", split, Shape{1, 28, 28}, {}, {}};
  const std::size_t d = 28 * 28;
  const unsigned char* px = ir.take(std::size_t{n} * d, "image payload");
  ds.pixels.resize(std::size_t{n} * d);
  for (std::size_t i = 0; i < ds.pixels.size(); ++i) ds.pixels[i] = static_cast<float>(px[i]) / 255.0f;
  const std::size_t label_start = lr.pos();
  const unsigned char* lb = lr.take(n, "label payload");
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (lb[i] >= 10) throw ParseError("label " + std::to_string(lb[i]) + " out of range", label_start + i);
    ds.labels[i] = lb[i];
  }
  return ds;
}

inline constexpr std::size_t kCifarRecordBytes = 3073;

inline Dataset load_cifar10_binary(const std::vector<std::string>& paths, Split split = Split::train) {
  Dataset ds{"cifar10", split, Shape{3, 32, 32}, {}, {}};
  for (const auto& path : paths) {
    auto r = detail::ByteReader::from_file(path);
    if (r.size() % kCifarRecordBytes != 0)
      throw ParseError(path + ": length " + std::to_string(r.size()) + " is not a multiple of 3073",
                       r.size() - r.size() % kCifarRecordBytes);
    while (!r.done()) {
      const std::size_t at = r.pos();
      const unsigned char* rec = r.take(kCifarRecordBytes, "record");
      if (rec[0] >= 10) throw ParseError(path + ": label " + std::to_string(rec[0]) + " out of range", at);
      ds.labels.push_back(rec[0]);
      for (std::size_t i = 1; i < kCifarRecordBytes; ++i) ds.pixels.push_back(static_cast<float>(rec[i]) / 255.0f);
    }
  }
  return ds;
}

// Encodes the dataset back into CIFAR binary records (pixels rounded to bytes).
inline void save_cifar10_binary(const std::string& path, const Dataset& ds) {
  if (ds.sample_shape != Shape{3, 32, 32}) throw DimensionError("CIFAR records need 3x32x32 samples");
  detail::ByteWriter w;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.le<std::uint8_t>(static_cast<std::uint8_t>(ds.labels[i]));
    for (std::size_t j = 0; j < 3072; ++j)
      w.le<std::uint8_t>(static_cast<std::uint8_t>(std::lround(ds.pixels[i * 3072 + j] * 255.0f)));
  }
  w.save(path);
}

// Writes an IDX image/label file pair (bytes = round(pixel * 255)).
inline void save_mnist_idx(const std::string& images_path, const std::string& labels_path, const Dataset& ds) {
  if (ds.sample_shape != Shape{1, 28, 28}) throw DimensionError("IDX writer needs 1x28x28 samples");
  auto be = [](detail::ByteWriter& w, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) w.le<std::uint8_t>(static_cast<std::uint8_t>(v >> s));
  };
  detail::ByteWriter wi, wl;
  be(wi, kIdxImageMagic);
  be(wi, static_cast<std::uint32_t>(ds.size()));
  be(wi, 28);
  be(wi, 28);
  for (float p : ds.pixels) wi.le<std::uint8_t>(static_cast<std::uint8_t>(std::lround(p * 255.0f)));
  be(wl, kIdxLabelMagic);
  be(wl, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) wl.le<std::uint8_t>(static_cast<std::uint8_t>(l));
  wi.save(images_path);
  wl.save(labels_path);
}

// Canonical MNIST file names inside a data directory.
inline Dataset load_mnist_dir(const std::filesystem::path& dir, Split split) {
  const char* stem = split == Split::train ? "train" : "t10k";
  return load_mnist_idx((dir / (std::string(stem) + "-images-idx3-ubyte")).string(),
                        (dir / (std::string(stem) + "-labels-idx1-ubyte")).string(), split);
}

inline Dataset load_cifar_dir(const std::filesystem::path& dir, Split split) {
  std::vector<std::string> files;
  if (split == Split::train)
    for (int i = 1; i <= 5; ++i) files.push_back((dir / ("data_batch_" + std::to_string(i) + ".bin")).string());
  else
    files.push_back((dir / "test_batch.bin").string());
  return load_cifar10_binary(files, split);
}

// Gaussian blobs, one random centre per class; dim must be 784 (1x28x28) or
// 3072 (3x32x32) or any other size (treated as a flat vector).
inline Dataset synth_blobs(std::size_t n_per_class, int classes, std::size_t dim, double separation,
                           std::uint64_t seed, double spread = 0.1) {
  if (classes < 1 || classes > 10) throw ConfigError("synth_blobs: classes must be in [1,10]");
  Shape shape = dim == 784 ? Shape{1, 28, 28} : dim == 3072 ? Shape{3, 32, 32} : Shape{dim};
  Dataset ds{"blobs", Split::train, shape, {}, {}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<std::vector<double>> centres(static_cast<std::size_t>(classes), std::vector<double>(dim));
  for (auto& c : centres) {
    double norm = 0;
    std::vector<double> dir(dim);
    for (auto& x : dir) {
      x = g(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dim; ++j) c[j] = 0.5 + separation * dir[j] / norm;
  }
  const std::size_t n = n_per_class * static_cast<std::size_t>(classes);
  ds.pixels.resize(n * dim);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    ds.labels[i] = label;
    for (std::size_t j = 0; j < dim; ++j)
      ds.pixels[i * dim + j] =
          static_cast<float>(std::clamp(centres[static_cast<std::size_t>(label)][j] + spread * g(rng), 0.0, 1.0));
  }
  return ds;
}

// Per-epoch shuffled index batches. Epoch e of seed s always yields the same order.
class BatchIterator {
 public:
  BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t seed, bool drop_small = false,
                bool shuffle = true)
      : n_(n), batch_(batch_size), seed_(seed), drop_small_(drop_small), shuffle_(shuffle) {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (batch_size > n)
      throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds dataset size " + std::to_string(n));
    start_epoch(0);
  }

  void start_epoch(std::size_t epoch) {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), 0);
    if (shuffle_) {
      std::mt19937_64 rng(seed_ ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
      std::shuffle(order_.begin(), order_.end(), rng);
    }
    cursor_ = 0;
  }

  bool next(std::vector<std::size_t>& out) {
    if (cursor_ >= n_) return false;
    const std::size_t take = std::min(batch_, n_ - cursor_);
    if (take < batch_ && drop_small_) {
      cursor_ = n_;
      return false;
    }
    out.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
               order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    cursor_ += take;
    return true;
  }

  std::size_t batches_per_epoch() const { return drop_small_ ? n_ / batch_ : (n_ + batch_ - 1) / batch_; }

 private:
  std::size_t n_, batch_;
  std::uint64_t seed_;
  bool drop_small_, shuffle_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

inline BatchIterator batches(const Dataset& ds, std::size_t size, std::uint64_t seed, bool drop_small = false) {
  return BatchIterator(ds.size(), size, seed, drop_small);
}

}  // namespace decorr
