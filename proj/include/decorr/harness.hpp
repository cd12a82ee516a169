#pragma once

// Transferability and accuracy metrics, CSV report rows and PNM image grids.

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "decorr/attacks.hpp"
#include "decorr/detail/binary_io.hpp"
#include "decorr/metrics.hpp"

namespace decorr {

inline constexpr const char* kUndefinedToken = "undefined";

struct TransferRecord {
  std::string attack_id, source_id, target_id;
  std::size_t n_total = 0;
  std::size_t n_fooled_source = 0;
  std::size_t n_fooled_both = 0;
  std::optional<double> transfer_rate;  // empty when no sample fooled the source

  std::string rate_string() const {
    if (!transfer_rate) return kUndefinedToken;
    std::ostringstream os;
    os << std::setprecision(10) << *transfer_rate;
    return os.str();
  }
};

// Among samples the source misclassifies, the fraction the target also misclassifies.
inline TransferRecord transfer_rate(const std::vector<int>& source_pred, const std::vector<int>& target_pred,
                                    const std::vector<int>& labels, std::string attack_id = "",
                                    std::string source_id = "", std::string target_id = "") {
  if (source_pred.size() != labels.size() || target_pred.size() != labels.size())
    throw DimensionError("transfer_rate: prediction and label counts differ");
  TransferRecord r{std::move(attack_id), std::move(source_id), std::move(target_id), labels.size(), 0, 0, {}};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (source_pred[i] == labels[i]) continue;
    ++r.n_fooled_source;
    r.n_fooled_both += target_pred[i] != labels[i];
  }
  if (r.n_fooled_source > 0)
    r.transfer_rate = static_cast<double>(r.n_fooled_both) / static_cast<double>(r.n_fooled_source);
  return r;
}

template <class T>
TransferRecord transfer_rate(Network<T>& source, Network<T>& target, const AdvBatch<T>& adv,
                             std::string attack_id = "", std::string source_id = "source",
                             std::string target_id = "target") {
  return transfer_rate(predict(source, adv.perturbed), predict(target, adv.perturbed), adv.labels,
                       std::move(attack_id), std::move(source_id), std::move(target_id));
}

// Runs fn(0..n-1) on up to `threads` workers; fn must only touch its own state.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
        next = n;
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Mean of two optional rates; empty only when both are.
inline std::optional<double> mean_defined(const std::optional<double>& a, const std::optional<double>& b) {
  if (a && b) return (*a + *b) / 2;
  return a ? a : b;
}

struct PairTransfer {
  TransferRecord a_to_b, b_to_a;
  std::optional<double> mean() const { return mean_defined(a_to_b.transfer_rate, b_to_a.transfer_rate); }
};

// Attacks each model of a pair on (x, y) and measures transfer to the other.
template <class T>
PairTransfer pair_transfer(Network<T>& a, Network<T>& b, const Tensor<T>& x, const std::vector<int>& y,
                              const AttackConfig& cfg, const std::string& attack_id = "") {
  auto adv_a = attack_chunked(classifier_objective(a), x, y, cfg);
  auto adv_b = attack_chunked(classifier_objective(b), x, y, cfg);
  return {transfer_rate(a, b, adv_a, attack_id, "a", "b"), transfer_rate(b, a, adv_b, attack_id, "b", "a")};
}

struct EitherPath {
  double either = 0;  // at least one pathway classified correctly
  double avg = 0;     // mean of the two per-pathway accuracies
};

inline EitherPath either_path_accuracy(const std::vector<int>& pred_a, const std::vector<int>& pred_b,
                                       const std::vector<int>& labels) {
  if (pred_a.size() != labels.size() || pred_b.size() != labels.size())
    throw DimensionError("either_path_accuracy: prediction and label counts differ");
  if (labels.empty()) return {};
  std::size_t either = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    a += pred_a[i] == labels[i];
    b += pred_b[i] == labels[i];
    either += pred_a[i] == labels[i] || pred_b[i] == labels[i];
  }
  const double n = static_cast<double>(labels.size());
  return {static_cast<double>(either) / n, (static_cast<double>(a) + static_cast<double>(b)) / (2 * n)};
}

// Classifier predictions on both DNA reconstructions of x.
template <class T>
std::pair<std::vector<int>, std::vector<int>> dna_predictions(DnaModel<T>& dna, Network<T>& clf, const Tensor<T>& x,
                                                              std::size_t chunk = 1000) {
  auto pa = predict_chunked<T>([&](const Tensor<T>& b) { return clf(dna.pathway(b, 0), BnMode::eval); }, x, chunk);
  auto pb = predict_chunked<T>([&](const Tensor<T>& b) { return clf(dna.pathway(b, 1), BnMode::eval); }, x, chunk);
  return {std::move(pa), std::move(pb)};
}

template <class T>
EitherPath either_path_accuracy(DnaModel<T>& dna, Network<T>& clf, const Tensor<T>& x, const std::vector<int>& y) {
  auto [pa, pb] = dna_predictions(dna, clf, x);
  return either_path_accuracy(pa, pb, y);
}

// Accuracy of a classifier on reconstructions of a single-pathway autoencoder.
template <class T>
double autoencoder_accuracy(Network<T>& ae, Network<T>& clf, const Tensor<T>& x, const std::vector<int>& y,
                            const Shape& image_shape) {
  auto p = predict_chunked<T>(
      [&](const Tensor<T>& b) { return clf(conform_input(ae(b, BnMode::eval), image_shape), BnMode::eval); }, x);
  return accuracy(p, y);
}

// ------------------------------------------------------------------ reports

struct ReportRow {
  std::string experiment;
  std::uint64_t seed = 0;
  double epsilon = 0;
  std::string norm, method, metric;
  std::optional<double> value;  // empty prints the undefined token
};

inline constexpr const char* kReportHeader = "experiment,seed,epsilon,norm,method,metric,value";

inline std::string format_number(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(12) << v;
  return os.str();
}

inline std::string report_line(const ReportRow& r) {
  return r.experiment + ',' + std::to_string(r.seed) + ',' + format_number(r.epsilon) + ',' + r.norm + ',' + r.method +
         ',' + r.metric + ',' + (r.value ? format_number(*r.value) : std::string(kUndefinedToken));
}

// Writes the rows under the fixed header, replacing any existing file.
inline void export_report(const std::string& path, const std::vector<ReportRow>& rows) {
  for (const auto& r : rows) {
    if (r.value && !std::isfinite(*r.value)) throw DomainError("report metric '" + r.metric + "' is not finite");
    for (const auto* f : {&r.experiment, &r.norm, &r.method, &r.metric})
      if (f->find_first_of(",\n\"") != std::string::npos)
        throw DomainError("report field '" + *f + "' contains a separator");
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write report '" + path + "'");
  os << kReportHeader << '\n';
  for (const auto& r : rows) os << report_line(r) << '\n';
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline std::vector<ReportRow> read_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open report '" + path + "'");
  std::string line;
  std::getline(is, line);
  if (line != kReportHeader) throw ParseError("unexpected report header in " + path, 0);
  std::vector<ReportRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw ParseError("report row with " + std::to_string(f.size()) + " fields", 0);
    std::optional<double> v;
    if (f[6] != kUndefinedToken) v = std::stod(f[6]);
    rows.push_back({f[0], std::stoull(f[1]), std::stod(f[2]), f[3], f[4], f[5], v});
  }
  return rows;
}

// -------------------------------------------------------------- PNM images

struct PnmImage {
  std::size_t width = 0, height = 0, channels = 1;  // 1: PGM, 3: PPM
  std::vector<std::uint8_t> pixels;               // row-major, interleaved channels
};

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

inline void write_pnm(const std::string& path, const PnmImage& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write image '" + path + "'");
  os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline PnmImage read_pnm(const std::string& path) {
  auto r = detail::ByteReader::from_file(path);
  const auto magic = r.str(2, "magic");
  PnmImage img;
  if (magic == "P5") img.channels = 1;
  else if (magic == "P6") img.channels = 3;
  else throw ParseError("not a binary PGM/PPM file: " + path, 0);
  auto token = [&](const char* what) {
    std::string t;
    while (true) {
      const char c = static_cast<char>(*r.take(1, what));
      if (c == '#') {
        while (*r.take(1, "comment") != '\n') {
        }
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) return t;
        continue;
      }
      t.push_back(c);
    }
  };
  const std::size_t at = r.pos();
  try {
    img.width = std::stoul(token("width"));
    img.height = std::stoul(token("height"));
    if (std::stoul(token("maxval")) != 255) throw ParseError("only 8-bit PNM supported", at);
  } catch (const std::invalid_argument&) {
    throw ParseError("malformed PNM header", at);
  }
  const std::size_t n = img.width * img.height * img.channels;
  const auto* p = r.take(n, "pixels");
  img.pixels.assign(p, p + n);
  return img;
}

// Lays out rows of C x H x W images (values in [0,1]) as one grid with a
// 1-pixel white gutter. Returns false and warns when there is nothing to draw.
template <class T>
bool export_image_grid(const std::vector<std::vector<Tensor<T>>>& rows, const std::string& path) {
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  if (rows.empty() || cols == 0) {
    std::cerr << "warning: empty image selection, nothing written to " << path << '\n';
    return false;
  }
  const Shape s = rows.front().front().shape();
  if (s.size() != 3 || (s[0] != 1 && s[0] != 3)) throw DimensionError("image grid needs 1xHxW or 3xHxW images");
  const std::size_t c = s[0], h = s[1], w = s[2], gap = 1;
  PnmImage img;
  img.channels = c;
  img.width = cols * w + (cols - 1) * gap;
  img.height = rows.size() * h + (rows.size() - 1) * gap;
  img.pixels.assign(img.width * img.height * c, 255);
  for (std::size_t ri = 0; ri < rows.size(); ++ri)
    for (std::size_t ci = 0; ci < rows[ri].size(); ++ci) {
      const auto& t = rows[ri][ci];
      if (t.shape() != s) throw DimensionError("image grid cells must share a shape");
      for (float v : t.data())
        if (!(v >= 0.0f && v <= 1.0f)) throw DomainError("image grid pixel outside [0,1]");
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t k = 0; k < c; ++k) {
            const std::size_t py = ri * (h + gap) + y, px = ci * (w + gap) + x;
            img.pixels[(py * img.width + px) * c + k] = to_byte(static_cast<double>(t[(k * h + y) * w + x]));
          }
    }
  write_pnm(path, img);
  return true;
}

// One sample of a batch as a C x H x W tensor.
template <class T>
Tensor<T> sample_of(const Tensor<T>& batch, std::size_t i, const Shape& image_shape) {
  const std::size_t d = numel_of(image_shape);
  return Tensor<T>(image_shape, std::vector<T>(batch.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                                               batch.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d)));
}

}  // namespace decorr
