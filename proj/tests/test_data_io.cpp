#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "decorr/data_io.hpp"

using namespace decorr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / "decorr_data_io_test";
  fs::create_directories(d);
  return d / name;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<unsigned char> be32(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

// Hand-assembled IDX pair with n images whose pixels are (i + j) % 256.
void make_idx(const fs::path& img, const fs::path& lab, std::uint32_t n) {
  std::vector<unsigned char> b;
  for (auto v : {2051u, n, 28u, 28u}) {
    auto x = be32(v);
    b.insert(b.end(), x.begin(), x.end());
  }
  for (std::uint32_t i = 0; i < n; ++i)
    for (int j = 0; j < 784; ++j) b.push_back(static_cast<unsigned char>((i + static_cast<std::uint32_t>(j)) % 256));
  write_bytes(img, b);
  std::vector<unsigned char> l;
  for (auto v : {2049u, n}) {
    auto x = be32(v);
    l.insert(l.end(), x.begin(), x.end());
  }
  for (std::uint32_t i = 0; i < n; ++i) l.push_back(static_cast<unsigned char>(i % 10));
  write_bytes(lab, l);
}

}  // namespace

TEST(Idx, ParsesHandWrittenFiles) {
  const auto img = scratch("a-images"), lab = scratch("a-labels");
  make_idx(img, lab, 3);
  auto ds = load_mnist_idx(img.string(), lab.string());
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.sample_shape, (Shape{1, 28, 28}));
  EXPECT_EQ(ds.pixels[0], 0.0f);
  EXPECT_EQ(ds.pixels[255], 1.0f);
  EXPECT_FLOAT_EQ(ds.pixels[784 + 1], 2.0f / 255.0f);
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 1, 2}));
  ds.validate();
}

TEST(Idx, RejectsWrongMagic) {
  const auto img = scratch("b-images"), lab = scratch("b-labels");
  make_idx(img, lab, 2);
  auto bytes = read_bytes(img);
  bytes[3] = 0x01;  // 0x00000801
  write_bytes(img, bytes);
  try {
    load_mnist_idx(img.string(), lab.string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  // the label magic in the image slot is also rejected
  make_idx(img, lab, 2);
  EXPECT_THROW(load_mnist_idx(lab.string(), lab.string()), ParseError);
}

TEST(Idx, RejectsTruncationAndMismatch) {
  const auto img = scratch("c-images"), lab = scratch("c-labels");
  make_idx(img, lab, 4);
  auto bytes = read_bytes(img);
  bytes.resize(16 + 784 * 2 + 10);
  write_bytes(img, bytes);
  try {
    load_mnist_idx(img.string(), lab.string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 16u);
    EXPECT_NE(std::string(e.what()).find("offset 16"), std::string::npos);
  }
  make_idx(img, lab, 4);
  auto l = read_bytes(lab);
  l[7] = 5;
  write_bytes(lab, l);
  EXPECT_THROW(load_mnist_idx(img.string(), lab.string()), ParseError);
  make_idx(img, lab, 4);
  auto b = read_bytes(img);
  b[11] = 27;  // rows = 27
  write_bytes(img, b);
  EXPECT_THROW(load_mnist_idx(img.string(), lab.string()), ParseError);
}

TEST(Idx, WriterRoundTrip) {
  auto ds = synth_blobs(3, 10, 784, 2.0, 5);
  for (auto& p : ds.pixels) p = std::round(p * 255.0f) / 255.0f;
  const auto img = scratch("d-images"), lab = scratch("d-labels");
  save_mnist_idx(img.string(), lab.string(), ds);
  auto back = load_mnist_idx(img.string(), lab.string());
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.pixels, ds.pixels);
}

TEST(Idx, CanonicalFilesWhenAvailable) {
  const char* dir = std::getenv("DECORR_DATA_DIR");
  if (!dir || !fs::exists(fs::path(dir) / "mnist" / "t10k-images-idx3-ubyte")) GTEST_SKIP() << "MNIST not present";
  auto train = load_mnist_dir(fs::path(dir) / "mnist", Split::train);
  auto test = load_mnist_dir(fs::path(dir) / "mnist", Split::test);
  EXPECT_EQ(train.size(), 60000u);
  EXPECT_EQ(test.size(), 10000u);
  test.validate();
}

TEST(Cifar, RecordRoundTrip) {
  std::vector<unsigned char> rec(3073);
  rec[0] = 7;
  for (std::size_t i = 1; i < rec.size(); ++i) rec[i] = static_cast<unsigned char>((i * 37) % 256);
  std::vector<unsigned char> two = rec;
  two.insert(two.end(), rec.begin(), rec.end());
  two[3073] = 2;
  const auto p = scratch("cifar.bin");
  write_bytes(p, two);
  auto ds = load_cifar10_binary({p.string()});
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.sample_shape, (Shape{3, 32, 32}));
  EXPECT_EQ(ds.labels, (std::vector<int>{7, 2}));
  const auto p2 = scratch("cifar2.bin");
  save_cifar10_binary(p2.string(), ds);
  EXPECT_EQ(read_bytes(p2), two);
}

TEST(Cifar, RejectsBadLengthAndLabel) {
  const auto p = scratch("cifar_bad.bin");
  write_bytes(p, std::vector<unsigned char>(3073 + 5, 1));
  try {
    load_cifar10_binary({p.string()});
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 3073u);
  }
  std::vector<unsigned char> b(3073 * 2, 0);
  b[3073] = 10;
  write_bytes(p, b);
  try {
    load_cifar10_binary({p.string()});
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 3073u);
  }
}

TEST(Blobs, DeterministicAndInRange) {
  auto a = synth_blobs(20, 10, 784, 3.0, 11);
  auto b = synth_blobs(20, 10, 784, 3.0, 11);
  auto c = synth_blobs(20, 10, 784, 3.0, 12);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_NE(a.pixels, c.pixels);
  EXPECT_EQ(a.size(), 200u);
  a.validate();
}

TEST(Blobs, ZeroSeparationSharesOneDistribution) {
  auto ds = synth_blobs(200, 2, 16, 0.0, 3);
  std::vector<double> m0(16), m1(16);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < 16; ++j) (ds.labels[i] ? m1 : m0)[j] += ds.pixels[i * 16 + j] / 200.0;
  for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(m0[j], m1[j], 0.05);
}

TEST(Batches, Counts) {
  auto it = BatchIterator(1000, 500, 1);
  std::vector<std::size_t> b;
  int count = 0;
  while (it.next(b)) ++count;
  EXPECT_EQ(count, 2);

  auto small = BatchIterator(1001, 500, 1, /*drop_small=*/true);
  count = 0;
  std::size_t seen = 0;
  while (small.next(b)) {
    ++count;
    seen += b.size();
  }
  EXPECT_EQ(count, 2);
  EXPECT_EQ(seen, 1000u);

  auto keep = BatchIterator(1001, 500, 1, false);
  count = 0;
  while (keep.next(b)) ++count;
  EXPECT_EQ(count, 3);
  EXPECT_THROW(BatchIterator(10, 11, 1), ConfigError);
  EXPECT_THROW(BatchIterator(10, 0, 1), ConfigError);
}

TEST(Batches, PartitionAndDeterminism) {
  auto run = [](std::uint64_t seed, std::size_t epoch) {
    BatchIterator it(97, 10, seed);
    it.start_epoch(epoch);
    std::vector<std::size_t> all, b;
    while (it.next(b)) all.insert(all.end(), b.begin(), b.end());
    return all;
  };
  auto a = run(4, 0);
  std::set<std::size_t> uniq(a.begin(), a.end());
  EXPECT_EQ(uniq.size(), 97u);
  EXPECT_EQ(*uniq.rbegin(), 96u);
  EXPECT_EQ(a, run(4, 0));
  EXPECT_NE(a, run(5, 0));
  EXPECT_NE(a, run(4, 1));
}

TEST(Dataset, BatchTensorGather) {
  auto ds = synth_blobs(2, 3, 784, 1.0, 2);
  std::vector<std::size_t> idx{4, 1};
  auto x = ds.images<double>(idx);
  EXPECT_EQ(x.shape(), (Shape{2, 1, 28, 28}));
  EXPECT_EQ(x[0], static_cast<double>(ds.pixels[4 * 784]));
  EXPECT_EQ(ds.labels_at(idx), (std::vector<int>{1, 1}));
  EXPECT_THROW(ds.images(std::vector<std::size_t>{6}), IndexError);
}
