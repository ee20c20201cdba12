#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>

#include "tdrobust/data/corrupt.hpp"
#include "tdrobust/data/dataset_config.hpp"
#include "tdrobust/train/trainers.hpp"

using namespace tdr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "tdr_data_test";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void expect_in_box(const LabeledSet& V) {
  for (double v : V.features.values()) ASSERT_TRUE(v >= 0.0 && v <= 1.0) << v;
}

std::string idx_error(const fs::path& im, const fs::path& lb) {
  try {
    load_idx(im.string(), lb.string());
  } catch (const IdxError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Blobs, ZeroCovariancePutsPointsAtMeans) {
  BlobsConfig cfg{{{0.2, 0.4}, {0.9, 0.1}}, {{0, 0, 0, 0}, {0, 0, 0, 0}}, 50, 10, 10};
  const Splits s = gen_blobs(cfg, Rng(1));
  for (const LabeledSet* V : {&s.train, &s.val, &s.test})
    for (std::size_t i = 0; i < V->size(); ++i) {
      EXPECT_EQ(V->features.at(i, 0), cfg.means[V->labels[i]][0]);
      EXPECT_EQ(V->features.at(i, 1), cfg.means[V->labels[i]][1]);
    }
}

TEST(Blobs, SameSeedIdenticalSets) {
  const auto a = gen_blobs(BlobsConfig::blobs2d(), Rng(7));
  const auto b = gen_blobs(BlobsConfig::blobs2d(), Rng(7));
  EXPECT_EQ(a.train.digest(), b.train.digest());
  EXPECT_EQ(a.test.digest(), b.test.digest());
  EXPECT_NE(a.train.digest(), gen_blobs(BlobsConfig::blobs2d(), Rng(8)).train.digest());
}

TEST(Blobs, LabelHistogramWithinThreeSigmaOfUniform) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    BlobsConfig cfg{{{0.1, 0.1}, {0.5, 0.5}, {0.9, 0.9}},
                    {{0.01, 0, 0, 0.01}, {0.01, 0, 0, 0.01}, {0.01, 0, 0, 0.01}}, 3000, 300, 300};
    const Splits s = gen_blobs(cfg, Rng(seed));
    const LabeledSet all = concat(concat(s.train, s.val), s.test);
    const double n = static_cast<double>(all.size()), p = 1.0 / 3.0;
    const double sigma = std::sqrt(n * p * (1 - p));
    std::vector<double> h(3, 0.0);
    for (int y : all.labels) h[static_cast<std::size_t>(y)] += 1.0;
    for (double c : h) EXPECT_LE(std::abs(c - n * p), 3.0 * sigma) << "seed " << seed;
  }
}

TEST(Blobs, FeaturesInsideBoxForWideNoise) {
  const auto s = gen_blobs(BlobsConfig::blobs2d(0.5), Rng(2));
  expect_in_box(s.train);
  expect_in_box(s.val);
  expect_in_box(s.test);
}

TEST(Blobs, SplitsPartitionTheDrawnPool) {
  // The pool is drawn in one pass, so moving the cut points must not change
  // the concatenated sequence.
  auto cfg = BlobsConfig::blobs2d(0.1, 500, 100, 500);
  const auto a = gen_blobs(cfg, Rng(4));
  cfg.train = 1098;
  cfg.val = 1;
  cfg.test = 1;
  const auto b = gen_blobs(cfg, Rng(4));
  EXPECT_EQ(a.train.size() + a.val.size() + a.test.size(), 1100u);
  const auto ja = concat(concat(a.train, a.val), a.test);
  const auto jb = concat(concat(b.train, b.val), b.test);
  EXPECT_EQ(ja.features, jb.features);
  EXPECT_EQ(ja.labels, jb.labels);
}

TEST(Blobs, RejectsBadConfigs) {
  BlobsConfig cfg = BlobsConfig::blobs2d();
  cfg.covariances[0] = {0.01, 0.02, 0.02, 0.01};  // indefinite
  EXPECT_THROW(gen_blobs(cfg, Rng(1)), std::invalid_argument);
  cfg = BlobsConfig::blobs2d();
  cfg.means[1] = {1.2, 0.5};
  EXPECT_THROW(gen_blobs(cfg, Rng(1)), std::invalid_argument);
  cfg = BlobsConfig::blobs2d();
  cfg.val = 0;
  EXPECT_THROW(gen_blobs(cfg, Rng(1)), std::invalid_argument);
}

TEST(Blobs, CsvRoundTripIsExact) {
  const auto s = gen_blobs(BlobsConfig::blobs2d(), Rng(5));
  const auto p = scratch("blobs.csv");
  write_csv(p.string(), s.test);
  const LabeledSet back = read_csv(p.string(), 2);
  EXPECT_EQ(back.features, s.test.features);
  EXPECT_EQ(back.labels, s.test.labels);
}

TEST(DatasetConfig, SeedDrivesBlobs) {
  DatasetConfig c;
  c.seed = 3;
  EXPECT_EQ(make_splits(c).train.digest(), make_splits(c).train.digest());
  DatasetConfig d = c;
  d.seed = 4;
  EXPECT_NE(make_splits(c).train.digest(), make_splits(d).train.digest());
  EXPECT_EQ(parse_source(source_name(DataSource::mnist_lite)), DataSource::mnist_lite);
  EXPECT_THROW(parse_source("cifar"), std::invalid_argument);
}

TEST(Idx, RoundTripIsBitExact) {
  std::vector<unsigned char> px(3 * 4 * 5), lb{0, 7, 9};
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<unsigned char>((i * 37) % 256);
  const auto im = scratch("rt-images"), lbp = scratch("rt-labels");
  write_idx(im.string(), lbp.string(), 4, 5, px, lb);
  const LabeledSet V = load_idx(im.string(), lbp.string());
  ASSERT_EQ(V.size(), 3u);
  ASSERT_EQ(V.dim(), 20u);
  for (std::size_t i = 0; i < px.size(); ++i) EXPECT_EQ(V.features[i], px[i] / 255.0);
  EXPECT_EQ(V.labels, (std::vector<int>{0, 7, 9}));
  // Bytes written back from the loaded values reproduce the files.
  std::vector<unsigned char> px2(px.size()), lb2;
  for (std::size_t i = 0; i < px.size(); ++i) px2[i] = static_cast<unsigned char>(std::lround(V.features[i] * 255.0));
  for (int y : V.labels) lb2.push_back(static_cast<unsigned char>(y));
  const auto im2 = scratch("rt-images2"), lb2p = scratch("rt-labels2");
  write_idx(im2.string(), lb2p.string(), 4, 5, px2, lb2);
  EXPECT_EQ(read_bytes(im), read_bytes(im2));
  EXPECT_EQ(read_bytes(lbp), read_bytes(lb2p));
}

TEST(Idx, AllZeroFileGivesZeroFeatures) {
  const auto im = scratch("z-images"), lb = scratch("z-labels");
  write_idx(im.string(), lb.string(), 28, 28, std::vector<unsigned char>(2 * 784, 0), {1, 2});
  const LabeledSet V = load_idx(im.string(), lb.string());
  EXPECT_EQ(V.size(), 2u);
  for (double v : V.features.values()) EXPECT_EQ(v, 0.0);
}

TEST(Idx, Pixel255IsExactlyOne) {
  const auto im = scratch("f-images"), lb = scratch("f-labels");
  write_idx(im.string(), lb.string(), 1, 2, {255, 0}, {3});
  const LabeledSet V = load_idx(im.string(), lb.string());
  EXPECT_EQ(V.features.at(0, 0), 1.0);
  EXPECT_EQ(V.features.at(0, 1), 0.0);
}

TEST(Idx, BadMagicReportsOffset) {
  const auto im = scratch("m-images"), lb = scratch("m-labels");
  write_idx(im.string(), lb.string(), 2, 2, {1, 2, 3, 4}, {0});
  auto bytes = read_bytes(im);
  bytes[3] = 0x01;
  write_bytes(im, bytes);
  const std::string msg = idx_error(im, lb);
  EXPECT_NE(msg.find("bad magic"), std::string::npos) << msg;
  EXPECT_NE(msg.find("byte offset 0"), std::string::npos) << msg;
}

TEST(Idx, TruncatedFilesReportOffsets) {
  const auto im = scratch("t-images"), lb = scratch("t-labels");
  write_idx(im.string(), lb.string(), 2, 2, {1, 2, 3, 4, 5, 6, 7, 8}, {0, 1});
  auto bytes = read_bytes(im);
  bytes.resize(bytes.size() - 3);
  write_bytes(im, bytes);
  std::string msg = idx_error(im, lb);
  EXPECT_NE(msg.find("truncated pixel data at byte offset 21"), std::string::npos) << msg;
  bytes.resize(10);
  write_bytes(im, bytes);
  msg = idx_error(im, lb);
  EXPECT_NE(msg.find("truncated header at byte offset 8"), std::string::npos) << msg;
}

TEST(Idx, CountMismatchRejected) {
  const auto im = scratch("c-images"), lb = scratch("c-labels"), im3 = scratch("c-images3"), lb3 = scratch("c-labels3");
  write_idx(im.string(), lb.string(), 1, 1, {1, 2}, {0, 1});
  write_idx(im3.string(), lb3.string(), 1, 1, {1, 2, 3}, {0, 1, 2});
  const std::string msg = idx_error(im3, lb);
  EXPECT_NE(msg.find("count mismatch"), std::string::npos) << msg;
  EXPECT_NE(msg.find("byte offset 4"), std::string::npos) << msg;
}

TEST(Idx, MissingFileRejected) { EXPECT_THROW(load_idx("/nonexistent/a", "/nonexistent/b"), IdxError); }

TEST(Idx, OfficialTestFileShape) {
  const char* images = std::getenv("TDR_MNIST_T10K");
  const char* labels = std::getenv("TDR_MNIST_T10K_LABELS");
  if (!images || !labels) GTEST_SKIP() << "set TDR_MNIST_T10K and TDR_MNIST_T10K_LABELS to the official t10k files";
  const LabeledSet V = load_idx(images, labels);
  EXPECT_EQ(V.size(), 10000u);
  EXPECT_EQ(V.dim(), 784u);
}

TEST(MnistLite, PoolAndStratifiedSplits) {
  const LabeledSet pool = load_mnist_lite_pool(TDR_DATA_DIR);
  EXPECT_EQ(pool.size(), 5000u);
  EXPECT_EQ(pool.dim(), 784u);
  const Splits s = stratified_split(pool, {2000, 500, 500}, Rng(1));
  for (const LabeledSet* V : {&s.train, &s.val, &s.test}) {
    std::vector<std::size_t> h(10, 0);
    for (int y : V->labels) ++h[static_cast<std::size_t>(y)];
    for (std::size_t c : h) EXPECT_EQ(c, V->size() / 10);
    expect_in_box(*V);
  }
  // Disjoint: the splits together draw each pool row at most as often as it occurs.
  std::map<std::uint64_t, int> budget;
  for (std::size_t i = 0; i < pool.size(); ++i) ++budget[pool.features.slice_rows(i, i + 1).digest() ^ static_cast<std::uint64_t>(pool.labels[i])];
  for (const LabeledSet* V : {&s.train, &s.val, &s.test})
    for (std::size_t i = 0; i < V->size(); ++i)
      ASSERT_GE(--budget[V->features.slice_rows(i, i + 1).digest() ^ static_cast<std::uint64_t>(V->labels[i])], 0);
  EXPECT_THROW(stratified_split(pool, {5000, 10, 10}, Rng(1)), std::invalid_argument);
}

TEST(Brightness, SeverityZeroIsIdentity) {
  const auto s = gen_blobs(BlobsConfig::blobs2d(), Rng(1));
  const LabeledSet c = corrupt_brightness(s.test, 0.0);
  EXPECT_EQ(c.features, s.test.features);
  EXPECT_EQ(c.labels, s.test.labels);
}

TEST(Brightness, ClipsAtOne) {
  LabeledSet V{Tensor({1, 2}, std::vector<double>{0.95, 0.2}), {1}, 2, "t"};
  const LabeledSet c = corrupt_brightness(V, 0.1);
  EXPECT_EQ(c.features.at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(c.features.at(0, 1), 0.2 + 0.1);
  EXPECT_EQ(c.labels, V.labels);
  EXPECT_EQ(corrupt_brightness(V, 0.1).features, c.features);
  EXPECT_THROW(corrupt_brightness(V, -0.1), std::invalid_argument);
}

TEST(Brightness, MildCorruptionCostsLittleAccuracy) {
  // Pilot: a standard MNIST-lite model loses well under 5 points at severity 0.1.
  const Splits s = load_mnist_lite(TDR_DATA_DIR, {2000, 500, 500}, Rng(1));
  TrainConfig cfg;
  cfg.arch = Architecture::mlp(784, {128, 64}, 10);
  cfg.epochs = 20;
  const auto m = train_standard(s.train, cfg, Rng(2)).model;
  const double clean = accuracy(m, s.test), dark = accuracy(m, corrupt_brightness(s.test, 0.1));
  RecordProperty("clean", std::to_string(clean));
  RecordProperty("corrupted", std::to_string(dark));
  EXPECT_LT(100.0 * (clean - dark), 5.0) << clean << " -> " << dark;
}
