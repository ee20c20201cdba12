#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "tdrobust/data/blobs.hpp"
#include "tdrobust/data/mnist_lite.hpp"

namespace tdr {

enum class DataSource { blobs2d, mnist_lite };

struct DatasetConfig {
  DataSource source = DataSource::blobs2d;
  std::filesystem::path data_root = "data";  // mnist-lite only
  SplitSizes sizes{500, 100, 500};
  BlobsConfig blobs = BlobsConfig::blobs2d();
  std::uint64_t seed = 0;

  static DatasetConfig mnist_lite(std::filesystem::path root, SplitSizes sizes = {}) {
    DatasetConfig c;
    c.source = DataSource::mnist_lite;
    c.data_root = std::move(root);
    c.sizes = sizes;
    return c;
  }

  void validate() const {
    if (sizes.train == 0 || sizes.val == 0 || sizes.test == 0) throw std::invalid_argument("dataset sizes must be positive");
  }
};

inline std::string source_name(DataSource s) { return s == DataSource::blobs2d ? "blobs2d" : "mnist-lite"; }

inline DataSource parse_source(const std::string& s) {
  if (s == "blobs2d" || s == "blobs") return DataSource::blobs2d;
  if (s == "mnist-lite" || s == "mnist") return DataSource::mnist_lite;
  throw std::invalid_argument("unknown data source '" + s + "'");
}

inline Splits make_splits(const DatasetConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  if (cfg.source == DataSource::mnist_lite) return load_mnist_lite(cfg.data_root, cfg.sizes, rng.derive("split"));
  BlobsConfig b = cfg.blobs;
  b.train = cfg.sizes.train;
  b.val = cfg.sizes.val;
  b.test = cfg.sizes.test;
  return gen_blobs(b, rng.derive("blobs"));
}

/// One row per sample: label, then features, at round-trip precision.
inline void write_csv(const std::string& path, const LabeledSet& V) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os.precision(17);
  os << "label";
  for (std::size_t k = 0; k < V.dim(); ++k) os << ",x" << k;
  os << '\n';
  for (std::size_t i = 0; i < V.size(); ++i) {
    os << V.labels[i];
    for (std::size_t k = 0; k < V.dim(); ++k) os << ',' << V.features.at(i, k);
    os << '\n';
  }
}

inline LabeledSet read_csv(const std::string& path, std::size_t classes) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  std::getline(is, line);
  const std::size_t d = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  std::vector<double> vals;
  std::vector<int> labels;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    labels.push_back(std::stoi(cell));
    std::size_t k = 0;
    for (; std::getline(ss, cell, ','); ++k) vals.push_back(std::stod(cell));
    if (k != d) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(d) + " features");
  }
  LabeledSet out{Tensor({labels.size(), d}, std::move(vals)), std::move(labels), classes, "csv:" + path};
  out.validate();
  return out;
}

}  // namespace tdr
