#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "tdrobust/data/dataset.hpp"
#include "tdrobust/rng.hpp"

namespace tdr {

struct BlobsConfig {
  std::vector<std::vector<double>> means;        // one per class, inside [0,1]^d
  std::vector<std::vector<double>> covariances;  // one row-major d*d matrix per class
  std::size_t train = 500;
  std::size_t val = 100;
  std::size_t test = 500;

  std::size_t classes() const { return means.size(); }
  std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }

  /// Two isotropic Gaussians in the unit square.
  static BlobsConfig blobs2d(double sd = 0.1, std::size_t train = 500, std::size_t val = 100, std::size_t test = 500) {
    const double v = sd * sd;
    return {{{0.3, 0.3}, {0.7, 0.7}}, {{v, 0, 0, v}, {v, 0, 0, v}}, train, val, test};
  }
};

/// Class-conditional Gaussian draws with uniform class priors, clipped to the
/// box. One pool of train+val+test points is drawn and cut in that order.
inline Splits gen_blobs(const BlobsConfig& cfg, Rng rng) {
  const std::size_t C = cfg.classes(), d = cfg.dim();
  if (C < 2) throw std::invalid_argument("blobs need at least two classes");
  if (cfg.train == 0 || cfg.val == 0 || cfg.test == 0) throw std::invalid_argument("blob split sizes must be positive");
  if (cfg.covariances.size() != C) throw std::invalid_argument("one covariance per class required");
  std::vector<Eigen::MatrixXd> chol;
  for (std::size_t c = 0; c < C; ++c) {
    if (cfg.means[c].size() != d || cfg.covariances[c].size() != d * d) throw std::invalid_argument("blob dimension mismatch");
    for (double m : cfg.means[c])
      if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("blob mean outside the box");
    Eigen::MatrixXd S = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        cfg.covariances[c].data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    if (S.isZero(0.0)) {
      chol.push_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)));
      continue;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success || !S.isApprox(S.transpose()))
      throw std::invalid_argument("blob covariance for class " + std::to_string(c) + " is not positive-definite");
    chol.push_back(llt.matrixL());
  }
  const std::size_t n = cfg.train + cfg.val + cfg.test;
  LabeledSet pool{Tensor({n, d}), std::vector<int>(n), C, "blobs"};
  Eigen::VectorXd z(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = rng.index(C);
    pool.labels[i] = static_cast<int>(c);
    for (std::size_t k = 0; k < d; ++k) z[static_cast<Eigen::Index>(k)] = rng.normal();
    const Eigen::VectorXd x = chol[c] * z;
    for (std::size_t k = 0; k < d; ++k)
      pool.features.at(i, k) = std::clamp(cfg.means[c][k] + x[static_cast<Eigen::Index>(k)], 0.0, 1.0);
  }
  Splits s{pool.slice(0, cfg.train), pool.slice(cfg.train, cfg.train + cfg.val), pool.slice(cfg.train + cfg.val, n)};
  s.train.provenance = "blobs/train";
  s.val.provenance = "blobs/val";
  s.test.provenance = "blobs/test";
  return s;
}

}  // namespace tdr
