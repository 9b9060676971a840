#include "knnstore/pca.hpp"

#include <cmath>
#include <random>
#include <string>

#include "knnstore/error.hpp"
#include "knnstore/rng.hpp"

namespace knnstore {

namespace {

// Eigenvalues below this fraction of the leading one count as zero.
constexpr double kRankTol = 1e-10;
constexpr int kMaxPowerIters = 10000;
constexpr double kConvergeTol = 1e-13;
// Fixed stream for start vectors; independent of any user seed so fits are
// a pure function of the data.
constexpr std::uint64_t kStartSeed = 0x5ca1ab1e;

Eigen::MatrixXd covariance(const Datastore& ds, Eigen::VectorXd& mean) {
  const std::size_t n = ds.size();
  const std::uint32_t d = ds.dim();
  mean = Eigen::VectorXd::Zero(d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto key = ds.key(i);
    for (std::uint32_t j = 0; j < d; ++j) {
      mean[j] += key[j];
    }
  }
  mean /= static_cast<double>(n);

  // Accumulate X_c^T X_c in row blocks to keep the double copy small.
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  constexpr std::size_t kBlock = 4096;
  Eigen::MatrixXd block(std::min(kBlock, n), d);
  for (std::size_t start = 0; start < n; start += kBlock) {
    const std::size_t rows = std::min(kBlock, n - start);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto key = ds.key(start + r);
      for (std::uint32_t j = 0; j < d; ++j) {
        block(r, j) = static_cast<double>(key[j]) - mean[j];
      }
    }
    cov.noalias() += block.topRows(rows).transpose() * block.topRows(rows);
  }
  return cov / static_cast<double>(n);
}

}  // namespace

PcaProjection pca_fit(const Datastore& ds, std::uint32_t m) {
  const std::uint32_t d = ds.dim();
  if (m == 0 || m > d) {
    raise(ErrorCode::InvalidParam,
          "requested components must satisfy 0 < m <= dim");
  }
  if (ds.size() < std::size_t(m) + 1) {
    raise(ErrorCode::InvalidParam,
          "need at least m + 1 records to fit " + std::to_string(m) +
              " components");
  }

  PcaProjection proj;
  proj.requested = m;
  Eigen::MatrixXd cov = covariance(ds, proj.mean);

  std::mt19937_64 rng(kStartSeed);
  NormalSampler normal;
  std::vector<Eigen::VectorXd> components;
  std::vector<double> eigenvalues;

  double leading = 0.0;
  for (std::uint32_t k = 0; k < m; ++k) {
    Eigen::VectorXd v(d);
    for (std::uint32_t j = 0; j < d; ++j) {
      v[j] = normal(rng);
    }
    v.normalize();

    double lambda = 0.0;
    for (int iter = 0; iter < kMaxPowerIters; ++iter) {
      Eigen::VectorXd w = cov * v;
      // Re-orthogonalize against the found components each sweep; this is
      // what keeps the deflation numerically honest.
      for (const auto& u : components) {
        w -= u.dot(w) * u;
      }
      const double norm = w.norm();
      if (norm < 1e-300) {
        lambda = 0.0;
        break;
      }
      v = w / norm;
      const double prev = lambda;
      lambda = norm;
      if (iter > 3 && std::abs(lambda - prev) <=
                          kConvergeTol * std::max(std::abs(lambda), 1.0)) {
        break;
      }
    }

    if (k == 0) {
      leading = lambda;
    }
    if (lambda <= kRankTol * std::max(leading, 1e-300)) {
      proj.rank_deficient = true;
      break;
    }
    cov.noalias() -= lambda * v * v.transpose();
    components.push_back(v);
    eigenvalues.push_back(lambda);
  }

  if (components.empty()) {
    // Degenerate input (all records identical): rank zero.
    proj.components.resize(0, d);
    proj.eigenvalues.resize(0);
    proj.rank_deficient = true;
    return proj;
  }
  proj.components.resize(components.size(), d);
  proj.eigenvalues.resize(components.size());
  for (std::size_t k = 0; k < components.size(); ++k) {
    proj.components.row(k) = components[k].transpose();
    proj.eigenvalues[k] = eigenvalues[k];
  }
  return proj;
}

Datastore pca_transform(const PcaProjection& proj, const Datastore& ds) {
  if (proj.mean.size() != ds.dim()) {
    raise(ErrorCode::DimensionMismatch,
          "projection dim " + std::to_string(proj.mean.size()) +
              " != datastore dim " + std::to_string(ds.dim()));
  }
  if (proj.rank() == 0) {
    raise(ErrorCode::InvalidParam, "projection has zero rank");
  }
  const std::uint32_t r = proj.rank();
  std::vector<Record> records(ds.size());
  Eigen::VectorXd x(ds.dim());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto key = ds.key(i);
    for (std::uint32_t j = 0; j < ds.dim(); ++j) {
      x[j] = key[j];
    }
    const Eigen::VectorXd y = proj.components * (x - proj.mean);
    Record& rec = records[i];
    rec.key.resize(r);
    for (std::uint32_t j = 0; j < r; ++j) {
      rec.key[j] = static_cast<float>(y[j]);
    }
    rec.value = ds.value(i);
    rec.prob = ds.prob(i);
    rec.sentence_id = ds.sentence_id(i);
    rec.position = ds.position(i);
    if (ds.has_costs()) {
      rec.cost = ds.cost(i);
    }
  }
  return Datastore::build(records, r, ds.vocab());
}

}  // namespace knnstore
