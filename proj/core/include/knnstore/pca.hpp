#pragma once

#include <Eigen/Core>
#include <cstdint>

#include "knnstore/datastore.hpp"

namespace knnstore {

// Top principal directions of the mean-centered keys, found by an iterated
// deflated power method on the covariance matrix. If fewer than the requested
// number of nonzero eigenvalues exist, the available rank is returned and
// `rank_deficient` is set instead of failing.
struct PcaProjection {
  Eigen::MatrixXd components;   // rank x dim, orthonormal rows
  Eigen::VectorXd mean;         // dim
  Eigen::VectorXd eigenvalues;  // rank, descending
  std::uint32_t requested = 0;
  bool rank_deficient = false;

  std::uint32_t rank() const {
    return static_cast<std::uint32_t>(components.rows());
  }
};

// Requires m <= dim and at least m + 1 records.
PcaProjection pca_fit(const Datastore& ds, std::uint32_t m);

// Projects every key onto the principal directions; the result has
// dim == proj.rank().
Datastore pca_transform(const PcaProjection& proj, const Datastore& ds);

}  // namespace knnstore
