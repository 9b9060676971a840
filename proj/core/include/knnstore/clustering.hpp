#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "knnstore/datastore.hpp"

namespace knnstore {

// Density-based clustering producing a total partition: every point gets a
// label in [0, n_clusters). Core points follow classic density connectivity;
// border points join the cluster of their nearest core neighbor (which makes
// the partition independent of input order); noise points become singleton
// clusters so that downstream triplet sampling and pruning cover every
// record. `points` holds `count` rows of length `dim`, row-major.
std::vector<std::uint32_t> dbscan(std::span<const float> points,
                                  std::size_t dim, double eps,
                                  std::size_t min_pts);

struct Cluster {
  std::vector<std::uint32_t> members;  // record indices, ascending
  std::vector<float> centroid;         // coordinate-wise mean of members
};

struct ClusterFamily {
  std::uint32_t value = 0;
  std::vector<Cluster> clusters;
};

// Per-value partition of a datastore's keys into clusters ("one family per
// value"). Families are ordered by ascending value; the reverse map resolves
// any record index to its (family, cluster) slot.
class ClusterFamilies {
 public:
  struct Assignment {
    std::uint32_t family_index = 0;
    std::uint32_t cluster_index = 0;
  };

  ClusterFamilies() = default;
  ClusterFamilies(std::vector<ClusterFamily> families, std::size_t record_count,
                  std::uint32_t dim);

  const std::vector<ClusterFamily>& families() const { return families_; }
  std::size_t record_count() const { return reverse_.size(); }
  std::uint32_t dim() const { return dim_; }
  std::size_t total_clusters() const { return total_clusters_; }

  Assignment assignment_of(std::uint32_t record) const {
    return reverse_[record];
  }
  std::uint32_t value_of(std::uint32_t record) const {
    return families_[reverse_[record].family_index].value;
  }
  const Cluster& cluster_of(std::uint32_t record) const {
    const Assignment a = reverse_[record];
    return families_[a.family_index].clusters[a.cluster_index];
  }

  // Sidecar binary, magic "PCKF": per value the cluster count, then member
  // index lists and centroids.
  void save(const std::filesystem::path& path) const;
  static ClusterFamilies load(const std::filesystem::path& path);

  // Degenerate families for ablation: each value forms one cluster covering
  // all of its records.
  static ClusterFamilies one_cluster_per_value(const Datastore& ds);

 private:
  std::vector<ClusterFamily> families_;
  std::vector<Assignment> reverse_;
  std::uint32_t dim_ = 0;
  std::size_t total_clusters_ = 0;

  void build_reverse(std::size_t record_count);
};

struct FamilyConfig {
  // Absent: per-family k-dist heuristic (median distance to the min_pts-th
  // nearest neighbor).
  std::optional<double> eps;
  std::size_t min_pts = 4;
  std::size_t workers = 0;  // 0 = default_threads()
};

// Runs dbscan over each value's keys and collects centroids. Values with a
// single record yield one singleton cluster.
ClusterFamilies build_families(const Datastore& ds, const FamilyConfig& config);

// 1-D single-linkage with threshold: sorts costs and starts a new group
// whenever the gap between consecutive sorted costs exceeds eps. Returns
// groups of indices into `costs`, each ascending, ordered by group cost.
std::vector<std::vector<std::uint32_t>> cost_groups_1d(
    std::span<const float> costs, double eps);

struct CostGroups {
  struct PerValue {
    std::uint32_t value = 0;
    // Groups of record indices into the datastore.
    std::vector<std::vector<std::uint32_t>> groups;
  };
  std::vector<PerValue> by_value;  // ascending value

  std::size_t total_groups() const {
    std::size_t n = 0;
    for (const auto& pv : by_value) {
      n += pv.groups.size();
    }
    return n;
  }
};

// Applies cost_groups_1d to each value's translation costs.
CostGroups cost_cluster(const Datastore& ds, double eps);

// Diagnostic contrast of a store's family geometry. Pairwise statistics and
// the leave-one-out 1-NN scan are capped at a deterministic stride subsample
// for large stores; the caps are recorded in the report.
struct SeparabilityReport {
  double mean_intra_family_distance = 0.0;
  // Absent when the store has a single value.
  std::optional<double> mean_inter_family_distance;
  std::optional<double> intra_inter_ratio;
  double value_recall_at_1 = 0.0;
  std::size_t sampled_records = 0;
  std::size_t recall_queries = 0;
};

SeparabilityReport separability_report(const Datastore& ds,
                                       const ClusterFamilies& families);

}  // namespace knnstore
