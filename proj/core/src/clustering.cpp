#include "knnstore/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <string>

#include "binio.hpp"
#include "knnstore/distance.hpp"
#include "knnstore/error.hpp"
#include "knnstore/parallel.hpp"

namespace knnstore {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'K', 'F'};
constexpr std::uint16_t kVersion = 1;

constexpr std::uint32_t kUnset = std::numeric_limits<std::uint32_t>::max();

// Caps for the O(N^2) diagnostics in separability_report.
constexpr std::size_t kMaxPairSampleRecords = 1500;
constexpr std::size_t kMaxRecallQueries = 1500;

}  // namespace

std::vector<std::uint32_t> dbscan(std::span<const float> points,
                                  std::size_t dim, double eps,
                                  std::size_t min_pts) {
  if (dim == 0 || points.size() % dim != 0) {
    raise(ErrorCode::InvalidParam, "points length must be a multiple of dim");
  }
  const std::size_t n = points.size() / dim;
  if (n == 0) {
    raise(ErrorCode::InvalidParam, "dbscan requires at least one point");
  }
  if (!(eps > 0.0) || !std::isfinite(eps)) {
    raise(ErrorCode::InvalidParam, "eps must be positive and finite");
  }
  if (min_pts < 1) {
    raise(ErrorCode::InvalidParam, "min_pts must be at least 1");
  }

  const double eps2 = eps * eps;
  auto row = [&](std::size_t i) { return points.data() + i * dim; };

  // Symmetric eps-neighborhoods (self included).
  std::vector<std::vector<std::uint32_t>> neighbors(n);
  parallel_for(n, 0, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto& ni = neighbors[i];
      for (std::size_t j = 0; j < n; ++j) {
        if (squared_l2(row(i), row(j), dim) <= eps2) {
          ni.push_back(static_cast<std::uint32_t>(j));
        }
      }
    }
  });

  std::vector<bool> core(n);
  for (std::size_t i = 0; i < n; ++i) {
    core[i] = neighbors[i].size() >= min_pts;
  }

  std::vector<std::uint32_t> labels(n, kUnset);
  std::uint32_t next_label = 0;

  // Density-connect the core points.
  std::vector<std::uint32_t> stack;
  for (std::size_t i = 0; i < n; ++i) {
    if (!core[i] || labels[i] != kUnset) {
      continue;
    }
    const std::uint32_t label = next_label++;
    labels[i] = label;
    stack.assign(1, static_cast<std::uint32_t>(i));
    while (!stack.empty()) {
      const std::uint32_t p = stack.back();
      stack.pop_back();
      for (const std::uint32_t q : neighbors[p]) {
        if (core[q] && labels[q] == kUnset) {
          labels[q] = label;
          stack.push_back(q);
        }
      }
    }
  }

  // Border points join their nearest core neighbor's cluster; points with no
  // core neighbor are noise and get singleton clusters.
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != kUnset) {
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_core = kUnset;
    for (const std::uint32_t q : neighbors[i]) {
      if (!core[q]) {
        continue;
      }
      const double d = squared_l2(row(i), row(q), dim);
      if (d < best || (d == best && q < best_core)) {
        best = d;
        best_core = q;
      }
    }
    labels[i] = (best_core != kUnset) ? labels[best_core] : next_label++;
  }
  return labels;
}

ClusterFamilies::ClusterFamilies(std::vector<ClusterFamily> families,
                                 std::size_t record_count, std::uint32_t dim)
    : families_(std::move(families)), dim_(dim) {
  build_reverse(record_count);
}

void ClusterFamilies::build_reverse(std::size_t record_count) {
  reverse_.assign(record_count, Assignment{kUnset, kUnset});
  total_clusters_ = 0;
  for (std::uint32_t f = 0; f < families_.size(); ++f) {
    const auto& family = families_[f];
    if (family.clusters.empty()) {
      raise(ErrorCode::InvalidParam, "family with no clusters");
    }
    for (std::uint32_t c = 0; c < family.clusters.size(); ++c) {
      const auto& cluster = family.clusters[c];
      if (cluster.members.empty()) {
        raise(ErrorCode::InvalidParam, "empty cluster in family");
      }
      if (cluster.centroid.size() != dim_) {
        raise(ErrorCode::DimensionMismatch, "centroid length != dim");
      }
      ++total_clusters_;
      for (const std::uint32_t m : cluster.members) {
        if (m >= record_count || reverse_[m].family_index != kUnset) {
          raise(ErrorCode::InvalidParam,
                "cluster members must partition the record set");
        }
        reverse_[m] = Assignment{f, c};
      }
    }
  }
  for (std::size_t i = 0; i < reverse_.size(); ++i) {
    if (reverse_[i].family_index == kUnset) {
      raise(ErrorCode::InvalidParam,
            "record " + std::to_string(i) + " not covered by any cluster");
    }
  }
}

namespace {

std::vector<float> centroid_of(const Datastore& ds,
                               std::span<const std::uint32_t> members) {
  const std::uint32_t dim = ds.dim();
  std::vector<double> acc(dim, 0.0);
  for (const std::uint32_t m : members) {
    const auto key = ds.key(m);
    for (std::uint32_t j = 0; j < dim; ++j) {
      acc[j] += key[j];
    }
  }
  std::vector<float> centroid(dim);
  const double inv = 1.0 / static_cast<double>(members.size());
  for (std::uint32_t j = 0; j < dim; ++j) {
    centroid[j] = static_cast<float>(acc[j] * inv);
  }
  return centroid;
}

// k-dist heuristic: high quantile over points of the distance to the k-th
// nearest other point (k = min_pts, capped by family size). The median
// under-connects Gaussian blobs (half the points lose core status and the
// fringe shatters into singletons); the 0.99 quantile keeps whole blobs
// density-connected while staying far below any real inter-cluster gap.
double auto_eps(const Datastore& ds, std::span<const std::uint32_t> members,
                std::size_t min_pts) {
  const std::size_t n = members.size();
  const std::size_t k = std::min(min_pts, n - 1);
  std::vector<double> kth(n);
  std::vector<double> dists;
  for (std::size_t i = 0; i < n; ++i) {
    dists.clear();
    dists.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) {
        dists.push_back(squared_l2(ds.key(members[i]), ds.key(members[j])));
      }
    }
    std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
    kth[i] = std::sqrt(dists[k - 1]);
  }
  const std::size_t q = std::min(n - 1, (n * 99) / 100);
  std::nth_element(kth.begin(), kth.begin() + q, kth.end());
  return kth[q];
}

}  // namespace

ClusterFamilies build_families(const Datastore& ds, const FamilyConfig& config) {
  if (config.eps && (!(*config.eps > 0.0) || !std::isfinite(*config.eps))) {
    raise(ErrorCode::InvalidParam, "eps must be positive and finite");
  }
  if (config.min_pts < 1) {
    raise(ErrorCode::InvalidParam, "min_pts must be at least 1");
  }

  // Group record indices by value, ascending.
  std::vector<std::vector<std::uint32_t>> by_value(ds.vocab());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    by_value[ds.value(i)].push_back(static_cast<std::uint32_t>(i));
  }
  std::vector<std::uint32_t> present;
  for (std::uint32_t v = 0; v < ds.vocab(); ++v) {
    if (!by_value[v].empty()) {
      present.push_back(v);
    }
  }

  std::vector<ClusterFamily> families(present.size());
  parallel_for(present.size(), config.workers,
               [&](std::size_t begin, std::size_t end) {
    for (std::size_t fi = begin; fi < end; ++fi) {
      const std::uint32_t v = present[fi];
      const auto& members = by_value[v];
      ClusterFamily family;
      family.value = v;
      if (members.size() == 1) {
        family.clusters.push_back(
            Cluster{{members[0]},
                    std::vector<float>(ds.key(members[0]).begin(),
                                       ds.key(members[0]).end())});
        families[fi] = std::move(family);
        continue;
      }

      const double eps = config.eps
                             ? *config.eps
                             : std::max(auto_eps(ds, members, config.min_pts),
                                        1e-12);
      std::vector<float> family_keys(members.size() * ds.dim());
      for (std::size_t i = 0; i < members.size(); ++i) {
        const auto key = ds.key(members[i]);
        std::copy(key.begin(), key.end(),
                  family_keys.begin() + i * ds.dim());
      }
      const auto labels =
          dbscan(family_keys, ds.dim(), eps, config.min_pts);
      const std::uint32_t n_clusters =
          *std::max_element(labels.begin(), labels.end()) + 1;
      family.clusters.resize(n_clusters);
      for (std::size_t i = 0; i < members.size(); ++i) {
        family.clusters[labels[i]].members.push_back(members[i]);
      }
      for (auto& cluster : family.clusters) {
        cluster.centroid = centroid_of(ds, cluster.members);
      }
      families[fi] = std::move(family);
    }
  });

  return ClusterFamilies(std::move(families), ds.size(), ds.dim());
}

ClusterFamilies ClusterFamilies::one_cluster_per_value(const Datastore& ds) {
  std::vector<std::vector<std::uint32_t>> by_value(ds.vocab());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    by_value[ds.value(i)].push_back(static_cast<std::uint32_t>(i));
  }
  std::vector<ClusterFamily> families;
  for (std::uint32_t v = 0; v < ds.vocab(); ++v) {
    if (by_value[v].empty()) {
      continue;
    }
    ClusterFamily family;
    family.value = v;
    Cluster cluster;
    cluster.members = std::move(by_value[v]);
    cluster.centroid = centroid_of(ds, cluster.members);
    family.clusters.push_back(std::move(cluster));
    families.push_back(std::move(family));
  }
  return ClusterFamilies(std::move(families), ds.size(), ds.dim());
}

void ClusterFamilies::save(const std::filesystem::path& path) const {
  detail::BinWriter w(path);
  w.magic(kMagic);
  w.u16(kVersion);
  w.u16(0);
  w.u32(dim_);
  w.u64(reverse_.size());
  w.u32(static_cast<std::uint32_t>(families_.size()));
  for (const auto& family : families_) {
    w.u32(family.value);
    w.u32(static_cast<std::uint32_t>(family.clusters.size()));
    for (const auto& cluster : family.clusters) {
      w.u64(cluster.members.size());
      w.bytes(cluster.members.data(),
              cluster.members.size() * sizeof(std::uint32_t));
      w.bytes(cluster.centroid.data(), cluster.centroid.size() * sizeof(float));
    }
  }
  w.close();
}

ClusterFamilies ClusterFamilies::load(const std::filesystem::path& path) {
  detail::BinReader r(path);
  r.expect_magic(kMagic);
  r.expect_version(kVersion);
  r.u16();  // flags, unused
  const std::uint32_t dim = r.u32();
  const std::uint64_t record_count = r.u64();
  const std::uint32_t n_families = r.u32();
  if (dim == 0 || record_count == 0) {
    raise(ErrorCode::TruncatedFile, "corrupt header in " + path.string());
  }
  std::vector<ClusterFamily> families(n_families);
  for (auto& family : families) {
    family.value = r.u32();
    const std::uint32_t n_clusters = r.u32();
    family.clusters.resize(n_clusters);
    for (auto& cluster : family.clusters) {
      const std::uint64_t n_members = r.u64();
      if (n_members == 0 || n_members > record_count) {
        raise(ErrorCode::TruncatedFile,
              "corrupt cluster size in " + path.string());
      }
      cluster.members.resize(n_members);
      r.bytes(cluster.members.data(), n_members * sizeof(std::uint32_t));
      cluster.centroid.resize(dim);
      r.bytes(cluster.centroid.data(), dim * sizeof(float));
    }
  }
  r.expect_eof();
  return ClusterFamilies(std::move(families), record_count, dim);
}

std::vector<std::vector<std::uint32_t>> cost_groups_1d(
    std::span<const float> costs, double eps) {
  if (std::isnan(eps) || eps < 0.0) {
    raise(ErrorCode::InvalidParam, "eps must be nonnegative");
  }
  for (const float c : costs) {
    if (!std::isfinite(c)) {
      raise(ErrorCode::InvalidParam, "costs must be finite");
    }
  }
  std::vector<std::uint32_t> order(costs.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return costs[a] != costs[b] ? costs[a] < costs[b] : a < b;
  });

  std::vector<std::vector<std::uint32_t>> groups;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const bool new_group =
        i == 0 ||
        static_cast<double>(costs[order[i]]) - costs[order[i - 1]] > eps;
    if (new_group) {
      groups.emplace_back();
    }
    groups.back().push_back(order[i]);
  }
  for (auto& g : groups) {
    std::sort(g.begin(), g.end());
  }
  return groups;
}

CostGroups cost_cluster(const Datastore& ds, double eps) {
  if (!ds.has_costs()) {
    raise(ErrorCode::MissingCosts,
          "translation costs missing; run cost computation first");
  }
  std::vector<std::vector<std::uint32_t>> by_value(ds.vocab());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    by_value[ds.value(i)].push_back(static_cast<std::uint32_t>(i));
  }
  CostGroups out;
  for (std::uint32_t v = 0; v < ds.vocab(); ++v) {
    const auto& members = by_value[v];
    if (members.empty()) {
      continue;
    }
    std::vector<float> costs(members.size());
    for (std::size_t i = 0; i < members.size(); ++i) {
      costs[i] = ds.cost(members[i]);
    }
    CostGroups::PerValue pv;
    pv.value = v;
    for (auto& group : cost_groups_1d(costs, eps)) {
      std::vector<std::uint32_t> record_ids(group.size());
      for (std::size_t i = 0; i < group.size(); ++i) {
        record_ids[i] = members[group[i]];
      }
      pv.groups.push_back(std::move(record_ids));
    }
    out.by_value.push_back(std::move(pv));
  }
  return out;
}

SeparabilityReport separability_report(const Datastore& ds,
                                       const ClusterFamilies& families) {
  if (families.record_count() != ds.size()) {
    raise(ErrorCode::InvalidParam, "families do not match the datastore");
  }
  SeparabilityReport report;
  const std::size_t n = ds.size();

  // Deterministic stride subsample for the pairwise statistics.
  const std::size_t m = std::min(n, kMaxPairSampleRecords);
  std::vector<std::uint32_t> sample(m);
  for (std::size_t i = 0; i < m; ++i) {
    sample[i] = static_cast<std::uint32_t>(i * n / m);
  }
  report.sampled_records = m;

  double intra_sum = 0.0, inter_sum = 0.0;
  std::size_t intra_count = 0, inter_count = 0;
  for (std::size_t a = 0; a < m; ++a) {
    const std::uint32_t i = sample[a];
    for (std::size_t b = a + 1; b < m; ++b) {
      const std::uint32_t j = sample[b];
      const double d = std::sqrt(squared_l2(ds.key(i), ds.key(j)));
      if (ds.value(i) == ds.value(j)) {
        intra_sum += d;
        ++intra_count;
      } else {
        inter_sum += d;
        ++inter_count;
      }
    }
  }
  report.mean_intra_family_distance =
      intra_count > 0 ? intra_sum / intra_count : 0.0;
  if (inter_count > 0) {
    report.mean_inter_family_distance = inter_sum / inter_count;
    if (*report.mean_inter_family_distance > 0.0) {
      report.intra_inter_ratio =
          report.mean_intra_family_distance / *report.mean_inter_family_distance;
    }
  }

  // Leave-one-out 1-NN value recall over a strided query subset.
  const std::size_t q = std::min(n, kMaxRecallQueries);
  report.recall_queries = q;
  std::vector<std::uint8_t> hit(q, 0);
  parallel_for(q, 0, [&](std::size_t begin, std::size_t end) {
    for (std::size_t a = begin; a < end; ++a) {
      const std::size_t i = a * n / q;
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_j = n;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) {
          continue;
        }
        const double d = squared_l2(ds.key(i), ds.key(j));
        if (d < best || (d == best && j < best_j)) {
          best = d;
          best_j = j;
        }
      }
      hit[a] = best_j < n && ds.value(best_j) == ds.value(i) ? 1 : 0;
    }
  });
  std::size_t hits = 0;
  for (const auto h : hit) {
    hits += h;
  }
  report.value_recall_at_1 = q > 0 ? static_cast<double>(hits) / q : 0.0;
  return report;
}

}  // namespace knnstore
