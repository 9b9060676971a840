#include "knnstore/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "knnstore/distance.hpp"
#include "knnstore/error.hpp"
#include "knnstore/parallel.hpp"
#include "knnstore/rng.hpp"

namespace knnstore {

namespace {

void check_rate(const PruneConfig& config) {
  if (!(config.rate >= 0.0 && config.rate < 1.0)) {
    raise(ErrorCode::InvalidParam, "prune rate must lie in [0, 1)");
  }
}

std::size_t keep_count(std::size_t group_size, double rate) {
  return static_cast<std::size_t>(
      std::ceil((1.0 - rate) * static_cast<double>(group_size)));
}

// Uniform sample without replacement via partial Fisher-Yates; the result is
// re-sorted so subset() sees ascending indices.
std::vector<std::uint32_t> sample_members(std::vector<std::uint32_t> members,
                                          std::size_t keep,
                                          std::mt19937_64& rng) {
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + bounded(rng, members.size() - i);
    std::swap(members[i], members[j]);
  }
  members.resize(keep);
  std::sort(members.begin(), members.end());
  return members;
}

Datastore subset_sorted(const Datastore& ds, std::vector<std::uint32_t> keep) {
  std::sort(keep.begin(), keep.end());
  return ds.subset(keep);
}

}  // namespace

double ppl(std::span<const float> probs) {
  if (probs.empty()) {
    raise(ErrorCode::EmptyInput, "ppl of an empty sequence");
  }
  double log_sum = 0.0;
  for (const float p : probs) {
    if (!(p > 0.0f && p <= 1.0f)) {
      raise(ErrorCode::ProbOutOfRange,
            "probability " + std::to_string(p) + " outside (0, 1]");
    }
    log_sum += std::log(static_cast<double>(p));
  }
  return std::exp(-log_sum / static_cast<double>(probs.size()));
}

Datastore translation_cost(const Datastore& ds, std::uint32_t n) {
  if (n < 1) {
    raise(ErrorCode::InvalidParam, "n-gram length must be at least 1");
  }

  // Sentence -> record indices ordered by position.
  std::map<std::uint32_t, std::vector<std::uint32_t>> sentences;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    sentences[ds.sentence_id(i)].push_back(static_cast<std::uint32_t>(i));
  }
  std::vector<const std::vector<std::uint32_t>*> ordered;
  ordered.reserve(sentences.size());
  for (auto& [sid, members] : sentences) {
    std::sort(members.begin(), members.end(),
              [&](std::uint32_t a, std::uint32_t b) {
                return ds.position(a) < ds.position(b);
              });
    for (std::size_t p = 0; p < members.size(); ++p) {
      if (ds.position(members[p]) != p) {
        raise(ErrorCode::NonContiguousSentence,
              "sentence " + std::to_string(sid) +
                  " positions are not contiguous from 0");
      }
    }
    ordered.push_back(&members);
  }

  std::vector<float> costs(ds.size());
  parallel_for(ordered.size(), 0, [&](std::size_t begin, std::size_t end) {
    std::vector<float> window;
    for (std::size_t s = begin; s < end; ++s) {
      const auto& members = *ordered[s];
      for (std::size_t i = 0; i < members.size(); ++i) {
        const std::uint32_t max_b =
            std::min<std::uint32_t>(n, static_cast<std::uint32_t>(i) + 1);
        double best = std::numeric_limits<double>::infinity();
        window.clear();
        for (std::uint32_t b = 1; b <= max_b; ++b) {
          window.insert(window.begin(), ds.prob(members[i - b + 1]));
          best = std::min(best, ppl(window));
        }
        costs[members[i]] = static_cast<float>(best);
      }
    }
  });
  return ds.with_costs(std::move(costs));
}

Datastore prune_cluster(const Datastore& ds, const PruneConfig& config) {
  check_rate(config);
  if (!ds.has_costs()) {
    raise(ErrorCode::MissingCosts,
          "cluster pruning needs translation costs; run cost first");
  }
  const CostGroups groups = cost_cluster(ds, config.epsilon);
  std::mt19937_64 rng(config.seed);
  std::vector<std::uint32_t> keep;
  keep.reserve(ds.size());
  for (const auto& pv : groups.by_value) {
    for (const auto& group : pv.groups) {
      const std::size_t k = keep_count(group.size(), config.rate);
      for (const std::uint32_t idx : sample_members(group, k, rng)) {
        keep.push_back(idx);
      }
    }
  }
  return subset_sorted(ds, std::move(keep));
}

Datastore prune_sp(const Datastore& ds, const ClusterFamilies& families,
                   const PruneConfig& config) {
  check_rate(config);
  if (families.record_count() != ds.size() || families.dim() != ds.dim()) {
    raise(ErrorCode::MissingFamilies, "families do not match the datastore");
  }
  std::vector<std::uint32_t> keep;
  keep.reserve(ds.size());
  for (const auto& family : families.families()) {
    for (const auto& cluster : family.clusters) {
      std::vector<std::pair<double, std::uint32_t>> ranked;
      ranked.reserve(cluster.members.size());
      for (const std::uint32_t m : cluster.members) {
        ranked.emplace_back(squared_l2(ds.key(m), cluster.centroid), m);
      }
      // Keep the closest ceil((1-r)*size); among equal distances lower
      // indices survive first.
      std::sort(ranked.begin(), ranked.end());
      const std::size_t k = keep_count(ranked.size(), config.rate);
      for (std::size_t i = 0; i < k; ++i) {
        keep.push_back(ranked[i].second);
      }
    }
  }
  return subset_sorted(ds, std::move(keep));
}

namespace {

Datastore prune_by_prob(const Datastore& ds, const PruneConfig& config,
                        bool remove_lowest) {
  check_rate(config);
  const std::size_t n = ds.size();
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (ds.prob(a) != ds.prob(b)) {
      return remove_lowest ? ds.prob(a) > ds.prob(b) : ds.prob(a) < ds.prob(b);
    }
    return a < b;
  });
  // After the sort the records to REMOVE sit at the tail.
  const std::size_t k = keep_count(n, config.rate);
  order.resize(k);
  return subset_sorted(ds, std::move(order));
}

}  // namespace

Datastore prune_ltp(const Datastore& ds, const PruneConfig& config) {
  return prune_by_prob(ds, config, /*remove_lowest=*/true);
}

Datastore prune_htp(const Datastore& ds, const PruneConfig& config) {
  return prune_by_prob(ds, config, /*remove_lowest=*/false);
}

Datastore prune_rp(const Datastore& ds, const ClusterFamilies& families,
                   const PruneConfig& config) {
  check_rate(config);
  if (families.record_count() != ds.size() || families.dim() != ds.dim()) {
    raise(ErrorCode::MissingFamilies, "families do not match the datastore");
  }
  std::mt19937_64 rng(config.seed);
  std::vector<std::uint32_t> keep;
  keep.reserve(ds.size());
  for (const auto& family : families.families()) {
    for (const auto& cluster : family.clusters) {
      const std::size_t k = keep_count(cluster.members.size(), config.rate);
      for (const std::uint32_t idx : sample_members(cluster.members, k, rng)) {
        keep.push_back(idx);
      }
    }
  }
  return subset_sorted(ds, std::move(keep));
}

Datastore prune(const Datastore& ds, const ClusterFamilies* families,
                const PruneConfig& config) {
  switch (config.strategy) {
    case PruneStrategy::Cluster:
      return prune_cluster(ds, config);
    case PruneStrategy::Ltp:
      return prune_ltp(ds, config);
    case PruneStrategy::Htp:
      return prune_htp(ds, config);
    case PruneStrategy::Sp:
    case PruneStrategy::Rp:
      if (families == nullptr) {
        raise(ErrorCode::MissingFamilies,
              std::string(strategy_name(config.strategy)) +
                  " pruning requires cluster families");
      }
      return config.strategy == PruneStrategy::Sp
                 ? prune_sp(ds, *families, config)
                 : prune_rp(ds, *families, config);
  }
  raise(ErrorCode::InvalidParam, "unknown prune strategy");
}

const char* strategy_name(PruneStrategy s) {
  switch (s) {
    case PruneStrategy::Cluster: return "cluster";
    case PruneStrategy::Sp: return "sp";
    case PruneStrategy::Ltp: return "ltp";
    case PruneStrategy::Htp: return "htp";
    case PruneStrategy::Rp: return "rp";
  }
  return "unknown";
}

PruneStrategy parse_strategy(const std::string& name) {
  if (name == "cluster") return PruneStrategy::Cluster;
  if (name == "sp") return PruneStrategy::Sp;
  if (name == "ltp") return PruneStrategy::Ltp;
  if (name == "htp") return PruneStrategy::Htp;
  if (name == "rp") return PruneStrategy::Rp;
  raise(ErrorCode::InvalidParam, "unknown prune strategy: " + name);
}

std::string PruneReport::to_json() const {
  nlohmann::json j;
  j["strategy"] = strategy_name(strategy);
  j["input_count"] = input_count;
  j["output_count"] = output_count;
  j["target_rate"] = target_rate;
  j["achieved_rate"] = achieved_rate;
  return j.dump(2);
}

PruneReport make_report(const Datastore& input, const Datastore& output,
                        const PruneConfig& config) {
  PruneReport report;
  report.strategy = config.strategy;
  report.input_count = input.size();
  report.output_count = output.size();
  report.target_rate = config.rate;
  report.achieved_rate =
      1.0 - static_cast<double>(output.size()) / static_cast<double>(input.size());
  return report;
}

}  // namespace knnstore
