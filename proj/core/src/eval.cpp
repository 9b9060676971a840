#include "knnstore/eval.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "knnstore/error.hpp"
#include "knnstore/parallel.hpp"

namespace knnstore {

namespace {

using Clock = std::chrono::steady_clock;

double percentile(std::vector<double> values, double q) {
  if (values.empty()) {
    return 0.0;
  }
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

}  // namespace

EvalReport evaluate(const Datastore& ds, std::span<const LabeledQuery> queries,
                    const MetaKNet& metak, double temperature,
                    const EvalOptions& options) {
  if (queries.empty()) {
    raise(ErrorCode::EmptyInput, "no queries to evaluate");
  }
  constexpr std::uint32_t kMaxRecallK = 16;
  const std::uint32_t fetch = std::max(metak.k_max(), kMaxRecallK);
  if (fetch > ds.size()) {
    raise(ErrorCode::KTooLarge, "store smaller than the evaluation k");
  }

  const std::size_t n = queries.size();
  const std::vector<double> uniform(ds.vocab(), 1.0 / ds.vocab());
  std::vector<std::array<std::uint8_t, 4>> recall_hits(n);
  std::vector<std::uint8_t> top1_hits(n);
  std::vector<double> nll(n);
  std::vector<double> latency_us(n);

  const std::size_t workers = options.workers == 0 ? default_threads()
                                                   : options.workers;
  const auto wall_start = Clock::now();
  parallel_for(n, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& query = queries[i];
      if (!query.gold) {
        raise(ErrorCode::MissingGold,
              "query " + std::to_string(i) + " has no gold value");
      }
      const std::uint32_t gold = *query.gold;
      if (gold >= ds.vocab()) {
        raise(ErrorCode::ValueOutOfVocab, "gold value outside vocab");
      }
      std::span<const double> base =
          query.base_dist.empty() ? std::span<const double>(uniform)
                                  : std::span<const double>(query.base_dist);

      const auto t0 = Clock::now();
      const auto neighbors =
          options.ivf ? options.ivf->search(query.key, fetch, options.nprobe)
                      : knn_flat(ds, query.key, fetch);
      const auto weights = meta_k_forward(
          metak, std::span<const Neighbor>(neighbors).first(metak.k_max()));
      const auto fused = fuse(weights,
                              std::span<const Neighbor>(neighbors)
                                  .first(metak.k_max()),
                              base, temperature, ds.vocab());
      const auto t1 = Clock::now();
      latency_us[i] =
          std::chrono::duration<double, std::micro>(t1 - t0).count();

      for (std::size_t ki = 0; ki < 4; ++ki) {
        const std::uint32_t k = EvalReport::kRecallKs[ki];
        bool hit = false;
        for (std::uint32_t j = 0; j < k && j < neighbors.size(); ++j) {
          if (neighbors[j].value == gold) {
            hit = true;
            break;
          }
        }
        recall_hits[i][ki] = hit ? 1 : 0;
      }
      const auto best = std::max_element(fused.distribution.begin(),
                                         fused.distribution.end());
      top1_hits[i] =
          static_cast<std::uint32_t>(best - fused.distribution.begin()) == gold
              ? 1
              : 0;
      nll[i] = -std::log(std::max(fused.distribution[gold], 1e-12));
    }
  });
  const auto wall_end = Clock::now();

  EvalReport report;
  for (std::size_t ki = 0; ki < 4; ++ki) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      hits += recall_hits[i][ki];
    }
    report.recall_at[ki] = static_cast<double>(hits) / n;
  }
  std::size_t top1 = 0;
  double nll_sum = 0.0, lat_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    top1 += top1_hits[i];
    nll_sum += nll[i];
    lat_sum += latency_us[i];
  }
  report.fused_top1_accuracy = static_cast<double>(top1) / n;
  report.mean_fused_nll = nll_sum / n;
  report.store_count = ds.size();
  report.store_dim = ds.dim();
  report.mean_latency_us = lat_sum / n;
  const double wall_s =
      std::chrono::duration<double>(wall_end - wall_start).count();
  report.queries_per_second = wall_s > 0.0 ? n / wall_s : 0.0;
  report.workers = workers;
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  for (std::size_t ki = 0; ki < 4; ++ki) {
    j["recall_at_" + std::to_string(kRecallKs[ki])] = recall_at[ki];
  }
  j["fused_top1_accuracy"] = fused_top1_accuracy;
  j["mean_fused_nll"] = mean_fused_nll;
  j["store_count"] = store_count;
  j["store_dim"] = store_dim;
  j["mean_latency_us"] = mean_latency_us;
  j["queries_per_second"] = queries_per_second;
  j["workers"] = workers;
  return j.dump(2);
}

std::vector<BenchRow> bench(const std::vector<const Datastore*>& stores,
                            const std::vector<std::string>& labels,
                            std::span<const LabeledQuery> queries,
                            const BenchConfig& config) {
  if (stores.empty()) {
    raise(ErrorCode::EmptyInput, "no datastores to benchmark");
  }
  if (stores.size() != labels.size()) {
    raise(ErrorCode::InvalidParam, "one label per store required");
  }
  if (queries.empty()) {
    raise(ErrorCode::EmptyInput, "no benchmark queries");
  }
  if (config.repeats == 0) {
    raise(ErrorCode::UsageError, "repeats must be positive");
  }

  const std::size_t workers = config.workers == 0 ? 1 : config.workers;
  std::vector<BenchRow> rows;
  for (std::size_t s = 0; s < stores.size(); ++s) {
    const Datastore& ds = *stores[s];
    if (config.k > ds.size()) {
      raise(ErrorCode::KTooLarge, "k exceeds store " + labels[s]);
    }
    const std::size_t nq = queries.size();

    auto run_pass = [&](std::vector<double>* per_query) -> double {
      const auto t0 = Clock::now();
      parallel_for(nq, workers, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
          const auto q0 = Clock::now();
          const auto neighbors = knn_flat(ds, queries[i].key, config.k);
          const auto q1 = Clock::now();
          if (per_query != nullptr) {
            (*per_query)[i] =
                std::chrono::duration<double, std::micro>(q1 - q0).count();
          }
          // Keep the scan from being optimized away.
          volatile double sink = neighbors[0].squared_l2;
          (void)sink;
        }
      });
      const auto t1 = Clock::now();
      return std::chrono::duration<double>(t1 - t0).count();
    };

    run_pass(nullptr);  // warm-up

    std::vector<double> pooled;
    pooled.reserve(nq * config.repeats);
    std::vector<double> rates(config.repeats);
    std::vector<double> pass_latency(nq);
    for (std::uint32_t r = 0; r < config.repeats; ++r) {
      const double seconds = run_pass(&pass_latency);
      rates[r] = nq / seconds;
      pooled.insert(pooled.end(), pass_latency.begin(), pass_latency.end());
    }

    BenchRow row;
    row.label = labels[s];
    row.count = ds.size();
    row.dim = ds.dim();
    row.k = config.k;
    row.repeats = config.repeats;
    row.workers = workers;
    row.median_us = percentile(pooled, 0.5);
    row.p95_us = percentile(pooled, 0.95);
    row.queries_per_second = percentile(rates, 0.5);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << "store,count,dim,k,repeats,workers,median_us,p95_us,queries_per_second\n";
  for (const auto& r : rows) {
    out << r.label << ',' << r.count << ',' << r.dim << ',' << r.k << ','
        << r.repeats << ',' << r.workers << ',' << r.median_us << ','
        << r.p95_us << ',' << r.queries_per_second << '\n';
  }
  return out.str();
}

std::string bench_table(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << "store                            count      dim   median(us)   p95(us)      qps\n";
  for (const auto& r : rows) {
    char line[256];
    std::snprintf(line, sizeof line, "%-32s %-10llu %-5u %-12.1f %-12.1f %-10.1f\n",
                  r.label.c_str(),
                  static_cast<unsigned long long>(r.count), r.dim, r.median_us,
                  r.p95_us, r.queries_per_second);
    out << line;
  }
  return out.str();
}

}  // namespace knnstore
