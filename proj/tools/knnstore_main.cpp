// knnstore: build, compress, prune, and query token-level retrieval
// datastores. Subcommands mirror the pipeline stages:
//   gen -> cluster -> train-compact -> compress -> cost -> prune
//       -> train-metak -> query / eval / bench
// A JSON config (--config) supplies defaults; explicit flags win.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "knnstore/clustering.hpp"
#include "knnstore/compact.hpp"
#include "knnstore/config.hpp"
#include "knnstore/datastore.hpp"
#include "knnstore/error.hpp"
#include "knnstore/eval.hpp"
#include "knnstore/metak.hpp"
#include "knnstore/pruning.hpp"
#include "knnstore/query.hpp"
#include "knnstore/retrieval.hpp"
#include "knnstore/synth.hpp"

namespace {

using namespace knnstore;

struct CommonState {
  std::string config_path;
  PipelineConfig config;
  bool config_loaded = false;
  int threads = 0;
};

// Runs at the top of every subcommand callback: applies --threads and loads
// the config file when one was given.
void begin_command(const CLI::App* sub, CommonState& state) {
  if (state.threads > 0) {
    Eigen::setNbThreads(state.threads);
  }
  if (sub->count("--config") > 0) {
    state.config = PipelineConfig::load(state.config_path);
    state.config_loaded = true;
  }
}

// Flags beat config values: a config field applies only when the matching
// option was not given on the command line.
template <typename T, typename U>
void pick(const CLI::App* sub, const std::string& flag, T& var, const U& cfg,
          const CommonState& state) {
  if (state.config_loaded && sub->count(flag) == 0) {
    var = static_cast<T>(cfg);
  }
}

void add_config_flag(CLI::App* sub, CommonState& state) {
  sub->add_option("--config", state.config_path,
                  "JSON pipeline config supplying defaults")
      ->envname("KNNSTORE_CONFIG");
}

void write_trace_csv(const std::filesystem::path& path,
                     const std::vector<float>& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    raise(ErrorCode::IoError, "cannot open for writing: " + path.string());
  }
  out << "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    out << i << ',' << trace[i] << '\n';
  }
}

void write_trace_csv(const std::filesystem::path& path,
                     const std::vector<double>& trace) {
  write_trace_csv(path, std::vector<float>(trace.begin(), trace.end()));
}

// Applies f_alpha to every query key (the inference-side counterpart of
// datastore compression).
std::vector<LabeledQuery> compress_queries(std::vector<LabeledQuery> queries,
                                           const CompactNet<float>& net) {
  for (auto& q : queries) {
    q.key = f_alpha(net, std::span<const float>(q.key));
  }
  return queries;
}

// Reads queries sized for `ds`, compressing through `net_path` when given.
std::vector<LabeledQuery> load_queries_for(const std::filesystem::path& path,
                                           const Datastore& ds,
                                           const std::string& net_path) {
  if (net_path.empty()) {
    return read_queries_jsonl(path, ds.dim());
  }
  const auto net = load_network(net_path);
  if (net.output_dim() != ds.dim()) {
    raise(ErrorCode::DimensionMismatch,
          "network output dim does not match the datastore");
  }
  return compress_queries(read_queries_jsonl(path, net.input_dim()), net);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    raise(ErrorCode::IoError, "cannot open for writing: " + path.string());
  }
  out << text;
  if (!text.empty() && text.back() != '\n') {
    out << '\n';
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{
      "token-level kNN retrieval datastores: build, compress, prune, query"};
  app.require_subcommand(1);

  CommonState state;
  app.add_option("--threads", state.threads,
                 "threads for internal math (0 = library default)");

  // ---- gen -----------------------------------------------------------
  auto* gen = app.add_subcommand("gen", "generate a synthetic datastore");
  add_config_flag(gen, state);
  std::string gen_out, gen_queries_out;
  SynthConfig gen_cfg;
  std::uint64_t gen_num_queries = 1000;
  gen->add_option("--out", gen_out, "output datastore (.pckd)")
      ->required()
      ->envname("KNNSTORE_STORE");
  gen->add_option("--queries-out", gen_queries_out,
                  "also emit held-out queries (.jsonl)");
  gen->add_option("--num-queries", gen_num_queries, "held-out query count");
  gen->add_option("--vocab", gen_cfg.vocab, "distinct token values");
  gen->add_option("--dim", gen_cfg.dim, "key dimensionality");
  gen->add_option("--clusters-per-value", gen_cfg.clusters_per_value,
                  "Gaussian blobs per value");
  gen->add_option("--points-per-cluster", gen_cfg.points_per_cluster,
                  "records per blob");
  gen->add_option("--intra-spread", gen_cfg.intra_spread, "blob radius");
  gen->add_option("--overlap", gen_cfg.family_overlap,
                  "family overlap in [0,1]");
  gen->add_option("--seed", gen_cfg.seed, "generator seed");
  gen->callback([&, gen] {
    begin_command(gen, state);
    pick(gen, "--vocab", gen_cfg.vocab, state.config.gen.vocab, state);
    pick(gen, "--dim", gen_cfg.dim, state.config.gen.dim, state);
    pick(gen, "--clusters-per-value", gen_cfg.clusters_per_value,
         state.config.gen.clusters_per_value, state);
    pick(gen, "--points-per-cluster", gen_cfg.points_per_cluster,
         state.config.gen.points_per_cluster, state);
    pick(gen, "--intra-spread", gen_cfg.intra_spread,
         state.config.gen.intra_spread, state);
    pick(gen, "--overlap", gen_cfg.family_overlap,
         state.config.gen.family_overlap, state);
    pick(gen, "--seed", gen_cfg.seed, state.config.gen.seed, state);
    pick(gen, "--num-queries", gen_num_queries, state.config.gen_queries,
         state);

    const auto records = synth_generate(gen_cfg);
    const auto ds = Datastore::build(records, gen_cfg.dim, gen_cfg.vocab);
    ds.save(gen_out);
    std::printf("wrote %zu records (dim %u, vocab %u) to %s\n", ds.size(),
                ds.dim(), ds.vocab(), gen_out.c_str());
    if (!gen_queries_out.empty()) {
      const auto queries = synth_queries(gen_cfg, gen_num_queries);
      write_queries_jsonl(gen_queries_out, queries);
      std::printf("wrote %zu queries to %s\n", queries.size(),
                  gen_queries_out.c_str());
    }
  });

  // ---- import --------------------------------------------------------
  auto* import = app.add_subcommand("import", "import records from JSONL");
  add_config_flag(import, state);
  std::string import_in, import_out;
  std::uint32_t import_dim = 0, import_vocab = 0;
  import->add_option("--in", import_in, "input JSONL")->required();
  import->add_option("--out", import_out, "output datastore (.pckd)")
      ->required();
  import->add_option("--dim", import_dim, "key dimensionality")->required();
  import->add_option("--vocab", import_vocab, "vocabulary size")->required();
  import->callback([&, import] {
    begin_command(import, state);
    const auto ds =
        Datastore::import_jsonl(import_in, import_dim, import_vocab);
    ds.save(import_out);
    std::printf("imported %zu records to %s\n", ds.size(), import_out.c_str());
  });

  // ---- cluster -------------------------------------------------------
  auto* cluster =
      app.add_subcommand("cluster", "build per-value cluster families");
  add_config_flag(cluster, state);
  std::string cluster_store, cluster_out;
  double cluster_eps = 0.0;
  std::uint32_t cluster_min_pts = 4;
  std::size_t cluster_workers = 0;
  bool cluster_report = false;
  cluster->add_option("--store", cluster_store, "input datastore")
      ->required()
      ->envname("KNNSTORE_STORE");
  cluster->add_option("--out", cluster_out, "output families (.pckf)")
      ->required();
  cluster->add_option("--eps", cluster_eps,
                      "density radius (<= 0 selects the k-dist heuristic)");
  cluster->add_option("--min-pts", cluster_min_pts, "core point threshold");
  cluster->add_option("--workers", cluster_workers, "parallel families");
  cluster->add_flag("--report", cluster_report,
                    "print a separability report (JSON)");
  cluster->callback([&, cluster] {
    begin_command(cluster, state);
    pick(cluster, "--eps", cluster_eps, state.config.cluster.eps, state);
    pick(cluster, "--min-pts", cluster_min_pts, state.config.cluster.min_pts,
         state);
    pick(cluster, "--workers", cluster_workers, state.config.cluster.workers,
         state);

    const auto ds = Datastore::load(cluster_store);
    FamilyConfig fc;
    if (cluster_eps > 0.0) {
      fc.eps = cluster_eps;
    }
    fc.min_pts = cluster_min_pts;
    fc.workers = cluster_workers;
    const auto families = build_families(ds, fc);
    families.save(cluster_out);
    std::printf("wrote %zu families (%zu clusters) to %s\n",
                families.families().size(), families.total_clusters(),
                cluster_out.c_str());
    if (cluster_report) {
      const auto rep = separability_report(ds, families);
      nlohmann::json j;
      j["mean_intra_family_distance"] = rep.mean_intra_family_distance;
      if (rep.mean_inter_family_distance) {
        j["mean_inter_family_distance"] = *rep.mean_inter_family_distance;
        j["intra_inter_ratio"] = *rep.intra_inter_ratio;
      }
      j["value_recall_at_1"] = rep.value_recall_at_1;
      j["sampled_records"] = rep.sampled_records;
      j["recall_queries"] = rep.recall_queries;
      std::printf("%s\n", j.dump(2).c_str());
    }
  });

  // ---- train-compact -------------------------------------------------
  auto* tc = app.add_subcommand(
      "train-compact", "train the compact feature-reduction network");
  add_config_flag(tc, state);
  std::string tc_store, tc_families, tc_out, tc_trace_out;
  std::string tc_loss = "nce", tc_pivot = "static";
  TrainConfig tc_cfg;
  bool tc_no_cl = false;
  tc->add_option("--store", tc_store, "input datastore")
      ->required()
      ->envname("KNNSTORE_STORE");
  tc->add_option("--families", tc_families, "cluster families (.pckf)");
  tc->add_option("--out", tc_out, "output network (.pckn)")->required();
  tc->add_option("--loss", tc_loss, "nce | dr | wp | nce+dr | nce+wp");
  tc->add_option("--pivot", tc_pivot, "static | dynamic");
  tc->add_option("--m", tc_cfg.m, "compressed dimensionality");
  tc->add_option("--steps", tc_cfg.steps, "training steps");
  tc->add_option("--batch", tc_cfg.batch, "triplets per step");
  tc->add_option("--lr", tc_cfg.lr, "learning rate");
  tc->add_option("--seed", tc_cfg.seed, "training seed");
  tc->add_flag("--no-cl", tc_no_cl,
               "treat each value as one cluster (ablation)");
  tc->add_option("--trace-out", tc_trace_out, "loss trace CSV");
  tc->callback([&, tc] {
    begin_command(tc, state);
    pick(tc, "--loss", tc_loss, loss_mix_name(state.config.compact.loss),
         state);
    pick(tc, "--pivot", tc_pivot, pivot_mode_name(state.config.compact.pivot),
         state);
    pick(tc, "--m", tc_cfg.m, state.config.compact.m, state);
    pick(tc, "--steps", tc_cfg.steps, state.config.compact.steps, state);
    pick(tc, "--batch", tc_cfg.batch, state.config.compact.batch, state);
    pick(tc, "--lr", tc_cfg.lr, state.config.compact.lr, state);
    pick(tc, "--seed", tc_cfg.seed, state.config.compact.seed, state);
    if (state.config_loaded && tc->count("--no-cl") == 0) {
      tc_no_cl = !state.config.compact_clustered;
    }
    tc_cfg.loss = parse_loss_mix(tc_loss);
    tc_cfg.pivot = parse_pivot_mode(tc_pivot);

    const auto ds = Datastore::load(tc_store);
    ClusterFamilies families;
    if (tc_no_cl) {
      families = ClusterFamilies::one_cluster_per_value(ds);
    } else if (!tc_families.empty()) {
      families = ClusterFamilies::load(tc_families);
    } else {
      raise(ErrorCode::UsageError,
            "train-compact needs --families (or --no-cl)");
    }
    const auto result = train(ds, families, tc_cfg);
    save_network(result.net, tc_out);
    std::printf("trained %s (loss %s, pivot %s, %u steps); final loss %.4f\n",
                tc_out.c_str(), tc_loss.c_str(), tc_pivot.c_str(),
                tc_cfg.steps,
                result.trace.empty() ? 0.0f : result.trace.back());
    if (!tc_trace_out.empty()) {
      write_trace_csv(tc_trace_out, result.trace);
    }
  });

  // ---- compress ------------------------------------------------------
  auto* compress =
      app.add_subcommand("compress", "re-encode a datastore through f_alpha");
  add_config_flag(compress, state);
  std::string cp_store, cp_net, cp_out, cp_queries_in, cp_queries_out;
  compress->add_option("--store", cp_store, "input datastore")
      ->required()
      ->envname("KNNSTORE_STORE");
  compress->add_option("--net", cp_net, "compact network (.pckn)")->required();
  compress->add_option("--out", cp_out, "output datastore")->required();
  compress->add_option("--queries-in", cp_queries_in,
                       "also compress this query file");
  compress->add_option("--queries-out", cp_queries_out,
                       "where the compressed queries go");
  compress->callback([&, compress] {
    begin_command(compress, state);
    const auto ds = Datastore::load(cp_store);
    const auto net = load_network(cp_net);
    const auto out = compress_datastore(ds, net);
    out.save(cp_out);
    std::printf("compressed %zu records from dim %u to %u -> %s\n", out.size(),
                ds.dim(), out.dim(), cp_out.c_str());
    if (!cp_queries_in.empty()) {
      if (cp_queries_out.empty()) {
        raise(ErrorCode::UsageError, "--queries-in requires --queries-out");
      }
      const auto queries = compress_queries(
          read_queries_jsonl(cp_queries_in, net.input_dim()), net);
      write_queries_jsonl(cp_queries_out, queries);
      std::printf("compressed %zu queries -> %s\n", queries.size(),
                  cp_queries_out.c_str());
    }
  });

  // ---- cost ----------------------------------------------------------
  auto* cost = app.add_subcommand("cost", "fill translation costs");
  add_config_flag(cost, state);
  std::string cost_store, cost_out;
  std::uint32_t cost_n = 2;
  cost->add_option("--store", cost_store, "input datastore")
      ->required()
      ->envname("KNNSTORE_STORE");
  cost->add_option("--out", cost_out, "output datastore")->required();
  cost->add_option("--n", cost_n, "max n-gram length");
  cost->callback([&, cost] {
    begin_command(cost, state);
    pick(cost, "--n", cost_n, state.config.prune.n, state);
    const auto ds = Datastore::load(cost_store);
    const auto out = translation_cost(ds, cost_n);
    out.save(cost_out);
    std::printf("filled costs (n=%u) for %zu records -> %s\n", cost_n,
                out.size(), cost_out.c_str());
  });

  // ---- prune ---------------------------------------------------------
  auto* pr = app.add_subcommand("prune", "prune a datastore");
  add_config_flag(pr, state);
  std::string pr_store, pr_families, pr_out, pr_report_out;
  std::string pr_strategy = "cluster";
  PruneConfig pr_cfg;
  pr->add_option("--store", pr_store,
                 "input datastore (with costs for cluster)")
      ->required()
      ->envname("KNNSTORE_STORE");
  pr->add_option("--families", pr_families,
                 "cluster families (.pckf), needed by sp/rp");
  pr->add_option("--out", pr_out, "output datastore")->required();
  pr->add_option("--strategy", pr_strategy, "cluster | sp | ltp | htp | rp");
  pr->add_option("--rate", pr_cfg.rate, "fraction removed, [0,1)");
  pr->add_option("--epsilon", pr_cfg.epsilon, "cost-group threshold");
  pr->add_option("--seed", pr_cfg.seed, "sampling seed");
  pr->add_option("--report-out", pr_report_out, "prune report JSON");
  pr->callback([&, pr] {
    begin_command(pr, state);
    pick(pr, "--strategy", pr_strategy,
         strategy_name(state.config.prune.strategy), state);
    pick(pr, "--rate", pr_cfg.rate, state.config.prune.rate, state);
    pick(pr, "--epsilon", pr_cfg.epsilon, state.config.prune.epsilon, state);
    pick(pr, "--seed", pr_cfg.seed, state.config.prune.seed, state);
    pr_cfg.strategy = parse_strategy(pr_strategy);

    const auto ds = Datastore::load(pr_store);
    std::optional<ClusterFamilies> families;
    if (!pr_families.empty()) {
      families = ClusterFamilies::load(pr_families);
    }
    const auto out = prune(ds, families ? &*families : nullptr, pr_cfg);
    out.save(pr_out);
    const auto report = make_report(ds, out, pr_cfg);
    std::printf("%s pruned %llu -> %llu records (achieved rate %.4f) -> %s\n",
                pr_strategy.c_str(),
                static_cast<unsigned long long>(report.input_count),
                static_cast<unsigned long long>(report.output_count),
                report.achieved_rate, pr_out.c_str());
    if (!pr_report_out.empty()) {
      write_text(pr_report_out, report.to_json());
    }
  });

  // ---- train-metak ---------------------------------------------------
  auto* tm =
      app.add_subcommand("train-metak", "train the Meta-k fusion network");
  add_config_flag(tm, state);
  std::string tm_store, tm_queries, tm_out, tm_trace_out, tm_net;
  MetaKTrainConfig tm_cfg;
  tm->add_option("--store", tm_store, "datastore to retrieve from")
      ->required()
      ->envname("KNNSTORE_STORE");
  tm->add_option("--queries", tm_queries, "validation queries (.jsonl)")
      ->required();
  tm->add_option("--out", tm_out, "output network (.pckm)")->required();
  tm->add_option("--net", tm_net,
                 "compact network: compress query keys before retrieval");
  tm->add_option("--k", tm_cfg.k_max, "neighbor budget K (power of two)");
  tm->add_option("--hidden", tm_cfg.hidden, "hidden width");
  tm->add_option("--temperature", tm_cfg.temperature, "kernel temperature");
  tm->add_option("--steps", tm_cfg.steps, "training steps");
  tm->add_option("--batch", tm_cfg.batch, "queries per step");
  tm->add_option("--lr", tm_cfg.lr, "learning rate");
  tm->add_option("--seed", tm_cfg.seed, "training seed");
  tm->add_option("--workers", tm_cfg.workers, "precompute workers");
  tm->add_option("--trace-out", tm_trace_out, "loss trace CSV");
  tm->callback([&, tm] {
    begin_command(tm, state);
    pick(tm, "--k", tm_cfg.k_max, state.config.metak.k_max, state);
    pick(tm, "--hidden", tm_cfg.hidden, state.config.metak.hidden, state);
    pick(tm, "--temperature", tm_cfg.temperature,
         state.config.metak.temperature, state);
    pick(tm, "--steps", tm_cfg.steps, state.config.metak.steps, state);
    pick(tm, "--batch", tm_cfg.batch, state.config.metak.batch, state);
    pick(tm, "--lr", tm_cfg.lr, state.config.metak.lr, state);
    pick(tm, "--seed", tm_cfg.seed, state.config.metak.seed, state);
    pick(tm, "--workers", tm_cfg.workers, state.config.metak.workers, state);

    const auto ds = Datastore::load(tm_store);
    const auto queries = load_queries_for(tm_queries, ds, tm_net);
    const auto result = train_meta_k(ds, queries, tm_cfg);
    result.net.save(tm_out);
    std::printf(
        "trained meta-k (K=%u) on %zu queries; final loss %.4f -> %s\n",
        tm_cfg.k_max, queries.size(),
        result.trace.empty() ? 0.0 : result.trace.back(), tm_out.c_str());
    if (!tm_trace_out.empty()) {
      write_trace_csv(tm_trace_out, result.trace);
    }
  });

  // ---- query ---------------------------------------------------------
  auto* qr = app.add_subcommand("query", "run fused predictions over queries");
  add_config_flag(qr, state);
  std::string qr_store, qr_metak, qr_queries, qr_out, qr_net;
  double qr_temperature = 10.0;
  std::uint32_t qr_top = 8, qr_ivf_centroids = 0, qr_nprobe = 8;
  std::uint64_t qr_ivf_seed = 5;
  bool qr_dump_neighbors = false;
  qr->add_option("--store", qr_store, "datastore")
      ->required()
      ->envname("KNNSTORE_STORE");
  qr->add_option("--metak", qr_metak, "meta-k network (.pckm)")->required();
  qr->add_option("--queries", qr_queries, "queries (.jsonl)")->required();
  qr->add_option("--out", qr_out, "predictions (.jsonl)")->required();
  qr->add_option("--net", qr_net,
                 "compact network: compress query keys before retrieval");
  qr->add_option("--temperature", qr_temperature, "kernel temperature");
  qr->add_option("--top", qr_top, "top values per prediction");
  qr->add_flag("--dump-neighbors", qr_dump_neighbors,
               "include the neighbor list per prediction");
  qr->add_option("--ivf-centroids", qr_ivf_centroids,
                 "coarse index size (0 = flat scan)");
  qr->add_option("--nprobe", qr_nprobe, "lists probed per query");
  qr->add_option("--ivf-seed", qr_ivf_seed, "coarse index seed");
  qr->callback([&, qr] {
    begin_command(qr, state);
    pick(qr, "--temperature", qr_temperature, state.config.query.temperature,
         state);
    pick(qr, "--top", qr_top, state.config.query.top, state);
    pick(qr, "--ivf-centroids", qr_ivf_centroids,
         state.config.query.ivf_centroids, state);
    pick(qr, "--nprobe", qr_nprobe, state.config.query.nprobe, state);
    pick(qr, "--ivf-seed", qr_ivf_seed, state.config.query.ivf_seed, state);
    if (state.config_loaded && qr->count("--dump-neighbors") == 0) {
      qr_dump_neighbors = state.config.query.dump_neighbors;
    }

    const auto ds = Datastore::load(qr_store);
    const auto metak = MetaKNet::load(qr_metak);
    const auto queries = load_queries_for(qr_queries, ds, qr_net);
    std::optional<IvfIndex> ivf;
    if (qr_ivf_centroids > 0) {
      ivf = IvfIndex::build(ds, qr_ivf_centroids, qr_ivf_seed);
    }
    const std::vector<double> uniform(ds.vocab(), 1.0 / ds.vocab());

    std::ofstream out(qr_out, std::ios::trunc);
    if (!out) {
      raise(ErrorCode::IoError, "cannot open for writing: " + qr_out);
    }
    for (const auto& query : queries) {
      const auto neighbors =
          ivf ? ivf->search(query.key, metak.k_max(),
                            std::min(qr_nprobe, ivf->n_centroids()))
              : knn_flat(ds, query.key, metak.k_max());
      const auto weights = meta_k_forward(metak, neighbors);
      const auto base = query.base_dist.empty()
                            ? std::span<const double>(uniform)
                            : std::span<const double>(query.base_dist);
      const auto fused =
          fuse(weights, neighbors, base, qr_temperature, ds.vocab());

      std::vector<std::uint32_t> order(ds.vocab());
      std::iota(order.begin(), order.end(), 0u);
      const auto take = std::min<std::size_t>(qr_top, order.size());
      std::partial_sort(order.begin(), order.begin() + take, order.end(),
                        [&](std::uint32_t a, std::uint32_t b) {
                          if (fused.distribution[a] != fused.distribution[b]) {
                            return fused.distribution[a] >
                                   fused.distribution[b];
                          }
                          return a < b;
                        });
      nlohmann::json j;
      auto& top = j["top"];
      top = nlohmann::json::array();
      for (std::size_t i = 0; i < take; ++i) {
        top.push_back(
            {{"value", order[i]}, {"p", fused.distribution[order[i]]}});
      }
      j["metak_weights"] = fused.weights;
      if (qr_dump_neighbors) {
        auto& dump = j["neighbors"];
        dump = nlohmann::json::array();
        for (const auto& n : neighbors) {
          dump.push_back({{"index", n.index},
                          {"value", n.value},
                          {"squared_l2", n.squared_l2}});
        }
      }
      out << j.dump() << '\n';
    }
    std::printf("wrote %zu predictions to %s\n", queries.size(),
                qr_out.c_str());
  });

  // ---- eval ----------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "retrieval + fusion quality report");
  add_config_flag(ev, state);
  std::string ev_store, ev_metak, ev_queries, ev_out, ev_net;
  double ev_temperature = 10.0;
  std::size_t ev_workers = 0;
  std::uint32_t ev_ivf_centroids = 0, ev_nprobe = 8;
  std::uint64_t ev_ivf_seed = 5;
  ev->add_option("--store", ev_store, "datastore")
      ->required()
      ->envname("KNNSTORE_STORE");
  ev->add_option("--metak", ev_metak, "meta-k network (.pckm)")->required();
  ev->add_option("--queries", ev_queries, "gold-labelled queries (.jsonl)")
      ->required();
  ev->add_option("--net", ev_net,
                 "compact network: compress query keys before retrieval");
  ev->add_option("--out", ev_out, "also write the report JSON here");
  ev->add_option("--temperature", ev_temperature, "kernel temperature");
  ev->add_option("--workers", ev_workers, "query worker pool size");
  ev->add_option("--ivf-centroids", ev_ivf_centroids,
                 "coarse index size (0 = flat scan)");
  ev->add_option("--nprobe", ev_nprobe, "lists probed per query");
  ev->add_option("--ivf-seed", ev_ivf_seed, "coarse index seed");
  ev->callback([&, ev] {
    begin_command(ev, state);
    pick(ev, "--temperature", ev_temperature, state.config.query.temperature,
         state);
    pick(ev, "--workers", ev_workers, state.config.query.workers, state);
    pick(ev, "--ivf-centroids", ev_ivf_centroids,
         state.config.query.ivf_centroids, state);
    pick(ev, "--nprobe", ev_nprobe, state.config.query.nprobe, state);
    pick(ev, "--ivf-seed", ev_ivf_seed, state.config.query.ivf_seed, state);

    const auto ds = Datastore::load(ev_store);
    const auto metak = MetaKNet::load(ev_metak);
    const auto queries = load_queries_for(ev_queries, ds, ev_net);
    std::optional<IvfIndex> ivf;
    EvalOptions options;
    options.workers = ev_workers;
    if (ev_ivf_centroids > 0) {
      ivf = IvfIndex::build(ds, ev_ivf_centroids, ev_ivf_seed);
      options.ivf = &*ivf;
      options.nprobe = std::min(ev_nprobe, ivf->n_centroids());
    }
    const auto report = evaluate(ds, queries, metak, ev_temperature, options);
    const auto json = report.to_json();
    std::printf("%s\n", json.c_str());
    if (!ev_out.empty()) {
      write_text(ev_out, json);
    }
  });

  // ---- bench ---------------------------------------------------------
  auto* bn = app.add_subcommand("bench", "flat-scan latency benchmark");
  add_config_flag(bn, state);
  std::vector<std::string> bn_stores;
  std::string bn_queries, bn_csv_out;
  BenchConfig bn_cfg;
  bn->add_option("--store", bn_stores, "datastore (repeatable)")->required();
  bn->add_option("--queries", bn_queries, "queries (.jsonl)")->required();
  bn->add_option("--k", bn_cfg.k, "neighbors per query");
  bn->add_option("--repeats", bn_cfg.repeats, "timed passes");
  bn->add_option("--workers", bn_cfg.workers, "query worker pool size");
  bn->add_option("--csv-out", bn_csv_out, "write rows as CSV");
  bn->callback([&, bn] {
    begin_command(bn, state);
    pick(bn, "--k", bn_cfg.k, state.config.bench.k, state);
    pick(bn, "--repeats", bn_cfg.repeats, state.config.bench.repeats, state);
    pick(bn, "--workers", bn_cfg.workers, state.config.bench.workers, state);
    if (bn_cfg.repeats == 0) {
      raise(ErrorCode::UsageError, "repeats must be positive");
    }

    std::vector<Datastore> stores;
    stores.reserve(bn_stores.size());
    for (const auto& path : bn_stores) {
      stores.push_back(Datastore::load(path));
    }
    std::vector<const Datastore*> ptrs;
    for (const auto& ds : stores) {
      ptrs.push_back(&ds);
    }
    const auto queries = read_queries_jsonl(bn_queries, stores.front().dim());
    const auto rows = bench(ptrs, bn_stores, queries, bn_cfg);
    std::fputs(bench_table(rows).c_str(), stdout);
    if (!bn_csv_out.empty()) {
      write_text(bn_csv_out, bench_csv(rows));
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: UsageError: %s\n", e.what());
    std::fprintf(stderr, "%s", app.help().c_str());
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const knnstore::Error& e) {
    std::fprintf(stderr, "error: %s: %s\n",
                 knnstore::error_code_name(e.code()), e.what());
    return e.code() == knnstore::ErrorCode::UsageError ? 2 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
