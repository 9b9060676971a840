#include "knnstore/config.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "knnstore/error.hpp"

namespace knnstore {

namespace {

using nlohmann::json;

// Strict object reader: every key must be consumed by a field spec.
class Section {
 public:
  Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) {
      raise(ErrorCode::InvalidConfig, path_ + " must be a JSON object");
    }
  }

  template <typename T>
  void field(const char* name, T& target) {
    auto it = obj_.find(name);
    if (it == obj_.end()) {
      return;  // keep default
    }
    consumed_.push_back(name);
    try {
      target = it->get<T>();
    } catch (const json::exception& e) {
      raise(ErrorCode::InvalidConfig,
            path_ + "." + name + ": " + e.what());
    }
  }

  const json* subsection(const char* name) {
    auto it = obj_.find(name);
    if (it == obj_.end()) {
      return nullptr;
    }
    consumed_.push_back(name);
    return &*it;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      bool known = false;
      for (const auto& k : consumed_) {
        if (k == it.key()) {
          known = true;
          break;
        }
      }
      if (!known) {
        raise(ErrorCode::InvalidConfig,
              "unknown field " + path_ + "." + it.key());
      }
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::vector<std::string> consumed_;
};

}  // namespace

const char* loss_mix_name(LossMix mix) {
  switch (mix) {
    case LossMix::Nce: return "nce";
    case LossMix::Dr: return "dr";
    case LossMix::Wp: return "wp";
    case LossMix::NceDr: return "nce+dr";
    case LossMix::NceWp: return "nce+wp";
  }
  return "unknown";
}

LossMix parse_loss_mix(const std::string& name) {
  if (name == "nce") return LossMix::Nce;
  if (name == "dr") return LossMix::Dr;
  if (name == "wp") return LossMix::Wp;
  if (name == "nce+dr") return LossMix::NceDr;
  if (name == "nce+wp") return LossMix::NceWp;
  raise(ErrorCode::InvalidConfig,
        "loss must be one of nce, dr, wp, nce+dr, nce+wp (got " + name + ")");
}

const char* pivot_mode_name(PivotMode mode) {
  return mode == PivotMode::Static ? "static" : "dynamic";
}

PivotMode parse_pivot_mode(const std::string& name) {
  if (name == "static") return PivotMode::Static;
  if (name == "dynamic") return PivotMode::Dynamic;
  raise(ErrorCode::InvalidConfig,
        "pivot must be static or dynamic (got " + name + ")");
}

std::string PipelineConfig::to_json() const {
  json j;
  j["version"] = kSchemaVersion;
  j["gen"] = {{"vocab", gen.vocab},
              {"dim", gen.dim},
              {"clusters_per_value", gen.clusters_per_value},
              {"points_per_cluster", gen.points_per_cluster},
              {"intra_spread", gen.intra_spread},
              {"family_overlap", gen.family_overlap},
              {"seed", gen.seed},
              {"queries", gen_queries}};
  j["cluster"] = {{"eps", cluster.eps},
                  {"min_pts", cluster.min_pts},
                  {"workers", cluster.workers}};
  j["compact"] = {{"loss", loss_mix_name(compact.loss)},
                  {"pivot", pivot_mode_name(compact.pivot)},
                  {"m", compact.m},
                  {"steps", compact.steps},
                  {"batch", compact.batch},
                  {"lr", compact.lr},
                  {"seed", compact.seed},
                  {"clustered", compact_clustered}};
  j["prune"] = {{"rate", prune.rate},
                {"epsilon", prune.epsilon},
                {"n", prune.n},
                {"strategy", strategy_name(prune.strategy)},
                {"seed", prune.seed}};
  j["metak"] = {{"k", metak.k_max},
                {"hidden", metak.hidden},
                {"temperature", metak.temperature},
                {"steps", metak.steps},
                {"batch", metak.batch},
                {"lr", metak.lr},
                {"seed", metak.seed},
                {"workers", metak.workers}};
  j["query"] = {{"temperature", query.temperature},
                {"top", query.top},
                {"dump_neighbors", query.dump_neighbors},
                {"ivf_centroids", query.ivf_centroids},
                {"nprobe", query.nprobe},
                {"ivf_seed", query.ivf_seed},
                {"workers", query.workers}};
  j["bench"] = {{"k", bench.k},
                {"repeats", bench.repeats},
                {"workers", bench.workers}};
  return j.dump(2);
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::InvalidConfig, std::string("config parse: ") + e.what());
  }

  PipelineConfig cfg;
  Section top(root, "config");
  std::uint32_t version = kSchemaVersion;
  top.field("version", version);
  if (version != kSchemaVersion) {
    raise(ErrorCode::VersionMismatch,
          "config schema version " + std::to_string(version) +
              " unsupported (expected " + std::to_string(kSchemaVersion) + ")");
  }

  if (const json* sub = top.subsection("gen")) {
    Section s(*sub, "gen");
    s.field("vocab", cfg.gen.vocab);
    s.field("dim", cfg.gen.dim);
    s.field("clusters_per_value", cfg.gen.clusters_per_value);
    s.field("points_per_cluster", cfg.gen.points_per_cluster);
    s.field("intra_spread", cfg.gen.intra_spread);
    s.field("family_overlap", cfg.gen.family_overlap);
    s.field("seed", cfg.gen.seed);
    s.field("queries", cfg.gen_queries);
    s.finish();
  }
  if (const json* sub = top.subsection("cluster")) {
    Section s(*sub, "cluster");
    s.field("eps", cfg.cluster.eps);
    s.field("min_pts", cfg.cluster.min_pts);
    s.field("workers", cfg.cluster.workers);
    s.finish();
  }
  if (const json* sub = top.subsection("compact")) {
    Section s(*sub, "compact");
    std::string loss = loss_mix_name(cfg.compact.loss);
    std::string pivot = pivot_mode_name(cfg.compact.pivot);
    s.field("loss", loss);
    s.field("pivot", pivot);
    cfg.compact.loss = parse_loss_mix(loss);
    cfg.compact.pivot = parse_pivot_mode(pivot);
    s.field("m", cfg.compact.m);
    s.field("steps", cfg.compact.steps);
    s.field("batch", cfg.compact.batch);
    s.field("lr", cfg.compact.lr);
    s.field("seed", cfg.compact.seed);
    s.field("clustered", cfg.compact_clustered);
    s.finish();
  }
  if (const json* sub = top.subsection("prune")) {
    Section s(*sub, "prune");
    std::string strategy = strategy_name(cfg.prune.strategy);
    s.field("strategy", strategy);
    cfg.prune.strategy = parse_strategy(strategy);
    s.field("rate", cfg.prune.rate);
    s.field("epsilon", cfg.prune.epsilon);
    s.field("n", cfg.prune.n);
    s.field("seed", cfg.prune.seed);
    s.finish();
  }
  if (const json* sub = top.subsection("metak")) {
    Section s(*sub, "metak");
    s.field("k", cfg.metak.k_max);
    s.field("hidden", cfg.metak.hidden);
    s.field("temperature", cfg.metak.temperature);
    s.field("steps", cfg.metak.steps);
    s.field("batch", cfg.metak.batch);
    s.field("lr", cfg.metak.lr);
    s.field("seed", cfg.metak.seed);
    s.field("workers", cfg.metak.workers);
    s.finish();
  }
  if (const json* sub = top.subsection("query")) {
    Section s(*sub, "query");
    s.field("temperature", cfg.query.temperature);
    s.field("top", cfg.query.top);
    s.field("dump_neighbors", cfg.query.dump_neighbors);
    s.field("ivf_centroids", cfg.query.ivf_centroids);
    s.field("nprobe", cfg.query.nprobe);
    s.field("ivf_seed", cfg.query.ivf_seed);
    s.field("workers", cfg.query.workers);
    s.finish();
  }
  if (const json* sub = top.subsection("bench")) {
    Section s(*sub, "bench");
    s.field("k", cfg.bench.k);
    s.field("repeats", cfg.bench.repeats);
    s.field("workers", cfg.bench.workers);
    s.finish();
  }
  top.finish();
  return cfg;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    raise(ErrorCode::IoError, "cannot open config: " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return from_json(buffer.str());
}

void PipelineConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    raise(ErrorCode::IoError, "cannot open for writing: " + path.string());
  }
  out << to_json() << '\n';
  if (!out) {
    raise(ErrorCode::IoError, "write failed: " + path.string());
  }
}

}  // namespace knnstore
