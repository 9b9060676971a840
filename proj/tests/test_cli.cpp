#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "knnstore/config.hpp"
#include "knnstore/error.hpp"
#include "knnstore/eval.hpp"
#include "knnstore/metak.hpp"
#include "knnstore/synth.hpp"
#include "support/test_util.hpp"

using namespace knnstore;
using testutil::TempDir;

TEST_CASE("pipeline config round trip") {
  PipelineConfig cfg;
  cfg.gen.vocab = 12;
  cfg.gen.family_overlap = 0.65f;
  cfg.compact.loss = LossMix::NceDr;
  cfg.compact.pivot = PivotMode::Dynamic;
  cfg.compact_clustered = false;
  cfg.prune.strategy = PruneStrategy::Htp;
  cfg.prune.rate = 0.15;
  cfg.metak.k_max = 8;
  cfg.query.dump_neighbors = true;
  cfg.bench.repeats = 9;

  const auto text = cfg.to_json();
  const auto back = PipelineConfig::from_json(text);
  CHECK(back.gen.vocab == 12);
  CHECK(back.gen.family_overlap == doctest::Approx(0.65f));
  CHECK(back.compact.loss == LossMix::NceDr);
  CHECK(back.compact.pivot == PivotMode::Dynamic);
  CHECK(back.compact_clustered == false);
  CHECK(back.prune.strategy == PruneStrategy::Htp);
  CHECK(back.prune.rate == doctest::Approx(0.15));
  CHECK(back.metak.k_max == 8);
  CHECK(back.query.dump_neighbors == true);
  CHECK(back.bench.repeats == 9);
  // Serialize -> parse -> serialize is a fixed point.
  CHECK(back.to_json() == text);

  SUBCASE("file round trip") {
    TempDir dir("config");
    cfg.save(dir.file("c.json"));
    const auto loaded = PipelineConfig::load(dir.file("c.json"));
    CHECK(loaded.to_json() == text);
  }
}

TEST_CASE("pipeline config rejects unknown fields and bad values") {
  CHECK_THROWS_AS(
      (void)PipelineConfig::from_json(R"({"gen": {"vocabx": 3}})"), Error);
  CHECK_THROWS_AS(
      (void)PipelineConfig::from_json(R"({"nonsense": {}})"), Error);
  CHECK_THROWS_AS((void)PipelineConfig::from_json(R"({"version": 99})"),
                  Error);
  CHECK_THROWS_AS(
      (void)PipelineConfig::from_json(R"({"compact": {"loss": "mse"}})"),
      Error);
  CHECK_THROWS_AS(
      (void)PipelineConfig::from_json(R"({"prune": {"strategy": "best"}})"),
      Error);
  CHECK_THROWS_AS((void)PipelineConfig::from_json("not json"), Error);
  // Defaults survive an empty object.
  const auto cfg = PipelineConfig::from_json("{}");
  CHECK(cfg.compact.m == 64);
  CHECK(cfg.compact.steps == 20000);
  CHECK(cfg.metak.k_max == 16);
}

namespace {

// Store plus queries whose gold always equals the nearest neighbor's value.
struct EvalFixture {
  Datastore ds;
  std::vector<LabeledQuery> queries;
  MetaKNet metak;

  EvalFixture()
      : ds(Datastore::build(synth_generate(config()), 16, 4)),
        queries(synth_queries(config(), 150)),
        metak(16, 8) {}

  static SynthConfig config() {
    SynthConfig cfg;
    cfg.vocab = 4;
    cfg.dim = 16;
    cfg.clusters_per_value = 1;
    cfg.points_per_cluster = 60;
    cfg.family_overlap = 0.0f;
    cfg.seed = 41;
    return cfg;
  }
};

}  // namespace

TEST_CASE("evaluate: recall and fusion on a clean store") {
  EvalFixture f;
  const auto report = evaluate(f.ds, f.queries, f.metak, 10.0);

  // Zero-overlap store: the nearest neighbor is the gold value.
  CHECK(report.recall_at[0] == doctest::Approx(1.0));
  // Monotone in k.
  CHECK(report.recall_at[1] >= report.recall_at[0] - 1e-12);
  CHECK(report.recall_at[2] >= report.recall_at[1] - 1e-12);
  CHECK(report.recall_at[3] >= report.recall_at[2] - 1e-12);
  CHECK(report.store_count == f.ds.size());
  CHECK(report.mean_latency_us > 0.0);
  CHECK(report.queries_per_second > 0.0);

  const auto json = report.to_json();
  CHECK(json.find("recall_at_1") != std::string::npos);
  CHECK(json.find("fused_top1_accuracy") != std::string::npos);
  CHECK(json.find("mean_fused_nll") != std::string::npos);

  SUBCASE("worker pool changes nothing about the metrics") {
    EvalOptions options;
    options.workers = 2;
    const auto parallel = evaluate(f.ds, f.queries, f.metak, 10.0, options);
    for (int k = 0; k < 4; ++k) {
      CHECK(parallel.recall_at[k] == report.recall_at[k]);
    }
    CHECK(parallel.fused_top1_accuracy == report.fused_top1_accuracy);
    CHECK(parallel.mean_fused_nll ==
          doctest::Approx(report.mean_fused_nll).epsilon(1e-12));
  }
  SUBCASE("ivf-backed evaluation stays consistent on full probing") {
    const auto index = IvfIndex::build(f.ds, 8, 3);
    EvalOptions options;
    options.ivf = &index;
    options.nprobe = 8;
    const auto via_ivf = evaluate(f.ds, f.queries, f.metak, 10.0, options);
    for (int k = 0; k < 4; ++k) {
      CHECK(via_ivf.recall_at[k] == report.recall_at[k]);
    }
  }
}

TEST_CASE("evaluate: error paths") {
  EvalFixture f;
  SUBCASE("empty queries") {
    CHECK_THROWS_AS((void)evaluate(f.ds, {}, f.metak, 10.0), Error);
  }
  SUBCASE("gold required") {
    auto queries = f.queries;
    queries[7].gold.reset();
    try {
      (void)evaluate(f.ds, queries, f.metak, 10.0);
      FAIL("expected MissingGold");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MissingGold);
    }
  }
  SUBCASE("store smaller than the evaluation k") {
    const auto tiny = testutil::random_store(10, 16, 4, 1);
    CHECK_THROWS_AS((void)evaluate(tiny, f.queries, f.metak, 10.0), Error);
  }
}

TEST_CASE("bench: contracts and measurement sanity") {
  EvalFixture f;
  BenchConfig cfg;
  cfg.k = 8;
  cfg.repeats = 5;

  SUBCASE("repeats must be positive") {
    cfg.repeats = 0;
    try {
      (void)bench({&f.ds}, {"a"}, f.queries, cfg);
      FAIL("expected UsageError");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::UsageError);
    }
  }
  SUBCASE("label count must match") {
    CHECK_THROWS_AS((void)bench({&f.ds}, {"a", "b"}, f.queries, cfg), Error);
  }
  SUBCASE("identical stores run at comparable speed") {
    const auto copy = f.ds;
    const auto rows = bench({&f.ds, &copy}, {"a", "b"}, f.queries, cfg);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].count == rows[1].count);
    CHECK(rows[0].median_us > 0.0);
    // Same content, same work; generous tolerance because timing on shared
    // hardware wobbles.
    const double ratio =
        rows[0].queries_per_second / rows[1].queries_per_second;
    CHECK(ratio > 0.6);
    CHECK(ratio < 1.67);
    const auto csv = bench_csv(rows);
    CHECK(csv.find("median_us") != std::string::npos);
    CHECK(bench_table(rows).find("a") != std::string::npos);
  }
}
