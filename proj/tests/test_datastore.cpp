#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "knnstore/datastore.hpp"
#include "knnstore/error.hpp"
#include "knnstore/synth.hpp"
#include "support/oracles.hpp"
#include "support/test_util.hpp"

using namespace knnstore;
using testutil::TempDir;

namespace {

Record make_record(std::vector<float> key, std::uint32_t value, float prob,
                   std::uint32_t sid, std::uint32_t pos) {
  Record r;
  r.key = std::move(key);
  r.value = value;
  r.prob = prob;
  r.sentence_id = sid;
  r.position = pos;
  return r;
}

#define CHECK_ERROR_CODE(expr, expected)          \
  do {                                            \
    try {                                         \
      (void)(expr);                               \
      FAIL("expected " #expected);                \
    } catch (const Error& e) {                    \
      CHECK(e.code() == ErrorCode::expected);     \
    }                                             \
  } while (0)

}  // namespace

TEST_CASE("build echoes valid input") {
  std::vector<Record> records{
      make_record({1, 2, 3, 4}, 0, 0.5f, 0, 0),
      make_record({5, 6, 7, 8}, 3, 0.9f, 0, 1),
      make_record({0, 0, 1, 0}, 9, 1.0f, 1, 0),
  };
  const auto ds = Datastore::build(records, 4, 10);
  CHECK(ds.dim() == 4);
  CHECK(ds.vocab() == 10);
  CHECK(ds.size() == 3);
  CHECK(ds.record(1) == records[1]);
  CHECK_FALSE(ds.has_costs());
}

TEST_CASE("build rejects invariant violations") {
  std::vector<Record> ok{make_record({1, 2, 3, 4}, 0, 0.5f, 0, 0)};

  SUBCASE("prob 0.0 is outside (0,1]") {
    ok[0].prob = 0.0f;
    CHECK_ERROR_CODE(Datastore::build(ok, 4, 10), ProbOutOfRange);
  }
  SUBCASE("prob above 1") {
    ok[0].prob = 1.5f;
    CHECK_ERROR_CODE(Datastore::build(ok, 4, 10), ProbOutOfRange);
  }
  SUBCASE("mixed dims") {
    ok.push_back(make_record({1, 2, 3, 4, 5}, 1, 0.5f, 0, 1));
    CHECK_ERROR_CODE(Datastore::build(ok, 4, 10), DimensionMismatch);
  }
  SUBCASE("empty input") {
    CHECK_ERROR_CODE(Datastore::build({}, 4, 10), EmptyInput);
  }
  SUBCASE("value out of vocab") {
    ok[0].value = 10;
    CHECK_ERROR_CODE(Datastore::build(ok, 4, 10), ValueOutOfVocab);
  }
  SUBCASE("non-finite key") {
    ok[0].key[2] = std::numeric_limits<float>::infinity();
    CHECK_ERROR_CODE(Datastore::build(ok, 4, 10), InvalidParam);
  }
  SUBCASE("cost below 1") {
    ok[0].cost = 0.5f;
    CHECK_ERROR_CODE(Datastore::build(ok, 4, 10), InvalidParam);
  }
  SUBCASE("duplicate sentence position") {
    ok.push_back(make_record({9, 9, 9, 9}, 1, 0.5f, 0, 0));
    CHECK_ERROR_CODE(Datastore::build(ok, 4, 10), InvalidParam);
  }
  SUBCASE("cost uniformity") {
    ok[0].cost = 2.0f;
    ok.push_back(make_record({9, 9, 9, 9}, 1, 0.5f, 0, 1));
    CHECK_ERROR_CODE(Datastore::build(ok, 4, 10), InvalidParam);
  }
}

TEST_CASE("save/load round trip is byte exact") {
  TempDir dir("roundtrip");
  const auto ds = testutil::random_store(1000, 16, 32, 42);
  const auto path = dir.file("store.pckd");
  ds.save(path);
  const auto loaded = Datastore::load(path);
  CHECK(loaded == ds);

  SUBCASE("with costs attached") {
    std::vector<float> costs(ds.size());
    for (std::size_t i = 0; i < costs.size(); ++i) {
      costs[i] = 1.0f + static_cast<float>(i % 7);
    }
    const auto with = ds.with_costs(costs);
    const auto cpath = dir.file("with_costs.pckd");
    with.save(cpath);
    const auto cloaded = Datastore::load(cpath);
    CHECK(cloaded == with);
    CHECK(cloaded.has_costs());
    CHECK(cloaded.cost(5) == with.cost(5));
    // Re-saving reproduces the identical file.
    const auto cpath2 = dir.file("with_costs2.pckd");
    cloaded.save(cpath2);
    CHECK(testutil::read_bytes(cpath) == testutil::read_bytes(cpath2));
  }
}

TEST_CASE("load rejects corrupt files") {
  TempDir dir("corrupt");
  const auto ds = testutil::random_store(10, 4, 8, 7);
  const auto path = dir.file("store.pckd");
  ds.save(path);
  auto bytes = testutil::read_bytes(path);

  SUBCASE("wrong magic") {
    bytes[0] = 'X';
    testutil::write_bytes(dir.file("bad.pckd"), bytes);
    CHECK_ERROR_CODE(Datastore::load(dir.file("bad.pckd")), BadMagic);
  }
  SUBCASE("unsupported version") {
    bytes[4] = 99;
    testutil::write_bytes(dir.file("vers.pckd"), bytes);
    CHECK_ERROR_CODE(Datastore::load(dir.file("vers.pckd")), VersionMismatch);
  }
  SUBCASE("truncated mid-record") {
    bytes.resize(bytes.size() - 13);
    testutil::write_bytes(dir.file("trunc.pckd"), bytes);
    CHECK_ERROR_CODE(Datastore::load(dir.file("trunc.pckd")), TruncatedFile);
  }
  SUBCASE("trailing garbage") {
    bytes.push_back('z');
    testutil::write_bytes(dir.file("trail.pckd"), bytes);
    CHECK_ERROR_CODE(Datastore::load(dir.file("trail.pckd")), TruncatedFile);
  }
  SUBCASE("missing file") {
    CHECK_ERROR_CODE(Datastore::load(dir.file("nope.pckd")), IoError);
  }
}

TEST_CASE("subset preserves bytes and order") {
  const auto ds = testutil::random_store(100, 8, 16, 3);
  std::vector<std::uint32_t> pick{3, 17, 17, 50};
  CHECK_ERROR_CODE(ds.subset(pick), InvalidParam);  // not strictly increasing
  pick = {3, 17, 50, 99};
  const auto sub = ds.subset(pick);
  CHECK(sub.size() == 4);
  for (std::size_t i = 0; i < pick.size(); ++i) {
    CHECK(sub.record(i) == ds.record(pick[i]));
  }
}

TEST_CASE("jsonl import") {
  TempDir dir("jsonl");

  SUBCASE("two valid lines") {
    std::ofstream out(dir.file("ok.jsonl"));
    out << R"({"key": [1.0, 2.0], "value": 1, "prob": 0.5, "sentence_id": 0, "position": 0})" << "\n";
    out << R"({"key": [3.0, 4.0], "value": 0, "prob": 0.25, "sentence_id": 0, "position": 1})" << "\n";
    out.close();
    const auto ds = Datastore::import_jsonl(dir.file("ok.jsonl"), 2, 4);
    CHECK(ds.size() == 2);
    CHECK(ds.value(0) == 1);
    CHECK(ds.prob(1) == 0.25f);
  }
  SUBCASE("missing prob reports the line") {
    std::ofstream out(dir.file("missing.jsonl"));
    out << R"({"key": [1.0, 2.0], "value": 1, "prob": 0.5, "sentence_id": 0, "position": 0})" << "\n";
    out << R"({"key": [3.0, 4.0], "value": 0, "sentence_id": 0, "position": 1})" << "\n";
    out.close();
    try {
      Datastore::import_jsonl(dir.file("missing.jsonl"), 2, 4);
      FAIL("expected ParseError");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ParseError);
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
  SUBCASE("key length mismatch") {
    std::ofstream out(dir.file("dim.jsonl"));
    out << R"({"key": [1.0, 2.0, 3.0], "value": 1, "prob": 0.5, "sentence_id": 0, "position": 0})" << "\n";
    out.close();
    CHECK_ERROR_CODE(Datastore::import_jsonl(dir.file("dim.jsonl"), 2, 4),
                     DimensionMismatch);
  }
  SUBCASE("unparsable json") {
    std::ofstream out(dir.file("bad.jsonl"));
    out << "{nope\n";
    out.close();
    CHECK_ERROR_CODE(Datastore::import_jsonl(dir.file("bad.jsonl"), 2, 4),
                     ParseError);
  }
}

TEST_CASE("generator: zero overlap basics") {
  SynthConfig cfg;
  cfg.vocab = 2;
  cfg.dim = 8;
  cfg.clusters_per_value = 1;
  cfg.points_per_cluster = 10;
  cfg.family_overlap = 0.0f;
  cfg.seed = 11;

  const auto records = synth_generate(cfg);
  CHECK(records.size() == 20);
  const auto ds = Datastore::build(records, cfg.dim, cfg.vocab);

  // Two well-separated blobs: every record's nearest neighbor shares its value.
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = i;
    for (std::size_t j = 0; j < ds.size(); ++j) {
      if (j == i) continue;
      double acc = 0;
      for (std::uint32_t c = 0; c < cfg.dim; ++c) {
        const double d = double(ds.key(i)[c]) - ds.key(j)[c];
        acc += d * d;
      }
      if (acc < best) {
        best = acc;
        best_j = j;
      }
    }
    hits += ds.value(best_j) == ds.value(i);
  }
  CHECK(hits == ds.size());
}

TEST_CASE("generator: determinism") {
  SynthConfig cfg;
  cfg.vocab = 4;
  cfg.dim = 16;
  cfg.clusters_per_value = 2;
  cfg.points_per_cluster = 25;
  cfg.family_overlap = 0.5f;
  cfg.seed = 99;

  TempDir dir("gendet");
  const auto a = synth_generate(cfg);
  const auto b = synth_generate(cfg);
  CHECK(a == b);
  // Byte-identical serialized artifacts.
  Datastore::build(a, cfg.dim, cfg.vocab).save(dir.file("a.pckd"));
  Datastore::build(b, cfg.dim, cfg.vocab).save(dir.file("b.pckd"));
  CHECK(testutil::read_bytes(dir.file("a.pckd")) ==
        testutil::read_bytes(dir.file("b.pckd")));

  const auto qa = synth_queries(cfg, 50);
  const auto qb = synth_queries(cfg, 50);
  CHECK(qa == qb);
}

TEST_CASE("generator: sentences are contiguous and probs in range") {
  SynthConfig cfg;
  cfg.vocab = 3;
  cfg.dim = 4;
  cfg.clusters_per_value = 2;
  cfg.points_per_cluster = 13;  // deliberately not a multiple of 16
  cfg.seed = 5;
  const auto records = synth_generate(cfg);

  std::map<std::uint32_t, std::vector<std::uint32_t>> sentences;
  for (const auto& r : records) {
    CHECK(r.prob > 0.0f);
    CHECK(r.prob <= 1.0f);
    sentences[r.sentence_id].push_back(r.position);
  }
  for (auto& [sid, positions] : sentences) {
    std::sort(positions.begin(), positions.end());
    for (std::size_t p = 0; p < positions.size(); ++p) {
      CHECK(positions[p] == p);
    }
  }
}

TEST_CASE("generator: invalid configs") {
  SynthConfig cfg;
  cfg.vocab = 0;
  CHECK_ERROR_CODE(synth_generate(cfg), InvalidConfig);
  cfg = {};
  cfg.family_overlap = 1.5f;
  CHECK_ERROR_CODE(synth_generate(cfg), InvalidConfig);
  cfg = {};
  cfg.vocab = 65;
  cfg.dim = 64;
  CHECK_ERROR_CODE(synth_generate(cfg), InvalidConfig);
  cfg = {};
  cfg.intra_spread = 0.0f;
  CHECK_ERROR_CODE(synth_generate(cfg), InvalidConfig);
}

// Generator acceptance gate: on a high-overlap store raw 1-NN retrieval must
// degrade while an oracle linear probe on the hidden directions stays sharp.
TEST_CASE("generator: overlap pathology with recoverable hidden signal") {
  SynthConfig cfg;
  cfg.vocab = 8;
  cfg.dim = 32;
  cfg.clusters_per_value = 2;
  cfg.points_per_cluster = 150;
  cfg.family_overlap = 0.9f;
  cfg.intra_spread = 1.0f;
  cfg.seed = 2024;

  const auto ds = Datastore::build(synth_generate(cfg), cfg.dim, cfg.vocab);
  const auto queries = synth_queries(cfg, 400);
  const auto model = synth_model(cfg);

  std::size_t nn_hits = 0;
  for (const auto& q : queries) {
    const auto top = oracles::knn_full_sort(ds, q.key, 1);
    nn_hits += top[0].value == *q.gold;
  }
  const double nn_recall = double(nn_hits) / queries.size();

  // Probe trained on hidden-direction projections of the store records.
  auto project = [&](std::span<const float> key) {
    std::vector<double> z(cfg.vocab);
    for (std::uint32_t v = 0; v < cfg.vocab; ++v) {
      const auto dir = model.hidden_dir(v);
      double dot = 0.0;
      for (std::uint32_t j = 0; j < cfg.dim; ++j) {
        dot += double(key[j]) * dir[j];
      }
      z[v] = dot;
    }
    return z;
  };
  std::vector<std::vector<double>> rows;
  std::vector<std::uint32_t> labels;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    rows.push_back(project(ds.key(i)));
    labels.push_back(ds.value(i));
  }
  oracles::LinearProbe probe;
  probe.fit(rows, labels, cfg.vocab);
  std::size_t probe_hits = 0;
  for (const auto& q : queries) {
    probe_hits += probe.predict(project(q.key)) == *q.gold;
  }
  const double probe_acc = double(probe_hits) / queries.size();

  INFO("1-NN recall = ", nn_recall, ", probe accuracy = ", probe_acc);
  CHECK(nn_recall < 0.8);
  CHECK(probe_acc > 0.95);
}
