#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "knnstore/error.hpp"
#include "knnstore/metak.hpp"
#include "knnstore/retrieval.hpp"
#include "knnstore/rng.hpp"
#include "knnstore/synth.hpp"
#include "support/oracles.hpp"
#include "support/test_util.hpp"

using namespace knnstore;
using testutil::TempDir;

TEST_CASE("knn_flat: exact hits and ordering") {
  const auto ds = testutil::random_store(500, 8, 16, 9);

  SUBCASE("a stored key is its own nearest neighbor") {
    const auto key = ds.key(123);
    const auto got = knn_flat(ds, key, 3);
    CHECK(got[0].index == 123);
    CHECK(got[0].squared_l2 == 0.0);
  }
  SUBCASE("k equal to the store size returns everything sorted") {
    std::vector<float> query(8, 0.25f);
    const auto got = knn_flat(ds, query, 500);
    REQUIRE(got.size() == 500);
    for (std::size_t i = 1; i < got.size(); ++i) {
      const bool ordered =
          got[i - 1].squared_l2 < got[i].squared_l2 ||
          (got[i - 1].squared_l2 == got[i].squared_l2 &&
           got[i - 1].index < got[i].index);
      CHECK(ordered);
    }
  }
  SUBCASE("errors") {
    std::vector<float> query(8, 0.0f);
    CHECK_THROWS_AS((void)knn_flat(ds, query, 501), Error);
    CHECK_THROWS_AS((void)knn_flat(ds, query, 0), Error);
    std::vector<float> short_query(4, 0.0f);
    CHECK_THROWS_AS((void)knn_flat(ds, short_query, 3), Error);
  }
}

TEST_CASE("knn_flat: ties broken by record index") {
  // Three identical keys; the query hits all at distance 0.
  std::vector<Record> records;
  for (std::uint32_t i = 0; i < 5; ++i) {
    Record r;
    r.key = {1.0f, 2.0f};
    r.value = i % 2;
    r.prob = 0.5f;
    r.sentence_id = 0;
    r.position = i;
    records.push_back(r);
  }
  const auto ds = Datastore::build(records, 2, 2);
  const std::vector<float> query{1.0f, 2.0f};
  const auto got = knn_flat(ds, query, 3);
  CHECK(got[0].index == 0);
  CHECK(got[1].index == 1);
  CHECK(got[2].index == 2);
}

TEST_CASE("knn_flat matches the full-sort oracle") {
  const auto ds = testutil::random_store(2000, 16, 32, 55);
  std::mt19937_64 rng(7);
  for (int q = 0; q < 200; ++q) {
    std::vector<float> query(16);
    for (auto& x : query) {
      x = static_cast<float>(uniform01(rng));
    }
    const auto got = knn_flat(ds, query, 10);
    const auto expected = oracles::knn_full_sort(ds, query, 10);
    REQUIRE(got.size() == expected.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].index == expected[i].index);
      CHECK(got[i].squared_l2 ==
            doctest::Approx(expected[i].squared_l2).epsilon(1e-12));
    }
  }
}

TEST_CASE("ivf index") {
  SynthConfig cfg;
  cfg.vocab = 8;
  cfg.dim = 16;
  cfg.clusters_per_value = 2;
  cfg.points_per_cluster = 60;
  cfg.family_overlap = 0.3f;
  cfg.seed = 77;
  const auto ds = Datastore::build(synth_generate(cfg), cfg.dim, cfg.vocab);
  const auto queries = synth_queries(cfg, 100);

  SUBCASE("full probing reproduces the flat scan exactly") {
    const auto index = IvfIndex::build(ds, 16, 3);
    for (const auto& q : queries) {
      const auto flat = knn_flat(ds, q.key, 8);
      const auto ivf = index.search(q.key, 8, index.n_centroids());
      REQUIRE(flat.size() == ivf.size());
      for (std::size_t i = 0; i < flat.size(); ++i) {
        CHECK(flat[i].index == ivf[i].index);
        CHECK(flat[i].squared_l2 == ivf[i].squared_l2);
      }
    }
  }
  SUBCASE("a single centroid is always the flat scan") {
    const auto index = IvfIndex::build(ds, 1, 3);
    for (int qi = 0; qi < 20; ++qi) {
      const auto flat = knn_flat(ds, queries[qi].key, 5);
      const auto ivf = index.search(queries[qi].key, 5, 1);
      REQUIRE(flat.size() == ivf.size());
      for (std::size_t i = 0; i < flat.size(); ++i) {
        CHECK(flat[i].index == ivf[i].index);
      }
    }
  }
  SUBCASE("partial probing keeps high recall on clustered data") {
    const auto index = IvfIndex::build(ds, 64, 3);
    double recall = 0.0;
    for (const auto& q : queries) {
      const auto flat = knn_flat(ds, q.key, 8);
      const auto ivf = index.search(q.key, 8, 8);
      std::size_t hit = 0;
      for (const auto& n : ivf) {
        for (const auto& f : flat) {
          hit += n.index == f.index;
        }
      }
      recall += double(hit) / flat.size();
    }
    recall /= queries.size();
    CHECK(recall >= 0.9);
  }
  SUBCASE("deterministic for a fixed seed") {
    const auto a = IvfIndex::build(ds, 16, 3);
    const auto b = IvfIndex::build(ds, 16, 3);
    CHECK(a.lists() == b.lists());
  }
  SUBCASE("parameter validation") {
    CHECK_THROWS_AS((void)IvfIndex::build(ds, 0, 3), Error);
    const auto index = IvfIndex::build(ds, 16, 3);
    std::vector<float> q(16, 0.0f);
    CHECK_THROWS_AS((void)index.search(q, 5, 0), Error);
    CHECK_THROWS_AS((void)index.search(q, 5, 17), Error);
  }
}

TEST_CASE("distinct_counts") {
  auto neighbors = std::vector<Neighbor>{
      {0, 3, 0.0}, {1, 3, 1.0}, {2, 5, 2.0}};
  CHECK(distinct_counts(neighbors) ==
        std::vector<std::uint32_t>{1, 1, 2});

  SUBCASE("all distinct") {
    neighbors = {{0, 0, 0.0}, {1, 1, 1.0}, {2, 2, 2.0}};
    CHECK(distinct_counts(neighbors) == std::vector<std::uint32_t>{1, 2, 3});
  }
  SUBCASE("all same") {
    neighbors = {{0, 4, 0.0}, {1, 4, 1.0}, {2, 4, 2.0}};
    CHECK(distinct_counts(neighbors) == std::vector<std::uint32_t>{1, 1, 1});
  }
  SUBCASE("empty input") {
    CHECK_THROWS_AS((void)distinct_counts({}), Error);
  }
}

TEST_CASE("knn_distribution") {
  const double T = 10.0;

  SUBCASE("k_r = 1 is a point mass") {
    std::vector<Neighbor> n{{0, 2, 3.0}, {1, 4, 5.0}};
    const auto d = knn_distribution(n, 1, T, 6);
    CHECK(d[2] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("equal distances split evenly") {
    std::vector<Neighbor> n{{0, 1, 2.0}, {1, 3, 2.0}};
    const auto d = knn_distribution(n, 2, T, 4);
    CHECK(d[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(d[3] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("distances [0, T ln 2] give [2/3, 1/3]") {
    std::vector<Neighbor> n{{0, 0, 0.0}, {1, 1, T * std::log(2.0)}};
    const auto d = knn_distribution(n, 2, T, 2);
    CHECK(std::abs(d[0] - 2.0 / 3.0) < 1e-9);
    CHECK(std::abs(d[1] - 1.0 / 3.0) < 1e-9);
  }
  SUBCASE("shift invariance") {
    std::mt19937_64 rng(3);
    std::vector<Neighbor> n;
    for (std::uint32_t i = 0; i < 8; ++i) {
      n.push_back({i, static_cast<std::uint32_t>(bounded(rng, 5)),
                   10.0 * uniform01(rng)});
    }
    std::sort(n.begin(), n.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.squared_l2 < b.squared_l2;
    });
    const auto base = knn_distribution(n, 8, T, 5);
    auto shifted = n;
    for (auto& e : shifted) {
      e.squared_l2 += 123.456;
    }
    const auto moved = knn_distribution(shifted, 8, T, 5);
    for (std::size_t v = 0; v < 5; ++v) {
      CHECK(std::abs(base[v] - moved[v]) < 1e-9);
    }
  }
  SUBCASE("simplex on random inputs") {
    std::mt19937_64 rng(5);
    std::vector<Neighbor> n;
    for (std::uint32_t i = 0; i < 16; ++i) {
      n.push_back({i, static_cast<std::uint32_t>(bounded(rng, 7)),
                   50.0 * uniform01(rng)});
    }
    std::sort(n.begin(), n.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.squared_l2 < b.squared_l2;
    });
    for (std::uint32_t k = 1; k <= 16; ++k) {
      const auto d = knn_distribution(n, k, T, 7);
      double sum = 0;
      for (const double p : d) {
        CHECK(p >= 0.0);
        sum += p;
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
  SUBCASE("errors") {
    std::vector<Neighbor> n{{0, 0, 1.0}};
    CHECK_THROWS_AS((void)knn_distribution(n, 0, T, 2), Error);
    CHECK_THROWS_AS((void)knn_distribution(n, 2, T, 2), Error);
    CHECK_THROWS_AS((void)knn_distribution(n, 1, 0.0, 2), Error);
  }
}

namespace {

std::vector<Neighbor> fake_neighbors(std::uint32_t k, std::uint32_t vocab,
                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Neighbor> n;
  double d = 0.0;
  for (std::uint32_t i = 0; i < k; ++i) {
    d += uniform01(rng);
    n.push_back({i, static_cast<std::uint32_t>(bounded(rng, vocab)), d});
  }
  return n;
}

}  // namespace

TEST_CASE("meta_k network") {
  SUBCASE("q values for K=16") {
    CHECK(MetaKNet::q_values(16) ==
          std::vector<std::uint32_t>{0, 1, 2, 4, 8, 16});
    CHECK(MetaKNet::q_values(1) == std::vector<std::uint32_t>{0, 1});
    CHECK_THROWS_AS((void)MetaKNet::q_values(12), Error);
    CHECK_THROWS_AS((void)MetaKNet::q_values(0), Error);
  }
  SUBCASE("zero parameters give uniform weights") {
    MetaKNet net(16, 32);
    const auto n = fake_neighbors(16, 6, 1);
    const auto w = meta_k_forward(net, n);
    REQUIRE(w.size() == 6);
    for (const double x : w) {
      CHECK(x == doctest::Approx(1.0 / 6).epsilon(1e-12));
    }
  }
  SUBCASE("random parameters still softmax to one") {
    MetaKNet net(8, 16);
    std::mt19937_64 rng(2);
    for (auto& p : net.params()) {
      p = uniform_range(rng, -1.0, 1.0);
    }
    const auto w = meta_k_forward(net, fake_neighbors(8, 5, 3));
    double sum = 0;
    for (const double x : w) {
      CHECK(x >= 0.0);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
  SUBCASE("neighbor count must equal K") {
    MetaKNet net(8, 16);
    CHECK_THROWS_AS((void)meta_k_forward(net, fake_neighbors(7, 5, 3)), Error);
  }
  SUBCASE("save/load round trip") {
    TempDir dir("metak");
    MetaKNet net(4, 8);
    std::mt19937_64 rng(4);
    for (auto& p : net.params()) {
      p = uniform_range(rng, -1.0, 1.0);
    }
    net.save(dir.file("m.pckm"));
    const auto loaded = MetaKNet::load(dir.file("m.pckm"));
    CHECK(loaded.k_max() == 4);
    CHECK(loaded.hidden() == 8);
    REQUIRE(loaded.params().size() == net.params().size());
    CHECK(std::memcmp(loaded.params().data(), net.params().data(),
                      net.params().size() * sizeof(double)) == 0);
  }
}

TEST_CASE("fuse") {
  const std::uint32_t vocab = 5;
  const double T = 10.0;
  const auto neighbors = fake_neighbors(4, vocab, 8);
  const std::vector<double> base{0.1, 0.2, 0.3, 0.25, 0.15};

  SUBCASE("all weight on k=0 returns the base distribution") {
    const std::vector<double> w{1.0, 0.0, 0.0, 0.0};
    const auto fused = fuse(w, neighbors, base, T, vocab);
    for (std::uint32_t v = 0; v < vocab; ++v) {
      CHECK(fused.distribution[v] == doctest::Approx(base[v]).epsilon(1e-12));
    }
  }
  SUBCASE("all weight on k=1 is a point mass on the nearest value") {
    const std::vector<double> w{0.0, 1.0, 0.0, 0.0};
    const auto fused = fuse(w, neighbors, base, T, vocab);
    CHECK(fused.distribution[neighbors[0].value] ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("random weights match a direct summation oracle") {
    std::mt19937_64 rng(11);
    std::vector<double> w(4);
    double total = 0;
    for (auto& x : w) {
      x = uniform01(rng) + 1e-3;
      total += x;
    }
    for (auto& x : w) {
      x /= total;
    }
    const auto fused = fuse(w, neighbors, base, T, vocab);

    // Oracle: explicit weighted sum of the component distributions.
    std::vector<double> expected(vocab, 0.0);
    for (std::uint32_t v = 0; v < vocab; ++v) {
      expected[v] += w[0] * base[v];
    }
    const std::uint32_t ks[3] = {1, 2, 4};
    for (int r = 0; r < 3; ++r) {
      const auto d = knn_distribution(neighbors, ks[r], T, vocab);
      for (std::uint32_t v = 0; v < vocab; ++v) {
        expected[v] += w[r + 1] * d[v];
      }
    }
    double sum = 0;
    for (std::uint32_t v = 0; v < vocab; ++v) {
      CHECK(fused.distribution[v] == doctest::Approx(expected[v]).epsilon(1e-12));
      sum += fused.distribution[v];
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
  SUBCASE("invalid base distribution") {
    std::vector<double> bad{0.5, 0.5, 0.5, 0.0, 0.0};
    const std::vector<double> w{1.0, 0.0, 0.0, 0.0};
    CHECK_THROWS_AS((void)fuse(w, neighbors, bad, T, vocab), Error);
    bad = {0.5, 0.6, -0.1, 0.0, 0.0};
    CHECK_THROWS_AS((void)fuse(w, neighbors, bad, T, vocab), Error);
    std::vector<double> wrong_len{0.5, 0.5};
    CHECK_THROWS_AS((void)fuse(w, neighbors, wrong_len, T, vocab), Error);
  }
}

TEST_CASE("fused NLL gradient matches finite differences") {
  const std::uint32_t vocab = 6;
  const double T = 10.0;
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    MetaKNet net(4, 8);
    for (auto& p : net.params()) {
      p = uniform_range(rng, -0.5, 0.5);
    }
    const auto neighbors = fake_neighbors(4, vocab, 100 + trial);
    const std::vector<double> base(vocab, 1.0 / vocab);
    const auto gold = static_cast<std::uint32_t>(bounded(rng, vocab));

    const auto [loss, grad] =
        fused_nll_grad(net, neighbors, base, T, vocab, gold);
    CHECK(loss == doctest::Approx(
                      fused_nll(net, neighbors, base, T, vocab, gold))
                      .epsilon(1e-12));
    const double err = oracles::gradient_max_rel_error<double>(
        net.params(), grad,
        [&] { return fused_nll(net, neighbors, base, T, vocab, gold); });
    CAPTURE(trial);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("train_meta_k") {
  // Store and queries where the gold value always equals the nearest
  // neighbor's value, base distribution uniform: the trained network should
  // shift weight off k=0.
  SynthConfig cfg;
  cfg.vocab = 4;
  cfg.dim = 8;
  cfg.clusters_per_value = 1;
  cfg.points_per_cluster = 50;
  cfg.family_overlap = 0.0f;
  cfg.seed = 31;
  const auto ds = Datastore::build(synth_generate(cfg), cfg.dim, cfg.vocab);
  auto queries = synth_queries(cfg, 200);

  MetaKTrainConfig tc;
  tc.k_max = 4;
  tc.hidden = 8;
  tc.steps = 400;
  tc.batch = 32;
  tc.seed = 17;

  const auto result = train_meta_k(ds, queries, tc);
  const std::size_t nq = result.net.q().size();

  double w0 = 0.0;
  for (const auto& q : queries) {
    const auto neighbors = knn_flat(ds, q.key, tc.k_max);
    w0 += meta_k_forward(result.net, neighbors)[0];
  }
  w0 /= queries.size();
  CHECK(w0 < 1.0 / nq);

  SUBCASE("training reduced the loss") {
    CHECK(result.trace.back() < result.trace.front());
  }
  SUBCASE("zero steps returns the initialization") {
    tc.steps = 0;
    const auto init = train_meta_k(ds, queries, tc);
    CHECK(init.trace.empty());
  }
  SUBCASE("determinism down to file bytes") {
    TempDir dir("metak_det");
    const auto a = train_meta_k(ds, queries, tc);
    const auto b = train_meta_k(ds, queries, tc);
    a.net.save(dir.file("a.pckm"));
    b.net.save(dir.file("b.pckm"));
    CHECK(testutil::read_bytes(dir.file("a.pckm")) ==
          testutil::read_bytes(dir.file("b.pckm")));
  }
  SUBCASE("gold is mandatory") {
    queries[3].gold.reset();
    CHECK_THROWS_AS((void)train_meta_k(ds, queries, tc), Error);
  }
}
