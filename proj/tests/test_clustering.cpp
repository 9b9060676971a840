#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "knnstore/clustering.hpp"
#include "knnstore/error.hpp"
#include "knnstore/rng.hpp"
#include "knnstore/synth.hpp"
#include "support/oracles.hpp"
#include "support/test_util.hpp"

using namespace knnstore;
using testutil::TempDir;

namespace {

// Flat point matrix with two Gaussian blobs far apart.
std::vector<float> two_blobs(std::size_t per_blob, std::size_t dim,
                             double separation, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NormalSampler normal;
  std::vector<float> points(2 * per_blob * dim);
  for (std::size_t i = 0; i < 2 * per_blob; ++i) {
    const double center = i < per_blob ? 0.0 : separation;
    for (std::size_t j = 0; j < dim; ++j) {
      points[i * dim + j] = static_cast<float>(center + normal(rng));
    }
  }
  return points;
}

std::map<std::uint32_t, std::size_t> label_sizes(
    const std::vector<std::uint32_t>& labels) {
  std::map<std::uint32_t, std::size_t> sizes;
  for (const auto l : labels) {
    sizes[l]++;
  }
  return sizes;
}

}  // namespace

TEST_CASE("dbscan: two separated blobs give two clusters") {
  const std::size_t per_blob = 50;
  const auto points = two_blobs(per_blob, 4, 100.0, 1);
  const auto labels = dbscan(points, 4, 6.0, 4);
  const auto sizes = label_sizes(labels);
  REQUIRE(sizes.size() == 2);
  for (const auto& [label, size] : sizes) {
    CHECK(size == per_blob);
  }
  // First blob one label, second blob another.
  for (std::size_t i = 1; i < per_blob; ++i) {
    CHECK(labels[i] == labels[0]);
    CHECK(labels[per_blob + i] == labels[per_blob]);
  }
}

TEST_CASE("dbscan: identical points form one cluster") {
  std::vector<float> points(50 * 3, 2.5f);
  const auto labels = dbscan(points, 3, 0.5, 4);
  CHECK(label_sizes(labels).size() == 1);
}

TEST_CASE("dbscan: all-noise input becomes singletons") {
  // 5 points, pairwise distance 10, min_pts 3: nothing is core.
  std::vector<float> points;
  for (int i = 0; i < 5; ++i) {
    points.push_back(static_cast<float>(10 * i));
  }
  const auto labels = dbscan(points, 1, 1.0, 3);
  CHECK(label_sizes(labels).size() == 5);
}

TEST_CASE("dbscan: parameter validation") {
  std::vector<float> points(12, 0.0f);
  CHECK_THROWS_AS((void)dbscan(points, 3, 0.0, 4), Error);
  CHECK_THROWS_AS((void)dbscan(points, 3, 1.0, 0), Error);
  CHECK_THROWS_AS((void)dbscan(points, 5, 1.0, 4), Error);  // 12 % 5 != 0
  CHECK_THROWS_AS((void)dbscan({}, 3, 1.0, 4), Error);
}

TEST_CASE("dbscan: matches the reference implementation on random points") {
  std::mt19937_64 rng(7);
  NormalSampler normal;
  const std::size_t n = 200, dim = 3;
  std::vector<float> points(n * dim);
  for (auto& x : points) {
    x = static_cast<float>(normal(rng));
  }
  for (const double eps : {0.3, 0.6, 1.0}) {
    for (const std::size_t min_pts : {2ul, 4ul, 8ul}) {
      const auto got = dbscan(points, dim, eps, min_pts);
      const auto expected =
          oracles::dbscan_reference(points, dim, eps, min_pts);
      CAPTURE(eps);
      CAPTURE(min_pts);
      CHECK(oracles::same_partition(got, expected));
    }
  }
}

TEST_CASE("dbscan: cluster sets invariant under permutation") {
  std::mt19937_64 rng(13);
  NormalSampler normal;
  const std::size_t n = 120, dim = 2;
  std::vector<float> points(n * dim);
  for (auto& x : points) {
    x = static_cast<float>(normal(rng));
  }
  const auto base = dbscan(points, dim, 0.4, 4);

  std::vector<std::uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  deterministic_shuffle(perm, rng);
  std::vector<float> shuffled(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(points.begin() + perm[i] * dim, dim,
                shuffled.begin() + i * dim);
  }
  const auto permuted = dbscan(shuffled, dim, 0.4, 4);
  // Map the permuted labels back to original positions and compare set
  // families.
  std::vector<std::uint32_t> back(n);
  for (std::size_t i = 0; i < n; ++i) {
    back[perm[i]] = permuted[i];
  }
  CHECK(oracles::same_partition(base, back));
}

TEST_CASE("build_families on a separated synthetic store") {
  SynthConfig cfg;
  cfg.vocab = 2;
  cfg.dim = 8;
  cfg.clusters_per_value = 2;
  cfg.points_per_cluster = 40;
  cfg.family_overlap = 0.0f;
  cfg.seed = 21;
  const auto ds = Datastore::build(synth_generate(cfg), cfg.dim, cfg.vocab);

  const auto families = build_families(ds, {});
  REQUIRE(families.families().size() == 2);
  for (const auto& family : families.families()) {
    CHECK(family.clusters.size() == 2);
    for (const auto& cluster : family.clusters) {
      CHECK(cluster.members.size() == 40);
    }
  }

  SUBCASE("partition and reverse map round trip") {
    std::set<std::uint32_t> covered;
    for (const auto& family : families.families()) {
      for (const auto& cluster : family.clusters) {
        for (const auto m : cluster.members) {
          CHECK(covered.insert(m).second);  // disjoint
          CHECK(ds.value(m) == family.value);
        }
      }
    }
    CHECK(covered.size() == ds.size());
    for (std::uint32_t i = 0; i < ds.size(); ++i) {
      const auto& cluster = families.cluster_of(i);
      CHECK(std::find(cluster.members.begin(), cluster.members.end(), i) !=
            cluster.members.end());
      CHECK(families.value_of(i) == ds.value(i));
    }
  }

  SUBCASE("centroid equals the coordinate-wise mean") {
    for (const auto& family : families.families()) {
      for (const auto& cluster : family.clusters) {
        for (std::uint32_t j = 0; j < ds.dim(); ++j) {
          double mean = 0.0;
          for (const auto m : cluster.members) {
            mean += ds.key(m)[j];
          }
          mean /= cluster.members.size();
          CHECK(cluster.centroid[j] ==
                doctest::Approx(mean).epsilon(1e-5));
        }
      }
    }
  }

  SUBCASE("sidecar round trip") {
    TempDir dir("families");
    families.save(dir.file("f.pckf"));
    const auto loaded = ClusterFamilies::load(dir.file("f.pckf"));
    REQUIRE(loaded.families().size() == families.families().size());
    for (std::size_t f = 0; f < families.families().size(); ++f) {
      const auto& a = families.families()[f];
      const auto& b = loaded.families()[f];
      CHECK(a.value == b.value);
      REQUIRE(a.clusters.size() == b.clusters.size());
      for (std::size_t c = 0; c < a.clusters.size(); ++c) {
        CHECK(a.clusters[c].members == b.clusters[c].members);
        CHECK(a.clusters[c].centroid == b.clusters[c].centroid);
      }
    }
  }
}

TEST_CASE("build_families: single-record value yields a singleton cluster") {
  std::vector<Record> records;
  Record r;
  r.key = {0.0f, 0.0f};
  r.value = 0;
  r.prob = 0.5f;
  r.sentence_id = 0;
  r.position = 0;
  records.push_back(r);
  for (std::uint32_t i = 0; i < 10; ++i) {
    Record s;
    s.key = {5.0f + 0.01f * i, 5.0f};
    s.value = 1;
    s.prob = 0.5f;
    s.sentence_id = 0;
    s.position = i + 1;
    records.push_back(s);
  }
  const auto ds = Datastore::build(records, 2, 2);
  const auto families = build_families(ds, {});
  REQUIRE(families.families().size() == 2);
  CHECK(families.families()[0].value == 0);
  CHECK(families.families()[0].clusters.size() == 1);
  CHECK(families.families()[0].clusters[0].members ==
        std::vector<std::uint32_t>{0});
}

TEST_CASE("one_cluster_per_value covers everything") {
  const auto ds = testutil::random_store(100, 4, 7, 17);
  const auto families = ClusterFamilies::one_cluster_per_value(ds);
  std::size_t total = 0;
  for (const auto& family : families.families()) {
    CHECK(family.clusters.size() == 1);
    total += family.clusters[0].members.size();
  }
  CHECK(total == ds.size());
}

TEST_CASE("cost_groups_1d gap rule") {
  SUBCASE("threshold splits on the large gap") {
    const std::vector<float> costs{1.0f, 1.1f, 5.0f};
    const auto groups = cost_groups_1d(costs, 0.5);
    REQUIRE(groups.size() == 2);
    CHECK(groups[0] == std::vector<std::uint32_t>{0, 1});
    CHECK(groups[1] == std::vector<std::uint32_t>{2});
  }
  SUBCASE("eps 0 groups only exact duplicates") {
    const std::vector<float> costs{2.0f, 1.0f, 2.0f, 3.0f};
    const auto groups = cost_groups_1d(costs, 0.0);
    REQUIRE(groups.size() == 3);
    CHECK(groups[0] == std::vector<std::uint32_t>{1});
    CHECK(groups[1] == std::vector<std::uint32_t>{0, 2});
    CHECK(groups[2] == std::vector<std::uint32_t>{3});
  }
  SUBCASE("infinite eps keeps one group") {
    const std::vector<float> costs{1.0f, 100.0f, 5.0f};
    const auto groups =
        cost_groups_1d(costs, std::numeric_limits<double>::infinity());
    REQUIRE(groups.size() == 1);
    CHECK(groups[0].size() == 3);
  }
  SUBCASE("negative eps rejected") {
    CHECK_THROWS_AS((void)cost_groups_1d(std::vector<float>{1.0f}, -1.0),
                    Error);
  }
  SUBCASE("partition property on random costs") {
    std::mt19937_64 rng(3);
    std::vector<float> costs(200);
    for (auto& c : costs) {
      c = static_cast<float>(1.0 + 9.0 * uniform01(rng));
    }
    const auto groups = cost_groups_1d(costs, 0.05);
    std::set<std::uint32_t> seen;
    for (const auto& g : groups) {
      for (const auto i : g) {
        CHECK(seen.insert(i).second);
      }
      // Chain criterion: consecutive sorted members within eps.
      std::vector<float> sorted;
      for (const auto i : g) {
        sorted.push_back(costs[i]);
      }
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 1; i < sorted.size(); ++i) {
        CHECK(sorted[i] - sorted[i - 1] <= 0.05f);
      }
    }
    CHECK(seen.size() == costs.size());
  }
}

TEST_CASE("separability report") {
  SynthConfig cfg;
  cfg.vocab = 4;
  cfg.dim = 16;
  cfg.clusters_per_value = 2;
  cfg.points_per_cluster = 50;
  cfg.family_overlap = 0.0f;
  cfg.seed = 31;
  const auto ds = Datastore::build(synth_generate(cfg), cfg.dim, cfg.vocab);
  const auto families = build_families(ds, {});
  const auto report = separability_report(ds, families);

  REQUIRE(report.mean_inter_family_distance.has_value());
  REQUIRE(report.intra_inter_ratio.has_value());
  CHECK(*report.intra_inter_ratio < 1.0);
  CHECK(report.value_recall_at_1 > 0.95);

  SUBCASE("overlap degrades 1-NN recall") {
    auto overlapped = cfg;
    overlapped.family_overlap = 0.9f;
    const auto ds2 =
        Datastore::build(synth_generate(overlapped), cfg.dim, cfg.vocab);
    const auto report2 = separability_report(ds2, build_families(ds2, {}));
    CHECK(report2.value_recall_at_1 < report.value_recall_at_1);
  }

  SUBCASE("single-value store has no inter-family distance") {
    std::vector<Record> records;
    for (std::uint32_t i = 0; i < 20; ++i) {
      Record r;
      r.key = {static_cast<float>(i % 5), 1.0f};
      r.value = 0;
      r.prob = 0.5f;
      r.sentence_id = 0;
      r.position = i;
      records.push_back(r);
    }
    const auto single = Datastore::build(records, 2, 1);
    const auto rep = separability_report(
        single, ClusterFamilies::one_cluster_per_value(single));
    CHECK_FALSE(rep.mean_inter_family_distance.has_value());
    CHECK_FALSE(rep.intra_inter_ratio.has_value());
  }
}
