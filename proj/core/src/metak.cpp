#include "knnstore/metak.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "binio.hpp"
#include "knnstore/error.hpp"
#include "knnstore/parallel.hpp"
#include "knnstore/rng.hpp"

namespace knnstore {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'K', 'M'};
constexpr std::uint16_t kVersion = 1;

// Floor for the fused gold probability inside the NLL; keeps training finite
// when no neighbor and no base mass lands on the gold token.
constexpr double kNllFloor = 1e-12;

bool is_power_of_two(std::uint32_t x) { return x != 0 && (x & (x - 1)) == 0; }

using MatRMd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>;

// Retrieval features in the order [d_1..d_K; c_1..c_K].
Eigen::VectorXd features_of(std::span<const Neighbor> neighbors) {
  const std::size_t k = neighbors.size();
  Eigen::VectorXd f(2 * k);
  const auto counts = distinct_counts(neighbors);
  for (std::size_t j = 0; j < k; ++j) {
    f[j] = neighbors[j].squared_l2;
    f[k + j] = static_cast<double>(counts[j]);
  }
  return f;
}

struct MetaKCache {
  Eigen::VectorXd features;  // 2K
  Eigen::VectorXd hidden;    // post-relu
  Eigen::VectorXd weights;   // softmax over |Q|
};

MetaKCache forward_cached(const MetaKNet& net, const Eigen::VectorXd& f) {
  const std::uint32_t h = net.hidden();
  const std::size_t nq = net.q().size();
  Eigen::Map<const MatRMd> W1(net.params().data() + net.w1_offset(),
                              2 * net.k_max(), h);
  Eigen::Map<const Eigen::VectorXd> b1(net.params().data() + net.b1_offset(),
                                       h);
  Eigen::Map<const MatRMd> W2(net.params().data() + net.w2_offset(), h, nq);
  Eigen::Map<const Eigen::VectorXd> b2(net.params().data() + net.b2_offset(),
                                       nq);

  MetaKCache cache;
  cache.features = f;
  cache.hidden = (W1.transpose() * f + b1).cwiseMax(0.0);
  Eigen::VectorXd logits = W2.transpose() * cache.hidden + b2;
  const double mx = logits.maxCoeff();
  cache.weights = (logits.array() - mx).exp();
  cache.weights /= cache.weights.sum();
  return cache;
}

// d(loss)/d(logits) -> parameter gradient, given the cache.
void backward_into(const MetaKNet& net, const MetaKCache& cache,
                   const Eigen::VectorXd& dlogits, Eigen::VectorXd& grad) {
  const std::uint32_t h = net.hidden();
  const std::size_t nq = net.q().size();
  Eigen::Map<const MatRMd> W1(net.params().data() + net.w1_offset(),
                              2 * net.k_max(), h);
  Eigen::Map<const MatRMd> W2(net.params().data() + net.w2_offset(), h, nq);

  Eigen::Map<MatRMd> gW2(grad.data() + net.w2_offset(), h, nq);
  Eigen::Map<Eigen::VectorXd> gb2(grad.data() + net.b2_offset(), nq);
  Eigen::Map<MatRMd> gW1(grad.data() + net.w1_offset(), 2 * net.k_max(), h);
  Eigen::Map<Eigen::VectorXd> gb1(grad.data() + net.b1_offset(), h);

  gW2.noalias() += cache.hidden * dlogits.transpose();
  gb2 += dlogits;
  Eigen::VectorXd dh = W2 * dlogits;
  for (Eigen::Index i = 0; i < dh.size(); ++i) {
    if (cache.hidden[i] <= 0.0) {
      dh[i] = 0.0;
    }
  }
  gW1.noalias() += cache.features * dh.transpose();
  gb1 += dh;
}

void check_neighbors(const MetaKNet& net, std::span<const Neighbor> neighbors) {
  if (neighbors.size() != net.k_max()) {
    raise(ErrorCode::WrongNeighborCount,
          "expected exactly " + std::to_string(net.k_max()) +
              " neighbors, got " + std::to_string(neighbors.size()));
  }
}

void check_base_dist(std::span<const double> base, std::uint32_t vocab) {
  if (base.size() != vocab) {
    raise(ErrorCode::InvalidDistribution,
          "base distribution length " + std::to_string(base.size()) +
              " != vocab " + std::to_string(vocab));
  }
  double sum = 0.0;
  for (const double p : base) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      raise(ErrorCode::InvalidDistribution,
            "base distribution has a negative or non-finite entry");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    raise(ErrorCode::InvalidDistribution,
          "base distribution sums to " + std::to_string(sum));
  }
}

// Per-k_r gold-probability vector g (|Q| entries) used by the NLL: g_0 is the
// base mass on gold, g_r the kNN-distribution mass on gold.
Eigen::VectorXd gold_mass(const MetaKNet& net,
                          std::span<const Neighbor> neighbors,
                          std::span<const double> base_dist, double temperature,
                          std::uint32_t vocab, std::uint32_t gold) {
  const auto& q = net.q();
  Eigen::VectorXd g(q.size());
  g[0] = base_dist[gold];
  for (std::size_t r = 1; r < q.size(); ++r) {
    g[r] = knn_distribution(neighbors, q[r], temperature, vocab)[gold];
  }
  return g;
}

}  // namespace

MetaKNet::MetaKNet(std::uint32_t k_max, std::uint32_t hidden)
    : k_(k_max), hidden_(hidden), q_(q_values(k_max)) {
  if (hidden_ == 0) {
    raise(ErrorCode::InvalidParam, "hidden width must be positive");
  }
  params_.setZero(static_cast<Eigen::Index>(b2_offset() + q_.size()));
}

std::vector<std::uint32_t> MetaKNet::q_values(std::uint32_t k_max) {
  if (!is_power_of_two(k_max)) {
    raise(ErrorCode::InvalidParam, "K must be a power of two");
  }
  std::vector<std::uint32_t> q{0};
  for (std::uint32_t v = 1; v <= k_max; v *= 2) {
    q.push_back(v);
  }
  return q;
}

std::vector<double> meta_k_forward(const MetaKNet& net,
                                   std::span<const Neighbor> neighbors) {
  check_neighbors(net, neighbors);
  const auto cache = forward_cached(net, features_of(neighbors));
  return {cache.weights.data(), cache.weights.data() + cache.weights.size()};
}

FusedPrediction fuse(std::span<const double> weights,
                     std::span<const Neighbor> neighbors,
                     std::span<const double> base_dist, double temperature,
                     std::uint32_t vocab) {
  check_base_dist(base_dist, vocab);
  if (weights.size() < 2 || weights.size() > 34) {
    raise(ErrorCode::InvalidParam, "weight vector has implausible size");
  }
  // |Q| = log2(K) + 2 determines the K this weight vector was made for.
  const std::uint32_t k_max = 1u << (weights.size() - 2);
  if (neighbors.size() < k_max) {
    raise(ErrorCode::WrongNeighborCount,
          "need at least " + std::to_string(k_max) + " neighbors");
  }

  FusedPrediction out;
  out.weights.assign(weights.begin(), weights.end());
  out.neighbors.assign(neighbors.begin(), neighbors.end());
  out.distribution.assign(vocab, 0.0);
  for (std::uint32_t v = 0; v < vocab; ++v) {
    out.distribution[v] = weights[0] * base_dist[v];
  }
  std::uint32_t k_r = 1;
  for (std::size_t r = 1; r < weights.size(); ++r, k_r *= 2) {
    const auto dist = knn_distribution(neighbors, k_r, temperature, vocab);
    for (std::uint32_t v = 0; v < vocab; ++v) {
      out.distribution[v] += weights[r] * dist[v];
    }
  }
  return out;
}

double fused_nll(const MetaKNet& net, std::span<const Neighbor> neighbors,
                 std::span<const double> base_dist, double temperature,
                 std::uint32_t vocab, std::uint32_t gold) {
  check_neighbors(net, neighbors);
  check_base_dist(base_dist, vocab);
  if (gold >= vocab) {
    raise(ErrorCode::ValueOutOfVocab, "gold value outside vocab");
  }
  const auto cache = forward_cached(net, features_of(neighbors));
  const Eigen::VectorXd g =
      gold_mass(net, neighbors, base_dist, temperature, vocab, gold);
  return -std::log(std::max(cache.weights.dot(g), kNllFloor));
}

std::pair<double, std::vector<double>> fused_nll_grad(
    const MetaKNet& net, std::span<const Neighbor> neighbors,
    std::span<const double> base_dist, double temperature, std::uint32_t vocab,
    std::uint32_t gold) {
  check_neighbors(net, neighbors);
  check_base_dist(base_dist, vocab);
  if (gold >= vocab) {
    raise(ErrorCode::ValueOutOfVocab, "gold value outside vocab");
  }
  const auto cache = forward_cached(net, features_of(neighbors));
  const Eigen::VectorXd g =
      gold_mass(net, neighbors, base_dist, temperature, vocab, gold);
  const double p = std::max(cache.weights.dot(g), kNllFloor);

  // dL/dlogit_j = -w_j (g_j - p) / p for the softmax-weighted mixture.
  Eigen::VectorXd dlogits =
      (-cache.weights.array() * (g.array() - p) / p).matrix();

  Eigen::VectorXd grad =
      Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.params().size()));
  backward_into(net, cache, dlogits, grad);
  return {-std::log(p), std::vector<double>(grad.data(), grad.data() + grad.size())};
}

MetaKTrainResult train_meta_k(const Datastore& ds,
                              std::span<const LabeledQuery> queries,
                              const MetaKTrainConfig& config) {
  if (queries.empty()) {
    raise(ErrorCode::EmptyInput, "no validation queries");
  }
  if (config.batch == 0) {
    raise(ErrorCode::InvalidConfig, "batch must be positive");
  }
  if (!(config.lr > 0.0) || !std::isfinite(config.lr)) {
    raise(ErrorCode::InvalidConfig, "learning rate must be positive");
  }
  if (config.k_max > ds.size()) {
    raise(ErrorCode::KTooLarge, "K exceeds the datastore size");
  }

  MetaKTrainResult result{MetaKNet(config.k_max, config.hidden), {}};
  MetaKNet& net = result.net;
  const std::size_t nq = net.q().size();

  // Xavier-uniform init on the two weight matrices, biases zero.
  std::mt19937_64 rng(config.seed);
  {
    const double a1 = std::sqrt(6.0 / (2.0 * config.k_max + config.hidden));
    auto p = net.params();
    for (std::size_t i = net.w1_offset(); i < net.b1_offset(); ++i) {
      p[i] = uniform_range(rng, -a1, a1);
    }
    const double a2 = std::sqrt(6.0 / (config.hidden + double(nq)));
    for (std::size_t i = net.w2_offset(); i < net.b2_offset(); ++i) {
      p[i] = uniform_range(rng, -a2, a2);
    }
  }
  if (config.steps == 0) {
    return result;
  }

  // Precompute neighbors, features, and per-k gold masses once per query.
  const std::size_t n = queries.size();
  std::vector<Eigen::VectorXd> features(n);
  std::vector<Eigen::VectorXd> gold(n);
  const std::vector<double> uniform(ds.vocab(), 1.0 / ds.vocab());
  parallel_for(n, config.workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& query = queries[i];
      if (!query.gold) {
        raise(ErrorCode::MissingGold,
              "query " + std::to_string(i) + " has no gold value");
      }
      if (*query.gold >= ds.vocab()) {
        raise(ErrorCode::ValueOutOfVocab, "gold value outside vocab");
      }
      std::span<const double> base =
          query.base_dist.empty() ? std::span<const double>(uniform)
                                  : std::span<const double>(query.base_dist);
      check_base_dist(base, ds.vocab());
      const auto neighbors = knn_flat(ds, query.key, config.k_max);
      features[i] = features_of(neighbors);
      gold[i] = gold_mass(net, neighbors, base, config.temperature, ds.vocab(),
                          *query.gold);
    }
  });

  // Adam over the tiny parameter vector.
  Eigen::VectorXd grad(static_cast<Eigen::Index>(net.params().size()));
  std::vector<double> m(net.params().size(), 0.0), v(net.params().size(), 0.0);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  result.trace.reserve(config.steps);

  for (std::uint32_t step = 0; step < config.steps; ++step) {
    grad.setZero();
    double batch_loss = 0.0;
    for (std::uint32_t b = 0; b < config.batch; ++b) {
      const std::size_t i = bounded(rng, n);
      const auto cache = forward_cached(net, features[i]);
      const double p = std::max(cache.weights.dot(gold[i]), kNllFloor);
      batch_loss += -std::log(p);
      const Eigen::VectorXd dlogits =
          (-cache.weights.array() * (gold[i].array() - p) / p).matrix() /
          static_cast<double>(config.batch);
      backward_into(net, cache, dlogits, grad);
    }
    batch_loss /= config.batch;

    const double c1 = 1.0 - std::pow(kBeta1, double(step + 1));
    const double c2 = 1.0 - std::pow(kBeta2, double(step + 1));
    auto params = net.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
      params[i] -= config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
    }
    result.trace.push_back(batch_loss);
  }
  return result;
}

void MetaKNet::save(const std::filesystem::path& path) const {
  detail::BinWriter w(path);
  w.magic(kMagic);
  w.u16(kVersion);
  w.u16(0);
  w.u32(k_);
  w.u32(hidden_);
  w.bytes(params_.data(), params_.size() * sizeof(double));
  w.close();
}

MetaKNet MetaKNet::load(const std::filesystem::path& path) {
  detail::BinReader r(path);
  r.expect_magic(kMagic);
  r.expect_version(kVersion);
  r.u16();
  const std::uint32_t k = r.u32();
  const std::uint32_t hidden = r.u32();
  MetaKNet net(k, hidden);
  r.bytes(net.params_.data(), net.params_.size() * sizeof(double));
  r.expect_eof();
  return net;
}

}  // namespace knnstore
