#include "knnstore/compact.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "binio.hpp"
#include "knnstore/distance.hpp"
#include "knnstore/parallel.hpp"
#include "knnstore/rng.hpp"

namespace knnstore {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'K', 'N'};
constexpr std::uint16_t kVersion = 1;

// Flattened cluster directory over the families, with prefix sums so the
// negative draw can skip the pivot's family in O(1).
class TripletSampler {
 public:
  TripletSampler(const ClusterFamilies& families, const Datastore& ds)
      : families_(families), ds_(ds) {
    const auto& fams = families.families();
    if (fams.size() < 2) {
      raise(ErrorCode::InsufficientFamilies,
            "triplet sampling needs clusters of at least two distinct values");
    }
    prefix_.reserve(fams.size() + 1);
    prefix_.push_back(0);
    for (const auto& family : fams) {
      prefix_.push_back(prefix_.back() +
                        static_cast<std::uint32_t>(family.clusters.size()));
      for (std::uint32_t c = 0; c < family.clusters.size(); ++c) {
        flat_.push_back({static_cast<std::uint32_t>(prefix_.size() - 2), c});
      }
    }
  }

  Triplet sample(PivotMode mode, std::mt19937_64& rng,
                 std::size_t* singleton_positive = nullptr) const {
    const auto& fams = families_.families();
    const auto [fi, ci] = flat_[bounded(rng, flat_.size())];
    const Cluster& cluster = fams[fi].clusters[ci];
    const std::size_t size = cluster.members.size();

    Triplet t;
    std::size_t pivot_pos = size;  // sentinel: centroid pivot
    if (mode == PivotMode::Static) {
      t.pivot.assign(cluster.centroid.begin(), cluster.centroid.end());
    } else {
      pivot_pos = bounded(rng, size);
      const auto key = ds_.key(cluster.members[pivot_pos]);
      t.pivot.assign(key.begin(), key.end());
    }

    std::size_t positive_pos;
    if (mode == PivotMode::Dynamic && size >= 2) {
      // Uniform over the members other than the pivot.
      positive_pos = bounded(rng, size - 1);
      if (positive_pos >= pivot_pos) {
        ++positive_pos;
      }
    } else {
      positive_pos = bounded(rng, size);
      if (mode == PivotMode::Dynamic && singleton_positive != nullptr) {
        ++*singleton_positive;
      }
    }
    const auto pos_key = ds_.key(cluster.members[positive_pos]);
    t.positive.assign(pos_key.begin(), pos_key.end());

    // Negative cluster: uniform over all clusters outside the pivot family.
    const std::uint32_t own = prefix_[fi + 1] - prefix_[fi];
    const std::uint32_t total = prefix_.back();
    std::uint32_t neg_flat =
        static_cast<std::uint32_t>(bounded(rng, total - own));
    if (neg_flat >= prefix_[fi]) {
      neg_flat += own;
    }
    const auto [nfi, nci] = flat_[neg_flat];
    const Cluster& neg_cluster = fams[nfi].clusters[nci];
    const auto neg_key =
        ds_.key(neg_cluster.members[bounded(rng, neg_cluster.members.size())]);
    t.negative.assign(neg_key.begin(), neg_key.end());
    return t;
  }

 private:
  const ClusterFamilies& families_;
  const Datastore& ds_;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> flat_;
  std::vector<std::uint32_t> prefix_;
};

float xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return static_cast<float>(std::sqrt(6.0 / double(fan_in + fan_out)));
}

void init_params(CompactNet<float>& net, std::mt19937_64& rng) {
  auto fill = [&](auto view, std::size_t fan_in, std::size_t fan_out) {
    const float a = xavier_bound(fan_in, fan_out);
    for (Eigen::Index i = 0; i < view.rows(); ++i) {
      for (Eigen::Index j = 0; j < view.cols(); ++j) {
        view(i, j) = static_cast<float>(uniform_range(rng, -a, a));
      }
    }
  };
  fill(net.W1(), net.input_dim(), net.hidden_dim());
  fill(net.W2(), net.hidden_dim(), net.output_dim());
  if (net.has_nce_head()) {
    fill(net.nce_weight().transpose(), 2 * std::size_t(net.output_dim()), 1);
  }
  if (net.has_wp_head()) {
    fill(net.wp_weight(), net.output_dim(), net.vocab());
  }
  // Biases stay zero.
}

HeadKind head_for(LossMix mix) {
  const bool nce = mix_has_nce(mix);
  const bool wp = mix_has_wp(mix);
  if (nce && wp) {
    return HeadKind::NceWp;
  }
  if (nce) {
    return HeadKind::Nce;
  }
  if (wp) {
    return HeadKind::Wp;
  }
  return HeadKind::None;
}

// Mini-batch training state sized once up front. Triplet batches stack
// [pivots; positives; negatives] so the whole step runs three GEMMs forward
// and three back.
struct BatchWork {
  MatRM<float> x;       // 3B x d
  MatRM<float> z;       // 3B x h (pre-activation, then sigmoid in-place)
  MatRM<float> y;       // 3B x m
  MatRM<float> dy;      // 3B x m
  MatRM<float> dz;      // 3B x h
  MatRM<float> xw;      // B x d (wp inputs)
  MatRM<float> zw, yw, dyw, dzw;
  std::vector<std::uint32_t> wp_targets;
};

void forward_rows(const CompactNet<float>& net, const MatRM<float>& x,
                  MatRM<float>& z, MatRM<float>& y) {
  z.noalias() = x * net.W1();
  z.rowwise() += net.b1().transpose();
  z = z.unaryExpr([](float v) { return detail::sigmoid(v); });
  y.noalias() = z * net.W2();
  y.rowwise() += net.b2().transpose();
}

void backward_rows(const CompactNet<float>& net, const MatRM<float>& x,
                   const MatRM<float>& h, const MatRM<float>& dy,
                   MatRM<float>& dz, Eigen::VectorXf& grad) {
  Eigen::Map<MatRM<float>> gW2(grad.data() + net.w2_offset(), net.hidden_dim(),
                               net.output_dim());
  Eigen::Map<Eigen::VectorXf> gb2(grad.data() + net.b2_offset(),
                                  net.output_dim());
  Eigen::Map<MatRM<float>> gW1(grad.data() + net.w1_offset(), net.input_dim(),
                               net.hidden_dim());
  Eigen::Map<Eigen::VectorXf> gb1(grad.data() + net.b1_offset(),
                                  net.hidden_dim());
  gW2.noalias() += h.transpose() * dy;
  gb2 += dy.colwise().sum().transpose();
  dz.noalias() = dy * net.W2().transpose();
  dz.array() *= h.array() * (1.0f - h.array());
  gW1.noalias() += x.transpose() * dz;
  gb1 += dz.colwise().sum().transpose();
}

class Adam {
 public:
  Adam(std::size_t n, float lr) : lr_(lr), m_(n, 0.0f), v_(n, 0.0f) {}

  void step(std::span<float> params, std::span<const float> grad) {
    ++t_;
    const float c1 = 1.0f - std::pow(kBeta1, static_cast<float>(t_));
    const float c2 = 1.0f - std::pow(kBeta2, static_cast<float>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = kBeta1 * m_[i] + (1.0f - kBeta1) * grad[i];
      v_[i] = kBeta2 * v_[i] + (1.0f - kBeta2) * grad[i] * grad[i];
      const float mhat = m_[i] / c1;
      const float vhat = v_[i] / c2;
      params[i] -= lr_ * mhat / (std::sqrt(vhat) + kEps);
    }
  }

 private:
  static constexpr float kBeta1 = 0.9f;
  static constexpr float kBeta2 = 0.999f;
  static constexpr float kEps = 1e-8f;
  float lr_;
  std::uint64_t t_ = 0;
  std::vector<float> m_, v_;
};

}  // namespace

Triplet sample_triplet(const ClusterFamilies& families, const Datastore& ds,
                       PivotMode mode, std::mt19937_64& rng) {
  return TripletSampler(families, ds).sample(mode, rng);
}

TrainResult train(const Datastore& ds, const ClusterFamilies& families,
                  const TrainConfig& config) {
  if (config.m == 0 || config.m >= ds.dim()) {
    raise(ErrorCode::InvalidConfig,
          "output dim must satisfy 0 < m < input dim");
  }
  if (config.batch == 0) {
    raise(ErrorCode::InvalidConfig, "batch must be positive");
  }
  if (!(config.lr > 0.0f) || !std::isfinite(config.lr)) {
    raise(ErrorCode::InvalidConfig, "learning rate must be positive");
  }
  if (families.record_count() != ds.size() || families.dim() != ds.dim()) {
    raise(ErrorCode::InvalidParam, "families do not match the datastore");
  }

  std::mt19937_64 rng(config.seed);
  TrainResult result{
      CompactNet<float>(ds.dim(), config.m, head_for(config.loss), ds.vocab()),
      {},
      0};
  CompactNet<float>& net = result.net;
  init_params(net, rng);
  if (config.steps == 0) {
    return result;
  }

  const bool use_nce = mix_has_nce(config.loss);
  const bool use_dr = mix_has_dr(config.loss);
  const bool use_wp = mix_has_wp(config.loss);
  const bool use_triplets = use_nce || use_dr;
  const std::size_t B = config.batch;
  const std::uint32_t d = ds.dim();
  const std::uint32_t m = config.m;

  std::optional<TripletSampler> sampler;
  if (use_triplets) {
    sampler.emplace(families, ds);
  }

  BatchWork work;
  if (use_triplets) {
    work.x.resize(3 * B, d);
    work.z.resize(3 * B, net.hidden_dim());
    work.y.resize(3 * B, m);
    work.dy.resize(3 * B, m);
    work.dz.resize(3 * B, net.hidden_dim());
  }
  if (use_wp) {
    work.xw.resize(B, d);
    work.zw.resize(B, net.hidden_dim());
    work.yw.resize(B, m);
    work.dyw.resize(B, net.vocab());
    work.dzw.resize(B, net.hidden_dim());
    work.wp_targets.resize(B);
  }

  Eigen::VectorXf grad(static_cast<Eigen::Index>(net.params().size()));
  Adam adam(net.params().size(), config.lr);
  result.trace.reserve(config.steps);

  const float inv_b = 1.0f / static_cast<float>(B);
  const auto wc_span = [&]() {
    return net.nce_weight().head(m);
  };
  const auto ws_span = [&]() {
    return net.nce_weight().tail(m);
  };

  for (std::uint32_t step = 0; step < config.steps; ++step) {
    grad.setZero();
    float step_loss = 0.0f;

    if (use_triplets) {
      for (std::size_t b = 0; b < B; ++b) {
        const Triplet t = sampler->sample(config.pivot, rng,
                                          &result.singleton_positive_draws);
        std::copy(t.pivot.begin(), t.pivot.end(), work.x.row(b).data());
        std::copy(t.positive.begin(), t.positive.end(),
                  work.x.row(B + b).data());
        std::copy(t.negative.begin(), t.negative.end(),
                  work.x.row(2 * B + b).data());
      }
      forward_rows(net, work.x, work.z, work.y);
      work.dy.setZero();

      auto ys = work.y.topRows(B);
      auto yp = work.y.middleRows(B, B);
      auto yn = work.y.bottomRows(B);

      if (use_nce) {
        Eigen::VectorXf lp = yp * wc_span() + ys * ws_span();
        Eigen::VectorXf ln = yn * wc_span() + ys * ws_span();
        lp.array() += net.nce_bias();
        ln.array() += net.nce_bias();

        float loss = 0.0f;
        Eigen::VectorXf dlp(B), dln(B);
        for (std::size_t b = 0; b < B; ++b) {
          loss += detail::softplus(-lp[b]) + detail::softplus(ln[b]);
          dlp[b] = (detail::sigmoid(lp[b]) - 1.0f) * inv_b;
          dln[b] = detail::sigmoid(ln[b]) * inv_b;
        }
        step_loss += loss * inv_b;

        Eigen::Map<Eigen::VectorXf> gw(grad.data() + net.nce_w_offset(), 2 * m);
        gw.head(m) += yp.transpose() * dlp + yn.transpose() * dln;
        gw.tail(m) += ys.transpose() * (dlp + dln).eval();
        grad[net.nce_b_offset()] += dlp.sum() + dln.sum();

        work.dy.middleRows(B, B).noalias() += dlp * wc_span().transpose();
        work.dy.bottomRows(B).noalias() += dln * wc_span().transpose();
        work.dy.topRows(B).noalias() +=
            (dlp + dln).eval() * ws_span().transpose();
      }

      if (use_dr) {
        const float delta = static_cast<float>(detail::kDrGuard);
        float loss = 0.0f;
        for (std::size_t b = 0; b < B; ++b) {
          const auto diff_p = (yp.row(b) - ys.row(b)).eval();
          const auto diff_n = (yn.row(b) - ys.row(b)).eval();
          const float np = diff_p.norm();
          const float nn = diff_n.norm();
          loss += np + 1.0f / (nn + delta);

          const auto dp = np > 0.0f
                              ? (diff_p / np * inv_b).eval()
                              : (diff_p * 0.0f).eval();
          const float denom = nn + delta;
          const auto dn = nn > 0.0f
                              ? (-diff_n / (nn * denom * denom) * inv_b).eval()
                              : (diff_n * 0.0f).eval();
          work.dy.row(B + b) += dp;
          work.dy.row(2 * B + b) += dn;
          work.dy.row(b) += -dp - dn;
        }
        step_loss += loss * inv_b;
      }

      backward_rows(net, work.x, work.z, work.dy, work.dz, grad);
    }

    if (use_wp) {
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t idx = bounded(rng, ds.size());
        const auto key = ds.key(idx);
        std::copy(key.begin(), key.end(), work.xw.row(b).data());
        work.wp_targets[b] = ds.value(idx);
      }
      forward_rows(net, work.xw, work.zw, work.yw);

      MatRM<float> logits = work.yw * net.wp_weight();
      logits.rowwise() += net.wp_bias().transpose();

      float loss = 0.0f;
      for (std::size_t b = 0; b < B; ++b) {
        auto row = logits.row(b);
        const float mx = row.maxCoeff();
        const auto exps = (row.array() - mx).exp().eval();
        const float total = exps.sum();
        loss += std::log(total) + mx - row[work.wp_targets[b]];
        work.dyw.row(b) = (exps / total).matrix() * inv_b;
        work.dyw(b, work.wp_targets[b]) -= inv_b;
      }
      step_loss += loss * inv_b;

      Eigen::Map<MatRM<float>> gwpw(grad.data() + net.wp_w_offset(), m,
                                    net.vocab());
      Eigen::Map<Eigen::VectorXf> gwpb(grad.data() + net.wp_b_offset(),
                                       net.vocab());
      gwpw.noalias() += work.yw.transpose() * work.dyw;
      gwpb += work.dyw.colwise().sum().transpose();

      MatRM<float> dY = work.dyw * net.wp_weight().transpose();
      backward_rows(net, work.xw, work.zw, dY, work.dzw, grad);
    }

    adam.step(net.params(),
              std::span<const float>(grad.data(),
                                     static_cast<std::size_t>(grad.size())));
    result.trace.push_back(step_loss);
  }
  return result;
}

Datastore compress_datastore(const Datastore& ds, const CompactNet<float>& net) {
  if (net.input_dim() != ds.dim()) {
    raise(ErrorCode::DimensionMismatch,
          "network input dim " + std::to_string(net.input_dim()) +
              " != datastore dim " + std::to_string(ds.dim()));
  }
  const std::size_t n = ds.size();
  const std::uint32_t m = net.output_dim();
  std::vector<float> new_keys(n * m);
  parallel_for(n, 0, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto y = f_alpha(net, ds.key(i));
      std::copy(y.begin(), y.end(), new_keys.begin() + i * m);
    }
  });
  std::vector<Record> records(n);
  for (std::size_t i = 0; i < n; ++i) {
    Record& r = records[i];
    r.key.assign(new_keys.begin() + i * m, new_keys.begin() + (i + 1) * m);
    r.value = ds.value(i);
    r.prob = ds.prob(i);
    r.sentence_id = ds.sentence_id(i);
    r.position = ds.position(i);
    if (ds.has_costs()) {
      r.cost = ds.cost(i);
    }
  }
  return Datastore::build(records, m, ds.vocab());
}

MarginReport margin_report(const CompactNet<float>& net, const Datastore& ds,
                           const ClusterFamilies& families, PivotMode mode,
                           std::size_t n_triplets, std::uint64_t seed) {
  if (n_triplets == 0) {
    raise(ErrorCode::InvalidParam, "n_triplets must be positive");
  }
  TripletSampler sampler(families, ds);
  std::mt19937_64 rng(seed);
  double pos_sum = 0.0, neg_sum = 0.0;
  for (std::size_t i = 0; i < n_triplets; ++i) {
    const Triplet t = sampler.sample(mode, rng);
    const auto zs = f_alpha(net, std::span<const float>(t.pivot));
    const auto zp = f_alpha(net, std::span<const float>(t.positive));
    const auto zn = f_alpha(net, std::span<const float>(t.negative));
    pos_sum += std::sqrt(squared_l2(zp, zs));
    neg_sum += std::sqrt(squared_l2(zn, zs));
  }
  MarginReport report;
  report.mean_pivot_positive = pos_sum / static_cast<double>(n_triplets);
  report.mean_pivot_negative = neg_sum / static_cast<double>(n_triplets);
  report.ratio = report.mean_pivot_negative > 0.0
                     ? report.mean_pivot_positive / report.mean_pivot_negative
                     : std::numeric_limits<double>::infinity();
  return report;
}

void save_network(const CompactNet<float>& net,
                  const std::filesystem::path& path) {
  detail::BinWriter w(path);
  w.magic(kMagic);
  w.u16(kVersion);
  w.u16(0);
  w.u32(net.input_dim());
  w.u32(net.output_dim());
  w.u32(static_cast<std::uint32_t>(net.head()));
  w.u32(net.vocab());
  w.bytes(net.params().data(), net.params().size() * sizeof(float));
  w.close();
}

CompactNet<float> load_network(const std::filesystem::path& path) {
  detail::BinReader r(path);
  r.expect_magic(kMagic);
  r.expect_version(kVersion);
  r.u16();
  const std::uint32_t d = r.u32();
  const std::uint32_t m = r.u32();
  const auto head = static_cast<HeadKind>(r.u32());
  const std::uint32_t vocab = r.u32();
  CompactNet<float> net(d, m, head, vocab);
  r.bytes(net.params().data(), net.params().size() * sizeof(float));
  r.expect_eof();
  return net;
}

}  // namespace knnstore
