#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "knnstore/clustering.hpp"
#include "knnstore/datastore.hpp"
#include "knnstore/error.hpp"

namespace knnstore {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

enum class HeadKind : std::uint8_t { None = 0, Nce = 1, Wp = 2, NceWp = 3 };

// Two-layer compressor FFN2(sigmoid(FFN1(x))) from input_dim down to
// output_dim, hidden width fixed at 4x the output. Optional training heads:
// a scalar pair-classification head over concatenated [candidate; pivot]
// codes, and a vocabulary word-prediction head. Heads exist only for
// training; compression uses f_alpha alone.
//
// All parameters live in one flat buffer (layout: W1, b1, W2, b2, nce weight,
// nce bias, wp weight, wp bias) so optimizers, serialization, and gradient
// checks can treat the network as a single vector. Scalar type S is float in
// production; tests instantiate double where finite differences need the
// headroom.
template <class S>
class CompactNet {
 public:
  static constexpr std::uint32_t kHiddenFactor = 4;

  CompactNet() = default;

  CompactNet(std::uint32_t input_dim, std::uint32_t output_dim, HeadKind head,
             std::uint32_t vocab = 0)
      : d_(input_dim), m_(output_dim), h_(kHiddenFactor * output_dim),
        head_(head), vocab_(vocab) {
    if (input_dim == 0 || output_dim == 0) {
      raise(ErrorCode::InvalidParam, "network dims must be positive");
    }
    if (has_wp_head() && vocab == 0) {
      raise(ErrorCode::InvalidParam, "wp head requires a vocab size");
    }
    w1_ = 0;
    b1_ = w1_ + std::size_t(d_) * h_;
    w2_ = b1_ + h_;
    b2_ = w2_ + std::size_t(h_) * m_;
    nce_w_ = b2_ + m_;
    std::size_t off = nce_w_;
    if (has_nce_head()) {
      off += 2 * std::size_t(m_) + 1;
    }
    nce_b_ = nce_w_ + 2 * std::size_t(m_);
    wp_w_ = off;
    wp_b_ = wp_w_ + (has_wp_head() ? std::size_t(m_) * vocab_ : 0);
    params_.setZero(
        static_cast<Eigen::Index>(wp_b_ + (has_wp_head() ? vocab_ : 0)));
  }

  std::uint32_t input_dim() const { return d_; }
  std::uint32_t output_dim() const { return m_; }
  std::uint32_t hidden_dim() const { return h_; }
  std::uint32_t vocab() const { return vocab_; }
  HeadKind head() const { return head_; }
  bool has_nce_head() const {
    return head_ == HeadKind::Nce || head_ == HeadKind::NceWp;
  }
  bool has_wp_head() const {
    return head_ == HeadKind::Wp || head_ == HeadKind::NceWp;
  }

  std::span<S> params() {
    return {params_.data(), static_cast<std::size_t>(params_.size())};
  }
  std::span<const S> params() const {
    return {params_.data(), static_cast<std::size_t>(params_.size())};
  }

  Eigen::Map<MatRM<S>> W1() { return {params_.data() + w1_, d_, h_}; }
  Eigen::Map<const MatRM<S>> W1() const { return {params_.data() + w1_, d_, h_}; }
  Eigen::Map<VecX<S>> b1() { return {params_.data() + b1_, h_}; }
  Eigen::Map<const VecX<S>> b1() const { return {params_.data() + b1_, h_}; }
  Eigen::Map<MatRM<S>> W2() { return {params_.data() + w2_, h_, m_}; }
  Eigen::Map<const MatRM<S>> W2() const { return {params_.data() + w2_, h_, m_}; }
  Eigen::Map<VecX<S>> b2() { return {params_.data() + b2_, m_}; }
  Eigen::Map<const VecX<S>> b2() const { return {params_.data() + b2_, m_}; }

  // NCE head: weight over [candidate_code; pivot_code] plus a bias.
  Eigen::Map<VecX<S>> nce_weight() { return {params_.data() + nce_w_, 2 * m_}; }
  Eigen::Map<const VecX<S>> nce_weight() const {
    return {params_.data() + nce_w_, 2 * m_};
  }
  S& nce_bias() { return params_[nce_b_]; }
  S nce_bias() const { return params_[nce_b_]; }

  Eigen::Map<MatRM<S>> wp_weight() { return {params_.data() + wp_w_, m_, vocab_}; }
  Eigen::Map<const MatRM<S>> wp_weight() const {
    return {params_.data() + wp_w_, m_, vocab_};
  }
  Eigen::Map<VecX<S>> wp_bias() { return {params_.data() + wp_b_, vocab_}; }
  Eigen::Map<const VecX<S>> wp_bias() const {
    return {params_.data() + wp_b_, vocab_};
  }

  // Offsets into params() for the gradient buffer views below.
  std::size_t w1_offset() const { return w1_; }
  std::size_t b1_offset() const { return b1_; }
  std::size_t w2_offset() const { return w2_; }
  std::size_t b2_offset() const { return b2_; }
  std::size_t nce_w_offset() const { return nce_w_; }
  std::size_t nce_b_offset() const { return nce_b_; }
  std::size_t wp_w_offset() const { return wp_w_; }
  std::size_t wp_b_offset() const { return wp_b_; }

 private:
  std::uint32_t d_ = 0, m_ = 0, h_ = 0;
  HeadKind head_ = HeadKind::None;
  std::uint32_t vocab_ = 0;
  std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0;
  std::size_t nce_w_ = 0, nce_b_ = 0, wp_w_ = 0, wp_b_ = 0;
  // Eigen-aligned storage: reductions that accumulate into parameter or
  // gradient buffers split their SIMD head/tail by pointer alignment, so a
  // stable alignment is what makes training byte-reproducible.
  VecX<S> params_;
};

// Contrastive sampling roles. The pivot is a cluster centroid in static mode
// or a sampled member in dynamic mode; positive comes from the pivot's
// cluster, negative from a cluster of a different value.
template <class S>
struct TripletT {
  std::vector<S> pivot;
  std::vector<S> positive;
  std::vector<S> negative;
};
using Triplet = TripletT<float>;

template <class S>
struct LossGrad {
  S loss = S(0);
  std::vector<S> grad;  // aligned with CompactNet::params()
};

namespace detail {

template <class S>
S sigmoid(S z) {
  if (z >= S(0)) {
    return S(1) / (S(1) + std::exp(-z));
  }
  const S e = std::exp(z);
  return e / (S(1) + e);
}

template <class S>
S softplus(S z) {
  // log(1 + exp(z)) without overflow.
  if (z > S(0)) {
    return z + std::log1p(std::exp(-z));
  }
  return std::log1p(std::exp(z));
}

// Guard added to the distance-ranking denominator; keeps the reciprocal term
// finite when the negative collapses onto the pivot.
constexpr double kDrGuard = 1e-6;

template <class S>
struct ForwardCache {
  VecX<S> h;  // post-sigmoid hidden activations
  VecX<S> y;  // compressed code
};

template <class S>
ForwardCache<S> forward_cached(const CompactNet<S>& net,
                               Eigen::Map<const VecX<S>> x) {
  ForwardCache<S> cache;
  cache.h = (net.W1().transpose() * x + net.b1())
                .unaryExpr([](S z) { return sigmoid(z); });
  cache.y = net.W2().transpose() * cache.h + net.b2();
  return cache;
}

// Accumulates d(loss)/d(params of f_alpha) into grad for one input, given
// the gradient dy at the compressed code.
template <class S>
void backprop_f_alpha(const CompactNet<S>& net, Eigen::Map<const VecX<S>> x,
                      const ForwardCache<S>& cache, const VecX<S>& dy,
                      std::vector<S>& grad) {
  Eigen::Map<MatRM<S>> gW2(grad.data() + net.w2_offset(), net.hidden_dim(),
                           net.output_dim());
  Eigen::Map<VecX<S>> gb2(grad.data() + net.b2_offset(), net.output_dim());
  Eigen::Map<MatRM<S>> gW1(grad.data() + net.w1_offset(), net.input_dim(),
                           net.hidden_dim());
  Eigen::Map<VecX<S>> gb1(grad.data() + net.b1_offset(), net.hidden_dim());

  gW2.noalias() += cache.h * dy.transpose();
  gb2 += dy;
  const VecX<S> dh = net.W2() * dy;
  const VecX<S> dz =
      dh.array() * cache.h.array() * (S(1) - cache.h.array());
  gW1.noalias() += x * dz.transpose();
  gb1 += dz;
}

template <class S>
Eigen::Map<const VecX<S>> as_vec(std::span<const S> x) {
  return {x.data(), static_cast<Eigen::Index>(x.size())};
}

template <class S>
void check_input_dim(const CompactNet<S>& net, std::size_t got) {
  if (got != net.input_dim()) {
    raise(ErrorCode::DimensionMismatch,
          "input length " + std::to_string(got) + " != network input dim " +
              std::to_string(net.input_dim()));
  }
}

}  // namespace detail

// Deterministic compression of one key. This per-vector kernel is the
// reference path: batch helpers and datastore compression route through it
// so outputs agree bit for bit.
template <class S>
std::vector<S> f_alpha(const CompactNet<S>& net, std::span<const S> x) {
  detail::check_input_dim(net, x.size());
  const auto cache = detail::forward_cached(net, detail::as_vec<S>(x));
  return {cache.y.data(), cache.y.data() + cache.y.size()};
}

// Row-wise application of f_alpha over `count` packed inputs.
template <class S>
std::vector<S> f_alpha_batch(const CompactNet<S>& net, std::span<const S> xs,
                             std::size_t count) {
  if (count == 0 || xs.size() != count * net.input_dim()) {
    raise(ErrorCode::DimensionMismatch, "packed input size mismatch");
  }
  std::vector<S> out(count * net.output_dim());
  for (std::size_t i = 0; i < count; ++i) {
    const auto y =
        f_alpha(net, xs.subspan(i * net.input_dim(), net.input_dim()));
    std::copy(y.begin(), y.end(), out.begin() + i * net.output_dim());
  }
  return out;
}

// Binary classification of {pivot, positive} vs {pivot, negative}:
// -log sigmoid(f_theta([code+, code*])) - log(1 - sigmoid(f_theta([code-, code*]))).
template <class S>
LossGrad<S> nce_loss(const CompactNet<S>& net, const TripletT<S>& triplet) {
  if (!net.has_nce_head()) {
    raise(ErrorCode::MissingHead, "nce_loss requires an NCE head");
  }
  detail::check_input_dim(net, triplet.pivot.size());
  detail::check_input_dim(net, triplet.positive.size());
  detail::check_input_dim(net, triplet.negative.size());

  const auto xs = detail::as_vec<S>(triplet.pivot);
  const auto xp = detail::as_vec<S>(triplet.positive);
  const auto xn = detail::as_vec<S>(triplet.negative);
  const auto cs = detail::forward_cached(net, xs);
  const auto cp = detail::forward_cached(net, xp);
  const auto cn = detail::forward_cached(net, xn);

  const std::uint32_t m = net.output_dim();
  const auto w = net.nce_weight();
  const VecX<S> wc = w.head(m);  // candidate slot
  const VecX<S> ws = w.tail(m);  // pivot slot
  const S lp = wc.dot(cp.y) + ws.dot(cs.y) + net.nce_bias();
  const S ln = wc.dot(cn.y) + ws.dot(cs.y) + net.nce_bias();

  LossGrad<S> out;
  out.loss = detail::softplus(-lp) + detail::softplus(ln);
  out.grad.assign(net.params().size(), S(0));

  const S dlp = detail::sigmoid(lp) - S(1);
  const S dln = detail::sigmoid(ln);

  Eigen::Map<VecX<S>> gw(out.grad.data() + net.nce_w_offset(), 2 * m);
  gw.head(m) += dlp * cp.y + dln * cn.y;
  gw.tail(m) += (dlp + dln) * cs.y;
  out.grad[net.nce_b_offset()] += dlp + dln;

  detail::backprop_f_alpha(net, xp, cp, VecX<S>(dlp * wc), out.grad);
  detail::backprop_f_alpha(net, xn, cn, VecX<S>(dln * wc), out.grad);
  detail::backprop_f_alpha(net, xs, cs, VecX<S>((dlp + dln) * ws), out.grad);
  return out;
}

// Ranking form: ||code+ - code*|| + 1 / (||code- - code*|| + delta).
// Needs no head.
template <class S>
LossGrad<S> dr_loss(const CompactNet<S>& net, const TripletT<S>& triplet) {
  detail::check_input_dim(net, triplet.pivot.size());
  detail::check_input_dim(net, triplet.positive.size());
  detail::check_input_dim(net, triplet.negative.size());

  const auto xs = detail::as_vec<S>(triplet.pivot);
  const auto xp = detail::as_vec<S>(triplet.positive);
  const auto xn = detail::as_vec<S>(triplet.negative);
  const auto cs = detail::forward_cached(net, xs);
  const auto cp = detail::forward_cached(net, xp);
  const auto cn = detail::forward_cached(net, xn);

  const S delta = S(detail::kDrGuard);
  const VecX<S> diff_p = cp.y - cs.y;
  const VecX<S> diff_n = cn.y - cs.y;
  const S norm_p = diff_p.norm();
  const S norm_n = diff_n.norm();

  LossGrad<S> out;
  out.loss = norm_p + S(1) / (norm_n + delta);
  out.grad.assign(net.params().size(), S(0));

  // Exact derivatives of the guarded loss; the norm gradients take the zero
  // subgradient at the (measure-zero) collapse points.
  const VecX<S> dp =
      norm_p > S(0) ? VecX<S>(diff_p / norm_p) : VecX<S>(VecX<S>::Zero(diff_p.size()));
  const S denom = norm_n + delta;
  const VecX<S> dn =
      norm_n > S(0) ? VecX<S>(-diff_n / (norm_n * denom * denom))
                    : VecX<S>(VecX<S>::Zero(diff_n.size()));

  detail::backprop_f_alpha(net, xp, cp, dp, out.grad);
  detail::backprop_f_alpha(net, xn, cn, dn, out.grad);
  detail::backprop_f_alpha(net, xs, cs, VecX<S>(-dp - dn), out.grad);
  return out;
}

// Softmax cross-entropy of the word-prediction head against `target`.
template <class S>
LossGrad<S> wp_loss(const CompactNet<S>& net, std::span<const S> x,
                    std::uint32_t target) {
  if (!net.has_wp_head()) {
    raise(ErrorCode::MissingHead, "wp_loss requires a word-prediction head");
  }
  if (target >= net.vocab()) {
    raise(ErrorCode::ValueOutOfVocab,
          "target " + std::to_string(target) + " >= vocab " +
              std::to_string(net.vocab()));
  }
  detail::check_input_dim(net, x.size());

  const auto xv = detail::as_vec<S>(x);
  const auto cache = detail::forward_cached(net, xv);
  VecX<S> logits = net.wp_weight().transpose() * cache.y + net.wp_bias();

  const S max_logit = logits.maxCoeff();
  const VecX<S> shifted = logits.array() - max_logit;
  const VecX<S> exps = shifted.array().exp();
  const S total = exps.sum();

  LossGrad<S> out;
  out.loss = std::log(total) + max_logit - logits[target];
  out.grad.assign(net.params().size(), S(0));

  VecX<S> dlogits = exps / total;
  dlogits[target] -= S(1);

  Eigen::Map<MatRM<S>> gwpw(out.grad.data() + net.wp_w_offset(),
                            net.output_dim(), net.vocab());
  Eigen::Map<VecX<S>> gwpb(out.grad.data() + net.wp_b_offset(), net.vocab());
  gwpw.noalias() += cache.y * dlogits.transpose();
  gwpb += dlogits;

  detail::backprop_f_alpha(net, xv, cache, VecX<S>(net.wp_weight() * dlogits),
                           out.grad);
  return out;
}

enum class PivotMode { Static, Dynamic };
enum class LossMix { Nce, Dr, Wp, NceDr, NceWp };

inline bool mix_has_nce(LossMix m) {
  return m == LossMix::Nce || m == LossMix::NceDr || m == LossMix::NceWp;
}
inline bool mix_has_dr(LossMix m) { return m == LossMix::Dr || m == LossMix::NceDr; }
inline bool mix_has_wp(LossMix m) { return m == LossMix::Wp || m == LossMix::NceWp; }

// Draws triplets from cluster families: pivot cluster uniform over all
// clusters, positive from the pivot's cluster, negative uniform over the
// clusters of every other value. Requires at least two families.
Triplet sample_triplet(const ClusterFamilies& families, const Datastore& ds,
                       PivotMode mode, std::mt19937_64& rng);

struct TrainConfig {
  LossMix loss = LossMix::Nce;
  PivotMode pivot = PivotMode::Static;
  std::uint32_t m = 64;
  std::uint32_t steps = 20000;
  std::uint32_t batch = 256;
  float lr = 1e-3f;
  std::uint64_t seed = 2;
};

struct TrainResult {
  CompactNet<float> net;
  std::vector<float> trace;  // mean batch loss per step
  std::size_t singleton_positive_draws = 0;
};

// Adam over mini-batches of the configured loss mix (losses summed, each
// averaged over the batch). Deterministic for a fixed seed and thread count;
// steps = 0 returns the initialization untouched.
TrainResult train(const Datastore& ds, const ClusterFamilies& families,
                  const TrainConfig& config);

// Replaces every key by f_alpha(key); all other fields carry through.
Datastore compress_datastore(const Datastore& ds, const CompactNet<float>& net);

// Held-out contrast of compressed distances on freshly sampled triplets.
struct MarginReport {
  double mean_pivot_positive = 0.0;
  double mean_pivot_negative = 0.0;
  double ratio = 0.0;  // positive / negative; < 1 means separation
};

MarginReport margin_report(const CompactNet<float>& net, const Datastore& ds,
                           const ClusterFamilies& families, PivotMode mode,
                           std::size_t n_triplets, std::uint64_t seed);

// Binary network format, magic "PCKN": dims, head kind, then the flat
// parameter buffer as f32.
void save_network(const CompactNet<float>& net,
                  const std::filesystem::path& path);
CompactNet<float> load_network(const std::filesystem::path& path);

}  // namespace knnstore
