#include "knnstore/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "knnstore/error.hpp"
#include "knnstore/rng.hpp"

namespace knnstore {

namespace {

// Scale of blob centers relative to intra_spread. Large enough that distinct
// centers are far apart compared to blob radii at any dimension.
constexpr double kCenterScale = 8.0;
// Noise along the hidden directions is shrunk to this fraction of
// intra_spread; the per-value offset is kHiddenGain times intra_spread.
// Offset / hidden-noise = 4, which a linear probe separates cleanly, while
// the offset energy itself stays far below pairwise-distance fluctuations.
constexpr double kHiddenNoiseRatio = 0.25;
constexpr double kHiddenGain = 1.0;
// Tokens per synthetic sentence.
constexpr std::uint32_t kSentenceLen = 16;
// Stream separator for the held-out query rng.
constexpr std::uint64_t kQueryStream = 0x9e3779b97f4a7c15ull;

void check_config(const SynthConfig& c) {
  if (c.vocab == 0 || c.dim == 0 || c.clusters_per_value == 0 ||
      c.points_per_cluster == 0) {
    raise(ErrorCode::InvalidConfig, "all synth counts must be positive");
  }
  if (c.vocab > c.dim) {
    raise(ErrorCode::InvalidConfig,
          "vocab must not exceed dim (one orthonormal hidden direction per value)");
  }
  if (!(c.intra_spread > 0.0f) || !std::isfinite(c.intra_spread)) {
    raise(ErrorCode::InvalidConfig, "intra_spread must be positive and finite");
  }
  if (!(c.family_overlap >= 0.0f && c.family_overlap <= 1.0f)) {
    raise(ErrorCode::InvalidConfig, "family_overlap must lie in [0, 1]");
  }
}

// Draws the mixture structure from the seed: shared ambient anchors, value
// specific centers, and orthonormal hidden directions. The draw order is
// fixed so the model is stable across store and query generation.
SynthModel build_model(const SynthConfig& c) {
  SynthModel model;
  model.vocab = c.vocab;
  model.dim = c.dim;
  model.clusters_per_value = c.clusters_per_value;

  std::mt19937_64 rng(c.seed);
  NormalSampler normal;
  const double sigma = c.intra_spread;
  const double center_sigma = kCenterScale * sigma;

  // Ambient anchors shared by all values.
  std::vector<double> anchors(std::size_t(c.clusters_per_value) * c.dim);
  for (double& x : anchors) {
    x = center_sigma * normal(rng);
  }
  // Value-specific center offsets, attenuated quadratically by overlap so
  // that near-total overlap leaves only ~intra_spread of separation even at
  // high dimension.
  const double ov = c.family_overlap;
  const double offset_scale = (1.0 - ov) * (1.0 - ov);
  std::vector<double> offsets(std::size_t(c.vocab) * c.clusters_per_value * c.dim);
  for (double& x : offsets) {
    x = offset_scale * center_sigma * normal(rng);
  }
  // Orthonormal hidden directions via Gram-Schmidt on Gaussian draws.
  std::vector<double> dirs(std::size_t(c.vocab) * c.dim);
  for (std::uint32_t v = 0; v < c.vocab; ++v) {
    double* row = dirs.data() + std::size_t(v) * c.dim;
    for (std::uint32_t j = 0; j < c.dim; ++j) {
      row[j] = normal(rng);
    }
    for (std::uint32_t u = 0; u < v; ++u) {
      const double* prev = dirs.data() + std::size_t(u) * c.dim;
      double dot = 0.0;
      for (std::uint32_t j = 0; j < c.dim; ++j) {
        dot += row[j] * prev[j];
      }
      for (std::uint32_t j = 0; j < c.dim; ++j) {
        row[j] -= dot * prev[j];
      }
    }
    double norm = 0.0;
    for (std::uint32_t j = 0; j < c.dim; ++j) {
      norm += row[j] * row[j];
    }
    norm = std::sqrt(norm);
    for (std::uint32_t j = 0; j < c.dim; ++j) {
      row[j] /= norm;
    }
  }

  // Keep the ambient structure orthogonal to the hidden subspace so the
  // hidden projections carry value signal only.
  auto project_off_dirs = [&](std::vector<double>& rows, std::size_t n_rows) {
    for (std::size_t r = 0; r < n_rows; ++r) {
      double* row = rows.data() + r * c.dim;
      for (std::uint32_t v = 0; v < c.vocab; ++v) {
        const double* dir = dirs.data() + std::size_t(v) * c.dim;
        double dot = 0.0;
        for (std::uint32_t j = 0; j < c.dim; ++j) {
          dot += row[j] * dir[j];
        }
        for (std::uint32_t j = 0; j < c.dim; ++j) {
          row[j] -= dot * dir[j];
        }
      }
    }
  };
  project_off_dirs(anchors, c.clusters_per_value);
  project_off_dirs(offsets, std::size_t(c.vocab) * c.clusters_per_value);

  const double gamma = kHiddenGain * sigma;
  model.means.resize(offsets.size());
  for (std::uint32_t v = 0; v < c.vocab; ++v) {
    const double* dir = dirs.data() + std::size_t(v) * c.dim;
    for (std::uint32_t cl = 0; cl < c.clusters_per_value; ++cl) {
      const std::size_t mi = (std::size_t(v) * c.clusters_per_value + cl) * c.dim;
      const double* anchor = anchors.data() + std::size_t(cl) * c.dim;
      const double* off = offsets.data() + mi;
      for (std::uint32_t j = 0; j < c.dim; ++j) {
        model.means[mi + j] =
            static_cast<float>(anchor[j] + off[j] + gamma * dir[j]);
      }
    }
  }
  model.hidden_dirs.resize(std::size_t(c.vocab) * c.dim);
  for (std::size_t i = 0; i < model.hidden_dirs.size(); ++i) {
    model.hidden_dirs[i] = static_cast<float>(dirs[i]);
  }
  return model;
}

std::vector<float> sample_point(const SynthConfig& c, const SynthModel& model,
                                std::uint32_t value, std::uint32_t cluster,
                                std::mt19937_64& rng, NormalSampler& normal) {
  const double sigma = c.intra_spread;
  const auto mean = model.mean(value, cluster);
  std::vector<double> noise(model.dim);
  for (std::uint32_t j = 0; j < model.dim; ++j) {
    noise[j] = sigma * normal(rng);
  }
  // Quiet the noise along every hidden direction.
  for (std::uint32_t v = 0; v < model.vocab; ++v) {
    const auto dir = model.hidden_dir(v);
    double dot = 0.0;
    for (std::uint32_t j = 0; j < model.dim; ++j) {
      dot += noise[j] * dir[j];
    }
    const double shrink = (1.0 - kHiddenNoiseRatio) * dot;
    for (std::uint32_t j = 0; j < model.dim; ++j) {
      noise[j] -= shrink * dir[j];
    }
  }
  std::vector<float> out(model.dim);
  for (std::uint32_t j = 0; j < model.dim; ++j) {
    out[j] = static_cast<float>(mean[j] + noise[j]);
  }
  return out;
}

float sample_prob(std::mt19937_64& rng) {
  // prob = clamp(0.99 * u^0.5, 1e-4, 1.0), u uniform.
  const double u = uniform01(rng);
  const double p = 0.99 * std::sqrt(u);
  return static_cast<float>(std::clamp(p, 1e-4, 1.0));
}

}  // namespace

SynthModel synth_model(const SynthConfig& config) {
  check_config(config);
  return build_model(config);
}

std::vector<Record> synth_generate(const SynthConfig& config) {
  check_config(config);
  const SynthModel model = build_model(config);

  std::mt19937_64 rng(config.seed + 1);
  NormalSampler normal;

  const std::size_t total = std::size_t(config.vocab) *
                            config.clusters_per_value *
                            config.points_per_cluster;
  std::vector<Record> records;
  records.reserve(total);
  for (std::uint32_t v = 0; v < config.vocab; ++v) {
    for (std::uint32_t cl = 0; cl < config.clusters_per_value; ++cl) {
      for (std::uint32_t p = 0; p < config.points_per_cluster; ++p) {
        Record r;
        r.key = sample_point(config, model, v, cl, rng, normal);
        r.value = v;
        records.push_back(std::move(r));
      }
    }
  }

  // Shuffle so sentences interleave values, then lay out sentence ids,
  // positions, and probabilities in final order.
  deterministic_shuffle(records, rng);
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].sentence_id = static_cast<std::uint32_t>(i / kSentenceLen);
    records[i].position = static_cast<std::uint32_t>(i % kSentenceLen);
    records[i].prob = sample_prob(rng);
  }
  return records;
}

std::vector<LabeledQuery> synth_queries(const SynthConfig& config,
                                        std::size_t count) {
  check_config(config);
  const SynthModel model = build_model(config);

  std::mt19937_64 rng(config.seed ^ kQueryStream);
  NormalSampler normal;
  const std::vector<double> uniform(config.vocab, 1.0 / config.vocab);

  std::vector<LabeledQuery> queries;
  queries.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto v = static_cast<std::uint32_t>(bounded(rng, config.vocab));
    const auto cl =
        static_cast<std::uint32_t>(bounded(rng, config.clusters_per_value));
    LabeledQuery q;
    q.key = sample_point(config, model, v, cl, rng, normal);
    q.gold = v;
    q.base_dist = uniform;
    queries.push_back(std::move(q));
  }
  return queries;
}

}  // namespace knnstore
