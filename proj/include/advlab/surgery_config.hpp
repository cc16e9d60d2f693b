#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "advlab/common.hpp"
#include "advlab/tape.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

enum class SurgeryMode {
  None,
  Lsgm,
  Lila,
  LilaDagger,
  LsgmLilaDagger,
};

inline const char* surgery_mode_name(SurgeryMode m) {
  switch (m) {
    case SurgeryMode::None: return "none";
    case SurgeryMode::Lsgm: return "lsgm";
    case SurgeryMode::Lila: return "lila";
    case SurgeryMode::LilaDagger: return "lila+";
    case SurgeryMode::LsgmLilaDagger: return "lsgm-lila+";
  }
  return "?";
}

inline std::optional<SurgeryMode> parse_surgery_mode(const std::string& s) {
  if (s == "none") return SurgeryMode::None;
  if (s == "lsgm") return SurgeryMode::Lsgm;
  if (s == "lila") return SurgeryMode::Lila;
  if (s == "lila+" || s == "lila_dagger") return SurgeryMode::LilaDagger;
  if (s == "lsgm-lila+" || s == "lsgm_lila_dagger")
    return SurgeryMode::LsgmLilaDagger;
  return std::nullopt;
}

// Configuration of the backward-pass interception. beta = infinity is an
// explicit, supported setting (and the default).
struct SurgeryConfig {
  SurgeryMode mode = SurgeryMode::None;
  double gamma = 0.5;
  int layer = 0;  // 0 means "use the model midpoint"
  double beta = std::numeric_limits<double>::infinity();

  bool needs_gamma() const {
    return mode == SurgeryMode::Lsgm || mode == SurgeryMode::LsgmLilaDagger;
  }
  bool needs_guide() const {
    return mode == SurgeryMode::Lila || mode == SurgeryMode::LilaDagger ||
           mode == SurgeryMode::LsgmLilaDagger;
  }

  void validate(int n_layers) const {
    if (needs_gamma() && (gamma < 0.0 || gamma > 1.0))
      throw ConfigError("gamma must lie in [0,1]");
    if (needs_guide()) {
      const int r = resolved_layer(n_layers);
      if (r < 1 || r > n_layers)
        throw ConfigError("surgery layer out of range [1, n_layers]");
    }
    if (!(beta >= 0.0) && !std::isinf(beta))
      throw ConfigError("beta must be >= 0 or infinity");
  }

  // Midpoint default, rounded up for odd depths.
  int resolved_layer(int n_layers) const {
    return layer > 0 ? layer : (n_layers + 1) / 2;
  }
};

// Directional guide for the intermediate-level objective: the displacement
// of the last prompt token's layer-r representation relative to the
// reference (iteration-0) prompt. Treated as a constant by the engine; no
// gradient ever flows through it.
template <typename T>
struct DirectionalGuide {
  std::vector<T> v;             // h_{r,n}(current) - reference_h0
  std::vector<T> reference_h0;  // layer-r, position-n state of the reference
  int layer = 0;                // r
  std::size_t position = 0;     // row index of the last prompt token

  double norm() const {
    return norm2(std::span<const T>(v.data(), v.size()));
  }
};

// Re-normalized gradient replacement at the last prompt token:
//   finite beta: alpha * (g - beta*v) with alpha = |g| / |g - beta*v|
//   beta = inf:  -(|g| / |v|) * v
// Degenerate denominators skip the replacement and flag it.
template <typename T>
RowReplaceOut<T> lila_dagger_replace(std::span<const T> g,
                                     std::span<const T> v, double beta) {
  RowReplaceOut<T> out;
  const double gn = norm2(g);
  if (std::isinf(beta)) {
    const double vn = norm2(v);
    if (vn < kNormEps) {
      out.skipped = true;
      return out;
    }
    const double s = -gn / vn;
    out.value.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.value[i] = T(s * double(v[i]));
    return out;
  }
  std::vector<double> d(g.size());
  double dn2 = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    d[i] = double(g[i]) - beta * double(v[i]);
    dn2 += d[i] * d[i];
  }
  const double dn = std::sqrt(dn2);
  if (dn < kNormEps) {
    out.skipped = true;
    return out;
  }
  const double alpha = gn / dn;
  out.value.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) out.value[i] = T(alpha * d[i]);
  return out;
}

// What the gradient pass should differentiate. CE seeds the loss scalar;
// the projection objective seeds -v directly at the guide's (layer, row)
// stream label, so backward only traverses layers at or below r.
enum class GradObjective { CrossEntropy, NegProjection };

template <typename T>
struct CompiledSurgery {
  HookSet<T> hooks;
  GradObjective objective = GradObjective::CrossEntropy;
  int seed_layer = 0;            // NegProjection: stream label layer
  std::size_t seed_row = 0;      // NegProjection: row carrying -v
  std::vector<T> seed_vector;    // NegProjection: -v
};

// Stream labels are declared by the model when it records the tape.
inline std::string stream_label(int layer) {
  return "stream:" + std::to_string(layer);
}
inline std::string block_out_label(int block) {
  return "block_out:" + std::to_string(block);
}
// z_m, the input of block m (m in [1, 2l]; 2l+1 is the final stream state).
inline std::string boundary_label(int m) {
  return "boundary:" + std::to_string(m);
}
inline constexpr const char* kOneHotLabel = "onehot";

// Compiles a surgery configuration (plus guide, when the mode needs one)
// into engine hooks and an objective selector.
template <typename T>
CompiledSurgery<T> make_hooks(const SurgeryConfig& cfg, int n_layers,
                              const DirectionalGuide<T>* guide) {
  cfg.validate(n_layers);
  if (cfg.needs_guide() && guide == nullptr)
    throw ConfigError("surgery mode requires a directional guide");

  CompiledSurgery<T> out;
  switch (cfg.mode) {
    case SurgeryMode::None:
      break;
    case SurgeryMode::Lsgm:
      out.hooks.residual_branch_scale = T(cfg.gamma);
      break;
    case SurgeryMode::Lila: {
      out.objective = GradObjective::NegProjection;
      out.seed_layer = guide->layer;
      out.seed_row = guide->position;
      out.seed_vector.resize(guide->v.size());
      for (std::size_t i = 0; i < guide->v.size(); ++i)
        out.seed_vector[i] = T(-guide->v[i]);
      break;
    }
    case SurgeryMode::LilaDagger:
    case SurgeryMode::LsgmLilaDagger: {
      if (cfg.mode == SurgeryMode::LsgmLilaDagger)
        out.hooks.residual_branch_scale = T(cfg.gamma);
      RowRule<T> rule;
      rule.label = stream_label(guide->layer);
      rule.row = guide->position;
      const std::vector<T> v = guide->v;
      const double beta = cfg.beta;
      rule.fn = [v, beta](std::span<const T> g) {
        return lila_dagger_replace<T>(g, std::span<const T>(v.data(), v.size()),
                                      beta);
      };
      out.hooks.row_replacements.push_back(std::move(rule));
      break;
    }
  }
  return out;
}

}  // namespace advlab
