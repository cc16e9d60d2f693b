#pragma once

#include <span>
#include <vector>

#include "advlab/model.hpp"
#include "advlab/surgery_config.hpp"

namespace advlab {

// v = h_{r,n}(current prompt) - reference_h0. The guide is a constant from
// the engine's point of view; it is read out of a finished cache and never
// placed on any tape.
template <typename T>
DirectionalGuide<T> compute_guide(const ActivationCache<T>& cache_current,
                                  std::span<const T> reference_h0, int layer,
                                  std::size_t position) {
  if (layer < 0 || layer >= int(cache_current.stream.size()))
    throw ConfigError("guide layer out of range");
  std::span<const T> h = cache_current.stream[layer].row(position);
  if (reference_h0.size() != h.size())
    throw ConfigError("guide reference width mismatch");
  DirectionalGuide<T> g;
  g.layer = layer;
  g.position = position;
  g.reference_h0.assign(reference_h0.begin(), reference_h0.end());
  g.v.resize(h.size());
  for (std::size_t i = 0; i < h.size(); ++i)
    g.v[i] = h[i] - reference_h0[i];
  return g;
}

// Scalar projection v_{r,n}^T h_{r,n}; the attack maximizes this, so the
// gradient pass minimizes its negation.
template <typename T>
double lila_objective(const ActivationCache<T>& cache,
                      const DirectionalGuide<T>& guide) {
  std::span<const T> h = cache.stream[guide.layer].row(guide.position);
  return dot(std::span<const T>(guide.v.data(), guide.v.size()), h);
}

}  // namespace advlab
