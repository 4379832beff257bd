#pragma once

#include <cmath>

#include "xstream/actor.hpp"
#include "xstream/rng.hpp"

namespace xt {

using namespace xstream;

inline ActorConfig small_actor(std::size_t window_tokens = 2048) {
  ActorConfig a;
  a.layers = 2;
  a.model_dim = 16;
  a.heads = 2;
  a.cond_dim = 8;
  a.latent_dim = 4;
  a.mlp_ratio = 2;
  a.window_tokens = window_tokens;
  return a;
}

// 64x64 frames -> 2x2 token grid.
inline SegmentConfig small_segment(std::uint32_t chunks = 3) {
  SegmentConfig s;
  s.video_chunks_per_segment = chunks;
  s.height = 64;
  s.width = 64;
  s.latent_channels = 4;
  return s;
}

inline Tensor randn(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = static_cast<float>(rng.normal());
  return t;
}

inline SegmentCond random_cond(const SegmentConfig& s, std::size_t cond_dim, std::uint64_t seed) {
  return {randn({s.cond_tokens_per_segment(), cond_dim}, seed)};
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace xt
