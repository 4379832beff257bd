#include "xstream/attnmask.hpp"

#include <algorithm>
#include <limits>
#include <string>

namespace xstream {

MaskMode parse_mask_mode(std::string_view s) {
  if (s == "chunk_causal") return MaskMode::chunk_causal;
  if (s == "token_causal") return MaskMode::token_causal;
  throw ConfigError("unknown mask mode '" + std::string(s) + "' (expected chunk_causal or token_causal)");
}

std::string_view mask_mode_name(MaskMode m) {
  return m == MaskMode::chunk_causal ? "chunk_causal" : "token_causal";
}

std::size_t window_chunk_capacity(std::size_t window_tokens, std::size_t tokens_per_chunk) {
  if (tokens_per_chunk == 0) throw ConfigError("tokens_per_chunk must be >= 1");
  return window_tokens / tokens_per_chunk;
}

AttnMask build_windowed_self_mask(const MaskSpec& spec, std::size_t window_chunks) {
  const std::size_t n = spec.total();
  if (n == 0) throw DimensionError("attention mask over zero tokens");
  if (spec.chunks > 0 && spec.tokens_per_chunk == 0) throw DimensionError("chunks present with zero tokens per chunk");
  const std::size_t id = spec.identity_tokens;
  const std::size_t tpc = spec.tokens_per_chunk;
  AttnMask m{BoolMatrix(n, n, false)};
  for (std::size_t q = 0; q < id; ++q)
    for (std::size_t k = 0; k < id; ++k) m.allowed.set(q, k, true);
  for (std::size_t c = 0; c < spec.chunks; ++c) {
    const std::size_t lo_chunk = (window_chunks == 0 || c + 1 < window_chunks) ? 0 : c + 1 - window_chunks;
    for (std::size_t i = 0; i < tpc; ++i) {
      const std::size_t q = id + c * tpc + i;
      for (std::size_t k = 0; k < id; ++k) m.allowed.set(q, k, true);
      const std::size_t k_end = spec.mode == MaskMode::chunk_causal ? id + (c + 1) * tpc : q + 1;
      for (std::size_t k = id + lo_chunk * tpc; k < k_end; ++k) m.allowed.set(q, k, true);
    }
  }
  return m;
}

AttnMask build_self_mask(const MaskSpec& spec) {
  return build_windowed_self_mask(spec, 0);
}

AttnMask build_cross_mask(std::size_t video_tokens_per_segment, std::size_t cond_tokens_per_segment,
                          std::size_t segments) {
  if (video_tokens_per_segment == 0 || cond_tokens_per_segment == 0 || segments == 0)
    throw DimensionError("cross mask counts must be >= 1");
  AttnMask m{BoolMatrix(video_tokens_per_segment * segments, cond_tokens_per_segment * segments, false)};
  for (std::size_t s = 0; s < segments; ++s)
    for (std::size_t q = 0; q < video_tokens_per_segment; ++q)
      for (std::size_t k = 0; k < cond_tokens_per_segment; ++k)
        m.allowed.set(s * video_tokens_per_segment + q, s * cond_tokens_per_segment + k, true);
  return m;
}

std::vector<std::int64_t> visible_window(std::int64_t chunk_index, std::size_t window_tokens,
                                         std::size_t tokens_per_chunk, std::size_t /*identity_tokens*/) {
  if (tokens_per_chunk == 0 || window_tokens < tokens_per_chunk)
    throw ConfigError("visible_window: window must hold at least one chunk");
  const auto cap = static_cast<std::int64_t>(window_tokens / tokens_per_chunk);
  std::vector<std::int64_t> out;
  for (std::int64_t c = std::max<std::int64_t>(0, chunk_index - cap + 1); c <= chunk_index; ++c) out.push_back(c);
  return out;
}

}  // namespace xstream
