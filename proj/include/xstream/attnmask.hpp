#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "xstream/numcore.hpp"

namespace xstream {

enum class MaskMode : std::uint8_t { chunk_causal, token_causal };

MaskMode parse_mask_mode(std::string_view s);
std::string_view mask_mode_name(MaskMode m);

// Layout: identity tokens first, then `chunks` blocks of tokens_per_chunk.
struct MaskSpec {
  std::size_t identity_tokens = 0;
  std::size_t chunks = 0;
  std::size_t tokens_per_chunk = 0;
  MaskMode mode = MaskMode::chunk_causal;

  std::size_t total() const { return identity_tokens + chunks * tokens_per_chunk; }
};

struct AttnMask {
  BoolMatrix allowed;

  std::size_t rows() const { return allowed.rows; }
  std::size_t cols() const { return allowed.cols; }
  bool operator()(std::size_t q, std::size_t k) const { return allowed(q, k); }
  bool operator==(const AttnMask&) const = default;
};

// Identity rows attend the identity block only. chunk_causal: a chunk-c query
// sees identity, chunks < c, and all of chunk c. token_causal: lower-triangular
// over non-identity tokens plus identity columns.
AttnMask build_self_mask(const MaskSpec& spec);

// Same as build_self_mask, additionally hiding chunks older than the most
// recent `window_chunks` relative to the query's chunk. Identity stays visible.
AttnMask build_windowed_self_mask(const MaskSpec& spec, std::size_t window_chunks);

// Video queries of segment s attend exactly the cond tokens of segment s.
AttnMask build_cross_mask(std::size_t video_tokens_per_segment, std::size_t cond_tokens_per_segment,
                          std::size_t segments);

// The most recent floor(window_tokens / tokens_per_chunk) chunk indices <= chunk_index,
// ascending. Identity visibility is unconditional and not part of the result.
std::vector<std::int64_t> visible_window(std::int64_t chunk_index, std::size_t window_tokens,
                                         std::size_t tokens_per_chunk, std::size_t identity_tokens);

std::size_t window_chunk_capacity(std::size_t window_tokens, std::size_t tokens_per_chunk);

}  // namespace xstream
