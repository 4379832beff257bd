#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "xstream/actor.hpp"
#include "xstream/interleave.hpp"
#include "xstream/numcore.hpp"

namespace xstream {

class Config;

struct ThinkerConfig {
  std::size_t vocab_text = 256;
  std::size_t vocab_audio = 256;
  std::size_t hidden_dim = 64;
  std::size_t context_limit = 8192;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::uint64_t seed = 7;
  std::uint32_t text_per_segment = 13;
  std::uint32_t audio_per_segment = 26;
  double rope_base = 10000.0;

  std::uint32_t segment_tokens() const { return text_per_segment + audio_per_segment; }
  void validate() const;

  static ThinkerConfig from_config(const Config& cfg);
};

enum class Role : std::uint8_t { user = 0, agent = 1 };

struct ContextEntry {
  std::uint32_t id;
  Modality modality;
  Role role;
  bool operator==(const ContextEntry&) const = default;
};

// FIFO ring of conversation tokens; the oldest entries go first.
class ConversationContext {
 public:
  explicit ConversationContext(std::size_t limit);

  void push(ContextEntry e);
  std::size_t size() const noexcept { return ring_.size(); }
  bool empty() const noexcept { return ring_.empty(); }
  std::size_t limit() const noexcept { return limit_; }
  const std::deque<ContextEntry>& entries() const noexcept { return ring_; }
  std::uint64_t evicted() const noexcept { return evicted_; }

 private:
  std::size_t limit_;
  std::deque<ContextEntry> ring_;
  std::uint64_t evicted_ = 0;
};

// Byte-level ids of UTF-8 text.
std::vector<std::uint32_t> text_to_tokens(std::string_view text);

// Appends user tokens. Video tokens and ids outside the vocabulary are rejected.
void ingest_query(ConversationContext& ctx, std::span<const std::uint32_t> tokens, Modality modality,
                  const ThinkerConfig& cfg);

template <typename T>
class ThinkerModel {
 public:
  explicit ThinkerModel(const ThinkerConfig& cfg);

  const ThinkerConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  // Row into the shared embedding table: text ids first, then audio ids.
  std::uint32_t table_index(const ContextEntry& e) const;

  struct Request {
    std::vector<std::uint32_t> rows;  // table indices
    std::vector<Role> roles;
    std::vector<double> positions;
    const std::vector<LayerKV<T>>* prefix = nullptr;
    std::shared_ptr<const BoolMatrix> mask;  // Q x (P + Q)
    std::vector<LayerKV<T>>* kv_out = nullptr;
  };

  // Final-layer (post-LN) hidden states [Q, hidden_dim].
  Var forward(Graph<T>& g, const Request& req);
  Var forward(Graph<T>& g, const Request& req) const;

  Var text_logits(Graph<T>& g, Var hidden);
  Var audio_logits(Graph<T>& g, Var hidden);

  template <typename U>
  ThinkerModel<U> cast() const {
    ThinkerModel<U> out(cfg_);
    for (const auto& p : params_.all()) out.params().get(p.name).value = p.value.template cast<U>();
    return out;
  }

 private:
  template <typename Store>
  static Var forward_impl(const ThinkerConfig& cfg, Store& params, Graph<T>& g, const Request& req);

  ThinkerConfig cfg_;
  ParamStore<T> params_;
};

struct SegmentOutput {
  std::vector<std::uint32_t> text;   // text_per_segment ids
  std::vector<std::uint32_t> audio;  // audio_per_segment ids
  Tensor hidden;                     // [text + audio, hidden_dim], text rows first
};

// Greedy decode of one segment over the whole ring. Emitted tokens are
// appended to ctx with role agent.
SegmentOutput step_segment(const ThinkerModel<float>& model, ConversationContext& ctx);

}  // namespace xstream
