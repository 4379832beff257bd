#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xstream/attnmask.hpp"
#include "xstream/dforce.hpp"
#include "xstream/interleave.hpp"
#include "xstream/mmrope.hpp"
#include "xstream/numcore.hpp"
#include "xstream/xtar.hpp"

namespace xstream {

class Config;

enum class ForcingMode : std::uint8_t { diffusion, teacher };
enum class ScheduleKind : std::uint8_t { pyramid, sequential };

ForcingMode parse_forcing_mode(std::string_view s);
std::string_view forcing_mode_name(ForcingMode m);
ScheduleKind parse_schedule_kind(std::string_view s);
std::string_view schedule_kind_name(ScheduleKind k);

struct ActorConfig {
  std::size_t layers = 2;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t cond_dim = 64;
  std::size_t latent_dim = 8;
  std::size_t mlp_ratio = 4;
  std::size_t time_embed_dim = 32;
  bool use_identity_ref = true;
  MaskMode mask_mode = MaskMode::chunk_causal;
  ForcingMode forcing_mode = ForcingMode::diffusion;
  std::size_t window_tokens = 2048;
  ScheduleKind schedule = ScheduleKind::pyramid;
  // Block chunks attend only committed (level-0) history, not in-flight chunks.
  bool condition_on_finalized = false;
  std::uint64_t init_seed = 1;
  double rope_base = 10000.0;
  std::string dim_split = "auto";

  std::size_t head_dim() const { return model_dim / heads; }
  RopeParams rope() const;
  void validate() const;

  static ActorConfig from_config(const Config& cfg);
};

// Sinusoidal embedding of a diffusion level: [sin(k f_i)..., cos(k f_i)...]
// with f_i = base^(-i / (dim/2)).
std::vector<double> timestep_sinusoid(int level, std::size_t dim, double base);

template <typename T>
struct LayerKV {
  BasicTensor<T> k;  // RoPE-rotated keys [tokens, model_dim]
  BasicTensor<T> v;
};

// The video transformer: latent + timestep projections, then per block
// self-attention, cross-attention to conditioning states, and an MLP; a
// linear head emits per-token velocities.
template <typename T>
class ActorModel {
 public:
  explicit ActorModel(const ActorConfig& cfg);

  const ActorConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  struct Tokens {
    BasicTensor<T> latents;  // [Q, latent_dim]
    std::vector<int> levels;
    std::vector<Pos3D> positions;
  };

  struct Cond {
    BasicTensor<T> states;  // [C, cond_dim]
    std::vector<Pos3D> positions;
  };

  struct Request {
    const Tokens* tokens = nullptr;
    const Cond* cond = nullptr;                          // optional
    const std::vector<LayerKV<T>>* prefix = nullptr;     // optional, one entry per layer
    std::shared_ptr<const BoolMatrix> self_mask;         // Q x (P + Q)
    std::shared_ptr<const BoolMatrix> cross_mask;        // Q x C, required with cond
    std::vector<LayerKV<T>>* kv_out = nullptr;           // receives the block's own K/V
  };

  // Per-token backbone input: latent projection + timestep MLP. [tokens, model_dim]
  BasicTensor<T> embed_inputs(const BasicTensor<T>& latents, int level) const;

  // Returns the velocity node [Q, latent_dim]. Trainable binding.
  Var forward(Graph<T>& g, const Request& req);
  // Read-only binding for inference.
  Var forward(Graph<T>& g, const Request& req) const;

  // Precision conversion (float weights <-> double for gradient checks).
  template <typename U>
  ActorModel<U> cast() const {
    ActorModel<U> out(cfg_);
    for (const auto& p : params_.all()) out.params().get(p.name).value = p.value.template cast<U>();
    return out;
  }

 private:
  template <typename Store>
  static Var embed(const ActorConfig& cfg, Store& params, Graph<T>& g, const BasicTensor<T>& latents,
                   const std::vector<int>& levels);
  template <typename Store>
  static Var forward_impl(const ActorConfig& cfg, Store& params, Graph<T>& g, const Request& req);

  ActorConfig cfg_;
  ParamStore<T> params_;
};

// Checkpoint helpers. Parameters are stored as "actor/<name>" plus a
// "meta/actor" dims record used to reject mismatched configs.
std::vector<XtarEntry> actor_entries(const ActorModel<float>& model);
void load_actor_entries(ActorModel<float>& model, std::span<const XtarEntry> entries);

struct IdentityRef {
  Tensor latents;  // [tokens_per_chunk, latent_dim]
};

struct SegmentCond {
  Tensor states;  // [text + audio, cond_dim], text block first
};

struct LatentChunk {
  std::uint64_t segment = 0;
  std::uint32_t index_in_segment = 0;
  std::uint64_t global_index = 0;
  Tensor latents;  // [tokens_per_chunk, latent_dim]
};

// Cached attention state: a pinned identity block plus the most recent
// committed chunks, at most window_tokens / tokens_per_chunk of them.
class KvCache {
 public:
  KvCache(std::size_t layers, std::size_t tokens_per_chunk, std::size_t window_tokens);

  void set_identity(std::vector<LayerKV<float>> kv);
  bool has_identity() const noexcept { return !identity_.empty(); }
  std::size_t identity_tokens() const;

  // Appends a chunk; evicts the oldest non-identity chunk beyond capacity.
  void commit(std::int64_t chunk_index, std::vector<LayerKV<float>> kv);

  std::size_t capacity_chunks() const noexcept { return capacity_; }
  std::size_t chunk_count() const noexcept { return chunks_.size(); }
  std::size_t token_count() const;
  std::vector<std::int64_t> chunk_indices() const;
  std::size_t layers() const noexcept { return layers_; }
  std::size_t tokens_per_chunk() const noexcept { return tokens_per_chunk_; }
  std::size_t window_tokens() const noexcept { return window_tokens_; }

  // Per-layer keys/values in column order [identity | chunks oldest..newest];
  // empty when the cache holds nothing.
  std::vector<LayerKV<float>> prefix() const;
  // Chunk index for each prefix column, -1 for identity columns.
  std::vector<std::int64_t> column_chunks() const;

 private:
  struct Entry {
    std::int64_t index;
    std::vector<LayerKV<float>> kv;
  };
  std::size_t layers_;
  std::size_t tokens_per_chunk_;
  std::size_t window_tokens_;
  std::size_t capacity_;
  std::vector<LayerKV<float>> identity_;
  std::deque<Entry> chunks_;
};

// Velocity prediction for a single noisy chunk against a cache (no commit).
Tensor forward_chunk(const ActorModel<float>& model, const SegmentConfig& seg, const Tensor& noisy_chunk, int level,
                     const SegmentCond& cond, std::uint64_t segment_index, const KvCache& cache,
                     std::int64_t chunk_index);

// Runs the clean chunk through the backbone and appends its K/V to the cache.
void commit_chunk(const ActorModel<float>& model, const SegmentConfig& seg, KvCache& cache, const Tensor& clean_chunk,
                  const SegmentCond& cond, std::uint64_t segment_index, std::int64_t chunk_index);

std::vector<Pos3D> identity_positions(const SegmentConfig& seg);

struct GenerationOptions {
  SegmentConfig segment;
  int steps = 25;
  std::uint64_t seed = 0;
  ScheduleKind schedule = ScheduleKind::pyramid;
  // false: recompute the whole visible history every pass (test oracle).
  bool use_cache = true;
  // Replaces the seeded initial noise of a chunk (tests).
  std::function<Tensor(std::uint64_t global_chunk)> noise_override;
};

struct GenerationStats {
  std::uint64_t denoise_rounds = 0;
  std::uint64_t commit_passes = 0;
  std::uint64_t chunks = 0;
};

// One generation session. Owns its KV cache; chunks are finalized and
// committed strictly in index order.
class ActorSession {
 public:
  ActorSession(const ActorModel<float>& model, GenerationOptions opts, const IdentityRef* identity);

  using ChunkCallback = std::function<void(const LatentChunk&)>;

  // Denoises all chunks of the next segment; on_chunk fires as each chunk is finalized.
  std::vector<LatentChunk> generate_segment(const SegmentCond& cond, const ChunkCallback& on_chunk = {});

  const KvCache& cache() const noexcept { return cache_; }
  const GenerationStats& stats() const noexcept { return stats_; }
  std::uint64_t next_segment() const noexcept { return next_segment_; }
  std::int64_t last_complete_chunk() const noexcept { return last_complete_; }
  const NoiseSchedule& schedule() const noexcept { return sched_; }

 private:
  struct History {
    std::int64_t index;
    std::uint64_t segment;
    Tensor latents;
  };

  Tensor initial_noise(std::uint64_t global_chunk) const;
  std::vector<Tensor> run_block(const std::vector<std::int64_t>& chunks, const std::vector<const Tensor*>& latents,
                                const std::vector<int>& levels, const SegmentCond& cond, std::uint64_t segment);
  std::vector<Tensor> run_block_recompute(const std::vector<std::int64_t>& chunks,
                                          const std::vector<const Tensor*>& latents, const std::vector<int>& levels,
                                          const SegmentCond& cond, std::uint64_t segment);
  void commit(std::int64_t chunk, const Tensor& clean, const SegmentCond& cond, std::uint64_t segment);

  const ActorModel<float>& model_;
  GenerationOptions opts_;
  NoiseSchedule sched_;
  std::optional<IdentityRef> identity_;
  KvCache cache_;
  GenerationStats stats_;
  std::uint64_t next_segment_ = 0;
  std::int64_t last_complete_ = -1;
  // Recompute strategy only.
  std::vector<History> history_;
  std::vector<SegmentCond> conds_;
  std::uint64_t conds_base_ = 0;
};

// Pulls per-segment conditioning until the source is exhausted.
using CondSource = std::function<std::optional<SegmentCond>()>;

// Iterator-style stream of finalized chunks in index order. Throws
// TruncationError when a segment's conditioning is incomplete.
class ChunkStream {
 public:
  ChunkStream(const ActorModel<float>& model, GenerationOptions opts, const IdentityRef* identity, CondSource source);

  std::optional<LatentChunk> next();
  const ActorSession& session() const noexcept { return session_; }

 private:
  ActorSession session_;
  CondSource source_;
  std::deque<LatentChunk> pending_;
  bool done_ = false;
};

}  // namespace xstream
