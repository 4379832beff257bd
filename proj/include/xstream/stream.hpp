#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xstream/actor.hpp"
#include "xstream/thinker.hpp"

namespace xstream {

class Config;

enum class FrameType : std::uint8_t { text = 0, audio = 1, video = 2, control = 3 };

std::string_view frame_type_name(FrameType t);

// magic(4) version(1) type(1) segment(4) chunk(2) payload_len(4)
inline constexpr std::size_t kFrameHeaderBytes = 16;
inline constexpr std::uint8_t kFrameVersion = 1;

struct StreamFrame {
  FrameType type = FrameType::control;
  std::uint32_t segment_id = 0;
  std::uint16_t chunk_index = 0;
  std::string payload;

  bool operator==(const StreamFrame&) const = default;
};

enum class ControlCode : std::uint8_t { request = 0, start = 1, end = 2, error = 3 };

std::string encode_frame(const StreamFrame& f);
// Exactly one frame; `base` offsets error positions.
StreamFrame decode_frame(std::string_view bytes, std::uint64_t base = 0);

// Incremental decoder over a byte stream. Errors carry the absolute offset.
class FrameDecoder {
 public:
  void feed(std::string_view bytes);
  // Next complete frame, or nullopt when more bytes are needed.
  std::optional<StreamFrame> next();
  std::size_t buffered() const noexcept { return buf_.size() - pos_; }
  std::uint64_t consumed() const noexcept { return consumed_; }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
  std::uint64_t consumed_ = 0;
};

StreamFrame token_frame(FrameType type, std::uint32_t segment, std::span<const std::uint32_t> ids);
StreamFrame video_frame(std::uint32_t segment, std::uint16_t chunk, const Tensor& latents);
StreamFrame control_frame(ControlCode code, std::string_view data = {});
StreamFrame request_frame(std::uint32_t segments);
StreamFrame error_frame(std::uint16_t code, std::string_view message);

std::vector<std::uint32_t> frame_tokens(const StreamFrame& f);
Tensor frame_latents(const StreamFrame& f, std::size_t latent_dim);
ControlCode frame_control(const StreamFrame& f);
std::uint32_t request_segments(const StreamFrame& f);
std::pair<std::uint16_t, std::string> frame_error(const StreamFrame& f);

// Blocking bounded FIFO. push blocks while full; both sides return early once
// closed.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity < 1) throw ConfigError("queue capacity must be >= 1");
  }

  bool push(T item) {
    std::unique_lock lk(mu_);
    not_full_.wait(lk, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    high_water_ = std::max(high_water_, items_.size());
    not_empty_.notify_one();
    return true;
  }

  // nullopt once closed and drained.
  std::optional<T> pop() {
    std::unique_lock lk(mu_);
    not_empty_.wait(lk, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lk(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t high_water() const {
    std::lock_guard lk(mu_);
    return high_water_;
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  std::size_t high_water_ = 0;
  bool closed_ = false;
};

enum class Pacing : std::uint8_t { realtime, unthrottled };

struct PipelineConfig {
  std::size_t queue_capacity = 2;
  Pacing pacing = Pacing::unthrottled;
  std::uint64_t seed = 0;

  void validate() const;
  // Applies XSTREAM_SEED when set.
  static PipelineConfig from_config(const Config& cfg);
};

// Everything a session needs; shared read-only between sessions.
struct Engine {
  SegmentConfig segment;
  ActorModel<float> actor;
  ThinkerModel<float> thinker;
  IdentityRef identity;
  int diffusion_steps = 25;
  ScheduleKind schedule = ScheduleKind::pyramid;

  static Engine from_config(const Config& cfg);
};

struct Query {
  Modality modality = Modality::text;
  std::vector<std::uint32_t> tokens;
};

struct SessionSpec {
  std::vector<Query> queries;
  std::uint32_t segments = 1;
};

// Returns false to cancel the session.
using FrameSink = std::function<bool(const StreamFrame&)>;

// Test-only fault injection.
struct FaultHooks {
  std::optional<std::uint32_t> actor_fail_segment;
  std::optional<std::uint32_t> thinker_fail_segment;
};

struct SessionReport {
  std::uint64_t frames = 0;
  std::uint64_t text_frames = 0;
  std::uint64_t audio_frames = 0;
  std::uint64_t video_frames = 0;
  double first_text_ms = -1.0;
  double first_video_chunk_ms = -1.0;
  double total_ms = 0.0;
  double chunks_per_second = 0.0;
  std::size_t segment_queue_high_water = 0;
  std::size_t frame_queue_high_water = 0;
  bool cancelled = false;
  std::optional<std::string> error;
};

// Thinker, Actor and writer run on separate threads joined by bounded
// queues. Frames reach the sink as [start] then per segment [text][audio]
// [video 0..V-1], then [end]; a worker failure ends the stream with an error
// control frame instead.
SessionReport run_session(const Engine& engine, const SessionSpec& spec, const PipelineConfig& cfg,
                          const FrameSink& sink, const FaultHooks* faults = nullptr);

// Frame-level checks a consumer can apply; returns an empty string when valid.
class OrderChecker {
 public:
  explicit OrderChecker(std::uint32_t video_chunks_per_segment) : chunks_(video_chunks_per_segment) {}
  std::string accept(const StreamFrame& f);
  bool finished() const noexcept { return finished_; }

 private:
  std::uint32_t chunks_;
  int state_ = 0;  // 0 expect start, 1 expect text/end, 2 expect audio, 3 expect video
  std::int64_t segment_ = -1;
  std::uint32_t next_chunk_ = 0;
  bool finished_ = false;
};

struct BenchReport {
  std::uint64_t naive_passes = 0;
  std::uint64_t pyramid_passes = 0;
  double naive_ms = 0.0;  // median over repeats
  double pyramid_ms = 0.0;
};

// One segment of `chunks` chunks denoised chunk by chunk versus with the
// pyramid schedule, same weights, noise and conditioning.
BenchReport bench_schedules(const Engine& engine, std::uint32_t chunks, int steps, std::uint64_t seed, int repeats);

// JSON line for a data frame: {"type","segment","chunk","bytes"}.
std::string frame_event_json(const StreamFrame& f);

}  // namespace xstream
