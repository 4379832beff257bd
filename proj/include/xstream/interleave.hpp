#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace xstream {

class Config;

enum class Modality : std::uint8_t { text = 0, audio = 1, video = 2 };

std::string_view modality_name(Modality m);

// Per-segment interleave layout and the media rates that place each token on
// the shared timeline.
struct SegmentConfig {
  std::uint32_t text_tokens_per_segment = 13;
  std::uint32_t audio_tokens_per_segment = 26;
  std::uint32_t video_chunks_per_segment = 6;
  double audio_rate = 12.5;  // Hz
  double fps = 25.0;
  std::uint32_t temporal_compression = 8;
  std::uint32_t spatial_compression = 32;
  std::uint32_t height = 256;
  std::uint32_t width = 256;
  std::uint32_t latent_channels = 8;

  // Throws ConfigError on any violated invariant.
  void validate() const;

  std::uint32_t grid_rows() const { return height / spatial_compression; }
  std::uint32_t grid_cols() const { return width / spatial_compression; }
  std::uint32_t tokens_per_video_chunk() const { return grid_rows() * grid_cols(); }
  std::uint32_t cond_tokens_per_segment() const { return text_tokens_per_segment + audio_tokens_per_segment; }
  std::uint32_t video_tokens_per_segment() const { return video_chunks_per_segment * tokens_per_video_chunk(); }
  // Seconds of raw video covered by one chunk.
  double chunk_seconds() const { return temporal_compression / fps; }

  static SegmentConfig from_config(const Config& cfg);
};

struct Slot {
  Modality modality;
  std::uint32_t token_count;
  std::optional<std::uint32_t> chunk_index;  // video slots only

  bool operator==(const Slot&) const = default;
};

struct SegmentPlan {
  std::uint64_t segment_index = 0;
  std::vector<Slot> slots;
  std::uint32_t tokens_per_video_chunk = 0;

  std::uint64_t total_tokens() const;
  std::uint64_t video_tokens() const;
};

// Position on the shared temporal axis, in latent frames (one video chunk = 1.0).
struct TimelinePos {
  double time_index = 0.0;
  bool operator==(const TimelinePos&) const = default;
};

SegmentPlan build_segment_plan(const SegmentConfig& cfg, std::uint64_t segment_index);

TimelinePos audio_token_time(const SegmentConfig& cfg, std::uint64_t global_audio_index);
TimelinePos video_chunk_time(const SegmentConfig& cfg, std::uint64_t global_chunk_index);
// Text token j of a segment is spread evenly across that segment's audio span.
TimelinePos text_token_time(const SegmentConfig& cfg, std::uint64_t segment_index, std::uint32_t j);

struct SegmentDurations {
  double audio_seconds;
  double video_seconds;
};

SegmentDurations segment_durations(const SegmentConfig& cfg);

// Timeline positions of one segment's conditioning states, text block first.
std::vector<TimelinePos> cond_positions(const SegmentConfig& cfg, std::uint64_t segment_index);

}  // namespace xstream
