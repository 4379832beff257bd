#include "xstream/interleave.hpp"

#include <string>

#include "xstream/config.hpp"
#include "xstream/error.hpp"

namespace xstream {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::text:
      return "text";
    case Modality::audio:
      return "audio";
    case Modality::video:
      return "video";
  }
  return "unknown";
}

void SegmentConfig::validate() const {
  auto positive = [](std::uint64_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string("segment config: ") + name + " must be >= 1");
  };
  positive(text_tokens_per_segment, "text_tokens");
  positive(audio_tokens_per_segment, "audio_tokens");
  positive(video_chunks_per_segment, "video_chunks");
  positive(temporal_compression, "temporal_compression");
  positive(spatial_compression, "spatial_compression");
  positive(height, "height");
  positive(width, "width");
  positive(latent_channels, "latent_channels");
  if (!(audio_rate > 0.0)) throw ConfigError("segment config: audio_rate must be > 0");
  if (!(fps > 0.0)) throw ConfigError("segment config: fps must be > 0");
  if (height % spatial_compression != 0 || width % spatial_compression != 0)
    throw ConfigError("segment config: height " + std::to_string(height) + " and width " + std::to_string(width) +
                      " must be divisible by spatial_compression " + std::to_string(spatial_compression));
  if (!(chunk_seconds() > 0.0)) throw ConfigError("segment config: chunk duration must be > 0");
}

SegmentConfig SegmentConfig::from_config(const Config& cfg) {
  auto u32 = [&](const char* key) {
    const auto v = cfg.get_int(key);
    if (v < 0 || v > UINT32_MAX) throw ConfigError(std::string("config key '") + key + "' out of range");
    return static_cast<std::uint32_t>(v);
  };
  SegmentConfig s;
  s.text_tokens_per_segment = u32("segment.text_tokens");
  s.audio_tokens_per_segment = u32("segment.audio_tokens");
  s.video_chunks_per_segment = u32("segment.video_chunks");
  s.audio_rate = cfg.get_double("segment.audio_rate");
  s.fps = cfg.get_double("segment.fps");
  s.temporal_compression = u32("segment.temporal_compression");
  s.spatial_compression = u32("segment.spatial_compression");
  s.height = u32("segment.height");
  s.width = u32("segment.width");
  s.latent_channels = u32("segment.latent_channels");
  s.validate();
  return s;
}

std::uint64_t SegmentPlan::total_tokens() const {
  std::uint64_t n = 0;
  for (const auto& s : slots) n += s.token_count;
  return n;
}

std::uint64_t SegmentPlan::video_tokens() const {
  std::uint64_t n = 0;
  for (const auto& s : slots)
    if (s.modality == Modality::video) n += s.token_count;
  return n;
}

SegmentPlan build_segment_plan(const SegmentConfig& cfg, std::uint64_t segment_index) {
  cfg.validate();
  SegmentPlan plan;
  plan.segment_index = segment_index;
  plan.tokens_per_video_chunk = cfg.tokens_per_video_chunk();
  plan.slots.push_back({Modality::text, cfg.text_tokens_per_segment, std::nullopt});
  plan.slots.push_back({Modality::audio, cfg.audio_tokens_per_segment, std::nullopt});
  for (std::uint32_t c = 0; c < cfg.video_chunks_per_segment; ++c)
    plan.slots.push_back({Modality::video, plan.tokens_per_video_chunk, c});
  return plan;
}

TimelinePos audio_token_time(const SegmentConfig& cfg, std::uint64_t global_audio_index) {
  return {static_cast<double>(global_audio_index) * cfg.fps / (cfg.audio_rate * cfg.temporal_compression)};
}

TimelinePos video_chunk_time(const SegmentConfig&, std::uint64_t global_chunk_index) {
  return {static_cast<double>(global_chunk_index)};
}

TimelinePos text_token_time(const SegmentConfig& cfg, std::uint64_t segment_index, std::uint32_t j) {
  const double start = audio_token_time(cfg, segment_index * cfg.audio_tokens_per_segment).time_index;
  const double span = audio_token_time(cfg, cfg.audio_tokens_per_segment).time_index;
  return {start + j * (span / cfg.text_tokens_per_segment)};
}

SegmentDurations segment_durations(const SegmentConfig& cfg) {
  return {cfg.audio_tokens_per_segment / cfg.audio_rate, cfg.video_chunks_per_segment * cfg.chunk_seconds()};
}

std::vector<TimelinePos> cond_positions(const SegmentConfig& cfg, std::uint64_t segment_index) {
  std::vector<TimelinePos> out;
  out.reserve(cfg.cond_tokens_per_segment());
  for (std::uint32_t j = 0; j < cfg.text_tokens_per_segment; ++j) out.push_back(text_token_time(cfg, segment_index, j));
  for (std::uint32_t i = 0; i < cfg.audio_tokens_per_segment; ++i)
    out.push_back(audio_token_time(cfg, segment_index * cfg.audio_tokens_per_segment + i));
  return out;
}

}  // namespace xstream
