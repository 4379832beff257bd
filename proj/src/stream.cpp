#include "xstream/stream.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>

#include "xstream/bytes.hpp"
#include "xstream/config.hpp"
#include "xstream/trainkit.hpp"

namespace xstream {

std::string_view frame_type_name(FrameType t) {
  switch (t) {
    case FrameType::text:
      return "text";
    case FrameType::audio:
      return "audio";
    case FrameType::video:
      return "video";
    case FrameType::control:
      return "control";
  }
  return "unknown";
}

std::string encode_frame(const StreamFrame& f) {
  if (f.payload.size() > UINT32_MAX) throw InputError("frame payload too large");
  ByteWriter w;
  w.raw("XSTR");
  w.u8(kFrameVersion);
  w.u8(static_cast<std::uint8_t>(f.type));
  w.u32(f.segment_id);
  w.u16(f.chunk_index);
  w.u32(static_cast<std::uint32_t>(f.payload.size()));
  w.raw(f.payload);
  return w.take();
}

namespace {

// Parses a header at the start of `r`; returns the payload length.
StreamFrame read_header(ByteReader& r, std::uint32_t& payload_len) {
  const std::uint64_t at = r.offset();
  if (r.raw(4) != "XSTR") throw ProtocolError("bad frame magic", at);
  const std::uint8_t version = r.u8();
  if (version != kFrameVersion)
    throw ProtocolError("unsupported frame version " + std::to_string(version), r.offset() - 1);
  const std::uint8_t type = r.u8();
  if (type > static_cast<std::uint8_t>(FrameType::control))
    throw ProtocolError("unknown frame type " + std::to_string(type), r.offset() - 1);
  StreamFrame f;
  f.type = static_cast<FrameType>(type);
  f.segment_id = r.u32();
  f.chunk_index = r.u16();
  payload_len = r.u32();
  return f;
}

}  // namespace

StreamFrame decode_frame(std::string_view bytes, std::uint64_t base) {
  ByteReader r(bytes, base);
  std::uint32_t len = 0;
  StreamFrame f = read_header(r, len);
  if (r.remaining() < len) throw ProtocolError("truncated frame payload", r.offset() + r.remaining());
  f.payload = std::string(r.raw(len));
  if (r.remaining() != 0) throw ProtocolError("trailing bytes after frame", r.offset());
  return f;
}

void FrameDecoder::feed(std::string_view bytes) {
  if (pos_ > 0 && pos_ == buf_.size()) {
    buf_.clear();
    pos_ = 0;
  }
  buf_.append(bytes);
}

std::optional<StreamFrame> FrameDecoder::next() {
  const std::string_view avail = std::string_view(buf_).substr(pos_);
  // Validate whatever part of the header has arrived so bad magic is caught early.
  const std::size_t magic = std::min<std::size_t>(avail.size(), 4);
  if (avail.substr(0, magic) != std::string_view("XSTR").substr(0, magic))
    throw ProtocolError("bad frame magic", consumed_);
  if (avail.size() < kFrameHeaderBytes) return std::nullopt;
  ByteReader r(avail, consumed_);
  std::uint32_t len = 0;
  StreamFrame f = read_header(r, len);
  if (r.remaining() < len) return std::nullopt;
  f.payload = std::string(r.raw(len));
  pos_ += kFrameHeaderBytes + len;
  consumed_ += kFrameHeaderBytes + len;
  if (pos_ > (1u << 20) && pos_ * 2 > buf_.size()) {
    buf_.erase(0, pos_);
    pos_ = 0;
  }
  return f;
}

StreamFrame token_frame(FrameType type, std::uint32_t segment, std::span<const std::uint32_t> ids) {
  if (type != FrameType::text && type != FrameType::audio) throw InputError("token frames are text or audio");
  ByteWriter w;
  for (auto id : ids) {
    if (id > UINT16_MAX) throw InputError("token id " + std::to_string(id) + " does not fit in 16 bits");
    w.u16(static_cast<std::uint16_t>(id));
  }
  return {type, segment, 0, w.take()};
}

StreamFrame video_frame(std::uint32_t segment, std::uint16_t chunk, const Tensor& latents) {
  ByteWriter w;
  for (float x : latents.data()) w.f32(x);
  return {FrameType::video, segment, chunk, w.take()};
}

StreamFrame control_frame(ControlCode code, std::string_view data) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(code));
  w.raw(data);
  return {FrameType::control, 0, 0, w.take()};
}

StreamFrame request_frame(std::uint32_t segments) {
  ByteWriter w;
  w.u32(segments);
  return control_frame(ControlCode::request, w.str());
}

StreamFrame error_frame(std::uint16_t code, std::string_view message) {
  ByteWriter w;
  w.u16(code);
  w.raw(message);
  return control_frame(ControlCode::error, w.str());
}

std::vector<std::uint32_t> frame_tokens(const StreamFrame& f) {
  if (f.type != FrameType::text && f.type != FrameType::audio) throw ProtocolError("not a token frame", 5);
  if (f.payload.size() % 2 != 0) throw ProtocolError("odd token payload length", kFrameHeaderBytes);
  ByteReader r(f.payload, kFrameHeaderBytes);
  std::vector<std::uint32_t> out;
  while (r.remaining()) out.push_back(r.u16());
  return out;
}

Tensor frame_latents(const StreamFrame& f, std::size_t latent_dim) {
  if (f.type != FrameType::video) throw ProtocolError("not a video frame", 5);
  if (latent_dim == 0 || f.payload.empty() || f.payload.size() % (4 * latent_dim) != 0)
    throw ProtocolError("video payload is not a whole number of latent tokens", kFrameHeaderBytes);
  ByteReader r(f.payload, kFrameHeaderBytes);
  Tensor t({f.payload.size() / (4 * latent_dim), latent_dim});
  for (auto& x : t.data()) x = r.f32();
  return t;
}

ControlCode frame_control(const StreamFrame& f) {
  if (f.type != FrameType::control) throw ProtocolError("not a control frame", 5);
  if (f.payload.empty()) throw ProtocolError("empty control payload", kFrameHeaderBytes);
  const auto c = static_cast<std::uint8_t>(f.payload[0]);
  if (c > static_cast<std::uint8_t>(ControlCode::error))
    throw ProtocolError("unknown control code " + std::to_string(c), kFrameHeaderBytes);
  return static_cast<ControlCode>(c);
}

std::uint32_t request_segments(const StreamFrame& f) {
  if (frame_control(f) != ControlCode::request) throw ProtocolError("not a request frame", kFrameHeaderBytes);
  ByteReader r(f.payload, kFrameHeaderBytes);
  r.u8();
  return r.u32();
}

std::pair<std::uint16_t, std::string> frame_error(const StreamFrame& f) {
  if (frame_control(f) != ControlCode::error) throw ProtocolError("not an error frame", kFrameHeaderBytes);
  ByteReader r(f.payload, kFrameHeaderBytes);
  r.u8();
  const std::uint16_t code = r.u16();
  return {code, std::string(r.raw(r.remaining()))};
}

void PipelineConfig::validate() const {
  if (queue_capacity < 1) throw ConfigError("stream.queue_capacity must be >= 1");
}

PipelineConfig PipelineConfig::from_config(const Config& cfg) {
  PipelineConfig p;
  const auto cap = cfg.get_int("stream.queue_capacity");
  if (cap < 1) throw ConfigError("stream.queue_capacity must be >= 1");
  p.queue_capacity = static_cast<std::size_t>(cap);
  const auto& pacing = cfg.get("stream.pacing");
  if (pacing == "realtime")
    p.pacing = Pacing::realtime;
  else if (pacing == "unthrottled")
    p.pacing = Pacing::unthrottled;
  else
    throw ConfigError("unknown stream.pacing '" + pacing + "' (expected realtime or unthrottled)");
  p.seed = cfg.get_u64("stream.seed");
  if (const char* env = std::getenv("XSTREAM_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw ConfigError("XSTREAM_SEED must be an unsigned integer, got '" + std::string(env) + "'");
    p.seed = v;
  }
  return p;
}

Engine Engine::from_config(const Config& cfg) {
  const SegmentConfig seg = SegmentConfig::from_config(cfg);
  const ActorConfig ac = ActorConfig::from_config(cfg);
  ThinkerConfig tc = ThinkerConfig::from_config(cfg);
  if (tc.hidden_dim != ac.cond_dim)
    throw ConfigError("thinker.hidden_dim " + std::to_string(tc.hidden_dim) + " must equal actor.cond_dim " +
                      std::to_string(ac.cond_dim));
  DataConfig data = DataConfig::from_config(cfg);
  data.height = seg.height;
  data.width = seg.width;
  const SyntheticScene portrait(seg, data, ac.cond_dim, 0);
  const int steps = static_cast<int>(cfg.get_int("diffusion.steps"));
  if (steps < 1) throw ConfigError("diffusion.steps must be >= 1");
  ScheduleKind sched = ac.schedule;
  return Engine{seg, ActorModel<float>(ac), ThinkerModel<float>(tc), IdentityRef{portrait.identity()}, steps, sched};
}

namespace {

struct ThinkerSegment {
  std::uint32_t index;
  SegmentOutput out;
};

struct Cancelled {};

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

SessionReport run_session(const Engine& engine, const SessionSpec& spec, const PipelineConfig& cfg,
                          const FrameSink& sink, const FaultHooks* faults) {
  cfg.validate();
  const SegmentConfig& seg = engine.segment;
  const std::uint32_t V = seg.video_chunks_per_segment;
  BoundedQueue<ThinkerSegment> segq(cfg.queue_capacity);
  BoundedQueue<StreamFrame> frameq(cfg.queue_capacity * (2 + V));
  std::atomic<bool> failed{false};
  std::mutex err_mu;
  std::optional<std::string> error;
  auto fail = [&](const std::string& what) {
    {
      std::lock_guard lk(err_mu);
      if (!error) error = what;
    }
    failed = true;
    segq.close();
  };

  SessionReport rep;
  const auto t0 = Clock::now();
  const double seg_seconds = V * seg.chunk_seconds();

  // Writer: the only thread that touches the sink.
  std::thread writer([&] {
    bool open = true;
    while (auto f = frameq.pop()) {
      if (!open) continue;
      if (cfg.pacing == Pacing::realtime && f->type == FrameType::video)
        std::this_thread::sleep_until(t0 + std::chrono::duration_cast<Clock::duration>(
                                               std::chrono::duration<double>(f->segment_id * seg_seconds)));
      const double at = ms_since(t0);
      if (f->type == FrameType::text && rep.first_text_ms < 0) rep.first_text_ms = at;
      if (f->type == FrameType::video && rep.first_video_chunk_ms < 0) rep.first_video_chunk_ms = at;
      ++rep.frames;
      if (f->type == FrameType::text) ++rep.text_frames;
      if (f->type == FrameType::audio) ++rep.audio_frames;
      if (f->type == FrameType::video) ++rep.video_frames;
      if (!sink(*f)) {
        open = false;
        rep.cancelled = true;
        frameq.close();
        segq.close();
      }
    }
  });

  auto emit = [&](StreamFrame f) {
    if (!frameq.push(std::move(f))) throw Cancelled{};
  };

  std::thread thinker([&] {
    try {
      ConversationContext ctx(engine.thinker.config().context_limit);
      for (const auto& q : spec.queries) ingest_query(ctx, q.tokens, q.modality, engine.thinker.config());
      for (std::uint32_t s = 0; s < spec.segments; ++s) {
        if (faults && faults->thinker_fail_segment == s) throw Error("injected thinker failure");
        if (ctx.empty()) throw StateError("no query tokens to respond to");
        ThinkerSegment ts{s, step_segment(engine.thinker, ctx)};
        if (!segq.push(std::move(ts))) return;
      }
      segq.close();
    } catch (const std::exception& e) {
      fail(std::string("thinker: ") + e.what());
    }
  });

  std::thread actor([&] {
    try {
      emit(control_frame(ControlCode::start));
      GenerationOptions go;
      go.segment = seg;
      go.steps = engine.diffusion_steps;
      go.seed = cfg.seed;
      go.schedule = engine.schedule;
      ActorSession session(engine.actor, go, &engine.identity);
      while (auto ts = segq.pop()) {
        if (faults && faults->actor_fail_segment == ts->index) throw Error("injected actor failure");
        emit(token_frame(FrameType::text, ts->index, ts->out.text));
        emit(token_frame(FrameType::audio, ts->index, ts->out.audio));
        session.generate_segment({ts->out.hidden}, [&](const LatentChunk& c) {
          emit(video_frame(static_cast<std::uint32_t>(c.segment), static_cast<std::uint16_t>(c.index_in_segment),
                           c.latents));
        });
      }
      if (failed) {
        std::lock_guard lk(err_mu);
        emit(error_frame(1, *error));
      } else {
        emit(control_frame(ControlCode::end));
      }
    } catch (const Cancelled&) {
    } catch (const std::exception& e) {
      fail(std::string("actor: ") + e.what());
      try {
        std::lock_guard lk(err_mu);
        emit(error_frame(2, *error));
      } catch (const Cancelled&) {
      }
    }
    frameq.close();
  });

  thinker.join();
  actor.join();
  writer.join();
  rep.total_ms = ms_since(t0);
  rep.chunks_per_second = rep.total_ms > 0 ? rep.video_frames / (rep.total_ms / 1000.0) : 0.0;
  rep.segment_queue_high_water = segq.high_water();
  rep.frame_queue_high_water = frameq.high_water();
  rep.error = error;
  return rep;
}

BenchReport bench_schedules(const Engine& engine, std::uint32_t chunks, int steps, std::uint64_t seed, int repeats) {
  if (chunks < 1 || steps < 1 || repeats < 1) throw ConfigError("bench needs chunks, steps and repeats >= 1");
  SegmentConfig seg = engine.segment;
  seg.video_chunks_per_segment = chunks;
  Rng rng(derive_seed({seed, 0xbe4c}));
  Tensor cond({seg.cond_tokens_per_segment(), engine.actor.config().cond_dim});
  for (auto& x : cond.data()) x = static_cast<float>(rng.normal());

  BenchReport rep;
  auto run_one = [&](ScheduleKind kind, std::uint64_t& passes) {
    GenerationOptions go;
    go.segment = seg;
    go.steps = steps;
    go.seed = seed;
    go.schedule = kind;
    const auto t0 = Clock::now();
    ActorSession s(engine.actor, go, &engine.identity);
    s.generate_segment({cond});
    passes = s.stats().denoise_rounds;
    return ms_since(t0);
  };
  // One untimed round warms caches and the allocator; the timed rounds
  // alternate so drift in machine speed hits both schedules alike.
  run_one(ScheduleKind::sequential, rep.naive_passes);
  run_one(ScheduleKind::pyramid, rep.pyramid_passes);
  std::vector<double> naive, pyramid;
  for (int r = 0; r < repeats; ++r) {
    naive.push_back(run_one(ScheduleKind::sequential, rep.naive_passes));
    pyramid.push_back(run_one(ScheduleKind::pyramid, rep.pyramid_passes));
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : (v[h - 1] + v[h]) / 2;
  };
  rep.naive_ms = median(std::move(naive));
  rep.pyramid_ms = median(std::move(pyramid));
  return rep;
}

std::string OrderChecker::accept(const StreamFrame& f) {
  if (finished_) return "frame after end of stream";
  if (f.type == FrameType::control) {
    ControlCode c;
    try {
      c = frame_control(f);
    } catch (const ProtocolError& e) {
      return e.what();
    }
    if (c == ControlCode::start) {
      if (state_ != 0) return "unexpected start frame";
      state_ = 1;
      return {};
    }
    if (c == ControlCode::error) {
      finished_ = true;
      return {};
    }
    if (c == ControlCode::end) {
      if (state_ != 1) return "end frame inside a segment";
      finished_ = true;
      return {};
    }
    return "unexpected control frame";
  }
  switch (state_) {
    case 0:
      return "data frame before start";
    case 1:
      if (f.type != FrameType::text) return "expected a text frame";
      if (static_cast<std::int64_t>(f.segment_id) != segment_ + 1) return "segment ids must increase by one";
      segment_ = f.segment_id;
      state_ = 2;
      return {};
    case 2:
      if (f.type != FrameType::audio || f.segment_id != segment_) return "expected the segment's audio frame";
      state_ = 3;
      next_chunk_ = 0;
      return {};
    default:
      if (f.type != FrameType::video || f.segment_id != segment_) return "expected a video frame";
      if (f.chunk_index != next_chunk_) return "video chunks out of order";
      if (++next_chunk_ == chunks_) state_ = 1;
      return {};
  }
}

std::string frame_event_json(const StreamFrame& f) {
  return "{\"type\":\"" + std::string(frame_type_name(f.type)) + "\",\"segment\":" + std::to_string(f.segment_id) +
         ",\"chunk\":" + std::to_string(f.chunk_index) + ",\"bytes\":" + std::to_string(f.payload.size()) + "}";
}

}  // namespace xstream
