#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <random>
#include <thread>

#include "test_support.hpp"
#include "xstream/config.hpp"
#include "xstream/net.hpp"
#include "xstream/stream.hpp"

using namespace xt;

namespace {

Engine small_engine(std::uint32_t chunks = 2, int steps = 1) {
  ThinkerConfig tc;
  tc.hidden_dim = 8;
  tc.heads = 2;
  tc.layers = 1;
  const SegmentConfig seg = small_segment(chunks);
  return Engine{seg, ActorModel<float>(small_actor()), ThinkerModel<float>(tc),
                IdentityRef{randn({seg.tokens_per_video_chunk(), 4}, 5)}, steps, ScheduleKind::pyramid};
}

SessionSpec hello(std::uint32_t segments) {
  return {{{Modality::text, {104, 105}}}, segments};
}

std::vector<StreamFrame> collect(const Engine& e, const SessionSpec& spec, PipelineConfig cfg = {},
                                 const FaultHooks* faults = nullptr, SessionReport* rep_out = nullptr) {
  std::vector<StreamFrame> out;
  auto rep = run_session(e, spec, cfg, [&](const StreamFrame& f) {
    out.push_back(f);
    return true;
  }, faults);
  if (rep_out) *rep_out = rep;
  return out;
}

std::string check_order(const std::vector<StreamFrame>& frames, std::uint32_t chunks) {
  OrderChecker oc(chunks);
  for (const auto& f : frames)
    if (auto e = oc.accept(f); !e.empty()) return e;
  return oc.finished() ? "" : "stream did not finish";
}

}  // namespace

TEST_CASE("frame codec layout and round trip") {
  const std::uint32_t ids[] = {1, 2, 3};
  const StreamFrame t = token_frame(FrameType::text, 7, ids);
  const std::string b = encode_frame(t);
  REQUIRE(b.size() == kFrameHeaderBytes + 6);
  CHECK(b.substr(0, 4) == "XSTR");
  CHECK(b[4] == 1);
  CHECK(b[5] == 0);
  CHECK(decode_frame(b) == t);
  CHECK(frame_tokens(decode_frame(b)) == std::vector<std::uint32_t>{1, 2, 3});

  Tensor lat = randn({64, 8}, 11);
  lat[0] = -0.0f;
  lat[1] = 1e-40f;
  const StreamFrame v = video_frame(3, 5, lat);
  const StreamFrame back = decode_frame(encode_frame(v));
  CHECK(back.segment_id == 3);
  CHECK(back.chunk_index == 5);
  const Tensor got = frame_latents(back, 8);
  REQUIRE(got.shape() == lat.shape());
  CHECK(std::memcmp(got.data().data(), lat.data().data(), lat.size() * 4) == 0);

  CHECK(request_segments(decode_frame(encode_frame(request_frame(9)))) == 9);
  const auto err = frame_error(decode_frame(encode_frame(error_frame(42, "boom"))));
  CHECK(err.first == 42);
  CHECK(err.second == "boom");
  CHECK(frame_control(control_frame(ControlCode::end)) == ControlCode::end);
  CHECK_THROWS_AS(token_frame(FrameType::video, 0, ids), InputError);
  const std::uint32_t big[] = {70000};
  CHECK_THROWS_AS(token_frame(FrameType::audio, 0, big), InputError);
}

TEST_CASE("decode errors carry offsets") {
  const std::uint32_t ids[] = {1, 2, 3};
  std::string b = encode_frame(token_frame(FrameType::text, 0, ids));

  auto offset_of = [](const std::string& bytes, std::uint64_t base = 0) -> std::int64_t {
    try {
      decode_frame(bytes, base);
    } catch (const ProtocolError& e) {
      return static_cast<std::int64_t>(e.offset());
    }
    return -1;
  };
  std::string bad = b;
  bad.replace(0, 4, "XXXX");
  CHECK(offset_of(bad) == 0);
  CHECK(offset_of(bad, 100) == 100);
  bad = b;
  bad[4] = 9;
  CHECK(offset_of(bad) == 4);
  bad = b;
  bad[5] = 4;
  CHECK(offset_of(bad) == 5);
  CHECK(offset_of(b.substr(0, b.size() - 1)) == static_cast<std::int64_t>(b.size() - 1));
  CHECK(offset_of(b + "z") == static_cast<std::int64_t>(b.size()));
  CHECK(offset_of(b.substr(0, 10)) >= 0);

  FrameDecoder d;
  d.feed(b);
  d.feed("XX");
  CHECK(d.next().has_value());
  try {
    d.next();
    FAIL("bad magic accepted");
  } catch (const ProtocolError& e) {
    CHECK(e.offset() == b.size());
  }
}

TEST_CASE("decoder reassembles arbitrary splits") {
  const Engine e = small_engine();
  std::string wire;
  std::vector<StreamFrame> want;
  for (std::uint32_t segs : {2u, 0u, 1u}) {
    for (auto& f : collect(e, hello(segs))) {
      wire += encode_frame(f);
      want.push_back(f);
    }
  }
  std::mt19937 g(3);
  for (int trial = 0; trial < 20; ++trial) {
    FrameDecoder d;
    std::vector<StreamFrame> got;
    std::size_t at = 0;
    while (at < wire.size()) {
      const std::size_t n = std::min<std::size_t>(wire.size() - at, 1 + g() % 37);
      d.feed(std::string_view(wire).substr(at, n));
      at += n;
      while (auto f = d.next()) got.push_back(*f);
    }
    REQUIRE(got == want);
    CHECK(d.buffered() == 0);
    CHECK(d.consumed() == wire.size());
  }
}

TEST_CASE("session frame shape") {
  const Engine e = small_engine(6);
  SessionReport rep;
  const auto frames = collect(e, {{{Modality::text, {1, 2, 3}}}, 2}, {}, nullptr, &rep);
  REQUIRE(frames.size() == 2 + 2 * 8);
  CHECK(frame_control(frames.front()) == ControlCode::start);
  CHECK(frame_control(frames.back()) == ControlCode::end);
  for (std::uint32_t s = 0; s < 2; ++s) {
    const auto& text = frames[1 + s * 8];
    const auto& audio = frames[2 + s * 8];
    CHECK(text.type == FrameType::text);
    CHECK(frame_tokens(text).size() == 13);
    CHECK(audio.type == FrameType::audio);
    CHECK(frame_tokens(audio).size() == 26);
    for (std::uint16_t c = 0; c < 6; ++c) {
      const auto& v = frames[3 + s * 8 + c];
      CHECK(v.type == FrameType::video);
      CHECK(v.segment_id == s);
      CHECK(v.chunk_index == c);
      CHECK(frame_latents(v, 4).shape() == Shape{4, 4});
    }
  }
  CHECK(rep.video_frames == 12);
  CHECK(rep.text_frames == 2);
  CHECK(rep.audio_frames == 2);
  CHECK(rep.frames == frames.size());
  CHECK_FALSE(rep.cancelled);
  CHECK_FALSE(rep.error);
  CHECK(check_order(frames, 6).empty());
  // Segment 0's first chunk goes out before segment 1's text.
  CHECK(rep.first_video_chunk_ms >= rep.first_text_ms);

  const auto none = collect(e, hello(0));
  REQUIRE(none.size() == 2);
  CHECK(frame_control(none[0]) == ControlCode::start);
  CHECK(frame_control(none[1]) == ControlCode::end);
}

TEST_CASE("sessions are deterministic and seeded") {
  const Engine e = small_engine();
  const auto a = collect(e, hello(3));
  CHECK(a == collect(e, hello(3)));
  PipelineConfig other;
  other.seed = 1;
  const auto b = collect(e, hello(3), other);
  REQUIRE(b.size() == a.size());
  bool video_differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].type == FrameType::video) video_differs |= a[i].payload != b[i].payload;
    if (a[i].type == FrameType::text) CHECK(a[i] == b[i]);
  }
  CHECK(video_differs);
  // Queue sizing never changes content.
  PipelineConfig wide;
  wide.queue_capacity = 7;
  CHECK(collect(e, hello(3), wide) == a);
}

TEST_CASE("ordering holds for random sessions") {
  std::mt19937 g(17);
  for (std::uint32_t chunks : {1u, 3u}) {
    const Engine e = small_engine(chunks);
    for (int trial = 0; trial < 12; ++trial) {
      SessionSpec spec;
      const int nq = 1 + static_cast<int>(g() % 3);
      for (int q = 0; q < nq; ++q) {
        Query qq;
        qq.modality = g() % 2 ? Modality::text : Modality::audio;
        const int len = 1 + static_cast<int>(g() % 20);
        for (int i = 0; i < len; ++i) qq.tokens.push_back(g() % 256);
        spec.queries.push_back(qq);
      }
      spec.segments = g() % 5;
      PipelineConfig cfg;
      cfg.queue_capacity = 1 + g() % 4;
      SessionReport rep;
      const auto frames = collect(e, spec, cfg, nullptr, &rep);
      INFO("trial " << trial << " chunks " << chunks);
      CHECK(check_order(frames, chunks).empty());
      CHECK(frames.size() == 2 + spec.segments * (2 + chunks));
      CHECK(rep.segment_queue_high_water <= cfg.queue_capacity);
      CHECK(rep.frame_queue_high_water <= cfg.queue_capacity * (2 + chunks));
    }
  }
}

TEST_CASE("order checker rejects bad streams") {
  const Engine e = small_engine(2);
  const auto good = collect(e, hello(2));
  REQUIRE(check_order(good, 2).empty());

  auto without = [&](std::size_t i) {
    auto v = good;
    v.erase(v.begin() + static_cast<std::ptrdiff_t>(i));
    return v;
  };
  for (std::size_t i = 0; i < good.size(); ++i) CHECK_FALSE(check_order(without(i), 2).empty());
  auto swapped = good;
  std::swap(swapped[3], swapped[4]);
  CHECK_FALSE(check_order(swapped, 2).empty());
  auto extra = good;
  extra.push_back(good[1]);
  CHECK_FALSE(check_order(extra, 2).empty());
  auto wrong_seg = good;
  wrong_seg[5].segment_id = 0;
  CHECK_FALSE(check_order(wrong_seg, 2).empty());
  // An error frame is a valid ending at any point.
  std::vector<StreamFrame> cut(good.begin(), good.begin() + 4);
  cut.push_back(error_frame(2, "x"));
  CHECK(check_order(cut, 2).empty());
}

TEST_CASE("slow consumer loses nothing") {
  const Engine e = small_engine(2);
  PipelineConfig cfg;
  cfg.queue_capacity = 2;
  OrderChecker oc(2);
  std::size_t n = 0;
  std::string bad;
  const auto rep = run_session(e, hello(100), cfg, [&](const StreamFrame& f) {
    if (auto err = oc.accept(f); !err.empty() && bad.empty()) bad = err;
    ++n;
    std::this_thread::sleep_for(std::chrono::microseconds(300));
    return true;
  });
  CHECK(bad.empty());
  CHECK(oc.finished());
  CHECK(n == 2 + 100 * 4);
  CHECK(rep.video_frames == 200);
  // Back-pressure filled the queues without exceeding them.
  CHECK(rep.frame_queue_high_water == cfg.queue_capacity * 4);
  CHECK(rep.segment_queue_high_water <= cfg.queue_capacity);
}

TEST_CASE("worker failures end the stream with an error frame") {
  const Engine e = small_engine(2);
  for (std::uint32_t at : {0u, 2u}) {
    FaultHooks actor_fault;
    actor_fault.actor_fail_segment = at;
    SessionReport rep;
    auto frames = collect(e, hello(4), {}, &actor_fault, &rep);
    REQUIRE_FALSE(frames.empty());
    CHECK(frame_control(frames.back()) == ControlCode::error);
    CHECK(frame_error(frames.back()).first == 2);
    CHECK(frame_error(frames.back()).second.find("injected actor failure") != std::string::npos);
    CHECK(check_order(frames, 2).empty());
    CHECK(rep.error.has_value());
    CHECK(rep.video_frames == at * 2);

    FaultHooks thinker_fault;
    thinker_fault.thinker_fail_segment = at;
    frames = collect(e, hello(4), {}, &thinker_fault, &rep);
    CHECK(frame_control(frames.back()) == ControlCode::error);
    CHECK(frame_error(frames.back()).first == 1);
    CHECK(frame_error(frames.back()).second.find("thinker") != std::string::npos);
    CHECK(check_order(frames, 2).empty());
    CHECK(rep.video_frames <= at * 2);
  }
  // No query tokens: the thinker has nothing to answer.
  const auto frames = collect(e, {{}, 1});
  CHECK(frame_control(frames.back()) == ControlCode::error);
  // Zero segments never consults the context.
  CHECK(frame_control(collect(e, {{}, 0}).back()) == ControlCode::end);
}

TEST_CASE("sink cancellation stops the session cleanly") {
  const Engine e = small_engine(2);
  for (std::size_t stop_after : {1u, 3u, 10u}) {
    std::size_t n = 0;
    const auto rep = run_session(e, hello(1000), {}, [&](const StreamFrame&) { return ++n < stop_after; });
    CHECK(rep.cancelled);
    CHECK(n == stop_after);
  }
  // The shared engine is still usable afterwards.
  CHECK(check_order(collect(e, hello(2)), 2).empty());
  CHECK(collect(e, hello(2)) == collect(e, hello(2)));
}

TEST_CASE("realtime pacing releases segments on the clock") {
  Engine e = small_engine(1);
  e.segment.fps = 100.0;  // 0.08 s per segment
  const double seg_ms = 1000.0 * e.segment.chunk_seconds();
  PipelineConfig cfg;
  cfg.pacing = Pacing::realtime;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::uint32_t, double>> seen;
  const auto rep = run_session(e, hello(4), cfg, [&](const StreamFrame& f) {
    if (f.type == FrameType::video)
      seen.emplace_back(f.segment_id,
                        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    return true;
  });
  REQUIRE(seen.size() == 4);
  for (auto [s, at] : seen) CHECK(at >= s * seg_ms - 1.0);
  CHECK(rep.total_ms >= 3 * seg_ms - 1.0);
}

TEST_CASE("bounded queue") {
  CHECK_THROWS_AS(BoundedQueue<int>(0), ConfigError);
  BoundedQueue<int> q(2);
  CHECK(q.push(1));
  CHECK(q.push(2));
  std::atomic<bool> pushed{false};
  std::thread t([&] {
    q.push(3);
    pushed = true;
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(30));
  CHECK_FALSE(pushed);
  CHECK(q.pop() == 1);
  t.join();
  CHECK(pushed);
  CHECK(q.high_water() == 2);
  q.close();
  CHECK(q.pop() == 2);
  CHECK(q.pop() == 3);
  CHECK_FALSE(q.pop().has_value());
  CHECK_FALSE(q.push(4));
}

TEST_CASE("pipeline config and engine from config") {
  Config c;
  unsetenv("XSTREAM_SEED");
  auto p = PipelineConfig::from_config(c);
  CHECK(p.queue_capacity == 2);
  CHECK(p.pacing == Pacing::unthrottled);
  CHECK(p.seed == 0);
  setenv("XSTREAM_SEED", "77", 1);
  CHECK(PipelineConfig::from_config(c).seed == 77);
  setenv("XSTREAM_SEED", "7x", 1);
  CHECK_THROWS_AS(PipelineConfig::from_config(c), ConfigError);
  unsetenv("XSTREAM_SEED");
  c.set("stream.pacing", "fast");
  CHECK_THROWS_AS(PipelineConfig::from_config(c), ConfigError);
  c.set("stream.pacing", "realtime");
  c.set("stream.queue_capacity", "0");
  CHECK_THROWS_AS(PipelineConfig::from_config(c), ConfigError);

  Config ec;
  ec.set("thinker.hidden_dim", "32");
  CHECK_THROWS_AS(Engine::from_config(ec), ConfigError);
  ec.set("thinker.hidden_dim", "64");
  ec.set("diffusion.steps", "0");
  CHECK_THROWS_AS(Engine::from_config(ec), ConfigError);
  ec.set("diffusion.steps", "3");
  const Engine e = Engine::from_config(ec);
  CHECK(e.diffusion_steps == 3);
  CHECK(e.identity.latents.shape() == Shape{64, 8});
  CHECK(e.segment.video_chunks_per_segment == 6);
}

TEST_CASE("frame event json") {
  Tensor lat({4, 4});
  CHECK(frame_event_json(video_frame(2, 3, lat)) == R"({"type":"video","segment":2,"chunk":3,"bytes":64})");
  const std::uint32_t ids[] = {5};
  CHECK(frame_event_json(token_frame(FrameType::audio, 1, ids)) ==
        R"({"type":"audio","segment":1,"chunk":0,"bytes":2})");
}

TEST_CASE("bench counts passes") {
  const Engine e = small_engine(2);
  const auto r = bench_schedules(e, 6, 5, 0, 1);
  CHECK(r.naive_passes == 30);
  CHECK(r.pyramid_passes == 10);
  CHECK(r.naive_ms > 0);
  CHECK(r.pyramid_ms > 0);
  CHECK_THROWS_AS(bench_schedules(e, 0, 5, 0, 1), ConfigError);
}

TEST_CASE("tcp loopback matches the in-process session") {
  const Engine e = small_engine(2);
  Server server(e, {}, {});
  std::thread srv([&] { server.run(); });

  ClientRequest req{{{Modality::text, {104, 105}}}, 3};
  const auto rep = run_client("127.0.0.1", server.port(), req);
  CHECK(rep.frames == collect(e, hello(3)));
  CHECK(rep.video_frames == 6);
  CHECK_FALSE(rep.server_error);
  CHECK(rep.first_video_chunk_ms >= 0);

  // Concurrent clients each get a whole session.
  std::vector<std::thread> clients;
  std::vector<std::size_t> sizes(3);
  for (int i = 0; i < 3; ++i)
    clients.emplace_back([&, i] { sizes[i] = run_client("127.0.0.1", server.port(), req).frames.size(); });
  for (auto& t : clients) t.join();
  for (auto n : sizes) CHECK(n == 2 + 3 * 4);

  ClientRequest none{{}, 1};
  const auto failed = run_client("127.0.0.1", server.port(), none);
  REQUIRE(failed.server_error.has_value());
  CHECK(failed.server_error->first == 1);

  server.stop();
  srv.join();
  CHECK(server.sessions_completed() >= 5);
}

TEST_CASE("tcp client reports a corrupted stream") {
  const Engine e = small_engine(2);
  ServerOptions opts;
  opts.inject_bad_magic = true;
  Server server(e, {}, opts);
  std::thread srv([&] { server.run(); });
  try {
    run_client("127.0.0.1", server.port(), {{{Modality::text, {1}}}, 1});
    FAIL("expected ProtocolError");
  } catch (const ProtocolError& err) {
    CHECK(err.offset() == 0);
  }
  server.stop();
  srv.join();
  CHECK_THROWS_AS(run_client("127.0.0.1", 1, {{{Modality::text, {1}}}, 1}), IoError);
}
