#include "xstream/xstream.h"

#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include <json.hpp>

#include "xstream/config.hpp"
#include "xstream/net.hpp"
#include "xstream/stream.hpp"
#include "xstream/trainkit.hpp"
#include "xstream/xtar.hpp"

using namespace xstream;

struct xs_config {
  Config cfg;
};

struct xs_engine {
  Engine engine;
};

struct xs_server {
  std::unique_ptr<Server> server;
};

namespace {

thread_local std::string g_error;
thread_local std::uint64_t g_offset = 0;

xs_status fail(xs_status s, const std::string& msg) {
  g_error = msg;
  return s;
}

template <typename F>
xs_status guard(F&& f) {
  g_error.clear();
  g_offset = 0;
  try {
    return f();
  } catch (const ProtocolError& e) {
    g_offset = e.offset();
    return fail(XS_ERR_PROTOCOL, e.what());
  } catch (const DimensionError& e) {
    return fail(XS_ERR_DIMENSION, e.what());
  } catch (const ConfigError& e) {
    return fail(XS_ERR_CONFIG, e.what());
  } catch (const StepError& e) {
    return fail(XS_ERR_STEP, e.what());
  } catch (const StateError& e) {
    return fail(XS_ERR_STATE, e.what());
  } catch (const InputError& e) {
    return fail(XS_ERR_INPUT, e.what());
  } catch (const IoError& e) {
    return fail(XS_ERR_IO, e.what());
  } catch (const GradCheckError& e) {
    return fail(XS_ERR_GRADCHECK, e.what());
  } catch (const TruncationError& e) {
    return fail(XS_ERR_TRUNCATION, e.what());
  } catch (const TrainingDiverged& e) {
    return fail(XS_ERR_DIVERGED, e.what());
  } catch (const std::bad_alloc&) {
    return fail(XS_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(XS_ERR_INTERNAL, e.what());
  }
}

xs_status copy_out(const std::string& s, char* buf, std::size_t cap, std::size_t* len) {
  if (len) *len = s.size() + 1;
  if (!buf) return cap == 0 ? XS_OK : fail(XS_ERR_ARGUMENT, "null output buffer");
  if (cap < s.size() + 1) return fail(XS_ERR_BUFFER, "buffer of " + std::to_string(cap) + " bytes, need " +
                                                          std::to_string(s.size() + 1));
  std::memcpy(buf, s.data(), s.size());
  buf[s.size()] = '\0';
  return XS_OK;
}

std::vector<Query> to_queries(const xs_query* q, std::size_t n) {
  if (n && !q) throw InputError("null query array");
  std::vector<Query> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (q[i].count && !q[i].ids) throw InputError("query " + std::to_string(i) + " has null ids");
    Modality m;
    if (q[i].modality == XS_QUERY_TEXT)
      m = Modality::text;
    else if (q[i].modality == XS_QUERY_AUDIO)
      m = Modality::audio;
    else
      throw InputError("query " + std::to_string(i) + " has unknown modality " + std::to_string(q[i].modality));
    out.push_back({m, std::vector<std::uint32_t>(q[i].ids, q[i].ids + q[i].count)});
  }
  return out;
}

xs_frame view(const StreamFrame& f) {
  return {static_cast<std::uint8_t>(f.type), f.segment_id, f.chunk_index,
          reinterpret_cast<const std::uint8_t*>(f.payload.data()), static_cast<std::uint32_t>(f.payload.size())};
}

StreamFrame own(const xs_frame* f) {
  if (!f) throw InputError("null frame");
  if (f->type > XS_FRAME_CONTROL) throw InputError("unknown frame type " + std::to_string(f->type));
  if (f->payload_len && !f->payload) throw InputError("null frame payload");
  return {static_cast<FrameType>(f->type), f->segment, f->chunk,
          std::string(reinterpret_cast<const char*>(f->payload), f->payload_len)};
}

void fill(xs_session_report* out, const SessionReport& r) {
  if (!out) return;
  *out = {r.frames,        r.text_frames, r.audio_frames,      r.video_frames,        r.first_text_ms,
          r.first_video_chunk_ms, r.total_ms, r.chunks_per_second, r.cancelled ? 1 : 0};
}

#define XS_REQUIRE(cond, what) \
  if (!(cond)) return fail(XS_ERR_ARGUMENT, what)

}  // namespace

extern "C" {

const char* xs_version(void) { return "0.1.0"; }

const char* xs_status_name(xs_status s) {
  switch (s) {
    case XS_OK:
      return "ok";
    case XS_ERR_ARGUMENT:
      return "argument";
    case XS_ERR_BUFFER:
      return "buffer";
    case XS_ERR_DIMENSION:
      return "dimension";
    case XS_ERR_CONFIG:
      return "config";
    case XS_ERR_STEP:
      return "step";
    case XS_ERR_STATE:
      return "state";
    case XS_ERR_INPUT:
      return "input";
    case XS_ERR_IO:
      return "io";
    case XS_ERR_GRADCHECK:
      return "gradcheck";
    case XS_ERR_PROTOCOL:
      return "protocol";
    case XS_ERR_TRUNCATION:
      return "truncation";
    case XS_ERR_DIVERGED:
      return "diverged";
    case XS_ERR_REMOTE:
      return "remote";
    case XS_ERR_INTERNAL:
      return "internal";
  }
  return "unknown";
}

const char* xs_last_error(void) { return g_error.c_str(); }
uint64_t xs_last_error_offset(void) { return g_offset; }

xs_status xs_config_new(xs_config** out) {
  XS_REQUIRE(out, "null output handle");
  return guard([&] {
    *out = new xs_config{};
    return XS_OK;
  });
}

void xs_config_free(xs_config* cfg) { delete cfg; }

xs_status xs_config_load(xs_config* cfg, const char* path) {
  XS_REQUIRE(cfg && path, "null argument");
  return guard([&] {
    cfg->cfg.load_file(path);
    return XS_OK;
  });
}

xs_status xs_config_set(xs_config* cfg, const char* assignment) {
  XS_REQUIRE(cfg && assignment, "null argument");
  return guard([&] {
    cfg->cfg.apply_override(assignment);
    return XS_OK;
  });
}

xs_status xs_config_get(const xs_config* cfg, const char* key, char* buf, size_t cap, size_t* len) {
  XS_REQUIRE(cfg && key, "null argument");
  return guard([&] { return copy_out(cfg->cfg.get(key), buf, cap, len); });
}

xs_status xs_engine_new(const xs_config* cfg, const char* checkpoint, xs_engine** out) {
  XS_REQUIRE(cfg && out, "null argument");
  return guard([&] {
    auto e = std::make_unique<xs_engine>(xs_engine{Engine::from_config(cfg->cfg)});
    if (checkpoint) load_actor_entries(e->engine.actor, read_xtar(checkpoint));
    *out = e.release();
    return XS_OK;
  });
}

void xs_engine_free(xs_engine* engine) { delete engine; }

uint32_t xs_engine_latent_dim(const xs_engine* engine) {
  return engine ? static_cast<uint32_t>(engine->engine.actor.config().latent_dim) : 0;
}

uint32_t xs_engine_chunks_per_segment(const xs_engine* engine) {
  return engine ? engine->engine.segment.video_chunks_per_segment : 0;
}

xs_status xs_text_tokens(const char* text, uint32_t* ids, size_t cap, size_t* len) {
  XS_REQUIRE(text && len, "null argument");
  const auto t = text_to_tokens(text);
  *len = t.size();
  if (cap < t.size()) return fail(XS_ERR_BUFFER, "need room for " + std::to_string(t.size()) + " ids");
  if (!t.empty()) {
    XS_REQUIRE(ids, "null output buffer");
    std::copy(t.begin(), t.end(), ids);
  }
  return XS_OK;
}

xs_status xs_generate(const xs_engine* engine, const xs_config* cfg, const xs_query* queries, size_t nqueries,
                      uint32_t segments, xs_frame_fn fn, void* user, xs_session_report* report) {
  XS_REQUIRE(engine && cfg, "null argument");
  return guard([&] {
    const auto pc = PipelineConfig::from_config(cfg->cfg);
    const SessionSpec spec{to_queries(queries, nqueries), segments};
    const auto rep = run_session(engine->engine, spec, pc, [&](const StreamFrame& f) {
      if (!fn) return true;
      const xs_frame v = view(f);
      return fn(&v, user) != 0;
    });
    fill(report, rep);
    if (rep.error) throw StateError(*rep.error);
    return XS_OK;
  });
}

xs_status xs_generate_files(const xs_engine* engine, const xs_config* cfg, const xs_query* queries, size_t nqueries,
                            uint32_t segments, const char* latents_path, const char* events_path,
                            xs_session_report* report) {
  XS_REQUIRE(engine && cfg && latents_path && events_path, "null argument");
  return guard([&] {
    const auto pc = PipelineConfig::from_config(cfg->cfg);
    const SessionSpec spec{to_queries(queries, nqueries), segments};
    const std::size_t D = engine->engine.actor.config().latent_dim;
    std::vector<XtarEntry> entries;
    std::string events;
    char name[64];
    const auto rep = run_session(engine->engine, spec, pc, [&](const StreamFrame& f) {
      if (f.type == FrameType::control) return true;
      events += frame_event_json(f);
      events += '\n';
      if (f.type == FrameType::video) {
        std::snprintf(name, sizeof name, "video/%06u/%03u", f.segment_id, static_cast<unsigned>(f.chunk_index));
        entries.push_back({name, frame_latents(f, D)});
      } else {
        const auto ids = frame_tokens(f);
        Tensor t({ids.size()});
        for (std::size_t i = 0; i < ids.size(); ++i) t[i] = static_cast<float>(ids[i]);
        std::snprintf(name, sizeof name, "%s/%06u", f.type == FrameType::text ? "text" : "audio", f.segment_id);
        entries.push_back({name, std::move(t)});
      }
      return true;
    });
    fill(report, rep);
    if (rep.error) throw StateError(*rep.error);
    write_xtar(latents_path, entries);
    std::ofstream ev(events_path, std::ios::binary | std::ios::trunc);
    if (!ev) throw IoError(std::string("cannot open ") + events_path + " for writing");
    ev << events;
    if (!ev.flush()) throw IoError(std::string("write failed for ") + events_path);
    return XS_OK;
  });
}

xs_status xs_train(const xs_config* cfg, const xs_train_options* opts, xs_progress_fn fn, void* user,
                   xs_train_report* report) {
  XS_REQUIRE(cfg && opts && opts->checkpoint, "null argument");
  return guard([&] {
    const Config& c = cfg->cfg;
    const SegmentConfig base = SegmentConfig::from_config(c);
    const DataConfig data = DataConfig::from_config(c);
    const SegmentConfig seg = data.segment(base);
    ActorModel<float> model(ActorConfig::from_config(c));
    TrainState state;
    if (opts->resume) state = load_checkpoint(opts->resume, model);

    TrainOptions to;
    to.steps = opts->steps;
    to.lr = c.get_double("train.lr");
    to.batch = static_cast<std::size_t>(c.get_u64("train.batch"));
    to.chunks = static_cast<std::size_t>(c.get_u64("train.chunks"));
    to.seed = c.get_u64("train.seed");
    to.log_every = static_cast<std::size_t>(c.get_u64("train.log_every"));
    if (to.log_every < 1) throw ConfigError("train.log_every must be >= 1");
    to.diffusion_steps = static_cast<int>(c.get_int("diffusion.steps"));
    to.mode = opts->mode ? parse_forcing_mode(opts->mode) : model.config().forcing_mode;
    if (opts->resume && state.adam.step > 0) {
      if (state.mode != to.mode)
        throw ConfigError(std::string("checkpoint was trained in ") + std::string(forcing_mode_name(state.mode)) +
                          " mode, not " + std::string(forcing_mode_name(to.mode)));
      if (state.seed != to.seed)
        throw ConfigError("checkpoint was trained with train.seed=" + std::to_string(state.seed));
    }
    to.abort_checkpoint = opts->checkpoint;
    if (fn) to.on_step = [&](std::size_t step, double loss) { fn(step, loss, user); };
    state.mode = to.mode;
    state.seed = to.seed;
    train(model, state, seg, data, to);
    save_checkpoint(opts->checkpoint, model, state);
    if (opts->loss_csv) {
      std::ofstream os(opts->loss_csv, std::ios::binary | std::ios::trunc);
      if (!os) throw IoError(std::string("cannot open ") + opts->loss_csv + " for writing");
      os << loss_csv(state, to.log_every);
      if (!os.flush()) throw IoError(std::string("write failed for ") + opts->loss_csv);
    }
    if (report) {
      const auto sm = smoothed_losses(state.losses, to.log_every);
      report->steps = state.adam.step;
      report->first_smoothed = sm.empty() ? 0.0 : sm.front();
      report->last_smoothed = sm.empty() ? 0.0 : sm.back();
    }
    return XS_OK;
  });
}

xs_status xs_drift(const xs_config* cfg, const char* checkpoint, uint32_t horizon, uint32_t scenes, double* per_chunk,
                   size_t cap, xs_drift_report* report) {
  XS_REQUIRE(cfg && checkpoint, "null argument");
  return guard([&] {
    const Config& c = cfg->cfg;
    const DataConfig data = DataConfig::from_config(c);
    const SegmentConfig seg = data.segment(SegmentConfig::from_config(c));
    ActorModel<float> model(ActorConfig::from_config(c));
    const TrainState st = load_checkpoint(checkpoint, model);
    DriftOptions d;
    d.horizon_chunks = horizon;
    d.scenes = scenes;
    d.diffusion_steps = static_cast<int>(c.get_int("diffusion.steps"));
    d.schedule = st.mode == ForcingMode::teacher ? ScheduleKind::sequential : ScheduleKind::pyramid;
    d.seed = c.get_u64("diffusion.seed");
    const auto r = measure_drift(model, seg, data, d);
    if (per_chunk)
      for (std::size_t i = 0; i < std::min(cap, r.per_chunk.size()); ++i) per_chunk[i] = r.per_chunk[i];
    if (report) *report = {r.mean, r.max, r.per_chunk.empty() ? 0.0 : r.per_chunk.front(), r.diverged ? 1 : 0};
    return XS_OK;
  });
}

xs_status xs_pass_counts(uint32_t chunks, uint32_t steps, uint64_t* naive, uint64_t* pyramid) {
  XS_REQUIRE(naive && pyramid, "null argument");
  return guard([&] {
    const auto pc = pass_counts(chunks, steps);
    *naive = pc.naive;
    *pyramid = pc.pyramid;
    return XS_OK;
  });
}

xs_status xs_bench(const xs_engine* engine, uint32_t chunks, uint32_t steps, uint64_t seed, uint32_t repeats,
                   xs_bench_report* report) {
  XS_REQUIRE(engine && report, "null argument");
  return guard([&] {
    const auto r = bench_schedules(engine->engine, chunks, static_cast<int>(steps), seed, static_cast<int>(repeats));
    *report = {r.naive_passes, r.pyramid_passes, r.naive_ms, r.pyramid_ms};
    return XS_OK;
  });
}

xs_status xs_server_new(const xs_engine* engine, const xs_config* cfg, const char* host, uint16_t port,
                        uint32_t flags, xs_server** out) {
  XS_REQUIRE(engine && cfg && out, "null argument");
  return guard([&] {
    ServerOptions so;
    if (host) so.host = host;
    so.port = port;
    so.inject_bad_magic = (flags & XS_SERVER_BAD_MAGIC) != 0;
    auto s = std::make_unique<xs_server>();
    s->server = std::make_unique<Server>(engine->engine, PipelineConfig::from_config(cfg->cfg), so);
    *out = s.release();
    return XS_OK;
  });
}

uint16_t xs_server_port(const xs_server* server) { return server ? server->server->port() : 0; }

xs_status xs_server_run(xs_server* server) {
  XS_REQUIRE(server, "null server");
  return guard([&] {
    server->server->run();
    return XS_OK;
  });
}

void xs_server_stop(xs_server* server) {
  if (server) server->server->stop();
}

void xs_server_free(xs_server* server) { delete server; }

xs_status xs_client_run(const char* host, uint16_t port, const xs_query* queries, size_t nqueries, uint32_t segments,
                        xs_frame_fn fn, void* user, xs_session_report* report) {
  XS_REQUIRE(host, "null host");
  return guard([&] {
    ClientRequest req{to_queries(queries, nqueries), segments};
    bool stop = false;
    const auto rep = run_client(host, port, req, [&](const StreamFrame& f) {
      if (!fn || stop) return;
      const xs_frame v = view(f);
      stop = fn(&v, user) == 0;
    });
    if (report) {
      SessionReport sr;
      for (const auto& f : rep.frames) {
        ++sr.frames;
        sr.text_frames += f.type == FrameType::text;
        sr.audio_frames += f.type == FrameType::audio;
        sr.video_frames += f.type == FrameType::video;
      }
      sr.first_text_ms = rep.first_text_ms;
      sr.first_video_chunk_ms = rep.first_video_chunk_ms;
      sr.total_ms = rep.total_ms;
      sr.chunks_per_second = rep.chunks_per_second;
      fill(report, sr);
    }
    if (rep.server_error)
      return fail(XS_ERR_REMOTE, "server error " + std::to_string(rep.server_error->first) + ": " +
                                     rep.server_error->second);
    return XS_OK;
  });
}

xs_status xs_frame_tokens(const xs_frame* frame, uint32_t* ids, size_t cap, size_t* len) {
  XS_REQUIRE(len, "null argument");
  return guard([&] {
    const auto t = frame_tokens(own(frame));
    *len = t.size();
    if (cap < t.size()) return fail(XS_ERR_BUFFER, "need room for " + std::to_string(t.size()) + " ids");
    if (!t.empty() && !ids) return fail(XS_ERR_ARGUMENT, "null output buffer");
    std::copy(t.begin(), t.end(), ids);
    return XS_OK;
  });
}

xs_status xs_frame_control(const xs_frame* frame, int* code, char* msg, size_t cap, size_t* len) {
  XS_REQUIRE(code, "null argument");
  return guard([&] {
    const StreamFrame f = own(frame);
    const ControlCode c = frame_control(f);
    *code = static_cast<int>(c);
    return copy_out(c == ControlCode::error ? frame_error(f).second : std::string(), msg, cap, len);
  });
}

xs_status xs_frame_json(const xs_frame* frame, char* buf, size_t cap, size_t* len) {
  return guard([&] { return copy_out(frame_event_json(own(frame)), buf, cap, len); });
}

xs_status xs_xtar_write(const char* path, const xs_tensor_view* entries, size_t count) {
  XS_REQUIRE(path && (entries || count == 0), "null argument");
  return guard([&] {
    std::vector<XtarEntry> out;
    for (std::size_t i = 0; i < count; ++i) {
      const auto& e = entries[i];
      if (!e.name || !e.dims || !e.data || e.rank == 0) throw InputError("tensor " + std::to_string(i) + " is incomplete");
      Shape shape(e.dims, e.dims + e.rank);
      Tensor t(shape);
      std::copy(e.data, e.data + t.size(), t.data().begin());
      out.push_back({e.name, std::move(t)});
    }
    write_xtar(path, out);
    return XS_OK;
  });
}

xs_status xs_inspect(const char* path, char* buf, size_t cap, size_t* len) {
  XS_REQUIRE(path, "null path");
  return guard([&] {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(std::string("cannot open ") + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    nlohmann::ordered_json j;
    j["path"] = path;
    if (bytes.rfind("XTAR", 0) == 0) {
      const auto entries = decode_xtar(bytes);
      j["kind"] = "xtar";
      j["entries"] = entries.size();
      std::size_t total = 0;
      auto arr = nlohmann::ordered_json::array();
      for (const auto& e : entries) {
        double lo = 0, hi = 0, sum = 0;
        const auto d = e.tensor.data();
        for (std::size_t i = 0; i < d.size(); ++i) {
          lo = i ? std::min<double>(lo, d[i]) : d[i];
          hi = i ? std::max<double>(hi, d[i]) : d[i];
          sum += d[i];
        }
        total += d.size();
        arr.push_back({{"name", e.name},
                       {"shape", e.tensor.shape()},
                       {"min", lo},
                       {"max", hi},
                       {"mean", d.empty() ? 0.0 : sum / d.size()}});
      }
      j["values"] = total;
      j["tensors"] = std::move(arr);
    } else if (bytes.rfind("step,loss,mode", 0) == 0) {
      j["kind"] = "loss_csv";
      std::istringstream ls(bytes);
      std::string line;
      std::getline(ls, line);
      auto rows = nlohmann::ordered_json::array();
      std::string mode;
      while (std::getline(ls, line)) {
        if (line.empty()) continue;
        std::istringstream fs(line);
        std::string step, loss;
        if (!std::getline(fs, step, ',') || !std::getline(fs, loss, ',') || !std::getline(fs, mode))
          throw IoError(std::string("malformed loss row '") + line + "' in " + path);
        rows.push_back({{"step", std::stoull(step)}, {"loss", std::stod(loss)}});
      }
      j["mode"] = mode;
      j["rows"] = rows.size();
      j["first_loss"] = rows.empty() ? nlohmann::ordered_json() : rows.front()["loss"];
      j["last_loss"] = rows.empty() ? nlohmann::ordered_json() : rows.back()["loss"];
    } else {
      throw InputError(std::string(path) + " is neither an XTAR archive nor a loss CSV");
    }
    return copy_out(j.dump(), buf, cap, len);
  });
}

}  // extern "C"
