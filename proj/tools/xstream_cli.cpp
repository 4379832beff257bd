#include <array>
#include <csignal>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <malloc.h>
#include <pthread.h>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xstream/xstream.h"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Failure {
  int code;
};

void check(xs_status s, const std::string& what) {
  if (s == XS_OK) return;
  std::fprintf(stderr, "xstream: %s failed (%s error): %s\n", what.c_str(), xs_status_name(s), xs_last_error());
  throw Failure{s == XS_ERR_CONFIG ? kExitConfig : kExitRuntime};
}

struct ConfigHandle {
  xs_config* p = nullptr;
  ~ConfigHandle() { xs_config_free(p); }
};

struct EngineHandle {
  xs_engine* p = nullptr;
  ~EngineHandle() { xs_engine_free(p); }
};

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "key = value config file");
  app->add_option("-s,--set", c.overrides, "override, key=value (repeatable)");
  app->add_option("--seed", c.seed, "seed for training, sampling and the session");
}

void load_config(ConfigHandle& h, const Common& c) {
  check(xs_config_new(&h.p), "config");
  if (!c.config.empty()) check(xs_config_load(h.p, c.config.c_str()), "loading " + c.config);
  for (const auto& o : c.overrides) check(xs_config_set(h.p, o.c_str()), "override '" + o + "'");
  if (c.seed) {
    for (const char* key : {"train.seed", "stream.seed", "diffusion.seed"}) {
      const std::string a = std::string(key) + "=" + std::to_string(*c.seed);
      check(xs_config_set(h.p, a.c_str()), "--seed");
    }
  }
}

std::string config_value(const ConfigHandle& h, const char* key) {
  std::size_t len = 0;
  check(xs_config_get(h.p, key, nullptr, 0, &len), key);
  std::string s(len, '\0');
  check(xs_config_get(h.p, key, s.data(), s.size(), &len), key);
  s.resize(len - 1);
  return s;
}

std::vector<std::uint32_t> parse_ids(const std::string& csv) {
  std::vector<std::uint32_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) {
      std::fprintf(stderr, "xstream: bad token id '%s'\n", item.c_str());
      throw Failure{kExitUsage};
    }
    out.push_back(static_cast<std::uint32_t>(v));
  }
  return out;
}

struct QueryArgs {
  std::vector<std::string> text;
  std::vector<std::string> audio;
  std::vector<std::vector<std::uint32_t>> storage;
  std::vector<xs_query> queries;

  void add(CLI::App* app) {
    app->add_option("-q,--query", text, "text query (repeatable)");
    app->add_option("--audio-ids", audio, "audio query as comma-separated token ids (repeatable)");
  }

  void build() {
    if (text.empty() && audio.empty()) text.push_back("hello");
    for (const auto& t : text) {
      std::size_t n = 0;
      xs_text_tokens(t.c_str(), nullptr, 0, &n);
      std::vector<std::uint32_t> ids(n);
      check(xs_text_tokens(t.c_str(), ids.data(), ids.size(), &n), "tokenizing query");
      storage.push_back(std::move(ids));
    }
    for (const auto& a : audio) storage.push_back(parse_ids(a));
    for (std::size_t i = 0; i < storage.size(); ++i)
      queries.push_back({i < text.size() ? XS_QUERY_TEXT : XS_QUERY_AUDIO, storage[i].data(), storage[i].size()});
  }
};

std::string frame_json(const xs_frame* f) {
  std::size_t len = 0;
  char buf[256];
  check(xs_frame_json(f, buf, sizeof buf, &len), "formatting frame");
  return buf;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    std::fprintf(stderr, "xstream: cannot create %s: %s\n", dir.c_str(), ec.message().c_str());
    throw Failure{kExitRuntime};
  }
}

nlohmann::ordered_json report_json(const xs_session_report& r) {
  return {{"frames", r.frames},
          {"text_frames", r.text_frames},
          {"audio_frames", r.audio_frames},
          {"video_frames", r.video_frames},
          {"first_text_ms", r.first_text_ms},
          {"first_video_chunk_ms", r.first_video_chunk_ms},
          {"total_ms", r.total_ms},
          {"chunks_per_second", r.chunks_per_second}};
}

}  // namespace

int main(int argc, char** argv) {
  // Forward passes allocate and free several MB each; keep that memory in the
  // process instead of handing it back to the kernel after every pass.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);

  CLI::App app{"Streaming text, audio and video-latent generation engine"};
  app.require_subcommand(1);
  app.set_version_flag("--version", xs_version());

  Common common;

  auto* train = app.add_subcommand("train", "train the video actor on synthetic scenes");
  add_common(train, common);
  std::uint64_t steps = 2000;
  std::string mode;
  std::string out_dir = "out";
  std::string resume;
  train->add_option("--steps", steps, "total optimizer steps")->capture_default_str();
  train->add_option("--mode", mode, "forcing mode")->check(CLI::IsMember({"diffusion", "teacher"}));
  train->add_option("-o,--out", out_dir, "output directory")->capture_default_str();
  train->add_option("--resume", resume, "continue from a checkpoint");

  auto* gen = app.add_subcommand("generate", "run one session and dump latents and events");
  add_common(gen, common);
  std::string checkpoint;
  std::uint32_t segments = 1;
  QueryArgs qargs;
  gen->add_option("--checkpoint", checkpoint, "actor weights (random when omitted)");
  qargs.add(gen);
  gen->add_option("--segments", segments, "segments to generate")->capture_default_str();
  gen->add_option("-o,--out", out_dir, "output directory")->capture_default_str();

  auto* serve = app.add_subcommand("serve", "stream sessions over TCP");
  add_common(serve, common);
  std::string host = "127.0.0.1";
  std::optional<std::uint16_t> port;
  std::string port_file;
  bool bad_magic = false;
  serve->add_option("--checkpoint", checkpoint, "actor weights (random when omitted)");
  serve->add_option("--host", host, "listen address")->capture_default_str();
  serve->add_option("-p,--port", port, "listen port, 0 for any (default stream.port)");
  serve->add_option("--port-file", port_file, "write the bound port here once listening");
  serve->add_flag("--fault-bad-magic", bad_magic)->group("");

  auto* client = app.add_subcommand("client", "request a session from a server");
  add_common(client, common);
  bool latency = false;
  std::string dump;
  client->add_option("--host", host, "server address")->capture_default_str();
  client->add_option("-p,--port", port, "server port (default stream.port)");
  qargs.add(client);
  client->add_option("--segments", segments, "segments to request")->capture_default_str();
  client->add_flag("--latency", latency, "print a latency report after the events");
  client->add_option("--dump", dump, "write received latents to an XTAR file");

  auto* bench = app.add_subcommand("bench", "compare chunk-by-chunk and pyramid denoising");
  add_common(bench, common);
  std::uint32_t chunks = 6, bench_steps = 25, repeats = 3;
  bench->add_option("--checkpoint", checkpoint, "actor weights (random when omitted)");
  bench->add_option("--chunks", chunks, "chunks per segment")->capture_default_str();
  bench->add_option("--steps", bench_steps, "denoising steps")->capture_default_str();
  bench->add_option("--repeats", repeats, "timed runs per strategy")->capture_default_str();

  auto* inspect = app.add_subcommand("inspect", "summarize a checkpoint, latent dump or loss CSV");
  std::string path;
  inspect->add_option("path", path, "file to inspect")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*inspect) {
      std::size_t len = 0;
      check(xs_inspect(path.c_str(), nullptr, 0, &len), "inspect");
      std::string s(len, '\0');
      check(xs_inspect(path.c_str(), s.data(), s.size(), &len), "inspect");
      std::printf("%s\n", s.c_str());
      return 0;
    }

    ConfigHandle cfg;
    load_config(cfg, common);

    if (*train) {
      ensure_dir(out_dir);
      const std::string ck = out_dir + "/checkpoint.xtar", csv = out_dir + "/loss.csv";
      xs_train_options to{steps, mode.empty() ? nullptr : mode.c_str(), ck.c_str(), csv.c_str(),
                          resume.empty() ? nullptr : resume.c_str()};
      const std::uint64_t every = std::stoull(config_value(cfg, "train.log_every"));
      struct Progress {
        std::uint64_t every;
        double sum = 0;
      } prog{every};
      auto on_step = [](std::uint64_t step, double loss, void* user) {
        auto* p = static_cast<Progress*>(user);
        p->sum += loss;
        if ((step + 1) % p->every == 0) {
          std::fprintf(stderr, "step %llu loss %.6f\n", static_cast<unsigned long long>(step + 1), p->sum / p->every);
          p->sum = 0;
        }
      };
      xs_train_report rep{};
      check(xs_train(cfg.p, &to, on_step, &prog, &rep), "train");
      nlohmann::ordered_json j{{"steps", rep.steps},
                               {"first_smoothed_loss", rep.first_smoothed},
                               {"last_smoothed_loss", rep.last_smoothed},
                               {"checkpoint", ck},
                               {"loss_csv", csv}};
      std::printf("%s\n", j.dump().c_str());
      return 0;
    }

    EngineHandle engine;
    check(xs_engine_new(cfg.p, checkpoint.empty() ? nullptr : checkpoint.c_str(), &engine.p), "loading engine");

    if (*gen) {
      qargs.build();
      ensure_dir(out_dir);
      const std::string lat = out_dir + "/latents.xtar", ev = out_dir + "/events.jsonl";
      xs_session_report rep{};
      check(xs_generate_files(engine.p, cfg.p, qargs.queries.data(), qargs.queries.size(), segments, lat.c_str(),
                              ev.c_str(), &rep),
            "generate");
      auto j = report_json(rep);
      j["latents"] = lat;
      j["events"] = ev;
      std::printf("%s\n", j.dump().c_str());
      return 0;
    }

    if (*bench) {
      std::uint64_t seed = std::stoull(config_value(cfg, "diffusion.seed"));
      xs_bench_report r{};
      check(xs_bench(engine.p, chunks, bench_steps, seed, repeats, &r), "bench");
      nlohmann::ordered_json j{{"chunks", chunks},
                               {"steps", bench_steps},
                               {"naive_passes", r.naive_passes},
                               {"pyramid_passes", r.pyramid_passes},
                               {"naive_ms", r.naive_ms},
                               {"pyramid_ms", r.pyramid_ms},
                               {"speedup", r.pyramid_ms > 0 ? r.naive_ms / r.pyramid_ms : 0.0}};
      std::printf("%s\n", j.dump().c_str());
      return 0;
    }

    const std::uint16_t p = port ? *port : static_cast<std::uint16_t>(std::stoul(config_value(cfg, "stream.port")));

    if (*serve) {
      // Signals go to a dedicated thread so stopping never runs in a handler.
      sigset_t set;
      sigemptyset(&set);
      sigaddset(&set, SIGINT);
      sigaddset(&set, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &set, nullptr);
      xs_server* srv = nullptr;
      check(xs_server_new(engine.p, cfg.p, host.c_str(), p, bad_magic ? XS_SERVER_BAD_MAGIC : 0, &srv), "serve");
      std::fprintf(stderr, "listening on %s:%u\n", host.c_str(), xs_server_port(srv));
      if (!port_file.empty()) {
        const std::string tmp = port_file + ".tmp";
        std::FILE* f = std::fopen(tmp.c_str(), "w");
        if (!f || std::fprintf(f, "%u\n", xs_server_port(srv)) < 0 || std::fclose(f) != 0 ||
            std::rename(tmp.c_str(), port_file.c_str()) != 0) {
          std::fprintf(stderr, "xstream: cannot write %s\n", port_file.c_str());
          xs_server_free(srv);
          return kExitRuntime;
        }
      }
      std::thread waiter([&] {
        int sig = 0;
        sigwait(&set, &sig);
        xs_server_stop(srv);
      });
      const xs_status s = xs_server_run(srv);
      pthread_kill(waiter.native_handle(), SIGTERM);
      waiter.join();
      xs_server_free(srv);
      check(s, "serve");
      return 0;
    }

    if (*client) {
      qargs.build();
      struct Sink {
        std::vector<std::pair<std::string, std::vector<float>>> latents;
        std::vector<std::uint32_t> dims;
        bool keep = false;
      } sink;
      sink.keep = !dump.empty();
      auto on_frame = [](const xs_frame* f, void* user) -> int {
        auto* s = static_cast<Sink*>(user);
        if (f->type == XS_FRAME_CONTROL) return 1;
        std::printf("%s\n", frame_json(f).c_str());
        if (s->keep && f->type == XS_FRAME_VIDEO) {
          std::vector<float> v(f->payload_len / 4);
          std::memcpy(v.data(), f->payload, v.size() * 4);
          char name[64];
          std::snprintf(name, sizeof name, "video/%06u/%03u", f->segment, static_cast<unsigned>(f->chunk));
          s->latents.emplace_back(name, std::move(v));
        }
        return 1;
      };
      xs_session_report rep{};
      const xs_status s = xs_client_run(host.c_str(), p, qargs.queries.data(), qargs.queries.size(), segments,
                                        on_frame, &sink, &rep);
      std::fflush(stdout);
      if (s == XS_ERR_PROTOCOL) {
        std::fprintf(stderr, "xstream: protocol error at byte offset %llu: %s\n",
                     static_cast<unsigned long long>(xs_last_error_offset()), xs_last_error());
        return kExitRuntime;
      }
      check(s, "client");
      if (!dump.empty()) {
        const std::uint32_t D = xs_engine_latent_dim(engine.p);
        std::vector<std::array<std::uint32_t, 2>> dims;
        std::vector<xs_tensor_view> views;
        dims.reserve(sink.latents.size());
        for (const auto& [name, v] : sink.latents) {
          dims.push_back({static_cast<std::uint32_t>(v.size() / D), D});
          views.push_back({name.c_str(), dims.back().data(), 2, v.data()});
        }
        check(xs_xtar_write(dump.c_str(), views.data(), views.size()), "writing " + dump);
      }
      if (latency) {
        nlohmann::ordered_json j{{"latency", report_json(rep)}};
        std::printf("%s\n", j.dump().c_str());
      }
      return 0;
    }
  } catch (const Failure& f) {
    return f.code;
  }
  return kExitUsage;
}
