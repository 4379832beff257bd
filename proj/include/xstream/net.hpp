#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <list>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "xstream/stream.hpp"

namespace xstream {

struct ServerOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks a free port
  // Test-only: corrupt the magic of the first frame of every session.
  bool inject_bad_magic = false;
};

// TCP front end. Per connection: the client sends text/audio query frames and
// a request control frame; the server answers with one session's frames. A
// connection may carry any number of requests.
class Server {
 public:
  Server(const Engine& engine, PipelineConfig cfg, ServerOptions opts);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  // Accepts until stop(); each connection gets its own thread.
  void run();
  void stop();
  std::uint64_t sessions_completed() const noexcept { return sessions_; }

 private:
  void handle(int fd);

  const Engine& engine_;
  PipelineConfig cfg_;
  ServerOptions opts_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> sessions_{0};
  std::mutex mu_;
  std::list<std::thread> workers_;
  std::vector<int> open_fds_;
};

struct ClientRequest {
  std::vector<Query> queries;
  std::uint32_t segments = 1;
};

struct ClientReport {
  std::vector<StreamFrame> frames;  // everything received, control frames included
  double first_text_ms = -1.0;
  double first_video_chunk_ms = -1.0;
  double total_ms = 0.0;
  double chunks_per_second = 0.0;
  std::uint64_t video_frames = 0;
  std::optional<std::pair<std::uint16_t, std::string>> server_error;
};

// Connects, sends the request and reads until the end or error control frame.
// Decoding problems raise ProtocolError with the stream offset.
ClientReport run_client(const std::string& host, std::uint16_t port, const ClientRequest& req,
                        const std::function<void(const StreamFrame&)>& on_frame = {});

}  // namespace xstream
