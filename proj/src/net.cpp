#include "xstream/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>

namespace xstream {

namespace {

std::string sys_error(const std::string& what) { return what + ": " + std::strerror(errno); }

bool send_all(int fd, std::string_view bytes) {
  while (!bytes.empty()) {
    const ssize_t n = ::send(fd, bytes.data(), bytes.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    bytes.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

// 0 on orderly EOF, -1 on error.
ssize_t recv_some(int fd, char* buf, std::size_t len) {
  for (;;) {
    const ssize_t n = ::recv(fd, buf, len, 0);
    if (n < 0 && errno == EINTR) continue;
    return n;
  }
}

}  // namespace

Server::Server(const Engine& engine, PipelineConfig cfg, ServerOptions opts)
    : engine_(engine), cfg_(cfg), opts_(std::move(opts)) {
  cfg_.validate();
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw IoError(sys_error("socket"));
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(opts_.port);
  if (::inet_pton(AF_INET, opts_.host.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    throw ConfigError("invalid listen address '" + opts_.host + "'");
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 16) < 0) {
    const std::string msg = sys_error("bind " + opts_.host + ":" + std::to_string(opts_.port));
    ::close(listen_fd_);
    throw IoError(msg);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

Server::~Server() {
  stop();
  std::list<std::thread> workers;
  {
    std::lock_guard lk(mu_);
    workers.swap(workers_);
  }
  for (auto& t : workers)
    if (t.joinable()) t.join();
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

void Server::stop() {
  stopping_ = true;
  std::lock_guard lk(mu_);
  for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
}

void Server::run() {
  while (!stopping_) {
    pollfd p{listen_fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, 100);
    if (r < 0 && errno != EINTR) throw IoError(sys_error("poll"));
    if (r <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lk(mu_);
    if (stopping_) {
      ::close(fd);
      break;
    }
    open_fds_.push_back(fd);
    workers_.emplace_back([this, fd] { handle(fd); });
  }
}

void Server::handle(int fd) {
  FrameDecoder dec;
  std::vector<Query> queries;
  char buf[4096];
  try {
    for (;;) {
      const ssize_t n = recv_some(fd, buf, sizeof buf);
      if (n <= 0) break;
      dec.feed(std::string_view(buf, static_cast<std::size_t>(n)));
      bool connection_ok = true;
      while (auto f = dec.next()) {
        if (f->type == FrameType::text || f->type == FrameType::audio) {
          queries.push_back({f->type == FrameType::text ? Modality::text : Modality::audio, frame_tokens(*f)});
          continue;
        }
        if (f->type != FrameType::control || frame_control(*f) != ControlCode::request) {
          send_all(fd, encode_frame(error_frame(10, "unexpected frame from client")));
          continue;
        }
        SessionSpec spec{std::move(queries), request_segments(*f)};
        queries.clear();
        bool first = true;
        const auto rep = run_session(engine_, spec, cfg_, [&](const StreamFrame& out) {
          std::string bytes = encode_frame(out);
          if (first && opts_.inject_bad_magic) bytes[0] = 'Y';
          first = false;
          return send_all(fd, bytes);
        });
        if (rep.cancelled) {
          connection_ok = false;
          break;
        }
        ++sessions_;
      }
      if (!connection_ok) break;
    }
  } catch (const ProtocolError& e) {
    send_all(fd, encode_frame(error_frame(11, e.what())));
  } catch (const std::exception& e) {
    send_all(fd, encode_frame(error_frame(12, e.what())));
  }
  std::lock_guard lk(mu_);
  open_fds_.erase(std::remove(open_fds_.begin(), open_fds_.end(), fd), open_fds_.end());
  ::close(fd);
}

ClientReport run_client(const std::string& host, std::uint16_t port, const ClientRequest& req,
                        const std::function<void(const StreamFrame&)>& on_frame) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res); rc != 0)
    throw IoError("resolve " + host + ": " + ::gai_strerror(rc));
  int fd = -1;
  int err = 0;
  for (addrinfo* a = res; a; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
    err = errno;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) {
    errno = err;
    throw IoError(sys_error("connect " + host + ":" + std::to_string(port)));
  }
  struct Closer {
    int fd;
    ~Closer() { ::close(fd); }
  } closer{fd};

  std::string out;
  for (const auto& q : req.queries) {
    if (q.modality != Modality::text && q.modality != Modality::audio)
      throw InputError("queries must be text or audio tokens");
    out += encode_frame(token_frame(q.modality == Modality::text ? FrameType::text : FrameType::audio, 0, q.tokens));
  }
  out += encode_frame(request_frame(req.segments));

  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  if (!send_all(fd, out)) throw IoError(sys_error("send"));

  ClientReport rep;
  FrameDecoder dec;
  char buf[1 << 16];
  for (;;) {
    const ssize_t n = recv_some(fd, buf, sizeof buf);
    if (n < 0) throw IoError(sys_error("recv"));
    if (n == 0) throw ProtocolError("connection closed before end of stream", dec.consumed() + dec.buffered());
    dec.feed(std::string_view(buf, static_cast<std::size_t>(n)));
    while (auto f = dec.next()) {
      const double at = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      if (f->type == FrameType::text && rep.first_text_ms < 0) rep.first_text_ms = at;
      if (f->type == FrameType::video) {
        if (rep.first_video_chunk_ms < 0) rep.first_video_chunk_ms = at;
        ++rep.video_frames;
      }
      if (on_frame) on_frame(*f);
      rep.frames.push_back(*f);
      if (f->type == FrameType::control) {
        const ControlCode c = frame_control(*f);
        if (c == ControlCode::error) rep.server_error = frame_error(*f);
        if (c == ControlCode::end || c == ControlCode::error) {
          rep.total_ms = at;
          rep.chunks_per_second = at > 0 ? rep.video_frames / (at / 1000.0) : 0.0;
          return rep;
        }
      }
    }
  }
}

}  // namespace xstream
