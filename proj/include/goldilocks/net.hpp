// SPDX-License-Identifier: Apache-2.0
#pragma once

// Line-framed TCP transport for the teacher protocol (POSIX sockets).
//
// TeacherServer owns a TeacherService. Each accepted connection gets a
// reader thread; every frame is handled under one mutex, the reply is
// written, and only then does a scheduled teacher update run, still under
// the mutex. A selection therefore never sees a half-updated model.
//
// RemoteSource is the student side: a MessageSource whose exchange() writes
// one frame and blocks for the reply, with a receive timeout.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "goldilocks/error.hpp"
#include "goldilocks/harness.hpp"
#include "goldilocks/protocol.hpp"
#include "goldilocks/teacher_service.hpp"

namespace goldilocks {

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { close(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void close() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  /// Wakes any thread blocked on this socket.
  void shutdown() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

 private:
  int fd_ = -1;
};

/// Buffered newline-delimited frames over a connected socket.
class LineChannel {
 public:
  explicit LineChannel(Socket socket) : socket_(std::move(socket)) {}

  Socket& socket() noexcept { return socket_; }

  void set_receive_timeout(double seconds) {
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(seconds);
    tv.tv_usec = static_cast<suseconds_t>((seconds - static_cast<double>(tv.tv_sec)) * 1e6);
    if (::setsockopt(socket_.fd(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv)) != 0) {
      throw TransportError(std::string("setsockopt: ") + std::strerror(errno));
    }
  }

  void send_line(const std::string& line) {
    std::string frame = line;
    frame.push_back('\n');
    std::size_t off = 0;
    while (off < frame.size()) {
      const ssize_t n = ::send(socket_.fd(), frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("send: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  /// Next frame, or nullopt on orderly close. Throws TransportError on timeout.
  std::optional<std::string> recv_line() {
    while (true) {
      if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      char chunk[4096];
      const ssize_t n = ::recv(socket_.fd(), chunk, sizeof(chunk), 0);
      if (n == 0) return std::nullopt;
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK) throw TransportError("timed out waiting for the teacher");
        throw TransportError(std::string("recv: ") + std::strerror(errno));
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  Socket socket_;
  std::string buffer_;
};

namespace detail {
inline sockaddr_in make_address(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(), &addr.sin_addr) != 1) {
    throw TransportError("not an IPv4 address: " + host);
  }
  return addr;
}
}  // namespace detail

inline LineChannel connect_to(const std::string& host, std::uint16_t port, double timeout_seconds = 30.0) {
  Socket s(::socket(AF_INET, SOCK_STREAM, 0));
  if (!s.valid()) throw TransportError(std::string("socket: ") + std::strerror(errno));
  const auto addr = detail::make_address(host, port);
  if (::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
    throw TransportError("connect " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
  }
  int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  LineChannel ch(std::move(s));
  ch.set_receive_timeout(timeout_seconds);
  return ch;
}

/// Student end of a connection; frames optionally copied to a transcript.
class RemoteSource final : public MessageSource {
 public:
  RemoteSource(const std::string& host, std::uint16_t port, double timeout_seconds = 30.0,
               std::ostream* transcript = nullptr)
      : channel_(connect_to(host, port, timeout_seconds)), transcript_(transcript) {}

 protected:
  WireMessage exchange(const WireMessage& request) override {
    const std::string line = encode(request);
    if (transcript_) *transcript_ << "> " << line << '\n';
    channel_.send_line(line);
    auto reply = channel_.recv_line();
    if (!reply) throw TransportError("teacher closed the connection");
    if (transcript_) *transcript_ << "< " << *reply << '\n';
    return decode(*reply);
  }

 private:
  LineChannel channel_;
  std::ostream* transcript_;
};

class TeacherServer {
 public:
  /// Binds and starts accepting. `sessions_before_exit` > 0 makes wait()
  /// return after that many sessions ended with a shutdown frame.
  TeacherServer(TeacherService service, const std::string& host, std::uint16_t port,
                std::size_t sessions_before_exit = 0)
      : service_(std::move(service)), sessions_before_exit_(sessions_before_exit) {
    listener_ = Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (!listener_.valid()) throw TransportError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(listener_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    const auto addr = detail::make_address(host, port);
    if (::bind(listener_.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
      throw TransportError("bind " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
    }
    if (::listen(listener_.fd(), 16) != 0) throw TransportError(std::string("listen: ") + std::strerror(errno));
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  TeacherServer(const TeacherServer&) = delete;
  TeacherServer& operator=(const TeacherServer&) = delete;
  ~TeacherServer() { stop(); }

  std::uint16_t port() const noexcept { return port_; }

  /// Blocks until the session quota is met or stop() is called.
  void wait() {
    std::unique_lock lock(mutex_);
    done_cv_.wait(lock, [this] {
      return stopping_ || (sessions_before_exit_ > 0 && finished_sessions_ >= sessions_before_exit_);
    });
  }

  /// Closes the listener and every open connection, then joins all threads.
  void stop() {
    {
      std::lock_guard lock(mutex_);
      if (stopped_) return;
      stopping_ = true;
      for (auto* ch : open_channels_) ch->socket().shutdown();
    }
    done_cv_.notify_all();
    listener_.shutdown();
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(mutex_);
      workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
    std::lock_guard lock(mutex_);
    stopped_ = true;
  }

  /// Runs f(const TeacherService&) under the actor lock.
  template <class F>
  auto inspect(F&& f) const {
    std::lock_guard lock(mutex_);
    return f(service_);
  }

 private:
  void accept_loop() {
    while (true) {
      pollfd p{listener_.fd(), POLLIN, 0};
      const int r = ::poll(&p, 1, 100);
      {
        std::lock_guard lock(mutex_);
        if (stopping_) return;
      }
      if (r <= 0 || !(p.revents & POLLIN)) continue;
      Socket client(::accept(listener_.fd(), nullptr, nullptr));
      if (!client.valid()) continue;
      int one = 1;
      ::setsockopt(client.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      std::lock_guard lock(mutex_);
      if (stopping_) return;
      workers_.emplace_back([this, s = std::move(client)]() mutable { serve_connection(std::move(s)); });
    }
  }

  void serve_connection(Socket socket) {
    LineChannel channel(std::move(socket));
    ConnectionId conn = 0;
    {
      std::lock_guard lock(mutex_);
      if (stopping_) return;
      conn = service_.open_session();
      open_channels_.push_back(&channel);
    }
    bool shut_down = false;
    try {
      while (!shut_down) {
        auto line = channel.recv_line();
        if (!line) break;
        std::lock_guard lock(mutex_);
        const WireMessage reply = service_.handle_line(conn, *line);
        channel.send_line(encode(reply));
        service_.run_scheduled_update();
        shut_down = service_.session(conn).closed;
      }
    } catch (const TransportError&) {
      // peer vanished; its pending questions stay recorded in the session
    }
    {
      std::lock_guard lock(mutex_);
      std::erase(open_channels_, &channel);
      if (shut_down) ++finished_sessions_;
    }
    done_cv_.notify_all();
  }

  TeacherService service_;
  std::size_t sessions_before_exit_;
  Socket listener_;
  std::uint16_t port_ = 0;
  std::thread acceptor_;
  mutable std::mutex mutex_;
  std::condition_variable done_cv_;
  std::vector<std::thread> workers_;
  std::vector<LineChannel*> open_channels_;
  std::size_t finished_sessions_ = 0;
  bool stopping_ = false;
  bool stopped_ = false;
};

}  // namespace goldilocks
