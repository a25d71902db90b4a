// Copyright 2026 The rfaas Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>

#include "rfaas/core.hpp"

namespace rfaas::net {

// Thin RAII wrapper over a stream socket fd.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  Socket& operator=(Socket&& other) noexcept {
    if (this != &other) {
      close();
      fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  void set_nodelay() {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  // Writes the whole buffer or throws.
  void send_all(const void* data, size_t len) {
    const auto* p = static_cast<const uint8_t*>(data);
    while (len > 0) {
      ssize_t n = ::send(fd_, p, len, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error("connection-lost", std::string("send: ") + strerror(errno));
      }
      p += n;
      len -= static_cast<size_t>(n);
    }
  }

  // Reads exactly len bytes. Returns false on clean EOF at a frame boundary
  // (nothing read yet); throws on mid-read EOF or errors.
  bool recv_exact(void* data, size_t len) {
    auto* p = static_cast<uint8_t*>(data);
    size_t got = 0;
    while (got < len) {
      ssize_t n = ::recv(fd_, p + got, len - got, 0);
      if (n == 0) {
        if (got == 0) return false;
        throw Error("connection-lost", "peer closed mid-frame");
      }
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error("connection-lost", std::string("recv: ") + strerror(errno));
      }
      got += static_cast<size_t>(n);
    }
    return true;
  }

  // Non-blocking probe: returns true once data is readable, false on timeout.
  bool wait_readable(int timeout_ms) {
    struct pollfd pfd{fd_, POLLIN, 0};
    int rc = ::poll(&pfd, 1, timeout_ms);
    if (rc < 0 && errno != EINTR) {
      throw Error("connection-lost", std::string("poll: ") + strerror(errno));
    }
    return rc > 0;
  }

  bool readable_now() { return wait_readable(0); }

 private:
  int fd_ = -1;
};

struct HostPort {
  std::string host;
  uint16_t port = 0;
};

inline HostPort split_host_port(const std::string& addr) {
  auto colon = addr.rfind(':');
  if (colon == std::string::npos) {
    throw Error("parse", "expected host:port, got " + addr);
  }
  HostPort hp;
  hp.host = addr.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(addr.substr(colon + 1));
  } catch (const std::exception&) {
    throw Error("parse", "bad port in " + addr);
  }
  if (port < 0 || port > 65535) throw Error("parse", "bad port in " + addr);
  hp.port = static_cast<uint16_t>(port);
  return hp;
}

inline Socket connect_tcp(const std::string& host, uint16_t port,
                          int timeout_ms = 5000) {
  struct addrinfo hints {};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  struct addrinfo* res = nullptr;
  std::string port_str = std::to_string(port);
  int rc = ::getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res);
  if (rc != 0) {
    throw Error("connect-failed",
                "resolve " + host + ": " + gai_strerror(rc));
  }
  int fd = -1;
  for (auto* ai = res; ai != nullptr; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) {
    throw Error("connect-failed", "connect " + host + ":" + port_str);
  }
  (void)timeout_ms;
  Socket s(fd);
  s.set_nodelay();
  return s;
}

inline Socket connect_tcp(const std::string& addr) {
  auto hp = split_host_port(addr);
  return connect_tcp(hp.host, hp.port);
}

class Listener {
 public:
  Listener() = default;

  // addr is host:port; port 0 binds an ephemeral port (see bound_port()).
  explicit Listener(const std::string& addr) {
    auto hp = split_host_port(addr);
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw Error("listen-failed", strerror(errno));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    struct sockaddr_in sa {};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(hp.port);
    if (hp.host.empty() || hp.host == "0.0.0.0") {
      sa.sin_addr.s_addr = INADDR_ANY;
    } else if (::inet_pton(AF_INET, hp.host.c_str(), &sa.sin_addr) != 1) {
      struct hostent* he = ::gethostbyname(hp.host.c_str());
      if (he == nullptr || he->h_addrtype != AF_INET) {
        ::close(fd_);
        fd_ = -1;
        throw Error("listen-failed", "cannot resolve " + hp.host);
      }
      memcpy(&sa.sin_addr, he->h_addr_list[0], sizeof(sa.sin_addr));
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0 ||
        ::listen(fd_, 64) != 0) {
      std::string err = strerror(errno);
      ::close(fd_);
      fd_ = -1;
      throw Error("listen-failed", addr + ": " + err);
    }
    socklen_t len = sizeof(sa);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &len);
    port_ = ntohs(sa.sin_port);
  }

  Listener(Listener&& other) noexcept
      : fd_(std::exchange(other.fd_, -1)), port_(other.port_) {}
  Listener& operator=(Listener&& other) noexcept {
    if (this != &other) {
      close();
      fd_ = std::exchange(other.fd_, -1);
      port_ = other.port_;
    }
    return *this;
  }
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;
  ~Listener() { close(); }

  uint16_t bound_port() const { return port_; }
  bool valid() const { return fd_ >= 0; }

  void close() {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

  // Accepts one connection; empty socket on timeout or after close().
  Socket accept(int timeout_ms) {
    if (fd_ < 0) return Socket();
    struct pollfd pfd{fd_, POLLIN, 0};
    int rc = ::poll(&pfd, 1, timeout_ms);
    if (rc <= 0) return Socket();
    int cfd = ::accept(fd_, nullptr, nullptr);
    if (cfd < 0) return Socket();
    Socket s(cfd);
    s.set_nodelay();
    return s;
  }

 private:
  int fd_ = -1;
  uint16_t port_ = 0;
};

}  // namespace rfaas::net
