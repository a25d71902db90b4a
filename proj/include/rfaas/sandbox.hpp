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

#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "rfaas/core.hpp"
#include "rfaas/net.hpp"

// Sandboxes are OS processes re-executed from the current binary. Every
// embedding executable (the CLI, the test binaries) calls
// maybe_run_sandbox_child() first thing in main; when the process was spawned
// as a sandbox it serves invocations over its inherited socketpair fd and
// never returns.
//
// Child IPC framing (host order; both ends are the same binary):
//   parent -> child   u64 invocation_id | u32 deadline_ms | u32 payload_len
//                     | payload
//   child  -> parent  u64 invocation_id | u8 status | u32 payload_len
//                     | payload
// The child announces readiness with a u32 hello; reading it is the tail end
// of the cold-start cost.

extern "C" char** environ;

namespace rfaas::sandbox {

constexpr uint32_t kHello = 0x53424f58;  // "SBOX"

struct ExecResult {
  InvocationStatus status = InvocationStatus::ok;
  std::vector<uint8_t> payload;
};

// A function entry point. deadline_ms is the remaining budget; long-running
// entries are expected to give up once it is spent.
using EntryFn =
    std::function<ExecResult(const std::vector<uint8_t>& payload,
                             int64_t deadline_ms)>;

inline ExecResult ok_result(std::string s = {}) {
  return {InvocationStatus::ok, std::vector<uint8_t>(s.begin(), s.end())};
}

inline ExecResult error_result(std::string s) {
  return {InvocationStatus::error, std::vector<uint8_t>(s.begin(), s.end())};
}

inline int64_t parse_ms(const std::vector<uint8_t>& payload) {
  std::string s(payload.begin(), payload.end());
  try {
    return std::stoll(s);
  } catch (const std::exception&) {
    return 0;
  }
}

// Built-in entry points used by the tools and tests; a deployment would map
// image references to real code here.
inline const std::map<std::string, EntryFn>& builtin_entries() {
  static const std::map<std::string, EntryFn> entries = {
      {"noop",
       [](const std::vector<uint8_t>&, int64_t) { return ok_result(); }},
      {"echo",
       [](const std::vector<uint8_t>& payload, int64_t) {
         return ExecResult{InvocationStatus::ok, payload};
       }},
      {"sleep",
       [](const std::vector<uint8_t>& payload, int64_t deadline_ms) {
         int64_t ms = parse_ms(payload);
         int64_t start = now_ms();
         while (now_ms() - start < ms) {
           if (now_ms() - start >= deadline_ms) {
             return error_result("deadline");
           }
           std::this_thread::sleep_for(std::chrono::milliseconds(1));
         }
         return ok_result("slept " + std::to_string(ms));
       }},
      {"busy",
       [](const std::vector<uint8_t>& payload, int64_t deadline_ms) {
         int64_t ms = parse_ms(payload);
         int64_t start = now_ms();
         volatile uint64_t sink = 0;
         while (now_ms() - start < ms) {
           if (now_ms() - start >= deadline_ms) {
             return error_result("deadline");
           }
           for (int i = 0; i < 10000; ++i) sink = sink + i;
         }
         return ok_result(std::to_string(sink));
       }},
      {"fail",
       [](const std::vector<uint8_t>& payload, int64_t) {
         return error_result("function failed: " +
                             std::string(payload.begin(), payload.end()));
       }},
      {"hang",  // ignores the budget; exercises the hard-kill path
       [](const std::vector<uint8_t>&, int64_t) {
         for (;;) std::this_thread::sleep_for(std::chrono::seconds(1));
         return ok_result();
       }},
  };
  return entries;
}

namespace detail {

inline bool write_all_fd(int fd, const void* data, size_t len) {
  const auto* p = static_cast<const uint8_t*>(data);
  while (len > 0) {
    ssize_t n = ::write(fd, p, len);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += n;
    len -= static_cast<size_t>(n);
  }
  return true;
}

inline bool read_all_fd(int fd, void* data, size_t len) {
  auto* p = static_cast<uint8_t*>(data);
  while (len > 0) {
    ssize_t n = ::read(fd, p, len);
    if (n <= 0) {
      if (n < 0 && errno == EINTR) continue;
      return false;
    }
    p += n;
    len -= static_cast<size_t>(n);
  }
  return true;
}

inline void cpu_relax() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_ia32_pause();
#else
  std::this_thread::yield();
#endif
}

// Busy-polls until the channel has data; the dedicated hot path trades a
// core for skipping the blocking-read wake-up. Returns false on EOF/error.
inline bool spin_until_readable(int fd) {
  uint8_t probe = 0;
  for (uint64_t i = 0;; ++i) {
    ssize_t n = ::recv(fd, &probe, 1, MSG_PEEK | MSG_DONTWAIT);
    if (n > 0) return true;
    if (n == 0) return false;
    if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) return false;
    cpu_relax();
    if ((i & 0x3ff) == 0x3ff) std::this_thread::yield();
  }
}

[[noreturn]] inline void child_loop(int fd, const std::string& entry_name,
                                    bool hot) {
  const auto& entries = builtin_entries();
  auto it = entries.find(entry_name);
  uint32_t hello = kHello;
  write_all_fd(fd, &hello, sizeof(hello));
  if (it == entries.end()) _exit(3);
  const EntryFn& entry = it->second;
  for (;;) {
    uint64_t invocation_id = 0;
    uint32_t deadline_ms = 0, payload_len = 0;
    if (hot && !spin_until_readable(fd)) _exit(0);
    if (!read_all_fd(fd, &invocation_id, sizeof(invocation_id))) _exit(0);
    if (!read_all_fd(fd, &deadline_ms, sizeof(deadline_ms))) _exit(0);
    if (!read_all_fd(fd, &payload_len, sizeof(payload_len))) _exit(0);
    std::vector<uint8_t> payload(payload_len);
    if (payload_len > 0 && !read_all_fd(fd, payload.data(), payload_len)) {
      _exit(0);
    }
    ExecResult result;
    try {
      result = entry(payload, deadline_ms);
    } catch (const std::exception& e) {
      result = error_result(e.what());
    }
    uint8_t status = static_cast<uint8_t>(result.status);
    uint32_t out_len = static_cast<uint32_t>(result.payload.size());
    if (!write_all_fd(fd, &invocation_id, sizeof(invocation_id)) ||
        !write_all_fd(fd, &status, sizeof(status)) ||
        !write_all_fd(fd, &out_len, sizeof(out_len)) ||
        (out_len > 0 && !write_all_fd(fd, result.payload.data(), out_len))) {
      _exit(0);
    }
  }
}

}  // namespace detail

// Entry hook: call first in main(). Returns only when this process is not a
// sandbox child.
inline void maybe_run_sandbox_child(int argc, char** argv) {
  if (argc < 2 || std::string(argv[1]) != "--rfaas-sandbox-child") return;
  int fd = -1;
  bool hot = false;
  std::string entry;
  for (int i = 2; i + 1 < argc; i += 2) {
    std::string flag = argv[i];
    if (flag == "--fd") fd = std::atoi(argv[i + 1]);
    if (flag == "--entry") entry = argv[i + 1];
    if (flag == "--hot") hot = std::atoi(argv[i + 1]) != 0;
  }
  if (fd < 0 || entry.empty()) _exit(2);
  signal(SIGPIPE, SIG_IGN);
  detail::child_loop(fd, entry, hot);
}

inline std::string self_exe_path() {
  char buf[4096];
  ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
  if (n <= 0) throw Error("spawn-failed", "cannot resolve /proc/self/exe");
  buf[n] = '\0';
  return buf;
}

struct InvokeOutcome {
  enum class What { completed, timed_out, died } what = What::completed;
  InvocationStatus status = InvocationStatus::ok;
  std::vector<uint8_t> payload;
};

// One live sandbox process plus its IPC channel. Hot sandboxes busy-poll
// the channel; warm ones park on a blocking read between invocations.
class Sandbox {
 public:
  Sandbox(uint64_t id, std::string image_ref, std::string entry,
          int64_t memory_mb, bool hot = false)
      : sandbox_id_(id),
        image_ref_(std::move(image_ref)),
        memory_mb_(memory_mb),
        hot_(hot) {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) != 0) {
      throw Error("spawn-failed", strerror(errno));
    }
    std::string exe = self_exe_path();
    std::string fd_str = std::to_string(fds[1]);
    std::vector<std::string> args = {exe,     "--rfaas-sandbox-child",
                                     "--fd",  fd_str,
                                     "--entry", entry,
                                     "--hot", hot ? "1" : "0"};
    std::vector<char*> argv;
    argv.reserve(args.size() + 1);
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);

    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_addclose(&actions, fds[0]);
    pid_t pid = 0;
    int rc = ::posix_spawn(&pid, exe.c_str(), &actions, nullptr, argv.data(),
                           environ);
    posix_spawn_file_actions_destroy(&actions);
    ::close(fds[1]);
    if (rc != 0) {
      ::close(fds[0]);
      throw Error("spawn-failed", strerror(rc));
    }
    pid_ = pid;
    channel_ = net::Socket(fds[0]);

    uint32_t hello = 0;
    if (!channel_.recv_exact(&hello, sizeof(hello)) || hello != kHello) {
      kill_now();
      throw Error("spawn-failed", "sandbox handshake failed");
    }
  }

  ~Sandbox() { kill_now(); }
  Sandbox(const Sandbox&) = delete;
  Sandbox& operator=(const Sandbox&) = delete;

  uint64_t id() const { return sandbox_id_; }
  const std::string& image_ref() const { return image_ref_; }
  int64_t memory_mb() const { return memory_mb_; }
  pid_t pid() const { return pid_; }
  bool alive() const { return alive_.load(); }

  // Runs one invocation; blocks up to hard_timeout_ms, then reports a
  // timeout so the caller can kill the process.
  InvokeOutcome invoke(uint64_t invocation_id,
                       const std::vector<uint8_t>& payload,
                       uint32_t deadline_ms, int64_t hard_timeout_ms) {
    InvokeOutcome out;
    uint32_t len = static_cast<uint32_t>(payload.size());
    try {
      channel_.send_all(&invocation_id, sizeof(invocation_id));
      channel_.send_all(&deadline_ms, sizeof(deadline_ms));
      channel_.send_all(&len, sizeof(len));
      if (len > 0) channel_.send_all(payload.data(), len);

      int64_t deadline_abs = now_ms() + hard_timeout_ms;
      if (hot_) {
        // Dedicated channel: poll without sleeping, checking the clock in
        // batches.
        uint8_t probe = 0;
        for (uint64_t i = 0;; ++i) {
          ssize_t n = ::recv(channel_.fd(), &probe, 1,
                             MSG_PEEK | MSG_DONTWAIT);
          if (n > 0) break;
          if (n == 0) {
            out.what = InvokeOutcome::What::died;
            return out;
          }
          if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) {
            out.what = InvokeOutcome::What::died;
            return out;
          }
          if ((i & 0xff) == 0xff && now_ms() >= deadline_abs) {
            out.what = InvokeOutcome::What::timed_out;
            return out;
          }
          detail::cpu_relax();
        }
      } else {
        for (;;) {
          int64_t left = deadline_abs - now_ms();
          if (left <= 0) {
            out.what = InvokeOutcome::What::timed_out;
            return out;
          }
          if (channel_.wait_readable(
                  static_cast<int>(std::min<int64_t>(left, 100)))) {
            break;
          }
        }
      }
      uint64_t echo_id = 0;
      uint8_t status = 0;
      uint32_t out_len = 0;
      if (!channel_.recv_exact(&echo_id, sizeof(echo_id)) ||
          !channel_.recv_exact(&status, sizeof(status)) ||
          !channel_.recv_exact(&out_len, sizeof(out_len))) {
        out.what = InvokeOutcome::What::died;
        return out;
      }
      out.payload.resize(out_len);
      if (out_len > 0 && !channel_.recv_exact(out.payload.data(), out_len)) {
        out.what = InvokeOutcome::What::died;
        return out;
      }
      out.status = static_cast<InvocationStatus>(status);
      return out;
    } catch (const Error&) {
      out.what = InvokeOutcome::What::died;
      return out;
    }
  }

  // Kills the child; the channel stays open so a thread blocked on it wakes
  // on the resulting EOF. The socket closes with the object.
  void kill_now() {
    bool expected = true;
    if (!alive_.compare_exchange_strong(expected, false)) return;
    ::kill(pid_, SIGKILL);
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }

 private:
  uint64_t sandbox_id_;
  std::string image_ref_;
  int64_t memory_mb_;
  bool hot_ = false;
  pid_t pid_ = -1;
  net::Socket channel_;
  std::atomic<bool> alive_{true};
};

}  // namespace rfaas::sandbox
