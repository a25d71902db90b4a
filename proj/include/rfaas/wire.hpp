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

#include <cstdint>
#include <cstring>
#include <string>
#include <variant>
#include <vector>

#include "rfaas/core.hpp"
#include "rfaas/net.hpp"

// Invocation wire protocol, big-endian over a byte stream.
//
//   REQUEST      magic|ver|type=1  invocation_id u64, function_id (u16 len),
//                                  payload (u32 len)
//   RESPONSE     magic|ver|type=2  invocation_id u64, status u8,
//                                  queue/sandbox/exec u32 each, payload
//   DRAIN        magic|ver|type=3  mode u8 (0 graceful, 1 immediate)
//   MEM_OP       magic|ver|type=4  op u8 (0 put, 1 get, 2 alloc, 3 reclaim),
//                                  block_id u64, offset u64, len u32, bytes
//   MEM_RESULT   magic|ver|type=5  status u8, block_id u64, payload
//   LEASE_GRANT  magic|ver|type=6  lease fields (manager -> executor)
//   LEASE_REVOKE magic|ver|type=7  lease_id u64, terminated u8
//   DRAIN_REPORT magic|ver|type=8  aborted u32, completed u32
//   ACK          magic|ver|type=9  status u8
//
// For MEM_OP alloc the offset field carries the requested block size and the
// byte field carries the function_id that names the owning lease. Error
// results carry the error code string as payload.

namespace rfaas::wire {

constexpr uint32_t kMagic = 0x52464153;  // "RFAS"
constexpr uint16_t kVersion = 1;
constexpr uint32_t kDefaultMaxPayload = 64u * 1024u * 1024u;

enum MsgType : uint16_t {
  kRequest = 1,
  kResponse = 2,
  kDrain = 3,
  kMemOp = 4,
  kMemResult = 5,
  kLeaseGrant = 6,
  kLeaseRevoke = 7,
  kDrainReport = 8,
  kAck = 9,
};

enum class MemOpCode : uint8_t { put = 0, get = 1, alloc = 2, reclaim = 3 };

struct Request {
  uint64_t invocation_id = 0;
  std::string function_id;
  std::vector<uint8_t> payload;
};

struct Response {
  uint64_t invocation_id = 0;
  InvocationStatus status = InvocationStatus::ok;
  InvocationTimings timings;
  std::vector<uint8_t> payload;
};

struct Drain {
  uint8_t mode = 0;  // 0 graceful, 1 immediate
};

struct MemOp {
  MemOpCode op = MemOpCode::put;
  uint64_t block_id = 0;
  uint64_t offset = 0;  // alloc: requested size in bytes
  std::vector<uint8_t> bytes;  // alloc: function_id naming the lease
};

struct MemResult {
  uint8_t status = 0;  // 0 ok, 1 error (payload carries the code)
  uint64_t block_id = 0;
  std::vector<uint8_t> payload;
};

struct LeaseGrant {
  uint64_t lease_id = 0;
  std::string client_id;
  std::string function_id;
  std::string image_ref;
  uint8_t kind = 0;  // FunctionKind
  uint32_t cores = 0;
  uint64_t memory_mb = 0;
  uint32_t gpus = 0;
  uint32_t max_duration_ms = 0;
};

struct LeaseRevoke {
  uint64_t lease_id = 0;
  uint8_t terminated = 0;  // 1 when the lease ended by drain/expiry
};

struct DrainReport {
  uint32_t aborted = 0;
  uint32_t completed = 0;
};

struct Ack {
  uint8_t status = 0;
};

using Frame = std::variant<Request, Response, Drain, MemOp, MemResult,
                           LeaseGrant, LeaseRevoke, DrainReport, Ack>;

namespace detail {

inline void put_u8(std::vector<uint8_t>& b, uint8_t v) { b.push_back(v); }

inline void put_u16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(static_cast<uint8_t>(v >> 8));
  b.push_back(static_cast<uint8_t>(v));
}

inline void put_u32(std::vector<uint8_t>& b, uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) {
    b.push_back(static_cast<uint8_t>(v >> shift));
  }
}

inline void put_u64(std::vector<uint8_t>& b, uint64_t v) {
  for (int shift = 56; shift >= 0; shift -= 8) {
    b.push_back(static_cast<uint8_t>(v >> shift));
  }
}

inline void put_bytes(std::vector<uint8_t>& b, const uint8_t* p, size_t n) {
  b.insert(b.end(), p, p + n);
}

class Reader {
 public:
  Reader(const uint8_t* data, size_t size) : p_(data), end_(data + size) {}

  uint8_t u8() {
    need(1);
    return *p_++;
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(p_[0]) << 8 | p_[1];
    p_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = v << 8 | p_[i];
    p_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = v << 8 | p_[i];
    p_ += 8;
    return v;
  }
  std::vector<uint8_t> bytes(size_t n) {
    need(n);
    std::vector<uint8_t> out(p_, p_ + n);
    p_ += n;
    return out;
  }
  std::string str(size_t n) {
    need(n);
    std::string out(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return out;
  }
  size_t remaining() const { return static_cast<size_t>(end_ - p_); }

 private:
  void need(size_t n) {
    if (remaining() < n) throw Error("protocol", "truncated frame");
  }
  const uint8_t* p_;
  const uint8_t* end_;
};

inline void put_str16(std::vector<uint8_t>& b, const std::string& s) {
  if (s.size() > 0xffff) throw Error("protocol", "string too long for frame");
  put_u16(b, static_cast<uint16_t>(s.size()));
  put_bytes(b, reinterpret_cast<const uint8_t*>(s.data()), s.size());
}

}  // namespace detail

inline std::vector<uint8_t> encode(const Frame& frame) {
  using namespace detail;
  std::vector<uint8_t> body;
  uint16_t type = 0;
  if (const auto* r = std::get_if<Request>(&frame)) {
    type = kRequest;
    put_u64(body, r->invocation_id);
    put_str16(body, r->function_id);
    put_u32(body, static_cast<uint32_t>(r->payload.size()));
    put_bytes(body, r->payload.data(), r->payload.size());
  } else if (const auto* r = std::get_if<Response>(&frame)) {
    type = kResponse;
    put_u64(body, r->invocation_id);
    put_u8(body, static_cast<uint8_t>(r->status));
    put_u32(body, r->timings.queue_ms);
    put_u32(body, r->timings.sandbox_ms);
    put_u32(body, r->timings.exec_ms);
    put_u32(body, static_cast<uint32_t>(r->payload.size()));
    put_bytes(body, r->payload.data(), r->payload.size());
  } else if (const auto* d = std::get_if<Drain>(&frame)) {
    type = kDrain;
    put_u8(body, d->mode);
  } else if (const auto* m = std::get_if<MemOp>(&frame)) {
    type = kMemOp;
    put_u8(body, static_cast<uint8_t>(m->op));
    put_u64(body, m->block_id);
    put_u64(body, m->offset);
    put_u32(body, static_cast<uint32_t>(m->bytes.size()));
    put_bytes(body, m->bytes.data(), m->bytes.size());
  } else if (const auto* m = std::get_if<MemResult>(&frame)) {
    type = kMemResult;
    put_u8(body, m->status);
    put_u64(body, m->block_id);
    put_u32(body, static_cast<uint32_t>(m->payload.size()));
    put_bytes(body, m->payload.data(), m->payload.size());
  } else if (const auto* g = std::get_if<LeaseGrant>(&frame)) {
    type = kLeaseGrant;
    put_u64(body, g->lease_id);
    put_str16(body, g->client_id);
    put_str16(body, g->function_id);
    put_str16(body, g->image_ref);
    put_u8(body, g->kind);
    put_u32(body, g->cores);
    put_u64(body, g->memory_mb);
    put_u32(body, g->gpus);
    put_u32(body, g->max_duration_ms);
  } else if (const auto* v = std::get_if<LeaseRevoke>(&frame)) {
    type = kLeaseRevoke;
    put_u64(body, v->lease_id);
    put_u8(body, v->terminated);
  } else if (const auto* d = std::get_if<DrainReport>(&frame)) {
    type = kDrainReport;
    put_u32(body, d->aborted);
    put_u32(body, d->completed);
  } else if (const auto* a = std::get_if<Ack>(&frame)) {
    type = kAck;
    put_u8(body, a->status);
  }

  std::vector<uint8_t> out;
  out.reserve(body.size() + 8);
  put_u32(out, kMagic);
  put_u16(out, kVersion);
  put_u16(out, type);
  put_bytes(out, body.data(), body.size());
  return out;
}

// Reads one frame from the socket. Returns false on clean EOF before any
// bytes. max_payload bounds the variable-length field of requests, responses
// and mem-ops; oversized frames raise "payload-too-large" before the bytes
// are consumed so the connection can still reply.
inline bool read_frame(net::Socket& sock, Frame& out,
                       uint32_t max_payload = kDefaultMaxPayload) {
  uint8_t head[8];
  if (!sock.recv_exact(head, sizeof(head))) return false;
  detail::Reader hr(head, sizeof(head));
  uint32_t magic = hr.u32();
  uint16_t version = hr.u16();
  uint16_t type = hr.u16();
  if (magic != kMagic) throw Error("protocol", "bad magic");
  if (version != kVersion) {
    throw Error("protocol", "unsupported version " + std::to_string(version));
  }

  auto read_n = [&](size_t n) {
    std::vector<uint8_t> buf(n);
    if (n > 0 && !sock.recv_exact(buf.data(), n)) {
      throw Error("connection-lost", "peer closed mid-frame");
    }
    return buf;
  };

  switch (type) {
    case kRequest: {
      Request r;
      auto fixed = read_n(8 + 2);
      detail::Reader rd(fixed.data(), fixed.size());
      r.invocation_id = rd.u64();
      uint16_t fn_len = rd.u16();
      r.function_id = std::string(
          reinterpret_cast<const char*>(read_n(fn_len).data()), fn_len);
      auto len_buf = read_n(4);
      detail::Reader lr(len_buf.data(), len_buf.size());
      uint32_t payload_len = lr.u32();
      if (payload_len > max_payload) {
        // Drain the oversized body so the stream stays framed.
        size_t left = payload_len;
        uint8_t sink[4096];
        while (left > 0) {
          size_t chunk = std::min(left, sizeof(sink));
          if (!sock.recv_exact(sink, chunk)) break;
          left -= chunk;
        }
        out = r;
        throw Error("payload-too-large",
                    "payload " + std::to_string(payload_len) + " exceeds max");
      }
      r.payload = read_n(payload_len);
      out = std::move(r);
      return true;
    }
    case kResponse: {
      Response r;
      auto fixed = read_n(8 + 1 + 4 + 4 + 4 + 4);
      detail::Reader rd(fixed.data(), fixed.size());
      r.invocation_id = rd.u64();
      r.status = static_cast<InvocationStatus>(rd.u8());
      r.timings.queue_ms = rd.u32();
      r.timings.sandbox_ms = rd.u32();
      r.timings.exec_ms = rd.u32();
      uint32_t payload_len = rd.u32();
      if (payload_len > max_payload) {
        throw Error("payload-too-large", "response payload exceeds max");
      }
      r.payload = read_n(payload_len);
      out = std::move(r);
      return true;
    }
    case kDrain: {
      Drain d;
      d.mode = read_n(1)[0];
      out = d;
      return true;
    }
    case kMemOp: {
      MemOp m;
      auto fixed = read_n(1 + 8 + 8 + 4);
      detail::Reader rd(fixed.data(), fixed.size());
      m.op = static_cast<MemOpCode>(rd.u8());
      m.block_id = rd.u64();
      m.offset = rd.u64();
      uint32_t len = rd.u32();
      if (len > max_payload) {
        throw Error("payload-too-large", "mem-op bytes exceed max");
      }
      m.bytes = read_n(len);
      out = std::move(m);
      return true;
    }
    case kMemResult: {
      MemResult m;
      auto fixed = read_n(1 + 8 + 4);
      detail::Reader rd(fixed.data(), fixed.size());
      m.status = rd.u8();
      m.block_id = rd.u64();
      uint32_t len = rd.u32();
      if (len > max_payload) {
        throw Error("payload-too-large", "mem-result bytes exceed max");
      }
      m.payload = read_n(len);
      out = std::move(m);
      return true;
    }
    case kLeaseGrant: {
      LeaseGrant g;
      auto id_buf = read_n(8);
      detail::Reader rd(id_buf.data(), id_buf.size());
      g.lease_id = rd.u64();
      auto read_str = [&]() {
        auto len_buf = read_n(2);
        detail::Reader lr(len_buf.data(), len_buf.size());
        uint16_t n = lr.u16();
        auto raw = read_n(n);
        return std::string(reinterpret_cast<const char*>(raw.data()), n);
      };
      g.client_id = read_str();
      g.function_id = read_str();
      g.image_ref = read_str();
      auto tail = read_n(1 + 4 + 8 + 4 + 4);
      detail::Reader tr(tail.data(), tail.size());
      g.kind = tr.u8();
      g.cores = tr.u32();
      g.memory_mb = tr.u64();
      g.gpus = tr.u32();
      g.max_duration_ms = tr.u32();
      out = std::move(g);
      return true;
    }
    case kLeaseRevoke: {
      LeaseRevoke v;
      auto buf = read_n(8 + 1);
      detail::Reader rd(buf.data(), buf.size());
      v.lease_id = rd.u64();
      v.terminated = rd.u8();
      out = v;
      return true;
    }
    case kDrainReport: {
      DrainReport d;
      auto buf = read_n(4 + 4);
      detail::Reader rd(buf.data(), buf.size());
      d.aborted = rd.u32();
      d.completed = rd.u32();
      out = d;
      return true;
    }
    case kAck: {
      Ack a;
      a.status = read_n(1)[0];
      out = a;
      return true;
    }
    default:
      throw Error("protocol", "unknown msg_type " + std::to_string(type));
  }
}

inline void write_frame(net::Socket& sock, const Frame& frame) {
  auto bytes = encode(frame);
  sock.send_all(bytes.data(), bytes.size());
}

}  // namespace rfaas::wire
