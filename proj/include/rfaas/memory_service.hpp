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
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "rfaas/core.hpp"

// Memory-service blocks: a leased function exposes a block of node memory to
// one-sided put/get, served in the executor without entering user function
// code. A block can be swapped out to scratch storage (standing in for the
// parallel filesystem) and is restored transparently on the next access.

namespace rfaas::memsvc {

inline std::string default_swap_dir() {
  if (const char* v = std::getenv("MEMSVC_SWAP_DIR")) return v;
  return (std::filesystem::temp_directory_path() / "rfaas-memsvc").string();
}

enum class BlockState { resident, swapped };

// calloc-backed buffer: zero pages are provided lazily by the kernel, so a
// multi-GB block costs no resident memory until written.
class ZeroedBuffer {
 public:
  ZeroedBuffer() = default;
  explicit ZeroedBuffer(size_t size)
      : data_(static_cast<uint8_t*>(std::calloc(size, 1))), size_(size) {
    if (size > 0 && data_ == nullptr) {
      throw Error("io-error", "block allocation failed");
    }
  }
  ~ZeroedBuffer() { std::free(data_); }
  ZeroedBuffer(ZeroedBuffer&& o) noexcept
      : data_(std::exchange(o.data_, nullptr)), size_(std::exchange(o.size_, 0)) {}
  ZeroedBuffer& operator=(ZeroedBuffer&& o) noexcept {
    if (this != &o) {
      std::free(data_);
      data_ = std::exchange(o.data_, nullptr);
      size_ = std::exchange(o.size_, 0);
    }
    return *this;
  }
  ZeroedBuffer(const ZeroedBuffer&) = delete;
  ZeroedBuffer& operator=(const ZeroedBuffer&) = delete;

  uint8_t* data() { return data_; }
  const uint8_t* data() const { return data_; }
  size_t size() const { return size_; }
  bool empty() const { return data_ == nullptr; }
  void release() {
    std::free(data_);
    data_ = nullptr;
    size_ = 0;
  }

 private:
  uint8_t* data_ = nullptr;
  size_t size_ = 0;
};

struct MemoryBlock {
  uint64_t block_id = 0;
  uint64_t size_bytes = 0;
  BlockState state = BlockState::resident;
  std::string swap_path;
  uint64_t owner_lease_id = 0;
  ZeroedBuffer bytes;
  std::mutex mu;  // ops on one block are serialized in arrival order
};

struct SwapReceipt {
  uint64_t block_id = 0;
  std::string swap_path;
  uint64_t bytes_written = 0;
};

class BlockTable {
 public:
  explicit BlockTable(std::string swap_dir = default_swap_dir())
      : swap_dir_(std::move(swap_dir)) {}

  ~BlockTable() {
    std::lock_guard lock(mu_);
    for (auto& [id, block] : blocks_) remove_swap_file(*block);
  }

  // lease_memory_mb bounds the block: size_bytes <= memory_mb * 2^20.
  uint64_t allocate(uint64_t owner_lease_id, int64_t lease_memory_mb,
                    uint64_t size_bytes) {
    if (size_bytes == 0) throw Error("invalid-size", "zero-byte block");
    uint64_t limit = static_cast<uint64_t>(lease_memory_mb) << 20;
    if (size_bytes > limit) {
      throw Error("over-lease", "block exceeds leased memory");
    }
    auto block = std::make_unique<MemoryBlock>();
    block->size_bytes = size_bytes;
    block->owner_lease_id = owner_lease_id;
    block->bytes = ZeroedBuffer(size_bytes);
    std::lock_guard lock(mu_);
    uint64_t id = next_block_id_++;
    block->block_id = id;
    blocks_[id] = std::move(block);
    return id;
  }

  void put(uint64_t block_id, uint64_t offset, const uint8_t* data,
           size_t len) {
    auto* block = find(block_id);
    std::lock_guard lock(block->mu);
    check_bounds(*block, offset, len);
    restore_locked(*block);
    std::memcpy(block->bytes.data() + offset, data, len);
  }

  std::vector<uint8_t> get(uint64_t block_id, uint64_t offset, size_t len) {
    auto* block = find(block_id);
    std::lock_guard lock(block->mu);
    check_bounds(*block, offset, len);
    restore_locked(*block);
    return {block->bytes.data() + offset, block->bytes.data() + offset + len};
  }

  // Writes the block to its swap file and frees the memory. On I/O failure
  // the block stays resident.
  SwapReceipt reclaim(uint64_t block_id) {
    auto* block = find(block_id);
    std::lock_guard lock(block->mu);
    if (block->state == BlockState::swapped) {
      throw Error("already-swapped",
                  "block " + std::to_string(block_id) + " already swapped");
    }
    std::filesystem::create_directories(swap_dir_);
    std::string path =
        (std::filesystem::path(swap_dir_) /
         ("block-" + std::to_string(block_id) + ".swap")).string();
    FILE* f = std::fopen(path.c_str(), "wb");
    if (f == nullptr) throw Error("io-error", "cannot open " + path);
    size_t written = std::fwrite(block->bytes.data(), 1, block->size_bytes, f);
    if (std::fclose(f) != 0 || written != block->size_bytes) {
      std::remove(path.c_str());
      throw Error("io-error", "short write to " + path);
    }
    block->swap_path = path;
    block->state = BlockState::swapped;
    block->bytes.release();
    return {block_id, path, written};
  }

  BlockState state(uint64_t block_id) {
    auto* block = find(block_id);
    std::lock_guard lock(block->mu);
    return block->state;
  }

  uint64_t owner(uint64_t block_id) { return find(block_id)->owner_lease_id; }

  // Deletes every block owned by the lease, including swap files.
  size_t drop_lease(uint64_t lease_id) {
    std::lock_guard lock(mu_);
    size_t dropped = 0;
    for (auto it = blocks_.begin(); it != blocks_.end();) {
      if (it->second->owner_lease_id == lease_id) {
        remove_swap_file(*it->second);
        it = blocks_.erase(it);
        ++dropped;
      } else {
        ++it;
      }
    }
    return dropped;
  }

  size_t block_count() const {
    std::lock_guard lock(mu_);
    return blocks_.size();
  }

 private:
  MemoryBlock* find(uint64_t block_id) {
    std::lock_guard lock(mu_);
    auto it = blocks_.find(block_id);
    if (it == blocks_.end()) {
      throw Error("unknown-block", "block " + std::to_string(block_id));
    }
    return it->second.get();
  }

  static void check_bounds(const MemoryBlock& block, uint64_t offset,
                           size_t len) {
    if (offset > block.size_bytes || len > block.size_bytes - offset) {
      throw Error("out-of-bounds",
                  "range [" + std::to_string(offset) + ", +" +
                      std::to_string(len) + ") outside block of " +
                      std::to_string(block.size_bytes) + " bytes");
    }
  }

  static void restore_locked(MemoryBlock& block) {
    if (block.state == BlockState::resident) return;
    ZeroedBuffer buf(block.size_bytes);
    FILE* f = std::fopen(block.swap_path.c_str(), "rb");
    if (f == nullptr) {
      throw Error("io-error", "cannot open swap file " + block.swap_path);
    }
    size_t got = std::fread(buf.data(), 1, block.size_bytes, f);
    std::fclose(f);
    if (got != block.size_bytes) {
      throw Error("io-error", "short read from " + block.swap_path);
    }
    std::remove(block.swap_path.c_str());
    block.bytes = std::move(buf);
    block.swap_path.clear();
    block.state = BlockState::resident;
  }

  static void remove_swap_file(MemoryBlock& block) {
    if (!block.swap_path.empty()) std::remove(block.swap_path.c_str());
  }

  mutable std::mutex mu_;
  std::string swap_dir_;
  uint64_t next_block_id_ = 1;
  std::map<uint64_t, std::unique_ptr<MemoryBlock>> blocks_;
};

}  // namespace rfaas::memsvc
