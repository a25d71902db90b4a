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
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

// LRU pool of idle sandboxes kept resident in otherwise unused node memory.
// Cold starts are avoided as long as the budget holds; when memory is needed
// back, idle sandboxes are the first thing to go.
//
// SandboxT must provide id(), image_ref(), memory_mb() and kill_now().

namespace rfaas::executor {

template <typename SandboxT>
class WarmPool {
 public:
  explicit WarmPool(int64_t budget_mb) : budget_mb_(budget_mb) {}

  // Parks a sandbox. Evicts least-recently-used entries (killing them) until
  // the pool fits the budget again; the incoming sandbox itself is evicted
  // when even an empty pool cannot hold it.
  std::vector<uint64_t> insert(std::shared_ptr<SandboxT> sandbox) {
    std::vector<uint64_t> evicted;
    std::lock_guard lock(mu_);
    resident_mb_ += sandbox->memory_mb();
    entries_.push_back(std::move(sandbox));
    while (resident_mb_ > budget_mb_ && !entries_.empty()) {
      evicted.push_back(evict_front_locked());
    }
    return evicted;
  }

  // Removes and returns a warm sandbox for the image; null on miss.
  std::shared_ptr<SandboxT> checkout(const std::string& image_ref) {
    std::lock_guard lock(mu_);
    for (auto it = entries_.begin(); it != entries_.end(); ++it) {
      if ((*it)->image_ref() == image_ref) {
        auto sandbox = std::move(*it);
        entries_.erase(it);
        resident_mb_ -= sandbox->memory_mb();
        return sandbox;
      }
    }
    return nullptr;
  }

  // Evicts in LRU order until at least target_free_mb has been freed or the
  // pool is empty; returns the amount actually freed.
  int64_t shed(int64_t target_free_mb) {
    std::lock_guard lock(mu_);
    int64_t freed = 0;
    while (freed < target_free_mb && !entries_.empty()) {
      int64_t size = entries_.front()->memory_mb();
      evict_front_locked();
      freed += size;
    }
    return freed;
  }

  void clear() {
    std::lock_guard lock(mu_);
    while (!entries_.empty()) evict_front_locked();
  }

  int64_t resident_mb() const {
    std::lock_guard lock(mu_);
    return resident_mb_;
  }

  size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

  int64_t budget_mb() const { return budget_mb_; }

 private:
  uint64_t evict_front_locked() {
    auto sandbox = std::move(entries_.front());
    entries_.pop_front();
    resident_mb_ -= sandbox->memory_mb();
    uint64_t id = sandbox->id();
    sandbox->kill_now();
    return id;
  }

  mutable std::mutex mu_;
  int64_t budget_mb_;
  int64_t resident_mb_ = 0;
  std::list<std::shared_ptr<SandboxT>> entries_;  // LRU at front
};

}  // namespace rfaas::executor
