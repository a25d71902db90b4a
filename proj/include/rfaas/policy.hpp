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

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfaas/core.hpp"

// Decides whether a function may share a node with a batch job. Gates, in
// order: node sharing is opt-in; hero jobs (large node counts) are exempt;
// the fragment must fit; past co-location runs of the same (job, function)
// pair decide when they exist; otherwise counter-derived stress vectors must
// not saturate any shared resource dimension.

namespace rfaas::policy {

struct WorkloadSignature {
  std::string app_id;
  int64_t scale_class = 1;  // bucketed rank count, powers of two
  std::string input_class;

  bool operator==(const WorkloadSignature&) const = default;
  auto operator<=>(const WorkloadSignature&) const = default;

  void validate() const {
    if (app_id.empty()) throw Error("validation", "signature needs an app_id");
  }
};

// Normalized counter rates relative to node peak, sampled periodically.
struct CounterSample {
  double flops_rate = 0;
  double mem_access_rate = 0;
  double net_bytes_rate = 0;
  int64_t sampled_at = 0;

  void validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(flops_rate) || !in_unit(mem_access_rate) ||
        !in_unit(net_bytes_rate)) {
      throw Error("validation", "counter rates must lie in [0,1]");
    }
  }
};

struct ColocationRecord {
  WorkloadSignature batch_sig;
  WorkloadSignature func_sig;
  int64_t exclusive_runtime_ms = 0;
  int64_t colocated_runtime_ms = 0;
  std::vector<CounterSample> samples;

  double slowdown() const {
    return static_cast<double>(colocated_runtime_ms) /
           static_cast<double>(exclusive_runtime_ms);
  }

  void validate() const {
    batch_sig.validate();
    func_sig.validate();
    if (exclusive_runtime_ms <= 0 || colocated_runtime_ms <= 0) {
      throw Error("validation", "runtimes must be positive");
    }
    for (const auto& s : samples) s.validate();
  }
};

struct StressVector {
  double cpu = 0;
  double memory = 0;
  double network = 0;
};

struct JobDescriptor {
  std::string job_id;
  WorkloadSignature sig;
  int64_t nodes_allocated = 1;
  bool shared_flag = false;
  std::string partition;
  ResourceVector resources_per_node;
};

struct Decision {
  bool allowed = false;
  std::string reason;  // set on deny

  static Decision allow() { return {true, ""}; }
  static Decision deny(std::string reason) { return {false, std::move(reason)}; }
};

struct PolicyConfig {
  double slowdown_threshold = 1.10;
  int64_t hero_threshold_nodes = 256;
  std::string shared_partition = "shared";

  static PolicyConfig from_env() {
    PolicyConfig cfg;
    if (const char* v = std::getenv("POLICY_SLOWDOWN_THRESHOLD")) {
      cfg.slowdown_threshold = std::strtod(v, nullptr);
    }
    if (const char* v = std::getenv("POLICY_HERO_NODES")) {
      cfg.hero_threshold_nodes = std::strtoll(v, nullptr, 10);
    }
    if (const char* v = std::getenv("POLICY_SHARED_PARTITION")) {
      cfg.shared_partition = v;
    }
    return cfg;
  }
};

// Sustained peak demand: per-dimension 90th percentile (nearest-rank) of the
// sampled rates. Single spikes do not dominate, bursts do.
inline StressVector model_stress(const std::vector<CounterSample>& samples) {
  if (samples.empty()) throw Error("empty-sample", "no counter samples");
  auto p90 = [](std::vector<double> v) {
    size_t rank = (v.size() * 9 + 9) / 10;  // ceil(0.9 * n)
    rank = std::min(rank, v.size());
    std::nth_element(v.begin(), v.begin() + (rank - 1), v.end());
    return v[rank - 1];
  };
  std::vector<double> cpu, mem, net;
  cpu.reserve(samples.size());
  mem.reserve(samples.size());
  net.reserve(samples.size());
  for (const auto& s : samples) {
    cpu.push_back(s.flops_rate);
    mem.push_back(s.mem_access_rate);
    net.push_back(s.net_bytes_rate);
  }
  return {p90(std::move(cpu)), p90(std::move(mem)), p90(std::move(net))};
}

inline WorkloadSignature signature_of(const FunctionSpec& spec) {
  WorkloadSignature sig;
  sig.app_id = spec.function_id;
  sig.scale_class = static_cast<int64_t>(
      std::bit_ceil(static_cast<uint64_t>(std::max<int64_t>(1, spec.required.cores))));
  return sig;
}

inline void to_json(nlohmann::json& j, const WorkloadSignature& s) {
  j = {{"app_id", s.app_id},
       {"scale_class", s.scale_class},
       {"input_class", s.input_class}};
}

inline void from_json(const nlohmann::json& j, WorkloadSignature& s) {
  j.at("app_id").get_to(s.app_id);
  j.at("scale_class").get_to(s.scale_class);
  j.at("input_class").get_to(s.input_class);
}

inline void to_json(nlohmann::json& j, const CounterSample& s) {
  j = {{"flops_rate", s.flops_rate},
       {"mem_access_rate", s.mem_access_rate},
       {"net_bytes_rate", s.net_bytes_rate},
       {"sampled_at", s.sampled_at}};
}

inline void from_json(const nlohmann::json& j, CounterSample& s) {
  j.at("flops_rate").get_to(s.flops_rate);
  j.at("mem_access_rate").get_to(s.mem_access_rate);
  j.at("net_bytes_rate").get_to(s.net_bytes_rate);
  s.sampled_at = j.value("sampled_at", int64_t{0});
}

inline void to_json(nlohmann::json& j, const JobDescriptor& d) {
  j = {{"job_id", d.job_id},
       {"sig", d.sig},
       {"nodes_allocated", d.nodes_allocated},
       {"shared_flag", d.shared_flag},
       {"partition", d.partition},
       {"resources_per_node",
        {{"cores", d.resources_per_node.cores},
         {"memory_mb", d.resources_per_node.memory_mb},
         {"gpus", d.resources_per_node.gpus}}}};
}

inline void from_json(const nlohmann::json& j, JobDescriptor& d) {
  j.at("job_id").get_to(d.job_id);
  j.at("sig").get_to(d.sig);
  d.nodes_allocated = j.value("nodes_allocated", int64_t{1});
  d.shared_flag = j.value("shared_flag", false);
  d.partition = j.value("partition", std::string{});
  if (j.contains("resources_per_node")) {
    const auto& r = j.at("resources_per_node");
    d.resources_per_node.cores = r.value("cores", int64_t{0});
    d.resources_per_node.memory_mb = r.value("memory_mb", int64_t{0});
    d.resources_per_node.gpus = r.value("gpus", int64_t{0});
  }
}

inline void to_json(nlohmann::json& j, const ColocationRecord& r) {
  j = {{"batch_sig", r.batch_sig},
       {"func_sig", r.func_sig},
       {"exclusive_runtime_ms", r.exclusive_runtime_ms},
       {"colocated_runtime_ms", r.colocated_runtime_ms},
       {"samples", r.samples}};
}

inline void from_json(const nlohmann::json& j, ColocationRecord& r) {
  j.at("batch_sig").get_to(r.batch_sig);
  j.at("func_sig").get_to(r.func_sig);
  j.at("exclusive_runtime_ms").get_to(r.exclusive_runtime_ms);
  j.at("colocated_runtime_ms").get_to(r.colocated_runtime_ms);
  if (j.contains("samples")) j.at("samples").get_to(r.samples);
}

// Global store of co-location outcomes and workload profiles, keyed by
// signature pairs. Persisted as one JSON object per line when a path is
// given; append-only.
class HistoryStore {
 public:
  HistoryStore() = default;

  explicit HistoryStore(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_);
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      ColocationRecord rec;
      try {
        from_json(nlohmann::json::parse(line), rec);
        rec.validate();
      } catch (const std::exception& e) {
        throw Error("parse", path_ + ":" + std::to_string(line_no) + ": " +
                                 e.what());
      }
      insert_locked(rec);
    }
  }

  uint64_t record_run(const ColocationRecord& rec) {
    rec.validate();
    std::lock_guard lock(mu_);
    uint64_t id = insert_locked(rec);
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      if (!out) throw Error("io-error", "cannot append to " + path_);
      out << nlohmann::json(rec).dump() << "\n";
    }
    return id;
  }

  // Standalone profile, e.g. from the synthetic-input profiling done when a
  // function image is registered.
  void record_profile(const WorkloadSignature& sig,
                      const std::vector<CounterSample>& samples) {
    sig.validate();
    for (const auto& s : samples) s.validate();
    std::lock_guard lock(mu_);
    auto& dst = profiles_[sig];
    dst.insert(dst.end(), samples.begin(), samples.end());
  }

  // Median slowdown over all recorded runs of the pair; empty when the pair
  // has never been co-located.
  std::optional<double> estimate_slowdown(const WorkloadSignature& batch_sig,
                                          const WorkloadSignature& func_sig) const {
    std::lock_guard lock(mu_);
    auto it = history_.find({batch_sig, func_sig});
    if (it == history_.end() || it->second.empty()) return std::nullopt;
    std::vector<double> ratios;
    ratios.reserve(it->second.size());
    for (const auto& rec : it->second) ratios.push_back(rec.slowdown());
    size_t mid = ratios.size() / 2;
    std::nth_element(ratios.begin(), ratios.begin() + mid, ratios.end());
    double hi = ratios[mid];
    if (ratios.size() % 2 == 1) return hi;
    std::nth_element(ratios.begin(), ratios.begin() + mid - 1,
                     ratios.begin() + mid);
    return (ratios[mid - 1] + hi) / 2.0;
  }

  bool has_history(const WorkloadSignature& batch_sig,
                   const WorkloadSignature& func_sig) const {
    std::lock_guard lock(mu_);
    auto it = history_.find({batch_sig, func_sig});
    return it != history_.end() && !it->second.empty();
  }

  std::vector<CounterSample> profile(const WorkloadSignature& sig) const {
    std::lock_guard lock(mu_);
    auto it = profiles_.find(sig);
    return it == profiles_.end() ? std::vector<CounterSample>{} : it->second;
  }

  size_t size() const {
    std::lock_guard lock(mu_);
    size_t n = 0;
    for (const auto& [key, recs] : history_) n += recs.size();
    return n;
  }

 private:
  uint64_t insert_locked(const ColocationRecord& rec) {
    history_[{rec.batch_sig, rec.func_sig}].push_back(rec);
    if (!rec.samples.empty()) {
      auto& prof = profiles_[rec.batch_sig];
      prof.insert(prof.end(), rec.samples.begin(), rec.samples.end());
    }
    return next_id_++;
  }

  mutable std::mutex mu_;
  std::string path_;
  uint64_t next_id_ = 1;
  std::map<std::pair<WorkloadSignature, WorkloadSignature>,
           std::vector<ColocationRecord>>
      history_;
  std::map<WorkloadSignature, std::vector<CounterSample>> profiles_;
};

// Node view the decision needs; the resource manager and the simulator both
// project their node state into this.
struct NodeView {
  ResourceVector total;
  ResourceVector leased;
};

// Total and deterministic. Jobless nodes only pass the capacity gate; with a
// job present the gates run in documented order and history, when present,
// always pre-empts the stress heuristic.
inline Decision decide_colocation(const NodeView& node,
                                  const std::optional<JobDescriptor>& job,
                                  const FunctionSpec& func,
                                  const std::optional<std::vector<CounterSample>>&
                                      func_samples,
                                  const HistoryStore& history,
                                  const PolicyConfig& cfg = {}) {
  if (job) {
    if (!(job->shared_flag || job->partition == cfg.shared_partition)) {
      return Decision::deny("not-opted-in");
    }
    if (job->nodes_allocated > cfg.hero_threshold_nodes) {
      return Decision::deny("hero-job-exempt");
    }
  }

  auto after_lease = rv_try_sub(node.total, node.leased);
  if (!after_lease) return Decision::deny("no-capacity");
  auto avail = job ? rv_try_sub(*after_lease, job->resources_per_node)
                   : after_lease;
  if (!avail || !rv_fits(*avail, func.required)) {
    return Decision::deny("no-capacity");
  }

  if (!job) return Decision::allow();

  WorkloadSignature func_sig = signature_of(func);
  if (auto slowdown = history.estimate_slowdown(job->sig, func_sig)) {
    if (*slowdown > cfg.slowdown_threshold) {
      return Decision::deny("interference");
    }
    return Decision::allow();
  }

  auto stress_of = [&](const WorkloadSignature& sig,
                       const std::optional<std::vector<CounterSample>>& given) {
    if (given && !given->empty()) return model_stress(*given);
    auto stored = history.profile(sig);
    if (!stored.empty()) return model_stress(stored);
    return StressVector{};  // unknown workload: no measured stress
  };
  StressVector job_stress = stress_of(job->sig, std::nullopt);
  StressVector func_stress = stress_of(func_sig, func_samples);

  if (job_stress.cpu + func_stress.cpu > 1.0 ||
      job_stress.memory + func_stress.memory > 1.0 ||
      job_stress.network + func_stress.network > 1.0) {
    return Decision::deny("stress-conflict");
  }
  return Decision::allow();
}

}  // namespace rfaas::policy
