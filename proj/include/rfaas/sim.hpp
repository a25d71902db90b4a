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
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfaas/core.hpp"
#include "rfaas/json_codec.hpp"
#include "rfaas/policy.hpp"

// Deterministic discrete-event replay of a cluster: sampled node-state traces
// and/or an explicit workload drive batch occupancy, functions are placed on
// idle nodes and idle fragments with the same policy logic the resource
// manager uses, and utilization/billing metrics come out per scenario.

namespace rfaas::sim {

enum class NodeState { idle, busy, down };

inline std::string to_string(NodeState s) {
  switch (s) {
    case NodeState::idle: return "idle";
    case NodeState::busy: return "busy";
    case NodeState::down: return "down";
  }
  return "?";
}

inline NodeState node_state_from_string(const std::string& s) {
  if (s == "idle") return NodeState::idle;
  if (s == "busy") return NodeState::busy;
  if (s == "down") return NodeState::down;
  throw Error("parse", "unknown node state: " + s);
}

struct TraceSample {
  int64_t t_s = 0;
  std::string node_id;
  NodeState state = NodeState::idle;
  int64_t free_cores = 0;
  int64_t free_memory_mb = 0;
};

constexpr int64_t kDefaultSampleIntervalS = 120;

struct Trace {
  std::map<std::string, std::vector<TraceSample>> streams;
  std::vector<std::string> warnings;
  int64_t interval_s = kDefaultSampleIntervalS;
};

inline Trace load_trace(std::istream& in, const std::string& origin = "trace") {
  Trace trace;
  std::string line;
  size_t line_no = 0;
  if (!std::getline(in, line)) throw Error("parse", origin + ": empty file");
  ++line_no;
  if (line == "t_s,node_id,state,free_cores,free_memory_mb\r") {
    line.pop_back();
  }
  if (line != "t_s,node_id,state,free_cores,free_memory_mb") {
    throw Error("parse", origin + ":1: bad header: " + line);
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t pos = 0;
    while (true) {
      size_t comma = line.find(',', pos);
      if (comma == std::string::npos) {
        fields.push_back(line.substr(pos));
        break;
      }
      fields.push_back(line.substr(pos, comma - pos));
      pos = comma + 1;
    }
    auto fail = [&](const std::string& why) -> Error {
      return Error("parse",
                   origin + ":" + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() != 5) throw fail("expected 5 fields");
    TraceSample s;
    try {
      s.t_s = std::stoll(fields[0]);
      s.free_cores = std::stoll(fields[3]);
      s.free_memory_mb = std::stoll(fields[4]);
    } catch (const std::exception&) {
      throw fail("bad number");
    }
    s.node_id = fields[1];
    try {
      s.state = node_state_from_string(fields[2]);
    } catch (const Error& e) {
      throw fail(e.what());
    }
    if (s.free_cores < 0 || s.free_memory_mb < 0) throw fail("negative free");
    auto& stream = trace.streams[s.node_id];
    if (!stream.empty() && s.t_s <= stream.back().t_s) {
      throw fail("non-monotonic timestamp for node " + s.node_id);
    }
    stream.push_back(std::move(s));
  }

  // Infer the sampling interval and flag gaps; estimation assumes a constant
  // step.
  std::optional<int64_t> interval;
  for (const auto& [node, stream] : trace.streams) {
    for (size_t i = 1; i < stream.size(); ++i) {
      int64_t step = stream[i].t_s - stream[i - 1].t_s;
      if (!interval) {
        interval = step;
      } else if (step != *interval) {
        trace.warnings.push_back("node " + node + " sample gap at t=" +
                                 std::to_string(stream[i].t_s) + " (step " +
                                 std::to_string(step) + "s, expected " +
                                 std::to_string(*interval) + "s)");
      }
    }
  }
  if (interval) trace.interval_s = *interval;
  return trace;
}

inline Trace load_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot open " + path);
  return load_trace(in, path);
}

// An idle window recovered from discrete sampling. The true boundaries are
// only known to within one sampling step: a run of k idle samples at
// [t, t + (k-1)D] starts somewhere in [t - D, t] and ends somewhere in
// [t + (k-1)D, t + kD]. The midpoint estimate k*D is unbiased over the
// feasible interval. For k = 1 the start and end bounds meet at the single
// sample.
struct IdlePeriod {
  std::string node_id;
  int64_t start_lb_s = 0;
  int64_t start_ub_s = 0;
  int64_t end_lb_s = 0;
  int64_t end_ub_s = 0;
  int64_t duration_estimate_s = 0;
};

inline std::vector<IdlePeriod> estimate_idle_periods(
    const std::vector<TraceSample>& stream, int64_t interval_s) {
  std::vector<IdlePeriod> periods;
  size_t i = 0;
  while (i < stream.size()) {
    if (stream[i].state != NodeState::idle) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j + 1 < stream.size() && stream[j + 1].state == NodeState::idle) {
      ++j;
    }
    int64_t k = static_cast<int64_t>(j - i + 1);
    IdlePeriod p;
    p.node_id = stream[i].node_id;
    p.start_lb_s = stream[i].t_s - interval_s;
    p.start_ub_s = stream[i].t_s;
    p.end_lb_s = stream[j].t_s;
    p.end_ub_s = stream[j].t_s + interval_s;
    p.duration_estimate_s = k * interval_s;
    periods.push_back(p);
    i = j + 1;
  }
  return periods;
}

// ---------------------------------------------------------------------------
// Synthetic trace generation
// ---------------------------------------------------------------------------

struct TraceGenConfig {
  int64_t nodes = 8;
  double hours = 24;
  uint64_t seed = 1;
  int64_t interval_s = kDefaultSampleIntervalS;
  int64_t cores_per_node = 36;
  int64_t memory_mb_per_node = 128000;
  // Idle windows are lognormal with a ~5.75 min median; with sigma 0.8 about
  // 75% of windows fall under 10 minutes, the shape observed on production
  // clusters.
  double idle_median_s = 345;
  double idle_sigma = 0.8;
  double busy_median_s = 1500;
  double busy_sigma = 0.6;
};

struct TrueIdleWindow {
  std::string node_id;
  int64_t start_ms = 0;
  int64_t end_ms = 0;
};

struct GeneratedTrace {
  std::vector<TraceSample> samples;  // sorted by (t, node_id)
  std::vector<TrueIdleWindow> windows;
  int64_t interval_s = kDefaultSampleIntervalS;
};

inline std::string gen_node_name(int64_t i) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "n%04lld", static_cast<long long>(i));
  return buf;
}

inline GeneratedTrace generate_trace(const TraceGenConfig& cfg) {
  GeneratedTrace out;
  out.interval_s = cfg.interval_s;
  std::mt19937_64 rng(cfg.seed);
  std::lognormal_distribution<double> idle_dist(std::log(cfg.idle_median_s),
                                                cfg.idle_sigma);
  std::lognormal_distribution<double> busy_dist(std::log(cfg.busy_median_s),
                                                cfg.busy_sigma);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int64_t horizon_ms = static_cast<int64_t>(cfg.hours * 3600.0 * 1000.0);

  std::vector<std::vector<TraceSample>> per_node(cfg.nodes);
  for (int64_t n = 0; n < cfg.nodes; ++n) {
    std::string name = gen_node_name(n);
    // Alternating busy/idle windows in continuous time.
    struct Window {
      int64_t start_ms, end_ms;
      bool idle;
      int64_t used_cores, used_mem;
    };
    std::vector<Window> windows;
    int64_t t = 0;
    bool idle = unit(rng) < 0.3;
    while (t < horizon_ms) {
      double dur_s = idle ? idle_dist(rng) : busy_dist(rng);
      int64_t dur_ms = std::max<int64_t>(1000, static_cast<int64_t>(dur_s * 1000.0));
      Window w;
      w.start_ms = t;
      w.end_ms = std::min(horizon_ms, t + dur_ms);
      w.idle = idle;
      if (idle) {
        w.used_cores = 0;
        w.used_mem = 0;
      } else {
        w.used_cores = 1 + static_cast<int64_t>(unit(rng) * static_cast<double>(
                                                    cfg.cores_per_node - 1));
        w.used_mem = static_cast<int64_t>(
            unit(rng) * 0.5 * static_cast<double>(cfg.memory_mb_per_node));
      }
      windows.push_back(w);
      if (w.idle && w.end_ms > w.start_ms) {
        out.windows.push_back({name, w.start_ms, w.end_ms});
      }
      t = w.end_ms;
      idle = !idle;
    }

    size_t wi = 0;
    for (int64_t ts = 0; ts * 1000 < horizon_ms; ts += cfg.interval_s) {
      int64_t t_ms = ts * 1000;
      while (wi + 1 < windows.size() && windows[wi].end_ms <= t_ms) ++wi;
      const Window& w = windows[wi];
      TraceSample s;
      s.t_s = ts;
      s.node_id = name;
      s.state = w.idle ? NodeState::idle : NodeState::busy;
      s.free_cores = cfg.cores_per_node - w.used_cores;
      s.free_memory_mb = cfg.memory_mb_per_node - w.used_mem;
      per_node[n].push_back(std::move(s));
    }
  }

  // Interleave by time, then node, so the CSV is deterministic.
  size_t total = 0;
  for (auto& v : per_node) total += v.size();
  out.samples.reserve(total);
  size_t steps = per_node.empty() ? 0 : per_node[0].size();
  for (size_t step = 0; step < steps; ++step) {
    for (int64_t n = 0; n < cfg.nodes; ++n) {
      if (step < per_node[n].size()) out.samples.push_back(per_node[n][step]);
    }
  }
  return out;
}

inline void write_trace_csv(const GeneratedTrace& trace, std::ostream& out) {
  out << "t_s,node_id,state,free_cores,free_memory_mb\n";
  for (const auto& s : trace.samples) {
    out << s.t_s << ',' << s.node_id << ',' << to_string(s.state) << ','
        << s.free_cores << ',' << s.free_memory_mb << "\n";
  }
}

// ---------------------------------------------------------------------------
// Workload description
// ---------------------------------------------------------------------------

struct SimNodeSpec {
  std::string node_id;
  ResourceVector total;
};

struct BatchJob {
  int64_t arrival_s = 0;
  int64_t duration_s = 0;
  int64_t nodes = 1;
  int64_t cores_per_node = 0;
  int64_t memory_mb_per_node = 0;
  bool shared_flag = false;
  std::string partition;
  policy::WorkloadSignature sig;
};

struct FunctionArrival {
  int64_t arrival_s = 0;
  FunctionSpec spec;
  int64_t exec_ms = 0;
  std::optional<policy::WorkloadSignature> sig;
};

struct SimWorkload {
  std::vector<SimNodeSpec> nodes;
  std::vector<BatchJob> batch_jobs;
  std::vector<FunctionArrival> function_stream;
  bool queue_functions = false;
  std::optional<int64_t> queue_timeout_s;
  int64_t reserved_serving_cores = 0;

  void validate() const {
    for (const auto& j : batch_jobs) {
      if (j.duration_s <= 0) throw Error("validation", "job duration must be > 0");
      if (j.nodes < 1) throw Error("validation", "job needs at least one node");
    }
    for (const auto& f : function_stream) {
      if (f.exec_ms <= 0) throw Error("validation", "function exec_ms must be > 0");
      f.spec.validate();
    }
  }
};

inline void from_json(const nlohmann::json& j, SimNodeSpec& n) {
  j.at("node_id").get_to(n.node_id);
  n.total.cores = j.at("cores").get<int64_t>();
  n.total.memory_mb = j.at("memory_mb").get<int64_t>();
  n.total.gpus = j.value("gpus", int64_t{0});
}

inline void from_json(const nlohmann::json& j, BatchJob& b) {
  j.at("arrival_s").get_to(b.arrival_s);
  j.at("duration_s").get_to(b.duration_s);
  j.at("nodes").get_to(b.nodes);
  j.at("cores_per_node").get_to(b.cores_per_node);
  b.memory_mb_per_node = j.value("memory_mb_per_node", int64_t{0});
  b.shared_flag = j.value("shared_flag", false);
  b.partition = j.value("partition", std::string{});
  if (j.contains("sig")) j.at("sig").get_to(b.sig);
  if (b.sig.app_id.empty()) b.sig.app_id = "batch";
}

inline void from_json(const nlohmann::json& j, FunctionArrival& f) {
  j.at("arrival_s").get_to(f.arrival_s);
  j.at("exec_ms").get_to(f.exec_ms);
  j.at("spec").get_to(f.spec);
  if (j.contains("sig")) {
    policy::WorkloadSignature sig;
    j.at("sig").get_to(sig);
    f.sig = sig;
  }
}

inline void from_json(const nlohmann::json& j, SimWorkload& w) {
  if (j.contains("nodes")) j.at("nodes").get_to(w.nodes);
  if (j.contains("batch_jobs")) j.at("batch_jobs").get_to(w.batch_jobs);
  if (j.contains("function_stream")) j.at("function_stream").get_to(w.function_stream);
  w.queue_functions = j.value("queue_functions", false);
  if (j.contains("queue_timeout_s") && !j.at("queue_timeout_s").is_null()) {
    w.queue_timeout_s = j.at("queue_timeout_s").get<int64_t>();
  }
  w.reserved_serving_cores = j.value("reserved_serving_cores", int64_t{0});
}

inline SimWorkload load_workload_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw Error("parse", path + ": " + e.what());
  }
  SimWorkload w = j.get<SimWorkload>();
  w.validate();
  return w;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

enum class Scenario { exclusive, ideal_partial, colocated };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::exclusive: return "exclusive";
    case Scenario::ideal_partial: return "ideal_partial";
    case Scenario::colocated: return "colocated";
  }
  return "?";
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "exclusive") return Scenario::exclusive;
  if (s == "ideal_partial") return Scenario::ideal_partial;
  if (s == "colocated") return Scenario::colocated;
  throw Error("parse", "unknown scenario: " + s);
}

struct SimMetrics {
  double core_utilization = 0;
  double memory_utilization = 0;
  int64_t functions_completed = 0;
  int64_t functions_rejected = 0;
  double batch_core_hours_billed = 0;
  double node_throughput_relative = 0;
};

inline void to_json(nlohmann::json& j, const SimMetrics& m) {
  j = {{"core_utilization", m.core_utilization},
       {"memory_utilization", m.memory_utilization},
       {"functions_completed", m.functions_completed},
       {"functions_rejected", m.functions_rejected},
       {"batch_core_hours_billed", m.batch_core_hours_billed},
       {"node_throughput_relative", m.node_throughput_relative}};
}

inline void from_json(const nlohmann::json& j, SimMetrics& m) {
  j.at("core_utilization").get_to(m.core_utilization);
  j.at("memory_utilization").get_to(m.memory_utilization);
  j.at("functions_completed").get_to(m.functions_completed);
  j.at("functions_rejected").get_to(m.functions_rejected);
  j.at("batch_core_hours_billed").get_to(m.batch_core_hours_billed);
  j.at("node_throughput_relative").get_to(m.node_throughput_relative);
}

struct SimConfig {
  Scenario scenario = Scenario::colocated;
  policy::PolicyConfig policy;
  const policy::HistoryStore* history = nullptr;  // optional slowdown source
  // Per-co-runner efficiency e(n); missing entries mean 1.0.
  std::map<int64_t, double> efficiency;
};

namespace detail {

// Event ordering: time, then kind (ends before starts so freed capacity is
// visible at the boundary), then id.
enum EventKind : int {
  kOccEnd = 0,   // batch job / trace occupancy ends
  kOccStart = 1,
  kFnEnd = 2,
  kFnStart = 3,
};

struct Event {
  int64_t t_ms;
  int kind;
  int64_t id;
  bool operator>(const Event& o) const {
    if (t_ms != o.t_ms) return t_ms > o.t_ms;
    if (kind != o.kind) return kind > o.kind;
    return id > o.id;
  }
};

// One span of batch occupancy on one node: a workload job slice or one trace
// sample interval.
struct Occupancy {
  std::string node_id;
  int64_t start_ms = 0;
  int64_t end_ms = 0;
  ResourceVector use;
  int64_t billed_cores = 0;  // per scenario, already resolved
  std::optional<policy::JobDescriptor> job;
  bool down = false;
};

struct RunningFn {
  size_t arrival_idx;
  std::string node_id;
  int64_t start_ms = 0;
  int64_t end_ms = 0;
  ResourceVector use;
};

}  // namespace detail

class Simulation {
 public:
  Simulation(SimWorkload workload, SimConfig config)
      : workload_(std::move(workload)), cfg_(std::move(config)) {
    workload_.validate();
    for (const auto& n : workload_.nodes) add_node(n);
  }

  // Trace mode: node inventory and occupancy come from the samples; each
  // sample interval [t, t+D) becomes one occupancy span with the sampled
  // usage.
  Simulation(const Trace& trace, SimWorkload workload, SimConfig config)
      : workload_(std::move(workload)), cfg_(std::move(config)) {
    workload_.validate();
    if (!workload_.batch_jobs.empty()) {
      throw Error("validation",
                  "trace-driven runs take functions from the workload, not "
                  "batch_jobs; occupancy is replayed from the trace");
    }
    int64_t interval_ms = trace.interval_s * 1000;
    for (const auto& [node_id, stream] : trace.streams) {
      ResourceVector total{0, 0, 0};
      for (const auto& s : stream) {
        total.cores = std::max(total.cores, s.free_cores);
        total.memory_mb = std::max(total.memory_mb, s.free_memory_mb);
      }
      add_node({node_id, total});
      for (const auto& s : stream) {
        detail::Occupancy occ;
        occ.node_id = node_id;
        occ.start_ms = s.t_s * 1000;
        occ.end_ms = occ.start_ms + interval_ms;
        if (s.state == NodeState::down) {
          // Down time blocks the node but is not usage.
          occ.down = true;
        } else {
          occ.use = {total.cores - s.free_cores,
                     total.memory_mb - s.free_memory_mb, 0};
        }
        if (!occ.use.zero() || occ.down) {
          occ.billed_cores = cfg_.scenario == Scenario::exclusive && !occ.down
                                 ? total.cores
                                 : occ.use.cores;
          occupancies_.push_back(std::move(occ));
        }
      }
      // Remaining-idle hints from maximal idle runs.
      for (const auto& p : estimate_idle_periods(stream, trace.interval_s)) {
        idle_until_[node_id].emplace_back(p.start_ub_s * 1000,
                                          (p.end_lb_s + trace.interval_s) * 1000);
      }
    }
  }

  SimMetrics run() {
    schedule_initial_events();
    int64_t last_t = 0;
    while (!events_.empty()) {
      detail::Event ev = events_.top();
      events_.pop();
      integrate_to(ev.t_ms);
      last_t = std::max(last_t, ev.t_ms);
      switch (ev.kind) {
        case detail::kOccStart: start_occupancy(occupancies_[ev.id]); break;
        case detail::kOccEnd: end_occupancy(occupancies_[ev.id]); break;
        case detail::kFnStart: arrive_function(static_cast<size_t>(ev.id)); break;
        case detail::kFnEnd: complete_function(ev.id); break;
      }
    }
    horizon_ms_ = last_t;
    integrate_to(horizon_ms_);
    // Anything still queued at the end of the horizon never ran.
    functions_rejected_ += static_cast<int64_t>(fn_queue_.size());
    fn_queue_.clear();
    return finalize();
  }

 private:
  struct Node {
    ResourceVector total;
    ResourceVector occ_use;
    ResourceVector fn_use;
    int64_t running_fns = 0;
    bool down = false;
    std::set<std::string> warm_images;
    std::optional<policy::JobDescriptor> job;
  };

  void add_node(const SimNodeSpec& spec) {
    if (nodes_.count(spec.node_id)) {
      throw Error("validation", "duplicate node " + spec.node_id);
    }
    nodes_[spec.node_id] = Node{spec.total, {}, {}, 0, false, {}, std::nullopt};
  }

  void schedule_initial_events() {
    // Workload jobs are decomposed into per-node occupancy spans at
    // placement time, so they enter as pseudo events first.
    for (size_t i = 0; i < workload_.batch_jobs.size(); ++i) {
      place_job(workload_.batch_jobs[i]);
    }
    for (int64_t i = 0; i < static_cast<int64_t>(occupancies_.size()); ++i) {
      events_.push({occupancies_[i].start_ms, detail::kOccStart, i});
      events_.push({occupancies_[i].end_ms, detail::kOccEnd, i});
    }
    for (size_t i = 0; i < workload_.function_stream.size(); ++i) {
      events_.push({workload_.function_stream[i].arrival_s * 1000,
                    detail::kFnStart, static_cast<int64_t>(i)});
    }
  }

  // First-fit by node id over nodes whose scheduled job spans do not overlap
  // this one. Placement ignores functions: batch work always wins, and
  // co-located functions are evicted if the job needs the space.
  void place_job(const BatchJob& job) {
    int64_t start_ms = job.arrival_s * 1000;
    int64_t end_ms = (job.arrival_s + job.duration_s) * 1000;
    std::vector<std::string> chosen;
    for (const auto& [id, node] : nodes_) {
      bool overlaps = false;
      auto it = job_spans_.find(id);
      if (it != job_spans_.end()) {
        for (const auto& [s, e] : it->second) {
          if (start_ms < e && s < end_ms) {
            overlaps = true;
            break;
          }
        }
      }
      if (overlaps) continue;
      if (job.cores_per_node <= node.total.cores &&
          job.memory_mb_per_node <= node.total.memory_mb) {
        chosen.push_back(id);
        if (static_cast<int64_t>(chosen.size()) == job.nodes) break;
      }
    }
    if (static_cast<int64_t>(chosen.size()) < job.nodes) {
      warnings_.push_back("job " + job.sig.app_id +
                          " rejected: demands exceed free nodes");
      return;
    }
    for (const auto& id : chosen) {
      job_spans_[id].emplace_back(start_ms, end_ms);
      detail::Occupancy occ;
      occ.node_id = id;
      occ.start_ms = start_ms;
      occ.end_ms = end_ms;
      occ.use = {job.cores_per_node, job.memory_mb_per_node, 0};
      occ.billed_cores = cfg_.scenario == Scenario::exclusive
                             ? nodes_[id].total.cores
                             : job.cores_per_node;
      policy::JobDescriptor desc;
      desc.job_id = job.sig.app_id;
      desc.sig = job.sig;
      desc.nodes_allocated = job.nodes;
      desc.shared_flag = job.shared_flag;
      desc.partition = job.partition;
      desc.resources_per_node = occ.use;
      occ.job = desc;
      occupancies_.push_back(std::move(occ));
    }
  }

  void start_occupancy(const detail::Occupancy& occ) {
    Node& node = nodes_[occ.node_id];
    node.occ_use = rv_add(node.occ_use, occ.use);
    node.down = node.down || occ.down;
    if (occ.job) node.job = occ.job;
    busy_cores_ += occ.use.cores;
    busy_mem_ += occ.use.memory_mb;
    billed_core_ms_entities_ += occ.billed_cores * (occ.end_ms - occ.start_ms);
    // Batch work always wins: evict functions that no longer fit beside it;
    // a down node loses all of them.
    while (occ.down ? node.running_fns > 0
                    : !rv_fits(node.total, rv_add(node.occ_use, node.fn_use))) {
      evict_one_function(occ.node_id);
    }
  }

  void end_occupancy(const detail::Occupancy& occ) {
    Node& node = nodes_[occ.node_id];
    node.occ_use = rv_sub(node.occ_use, occ.use);
    if (occ.down) node.down = false;
    if (occ.job) node.job.reset();
    busy_cores_ -= occ.use.cores;
    busy_mem_ -= occ.use.memory_mb;
    occ_core_ms_ += occ.use.cores * (occ.end_ms - occ.start_ms);
    occ_mem_ms_ += occ.use.memory_mb * (occ.end_ms - occ.start_ms);
    drain_queue(occ.end_ms);
  }

  void arrive_function(size_t idx) {
    const auto& fn = workload_.function_stream[idx];
    int64_t t_ms = fn.arrival_s * 1000;
    if (cfg_.scenario != Scenario::colocated) {
      ++functions_rejected_;
      return;
    }
    if (!try_place_function(idx, t_ms)) {
      if (workload_.queue_functions) {
        fn_queue_.push_back({idx, t_ms});
      } else {
        ++functions_rejected_;
      }
    }
  }

  bool try_place_function(size_t idx, int64_t t_ms) {
    const auto& fn = workload_.function_stream[idx];
    std::string best;
    bool best_warm = false;
    int64_t best_hint = -1;
    for (const auto& [id, node] : nodes_) {
      if (node.down) continue;
      ResourceVector used = rv_add(node.occ_use, node.fn_use);
      auto free = rv_try_sub(node.total, used);
      if (!free) continue;
      ResourceVector allocatable = *free;
      allocatable.cores =
          std::max<int64_t>(0, allocatable.cores - workload_.reserved_serving_cores);
      if (!rv_fits(allocatable, fn.spec.required)) continue;
      policy::NodeView view{node.total, rv_add(node.fn_use, node.occ_use)};
      // Batch usage enters through the view's lease total here; pass the job
      // descriptor with zero per-node resources to avoid double counting.
      auto job = node.job;
      if (job) job->resources_per_node = {};
      static const policy::HistoryStore empty_history;
      const auto& history = cfg_.history ? *cfg_.history : empty_history;
      auto decision = policy::decide_colocation(view, job, fn.spec,
                                                std::nullopt, history,
                                                cfg_.policy);
      if (!decision.allowed) continue;
      bool warm = node.warm_images.count(fn.spec.image_ref) > 0;
      int64_t hint = remaining_idle_hint(id, t_ms);
      bool better = best.empty();
      if (!better) {
        if (warm != best_warm) {
          better = warm;
        } else if (hint != best_hint) {
          better = hint > best_hint;
        }
        // else keep the lower node id (map order)
      }
      if (better) {
        best = id;
        best_warm = warm;
        best_hint = hint;
      }
    }
    if (best.empty()) return false;

    Node& node = nodes_[best];
    node.fn_use = rv_add(node.fn_use, fn.spec.required);
    node.warm_images.insert(fn.spec.image_ref);
    update_fn_concurrency(best, +1, t_ms);
    busy_cores_ += fn.spec.required.cores;
    busy_mem_ += fn.spec.required.memory_mb;

    double slowdown = 1.0;
    if (node.job && cfg_.history) {
      auto sig = workload_.function_stream[idx].sig
                     ? *workload_.function_stream[idx].sig
                     : policy::signature_of(fn.spec);
      if (auto est = cfg_.history->estimate_slowdown(node.job->sig, sig)) {
        slowdown = *est;
      }
    }
    int64_t exec = static_cast<int64_t>(
        static_cast<double>(fn.exec_ms) * slowdown + 0.5);
    exec = std::max<int64_t>(1, exec);

    detail::RunningFn run;
    run.arrival_idx = idx;
    run.node_id = best;
    run.start_ms = t_ms;
    run.end_ms = t_ms + exec;
    run.use = fn.spec.required;
    int64_t run_id = next_run_id_++;
    running_[run_id] = run;
    events_.push({run.end_ms, detail::kFnEnd, run_id});
    return true;
  }

  void complete_function(int64_t run_id) {
    auto it = running_.find(run_id);
    if (it == running_.end()) return;  // evicted earlier
    finish_function(it, it->second.end_ms, /*completed=*/true);
    drain_queue(now_ms_);
  }

  void evict_one_function(const std::string& node_id) {
    // Evict the most recently started function on the node first; it has the
    // least sunk work.
    auto victim = running_.end();
    for (auto it = running_.begin(); it != running_.end(); ++it) {
      if (it->second.node_id != node_id) continue;
      if (victim == running_.end() ||
          it->second.start_ms > victim->second.start_ms) {
        victim = it;
      }
    }
    if (victim == running_.end()) {
      throw Error("internal", "occupancy exceeds node capacity with no "
                              "functions left to evict on " + node_id);
    }
    finish_function(victim, now_ms_, /*completed=*/false);
  }

  void finish_function(std::map<int64_t, detail::RunningFn>::iterator it,
                       int64_t end_ms, bool completed) {
    const auto& run = it->second;
    Node& node = nodes_[run.node_id];
    node.fn_use = rv_sub(node.fn_use, run.use);
    update_fn_concurrency(run.node_id, -1, end_ms);
    busy_cores_ -= run.use.cores;
    busy_mem_ -= run.use.memory_mb;
    fn_core_ms_ += run.use.cores * (end_ms - run.start_ms);
    fn_mem_ms_ += run.use.memory_mb * (end_ms - run.start_ms);
    if (completed) {
      ++functions_completed_;
    } else {
      ++functions_rejected_;
    }
    running_.erase(it);
  }

  void drain_queue(int64_t t_ms) {
    if (!workload_.queue_functions) return;
    size_t scanned = 0;
    while (scanned < fn_queue_.size()) {
      auto [idx, enqueued_ms] = fn_queue_.front();
      if (workload_.queue_timeout_s &&
          t_ms - enqueued_ms > *workload_.queue_timeout_s * 1000) {
        fn_queue_.pop_front();
        ++functions_rejected_;
        continue;
      }
      if (try_place_function(idx, t_ms)) {
        fn_queue_.pop_front();
      } else {
        fn_queue_.push_back(fn_queue_.front());
        fn_queue_.pop_front();
        ++scanned;
      }
    }
  }

  int64_t remaining_idle_hint(const std::string& node_id, int64_t t_ms) const {
    auto it = idle_until_.find(node_id);
    if (it == idle_until_.end()) return -1;
    for (const auto& [from_ms, until_ms] : it->second) {
      if (t_ms >= from_ms && t_ms < until_ms) return until_ms - t_ms;
    }
    return -1;
  }

  void update_fn_concurrency(const std::string& node_id, int delta,
                             int64_t t_ms) {
    Node& node = nodes_[node_id];
    if (node.running_fns > 0) {
      int64_t dt = t_ms - fn_conc_since_[node_id];
      double e = efficiency(node.running_fns);
      throughput_weighted_ += static_cast<double>(node.running_fns) * e *
                              static_cast<double>(dt);
      throughput_time_ += static_cast<double>(dt);
    }
    node.running_fns += delta;
    fn_conc_since_[node_id] = t_ms;
  }

  double efficiency(int64_t n) const {
    if (n <= 1) return 1.0;
    auto it = cfg_.efficiency.find(n);
    return it == cfg_.efficiency.end() ? 1.0 : it->second;
  }

  void integrate_to(int64_t t_ms) {
    int64_t dt = t_ms - now_ms_;
    if (dt < 0) throw Error("internal", "event time went backwards");
    busy_core_ms_ += busy_cores_ * dt;
    busy_mem_ms_ += busy_mem_ * dt;
    now_ms_ = t_ms;
  }

  SimMetrics finalize() {
    // Conservation cross-check: the event-driven integral and the per-entity
    // sums must agree exactly in integer core-ms.
    int64_t entity_core_ms = occ_core_ms_ + fn_core_ms_;
    int64_t entity_mem_ms = occ_mem_ms_ + fn_mem_ms_;
    if (entity_core_ms != busy_core_ms_ || entity_mem_ms != busy_mem_ms_) {
      throw Error("internal",
                  "conservation violated: integral " +
                      std::to_string(busy_core_ms_) + " != entities " +
                      std::to_string(entity_core_ms));
    }
    SimMetrics m;
    int64_t cap_cores = 0, cap_mem = 0;
    for (const auto& [id, node] : nodes_) {
      cap_cores += node.total.cores;
      cap_mem += node.total.memory_mb;
    }
    if (horizon_ms_ > 0 && cap_cores > 0) {
      m.core_utilization = static_cast<double>(busy_core_ms_) /
                           static_cast<double>(cap_cores * horizon_ms_);
    }
    if (horizon_ms_ > 0 && cap_mem > 0) {
      m.memory_utilization = static_cast<double>(busy_mem_ms_) /
                             static_cast<double>(cap_mem * horizon_ms_);
    }
    m.functions_completed = functions_completed_;
    m.functions_rejected = functions_rejected_;
    m.batch_core_hours_billed =
        static_cast<double>(billed_core_ms_entities_) / 3.6e6;
    if (throughput_time_ > 0) {
      m.node_throughput_relative = throughput_weighted_ / throughput_time_;
    }
    return m;
  }

  SimWorkload workload_;
  SimConfig cfg_;
  std::map<std::string, Node> nodes_;
  std::vector<detail::Occupancy> occupancies_;
  std::map<std::string, std::vector<std::pair<int64_t, int64_t>>> job_spans_;
  std::priority_queue<detail::Event, std::vector<detail::Event>,
                      std::greater<>>
      events_;
  std::map<int64_t, detail::RunningFn> running_;
  std::deque<std::pair<size_t, int64_t>> fn_queue_;
  std::map<std::string, std::vector<std::pair<int64_t, int64_t>>> idle_until_;
  std::map<std::string, int64_t> fn_conc_since_;
  std::vector<std::string> warnings_;

  int64_t next_run_id_ = 0;
  int64_t now_ms_ = 0;
  int64_t horizon_ms_ = 0;
  int64_t busy_cores_ = 0;
  int64_t busy_mem_ = 0;
  int64_t busy_core_ms_ = 0;
  int64_t busy_mem_ms_ = 0;
  int64_t occ_core_ms_ = 0;
  int64_t occ_mem_ms_ = 0;
  int64_t fn_core_ms_ = 0;
  int64_t fn_mem_ms_ = 0;
  int64_t billed_core_ms_entities_ = 0;
  int64_t functions_completed_ = 0;
  int64_t functions_rejected_ = 0;
  double throughput_weighted_ = 0;
  double throughput_time_ = 0;

 public:
  const std::vector<std::string>& warnings() const { return warnings_; }
};

inline SimMetrics run_simulation(const SimWorkload& workload,
                                 const SimConfig& config) {
  Simulation sim(workload, config);
  return sim.run();
}

inline SimMetrics run_simulation(const Trace& trace,
                                 const SimWorkload& workload,
                                 const SimConfig& config) {
  Simulation sim(trace, workload, config);
  return sim.run();
}

// Relative throughput of one node executing n equal functions concurrently,
// against the single-function baseline. Runs the functions in waves of at
// most node_cores, stretching each wave by the per-co-runner efficiency.
inline double idle_node_throughput(int64_t n_functions,
                                   int64_t per_function_runtime_ms,
                                   int64_t node_cores,
                                   const std::map<int64_t, double>& efficiency = {}) {
  if (n_functions < 1) throw Error("validation", "need at least one function");
  if (per_function_runtime_ms <= 0 || node_cores < 1) {
    throw Error("validation", "runtime and cores must be positive");
  }
  auto e_of = [&](int64_t n) {
    if (n <= 1) return 1.0;
    auto it = efficiency.find(n);
    return it == efficiency.end() ? 1.0 : it->second;
  };
  double makespan = 0;
  int64_t remaining = n_functions;
  while (remaining > 0) {
    int64_t wave = std::min(remaining, node_cores);
    makespan += static_cast<double>(per_function_runtime_ms) / e_of(wave);
    remaining -= wave;
  }
  return static_cast<double>(n_functions) *
         static_cast<double>(per_function_runtime_ms) / makespan;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline std::string metrics_csv(Scenario scenario, const SimMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%lld,%lld,%.6f\n",
                to_string(scenario).c_str(), m.core_utilization,
                m.memory_utilization,
                static_cast<long long>(m.functions_completed),
                static_cast<long long>(m.functions_rejected),
                m.batch_core_hours_billed);
  return std::string(
             "scenario,core_utilization,memory_utilization,functions_"
             "completed,functions_rejected,batch_core_hours_billed\n") +
         buf;
}

inline std::string metrics_json(Scenario scenario, const SimMetrics& m) {
  nlohmann::json j = m;
  j["scenario"] = to_string(scenario);
  return j.dump(2) + "\n";
}

inline void write_report(Scenario scenario, const SimMetrics& m,
                         const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  auto dir = std::filesystem::path(out_dir);
  {
    std::ofstream csv(dir / "report.csv", std::ios::binary);
    if (!csv) throw Error("io-error", "cannot write report.csv");
    csv << metrics_csv(scenario, m);
  }
  {
    std::ofstream js(dir / "report.json", std::ios::binary);
    if (!js) throw Error("io-error", "cannot write report.json");
    js << metrics_json(scenario, m);
  }
}

}  // namespace rfaas::sim
