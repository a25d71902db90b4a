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

#include <atomic>
#include <memory>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "rfaas/manager.hpp"

// REST surface of the resource manager, JSON bodies:
//
//   POST   /v1/nodes                -> 201 {node_id}
//   DELETE /v1/nodes/{id}?immediate=true|false[&deadline_s=N]
//                                   -> 200 {aborted, completed}
//   POST   /v1/leases               -> 201 {lease_id, node_id, endpoint}
//   DELETE /v1/leases/{id}          -> 200 {core_ms, memory_mb_ms, gpu_ms}
//   GET    /v1/nodes                -> 200 [NodeRecord...]
//   POST   /v1/leases/{id}/touch    -> 204
//
// Errors are structured {code, reason}.

namespace rfaas::manager {

inline int http_status_for(const std::string& code) {
  if (code == "malformed") return 400;
  if (code == "unknown-node" || code == "unknown-lease") return 404;
  return 409;
}

class RmService {
 public:
  RmService(ResourceManager& rm, const std::string& listen_addr)
      : rm_(rm) {
    auto hp = net::split_host_port(listen_addr);
    host_ = hp.host.empty() ? "0.0.0.0" : hp.host;

    server_.Post("/v1/nodes", [this](const httplib::Request& req,
                                     httplib::Response& res) {
      handle(res, 201, [&] {
        auto desc = node_descriptor_from_json(nlohmann::json::parse(req.body));
        std::string id = rm_.register_node(desc);
        return nlohmann::json{{"node_id", id}};
      });
    });

    server_.Delete(R"(/v1/nodes/([^/]+))", [this](const httplib::Request& req,
                                                  httplib::Response& res) {
      handle(res, 200, [&] {
        bool immediate = req.get_param_value("immediate") == "true";
        std::optional<int64_t> deadline_s;
        if (req.has_param("deadline_s")) {
          deadline_s = std::stoll(req.get_param_value("deadline_s"));
        }
        auto outcome = rm_.remove_node(req.matches[1], immediate, deadline_s);
        return nlohmann::json{{"aborted", outcome.aborted},
                              {"completed", outcome.completed}};
      });
    });

    server_.Post("/v1/leases", [this](const httplib::Request& req,
                                      httplib::Response& res) {
      handle(res, 201, [&] {
        auto body = nlohmann::json::parse(req.body);
        FunctionSpec spec = body.at("function").get<FunctionSpec>();
        std::string client_id = body.value("client_id", std::string("anon"));
        Lease lease = rm_.acquire_lease(spec, client_id);
        return nlohmann::json{{"lease_id", lease.lease_id},
                              {"node_id", lease.node_id},
                              {"endpoint", lease.endpoint}};
      });
    });

    server_.Delete(R"(/v1/leases/(\d+))", [this](const httplib::Request& req,
                                                 httplib::Response& res) {
      handle(res, 200, [&] {
        auto entry = rm_.release_lease(std::stoull(req.matches[1]));
        return nlohmann::json{{"core_ms", entry.core_ms},
                              {"memory_mb_ms", entry.memory_mb_ms},
                              {"gpu_ms", entry.gpu_ms}};
      });
    });

    server_.Get("/v1/nodes", [this](const httplib::Request&,
                                    httplib::Response& res) {
      handle(res, 200, [&] { return nlohmann::json(rm_.list_nodes()); });
    });

    server_.Post(R"(/v1/leases/(\d+)/touch)", [this](const httplib::Request& req,
                                                     httplib::Response& res) {
      handle(res, 204, [&] {
        rm_.touch_lease(std::stoull(req.matches[1]));
        return nlohmann::json{};
      });
    });

    if (hp.port == 0) {
      port_ = static_cast<uint16_t>(server_.bind_to_any_port(host_.c_str()));
    } else {
      if (!server_.bind_to_port(host_.c_str(), hp.port)) {
        throw Error("listen-failed", listen_addr);
      }
      port_ = hp.port;
    }
    serve_thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    if (rm_.config().idle_lease_timeout_s > 0) {
      sweeper_ = std::thread([this] {
        while (!stop_.load()) {
          std::this_thread::sleep_for(std::chrono::milliseconds(500));
          rm_.expire_idle_leases();
        }
      });
    }
  }

  ~RmService() { stop(); }

  void stop() {
    bool expected = false;
    if (!stop_.compare_exchange_strong(expected, true)) return;
    server_.stop();
    if (serve_thread_.joinable()) serve_thread_.join();
    if (sweeper_.joinable()) sweeper_.join();
  }

  uint16_t port() const { return port_; }
  std::string endpoint() const {
    std::string host = host_ == "0.0.0.0" ? "127.0.0.1" : host_;
    return host + ":" + std::to_string(port_);
  }

 private:
  template <typename Fn>
  void handle(httplib::Response& res, int ok_status, Fn&& fn) {
    try {
      nlohmann::json body = fn();
      res.status = ok_status;
      if (ok_status != 204) res.set_content(body.dump(), "application/json");
    } catch (const Error& e) {
      res.status = http_status_for(e.code());
      res.set_content(
          nlohmann::json{{"code", e.code()}, {"reason", e.what()}}.dump(),
          "application/json");
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(
          nlohmann::json{{"code", "malformed"}, {"reason", e.what()}}.dump(),
          "application/json");
    }
  }

  ResourceManager& rm_;
  httplib::Server server_;
  std::string host_;
  uint16_t port_ = 0;
  std::thread serve_thread_;
  std::thread sweeper_;
  std::atomic<bool> stop_{false};
};

// Client side of the REST API. Endpoints are host:port.
class RmClient {
 public:
  explicit RmClient(const std::string& endpoint)
      : hp_(net::split_host_port(endpoint)), http_(hp_.host, hp_.port) {
    http_.set_connection_timeout(5, 0);
    http_.set_read_timeout(700, 0);  // remove_node blocks until drained
  }

  std::string register_node(const NodeDescriptor& desc) {
    nlohmann::json body{{"node_id", desc.node_id},
                        {"total", desc.total},
                        {"reserved_serving_cores", desc.reserved_serving_cores},
                        {"sharing", to_string(desc.sharing)}};
    if (desc.availability_hint_s) {
      body["availability_hint_s"] = *desc.availability_hint_s;
    }
    if (!desc.endpoint.empty()) body["endpoint"] = desc.endpoint;
    if (desc.job) body["job"] = *desc.job;
    auto resp = post("/v1/nodes", body);
    return resp.at("node_id").get<std::string>();
  }

  DrainOutcome remove_node(const std::string& node_id, bool immediate,
                           std::optional<int64_t> deadline_s = std::nullopt) {
    std::string path = "/v1/nodes/" + node_id +
                       "?immediate=" + (immediate ? "true" : "false");
    if (deadline_s) path += "&deadline_s=" + std::to_string(*deadline_s);
    auto res = http_.Delete(path.c_str());
    auto body = check(res, 200);
    return {body.at("aborted").get<uint64_t>(),
            body.at("completed").get<uint64_t>()};
  }

  Lease acquire_lease(const FunctionSpec& spec, const std::string& client_id) {
    nlohmann::json body{{"function", spec}, {"client_id", client_id}};
    auto resp = post("/v1/leases", body);
    Lease lease;
    lease.lease_id = resp.at("lease_id").get<uint64_t>();
    lease.node_id = resp.at("node_id").get<std::string>();
    lease.endpoint = resp.at("endpoint").get<std::string>();
    lease.function_id = spec.function_id;
    lease.resources = spec.required;
    lease.state = LeaseState::active;
    return lease;
  }

  UsageLedgerEntry release_lease(uint64_t lease_id) {
    auto res = http_.Delete(("/v1/leases/" + std::to_string(lease_id)).c_str());
    auto body = check(res, 200);
    UsageLedgerEntry entry;
    entry.lease_id = lease_id;
    entry.core_ms = body.at("core_ms").get<int64_t>();
    entry.memory_mb_ms = body.at("memory_mb_ms").get<int64_t>();
    entry.gpu_ms = body.at("gpu_ms").get<int64_t>();
    return entry;
  }

  std::vector<NodeRecord> list_nodes() {
    auto res = http_.Get("/v1/nodes");
    auto body = check(res, 200);
    return body.get<std::vector<NodeRecord>>();
  }

  void touch_lease(uint64_t lease_id) {
    auto res = http_.Post(
        ("/v1/leases/" + std::to_string(lease_id) + "/touch").c_str(), "",
        "application/json");
    check(res, 204);
  }

 private:
  nlohmann::json post(const std::string& path, const nlohmann::json& body) {
    auto res = http_.Post(path.c_str(), body.dump(), "application/json");
    return check(res, 201);
  }

  nlohmann::json check(const httplib::Result& res, int expect) {
    if (!res) {
      throw Error("rm-unreachable", "resource manager at " + hp_.host + ":" +
                                        std::to_string(hp_.port));
    }
    if (res->status != expect) {
      try {
        auto body = nlohmann::json::parse(res->body);
        throw Error(body.value("code", std::string("http-error")),
                    body.value("reason", res->body));
      } catch (const nlohmann::json::exception&) {
        throw Error("http-error", "status " + std::to_string(res->status));
      }
    }
    if (expect == 204 || res->body.empty()) return nlohmann::json{};
    return nlohmann::json::parse(res->body);
  }

  net::HostPort hp_;
  httplib::Client http_;
};

}  // namespace rfaas::manager
