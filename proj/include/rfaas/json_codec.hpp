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

#include <json.hpp>

#include "rfaas/core.hpp"

namespace rfaas {

inline void to_json(nlohmann::json& j, const ResourceVector& rv) {
  j = {{"cores", rv.cores}, {"memory_mb", rv.memory_mb}, {"gpus", rv.gpus}};
}

inline void from_json(const nlohmann::json& j, ResourceVector& rv) {
  rv.cores = j.at("cores").get<int64_t>();
  rv.memory_mb = j.at("memory_mb").get<int64_t>();
  rv.gpus = j.value("gpus", int64_t{0});
  if (!rv.valid()) throw Error("malformed", "negative resource component");
}

inline void to_json(nlohmann::json& j, const FunctionSpec& s) {
  j = {{"function_id", s.function_id},
       {"image_ref", s.image_ref},
       {"required", s.required},
       {"max_duration_ms", s.max_duration_ms},
       {"kind", to_string(s.kind)}};
}

inline void from_json(const nlohmann::json& j, FunctionSpec& s) {
  j.at("function_id").get_to(s.function_id);
  s.image_ref = j.value("image_ref", s.function_id);
  j.at("required").get_to(s.required);
  s.max_duration_ms = j.value("max_duration_ms", int64_t{300000});
  s.kind = function_kind_from_string(j.value("kind", std::string("compute")));
}

}  // namespace rfaas
