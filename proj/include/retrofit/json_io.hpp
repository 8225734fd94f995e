// SPDX-License-Identifier: Apache-2.0
//
// JSON mappings for configuration types. Readers reject unknown keys.

#pragma once

#include <json.hpp>

#include "retrofit/model.hpp"

namespace retrofit {

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace retrofit
