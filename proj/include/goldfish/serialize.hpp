#pragma once

#include <json.hpp>

#include "goldfish/mask.hpp"
#include "goldfish/nanolm.hpp"

namespace goldfish {

void to_json(nlohmann::json& j, const MaskConfig& c);
void from_json(const nlohmann::json& j, MaskConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace goldfish
