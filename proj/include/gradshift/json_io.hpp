#pragma once

#include <nlohmann/json.hpp>

#include "gradshift/attack.hpp"
#include "gradshift/data.hpp"
#include "gradshift/model.hpp"

namespace gradshift {

// Strict parsing: every from_json below rejects unknown keys so that a typo
// in a run config fails loudly instead of silently using a default.

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json train_options_to_json(const TrainOptions& o);
TrainOptions train_options_from_json(const nlohmann::json& j);

nlohmann::json phantom_spec_to_json(const PhantomSpec& s);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);

nlohmann::json attack_config_to_json(const AttackConfig& c);
AttackConfig attack_config_from_json(const nlohmann::json& j);

nlohmann::json train_report_to_json(const TrainReport& r);

// Throws InvalidArgument when j holds a key outside `allowed`.
void reject_unknown_keys(const nlohmann::json& j, const char* context,
                         std::initializer_list<const char*> allowed);

} // namespace gradshift
