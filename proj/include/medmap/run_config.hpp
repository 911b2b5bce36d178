#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "medmap/contrastive.hpp"
#include "medmap/phantom.hpp"
#include "medmap/train_eval.hpp"

namespace medmap {

// Parses a JSON config file; unknown keys are rejected so typos fail loudly.
nlohmann::json load_json_file(const std::string& path);

// Each parser starts from the struct's defaults and overrides the supplied
// keys; the matching to_json emits the fully resolved settings.
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j);
FinetuneConfig finetune_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const PhantomSpec& spec);
nlohmann::json to_json(const PretrainConfig& config);
nlohmann::json to_json(const FinetuneConfig& config);

// Ablation settings: a fine-tune base config plus the seed list.
struct AblateSettings {
    FinetuneConfig base;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
};

AblateSettings ablate_settings_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AblateSettings& settings);

// Writes the resolved configuration (pretty-printed, trailing newline) next
// to a run's outputs so the run can be reproduced from its artifacts.
void write_resolved_config(const std::string& path, const nlohmann::json& resolved);

}  // namespace medmap
