#include "medmap/run_config.hpp"

#include <fstream>
#include <set>

namespace medmap {

using nlohmann::json;

namespace {

void require_object(const json& j, const char* what) {
    if (!j.is_object()) throw ValidationError(std::string(what) + ": config must be a JSON object");
}

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key)) throw ValidationError(std::string(what) + ": unknown config key \"" + key + "\"");
    }
}

template <typename T>
void read(const json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace

json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ValidationError("config parse error in " + path + ": " + e.what());
    }
    return j;
}

PhantomSpec phantom_spec_from_json(const json& j) {
    require_object(j, "synth");
    reject_unknown(j,
                   {"grid_size", "n_records", "n_classes", "modalities", "lesion_intensity_by_modality",
                    "noise_std", "seed"},
                   "synth");
    PhantomSpec spec = standard_benchmark();
    read(j, "grid_size", spec.grid_size);
    read(j, "n_records", spec.n_records);
    read(j, "n_classes", spec.n_classes);
    read(j, "modalities", spec.modalities);
    read(j, "noise_std", spec.noise_std);
    read(j, "seed", spec.seed);
    if (j.contains("lesion_intensity_by_modality")) {
        spec.lesion_intensity_by_modality.clear();
        for (const auto& [tag, pair] : j.at("lesion_intensity_by_modality").items()) {
            if (!pair.is_array() || pair.size() != 2)
                throw ValidationError("synth: lesion_intensity_by_modality entries must be [mean, std]");
            spec.lesion_intensity_by_modality[tag] = {pair[0].get<double>(), pair[1].get<double>()};
        }
    }
    return spec;
}

PretrainConfig pretrain_config_from_json(const json& j) {
    require_object(j, "pretrain");
    reject_unknown(j, {"epochs", "learning_rate", "batch_size", "temperature", "weight_decay", "seed"}, "pretrain");
    PretrainConfig c;
    read(j, "epochs", c.epochs);
    read(j, "learning_rate", c.learning_rate);
    read(j, "batch_size", c.batch_size);
    read(j, "temperature", c.temperature);
    read(j, "weight_decay", c.weight_decay);
    read(j, "seed", c.seed);
    return c;
}

FinetuneConfig finetune_config_from_json(const json& j) {
    require_object(j, "finetune");
    reject_unknown(j,
                   {"epochs", "learning_rate", "batch_size", "weight_decay", "kl_temperature", "seed", "eval_every",
                    "kl_direction", "use_pretrained", "use_cct", "use_csa"},
                   "finetune");
    FinetuneConfig c;
    read(j, "epochs", c.epochs);
    read(j, "learning_rate", c.learning_rate);
    read(j, "batch_size", c.batch_size);
    read(j, "weight_decay", c.weight_decay);
    read(j, "kl_temperature", c.kl_temperature);
    read(j, "seed", c.seed);
    read(j, "eval_every", c.eval_every);
    if (j.contains("kl_direction")) c.kl_direction = kl_direction_from_name(j.at("kl_direction").get<std::string>());
    read(j, "use_pretrained", c.flags.use_pretrained);
    read(j, "use_cct", c.flags.use_cct);
    read(j, "use_csa", c.flags.use_csa);
    return c;
}

json to_json(const PhantomSpec& spec) {
    json intensities = json::object();
    for (const auto& [tag, ms] : spec.lesion_intensity_by_modality) intensities[tag] = {ms.first, ms.second};
    return {{"grid_size", spec.grid_size},
            {"n_records", spec.n_records},
            {"n_classes", spec.n_classes},
            {"modalities", spec.modalities},
            {"lesion_intensity_by_modality", intensities},
            {"noise_std", spec.noise_std},
            {"seed", spec.seed}};
}

json to_json(const PretrainConfig& config) {
    return {{"epochs", config.epochs},
            {"learning_rate", config.learning_rate},
            {"batch_size", config.batch_size},
            {"temperature", config.temperature},
            {"weight_decay", config.weight_decay},
            {"seed", config.seed}};
}

json to_json(const FinetuneConfig& config) {
    return {{"epochs", config.epochs},
            {"learning_rate", config.learning_rate},
            {"batch_size", config.batch_size},
            {"weight_decay", config.weight_decay},
            {"kl_temperature", config.kl_temperature},
            {"seed", config.seed},
            {"eval_every", config.eval_every},
            {"kl_direction", kl_direction_name(config.kl_direction)},
            {"use_pretrained", config.flags.use_pretrained},
            {"use_cct", config.flags.use_cct},
            {"use_csa", config.flags.use_csa}};
}

AblateSettings ablate_settings_from_json(const json& j) {
    require_object(j, "ablate");
    json base = j;
    AblateSettings settings;
    if (base.contains("seeds")) {
        settings.seeds = base.at("seeds").get<std::vector<std::uint64_t>>();
        base.erase("seeds");
    }
    settings.base = finetune_config_from_json(base);
    if (settings.seeds.empty()) throw ValidationError("ablate: seeds must be non-empty");
    return settings;
}

json to_json(const AblateSettings& settings) {
    json j = to_json(settings.base);
    j["seeds"] = settings.seeds;
    return j;
}

void write_resolved_config(const std::string& path, const json& resolved) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open resolved config for writing: " + path);
    f << resolved.dump(2) << "\n";
    if (!f) throw IoError("failed writing resolved config: " + path);
}

}  // namespace medmap
