#include "medmap/dataset.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <unordered_set>

namespace medmap {

using nlohmann::json;

int DatasetManifest::modality_index(const std::string& tag) const {
    for (int i = 0; i < n_modalities(); ++i)
        if (modality_vocabulary[static_cast<std::size_t>(i)] == tag) return i;
    throw ValidationError("unknown modality \"" + tag + "\" (vocabulary has " + std::to_string(n_modalities()) +
                          " entries)");
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    json j;
    j["class_names"] = m.class_names;
    j["modality_vocabulary"] = m.modality_vocabulary;
    j["normal_class_policy"] = m.normal_class_policy;
    j["records"] = json::array();
    for (const auto& r : m.records) j["records"].push_back({{"id", r.id}, {"path", r.path}, {"split", r.split}});
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write manifest: " + path);
    f << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw IoError("manifest " + path + " is not valid JSON: " + e.what());
    }
    DatasetManifest m;
    try {
        m.class_names = j.at("class_names").get<std::vector<std::string>>();
        m.modality_vocabulary = j.at("modality_vocabulary").get<std::vector<std::string>>();
        m.normal_class_policy = j.at("normal_class_policy").get<std::string>();
        for (const auto& r : j.at("records"))
            m.records.push_back({r.at("id").get<std::string>(), r.at("path").get<std::string>(),
                                 r.at("split").get<std::string>()});
    } catch (const json::exception& e) {
        throw IoError("manifest " + path + " missing required fields: " + e.what());
    }
    if (m.modality_vocabulary.empty()) throw ValidationError("manifest has an empty modality vocabulary");
    if (m.normal_class_policy != "implicit" && m.normal_class_policy != "explicit")
        throw ValidationError("manifest normal_class_policy must be \"implicit\" or \"explicit\"");
    m.base_dir = std::filesystem::path(path).parent_path().string();
    return m;
}

std::vector<VolumeRecord> load_records(const DatasetManifest& m, const std::string& split,
                                       const std::string& modality) {
    std::unordered_set<std::string> seen;
    for (const auto& e : m.records)
        if (!seen.insert(e.id).second) throw ValidationError("duplicate record id in manifest: " + e.id);

    std::vector<VolumeRecord> out;
    for (const auto& e : m.records) {
        if (!split.empty() && e.split != split) continue;
        auto full = m.base_dir.empty() ? e.path : (std::filesystem::path(m.base_dir) / e.path).string();
        VolumeRecord rec = read_mvol(full);
        rec.id = e.id;
        rec.split = e.split;
        if (!modality.empty() && rec.modality != modality) continue;
        m.modality_index(rec.modality);  // membership check
        if (static_cast<int>(rec.labels.size()) != m.n_classes())
            throw ValidationError("record " + rec.id + " has " + std::to_string(rec.labels.size()) +
                                  " labels, manifest declares " + std::to_string(m.n_classes()) + " classes");
        bool any = false;
        for (auto l : rec.labels) any = any || (l != 0);
        if (!any && m.normal_class_policy != "implicit")
            throw ValidationError("record " + rec.id + " has all-zero labels but policy is explicit");
        for (float v : rec.voxels.v)
            if (!(v >= 0.0f && v <= 1.0f))
                throw ValidationError("record " + rec.id + " has voxels outside [0,1]; normalize first");
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace medmap
