#pragma once

#include <string>
#include <vector>

#include "medmap/volume.hpp"

namespace medmap {

struct ManifestEntry {
    std::string id;
    std::string path;  // relative to the manifest's directory
    std::string split;  // train | val | test
};

struct DatasetManifest {
    std::vector<std::string> class_names;
    std::vector<std::string> modality_vocabulary;
    std::string normal_class_policy = "explicit";
    std::vector<ManifestEntry> records;
    std::string base_dir;  // set on load/synthesis; not serialized

    int n_classes() const { return static_cast<int>(class_names.size()); }
    int n_modalities() const { return static_cast<int>(modality_vocabulary.size()); }
    int modality_index(const std::string& tag) const;  // throws on unknown tag
};

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// Loads records (optionally one split, optionally one modality), attaches
// id/split from the manifest, and validates every invariant: unique ids,
// parseable files, label length K, known modality, voxels finite in [0,1].
std::vector<VolumeRecord> load_records(const DatasetManifest& m, const std::string& split = "",
                                       const std::string& modality = "");

}  // namespace medmap
