#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "medmap/tape.hpp"
#include "medmap/tensor.hpp"

namespace medmap {

// One named tensor blob inside a checkpoint component.
struct CheckpointParam {
    std::string name;
    Tensor value;
};

// A group of parameters that train (or freeze) together, e.g. one modality
// expert, the text encoder, the fusion head.
struct CheckpointComponent {
    std::string name;
    bool frozen = false;
    std::vector<CheckpointParam> params;
};

// Container with a JSON index plus raw little-endian float64 blobs, each blob
// individually SHA-256 checksummed. Frozen components must stay byte-identical
// across a training run.
struct ModelCheckpoint {
    nlohmann::json config = nlohmann::json::object();          // resolved run configuration
    nlohmann::json metric_history = nlohmann::json::array();   // per-epoch records

    std::vector<CheckpointComponent> components;

    CheckpointComponent& add_component(const std::string& name, bool frozen);
    const CheckpointComponent* find(const std::string& name) const;
    CheckpointComponent* find(const std::string& name);
};

// Snapshot live parameters into a component (deep copies).
void snapshot_params(CheckpointComponent& component, const std::vector<Parameter*>& params);
// Restore values into live parameters, matched strictly by name and shape.
void restore_params(const CheckpointComponent& component, const std::vector<Parameter*>& params);

// SHA-256 over the component's concatenated parameter bytes (name-tagged), the
// quantity the freezing contract compares across runs.
std::string component_checksum(const CheckpointComponent& component);

// Binary container I/O ("MMCK" magic, version, JSON index, blob section).
// Loading verifies every blob checksum and raises IoError on any mismatch.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

}  // namespace medmap
