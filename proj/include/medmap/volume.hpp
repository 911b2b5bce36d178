#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "medmap/tensor.hpp"

namespace medmap {

// Voxel payloads stay float32 end to end (the on-disk representation) so a
// write/read round-trip is bit-exact. Conversion to double happens only when
// a grid enters the model.
struct VoxelGrid {
    int d = 0, h = 0, w = 0;  // [D,H,W], W fastest
    std::vector<float> v;

    VoxelGrid() = default;
    VoxelGrid(int d_, int h_, int w_) : d(d_), h(h_), w(w_), v(std::size_t(d_) * h_ * w_, 0.0f) {}

    std::int64_t size() const { return std::int64_t(d) * h * w; }
    float& at(int z, int y, int x) { return v[(std::int64_t(z) * h + y) * w + x]; }
    float at(int z, int y, int x) const { return v[(std::int64_t(z) * h + y) * w + x]; }
    bool all_finite() const;
};

// One volume-report pair. id and split live in the dataset manifest, not in
// the MVOL file; read_mvol fills id from the file stem and leaves split empty.
struct VolumeRecord {
    std::string id;
    std::string modality;
    VoxelGrid voxels;
    std::string report;
    std::vector<std::uint8_t> labels;  // multi-hot
    std::string split;
};

// MVOL container format, little-endian:
//   magic "MVOL" | version u32=1 | D,H,W u32 | modality u16-len + bytes |
//   label count u16 + one u8 per label | report u32-len + bytes |
//   D*H*W float32 voxels, D slowest / W fastest.
void write_mvol(const VolumeRecord& record, const std::string& path);
VolumeRecord read_mvol(const std::string& path);

// (v - min)/(max - min); a constant grid maps to all zeros.
VoxelGrid normalize_volume(const VoxelGrid& g);

// Trilinear resample with corner-aligned sampling. Target dims must be >= 2.
VoxelGrid resize_volume(const VoxelGrid& g, int td, int th, int tw);

// [D,H,W] double tensor for the model side.
Tensor grid_to_tensor(const VoxelGrid& g);
VoxelGrid tensor_to_grid(const Tensor& t);

}  // namespace medmap
