#pragma once

#include "medmap/csa_fusion.hpp"
#include "medmap/text_encoding.hpp"
#include "medmap/volume.hpp"

namespace medmap {

// Class activation map registered to the input volume: non-negative, max 1
// unless identically zero.
struct CamVolume {
    VoxelGrid voxels;
    int class_index = 0;
};

// Gradient-weighted activation reduction: per-channel weights are the spatial
// mean of `grads`, the map is the rectified weighted channel sum. Both inputs
// are [C, d, h, w]; the result is [d, h, w].
Tensor cam_activation(const Tensor& values, const Tensor& grads);

// CAM for one class logit, computed on the conv stream's final feature grid:
// backpropagates the logit to the grid, reduces with cam_activation, upsamples
// trilinearly to the record's volume dims, and max-normalizes. A zero-gradient
// class yields an all-zero map. Leaves no gradient residue in the model.
CamVolume cam_map(CsaModel& model, const VolumeRecord& record, const TextEncoder& text, int class_index);

}  // namespace medmap
