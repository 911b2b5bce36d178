#include "medmap/cam.hpp"

#include <algorithm>

#include "medmap/vision_backbone.hpp"

namespace medmap {

Tensor cam_activation(const Tensor& values, const Tensor& grads) {
    if (values.rank() != 4 || !values.same_shape(grads))
        throw ValidationError("cam_activation: values and grads must be co-shaped [C,d,h,w]");
    int c = values.dim(0);
    std::int64_t cells = values.size() / c;
    Tensor out({values.dim(1), values.dim(2), values.dim(3)});
    for (int ch = 0; ch < c; ++ch) {
        const real* g = grads.data() + ch * cells;
        const real* v = values.data() + ch * cells;
        real w = 0.0;
        for (std::int64_t i = 0; i < cells; ++i) w += g[i];
        w /= real(cells);
        for (std::int64_t i = 0; i < cells; ++i) out[i] += w * v[i];
    }
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::max(real(0), out[i]);
    return out;
}

CamVolume cam_map(CsaModel& model, const VolumeRecord& record, const TextEncoder& text, int class_index) {
    int k = model.config().n_classes;
    if (class_index < 0 || class_index >= k)
        throw ValidationError("cam_map: class index " + std::to_string(class_index) + " out of range for " +
                              std::to_string(k) + " classes");

    Tape t;
    CsaNodes nodes = model.forward(t, grid_to_tensor(record.voxels), record.modality, text.encode(record.report));
    Tensor pick({k});
    pick[class_index] = 1.0;
    t.backward(t.weighted_sum(nodes.logits, pick));
    Tensor map = cam_activation(t.val(nodes.f_v), t.grad_of(nodes.f_v));
    for (Parameter* p : model.parameters()) p->zero_grad();

    // The grid lives on the padded frame; upsample there, then crop away the
    // replicated border so the map registers onto the original voxels.
    const VoxelGrid& in = record.voxels;
    int pd = ((in.d + kTotalStride - 1) / kTotalStride) * kTotalStride;
    int ph = ((in.h + kTotalStride - 1) / kTotalStride) * kTotalStride;
    int pw = ((in.w + kTotalStride - 1) / kTotalStride) * kTotalStride;
    VoxelGrid padded = resize_volume(tensor_to_grid(map), pd, ph, pw);

    CamVolume cam;
    cam.class_index = class_index;
    cam.voxels = VoxelGrid(in.d, in.h, in.w);
    float peak = 0.0f;
    for (int z = 0; z < in.d; ++z)
        for (int y = 0; y < in.h; ++y)
            for (int x = 0; x < in.w; ++x) {
                float v = padded.at(z, y, x);
                cam.voxels.at(z, y, x) = v;
                peak = std::max(peak, v);
            }
    if (peak > 0.0f)
        for (auto& v : cam.voxels.v) v /= peak;
    return cam;
}

}  // namespace medmap
