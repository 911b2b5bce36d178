#pragma once

#include "medmap/tape.hpp"
#include "medmap/tensor.hpp"

namespace medmap {

// Epoch-indexed coefficients for the ramped fine-tuning objective:
//   lambda_c = base * exp(-decay * (1 - t/t_max))   (ramps up)
//   lambda_s = base * exp(-decay * (t/t_max))       (ramps down)
struct ScheduleState {
    int t = 0;
    int t_max = 1;
    real base = 0.1;
    real decay = 5.0;
};

real lambda_c(const ScheduleState& state);
real lambda_s(const ScheduleState& state);

// lambda_c * cls + lambda_s * kl
real total_loss(real cls, real kl, const ScheduleState& state);

// Mean over classes of -[y log p + (1-y) log(1-p)] with p clamped to
// [1e-7, 1 - 1e-7]. Labels must be exactly 0 or 1.
real bce_loss(const Tensor& probabilities, const Tensor& labels);

// Which side of the divergence is the frozen target distribution.
enum class KlDirection {
    forward,  // KL(text || fusion): fusion is pulled toward the text distribution
    reverse,  // KL(fusion || text)
};

// Both vectors become distributions via softmax at the given temperature; the
// text side is a constant target, gradients reach only the fusion side.
real kl_alignment(const Tensor& text_embedding, const Tensor& fusion_embedding, real temperature,
                  KlDirection direction = KlDirection::forward);

// Differentiable path: the target embedding enters as plain data, so the
// frozen-target contract holds by construction.
Tape::NodeId kl_alignment_node(Tape& t, const Tensor& text_embedding, Tape::NodeId fusion_embedding,
                               real temperature, KlDirection direction = KlDirection::forward);

}  // namespace medmap
