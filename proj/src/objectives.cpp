#include "medmap/objectives.hpp"

#include <cmath>

#include "medmap/mathutil.hpp"

namespace medmap {

namespace {

constexpr real kBceEps = 1e-7;

void check_schedule(const ScheduleState& s) {
    if (s.t_max < 1) throw ValidationError("schedule t_max must be >= 1");
    if (s.t < 0 || s.t > s.t_max)
        throw ValidationError("schedule epoch " + std::to_string(s.t) + " outside [0, " + std::to_string(s.t_max) +
                              "]");
}

// log-softmax of x/temperature, shared kernel so identical inputs give
// bitwise-identical outputs on both sides of the divergence
std::vector<real> log_dist(const Tensor& x, real temperature) {
    std::vector<real> v(static_cast<std::size_t>(x.size()));
    // multiply by the reciprocal, matching the tape's scale op bit for bit
    real inv = 1.0 / temperature;
    for (std::int64_t i = 0; i < x.size(); ++i) v[static_cast<std::size_t>(i)] = x[i] * inv;
    log_softmax_row(v.data(), static_cast<int>(v.size()));
    return v;
}

void check_kl_inputs(const Tensor& text, const Tensor& fusion, real temperature) {
    if (temperature <= 0.0) throw ValidationError("temperature must be positive");
    if (text.rank() != 1 || fusion.rank() != 1 || text.size() != fusion.size())
        throw ValidationError("KL alignment expects equal-length vectors, got " + shape_str(text.shape()) + " vs " +
                              shape_str(fusion.shape()));
    if (text.size() < 1) throw ValidationError("KL alignment needs at least one dimension");
    if (!text.all_finite() || !fusion.all_finite()) throw NumericError("KL alignment inputs must be finite");
}

}  // namespace

real lambda_c(const ScheduleState& state) {
    check_schedule(state);
    return state.base * std::exp(-state.decay * (1.0 - static_cast<real>(state.t) / state.t_max));
}

real lambda_s(const ScheduleState& state) {
    check_schedule(state);
    return state.base * std::exp(-state.decay * (static_cast<real>(state.t) / state.t_max));
}

real total_loss(real cls, real kl, const ScheduleState& state) {
    if (!std::isfinite(cls) || !std::isfinite(kl)) throw NumericError("total_loss inputs must be finite");
    return lambda_c(state) * cls + lambda_s(state) * kl;
}

real bce_loss(const Tensor& probabilities, const Tensor& labels) {
    if (probabilities.rank() != 1 || !probabilities.same_shape(labels))
        throw ValidationError("BCE expects matching probability/label vectors, got " +
                              shape_str(probabilities.shape()) + " vs " + shape_str(labels.shape()));
    if (probabilities.size() < 1) throw ValidationError("BCE needs at least one class");
    if (!probabilities.all_finite()) throw NumericError("BCE probabilities must be finite");
    real total = 0.0;
    for (std::int64_t i = 0; i < probabilities.size(); ++i) {
        real y = labels[i];
        if (y != 0.0 && y != 1.0) throw ValidationError("BCE labels must be exactly 0 or 1");
        real p = std::min(1.0 - kBceEps, std::max(kBceEps, probabilities[i]));
        total += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    }
    return total / probabilities.size();
}

real kl_alignment(const Tensor& text_embedding, const Tensor& fusion_embedding, real temperature,
                  KlDirection direction) {
    check_kl_inputs(text_embedding, fusion_embedding, temperature);
    std::vector<real> lp = log_dist(text_embedding, temperature);
    std::vector<real> lq = log_dist(fusion_embedding, temperature);
    // forward: sum p (lp - lq); reverse: sum q (lq - lp)
    const std::vector<real>& ltarget = direction == KlDirection::forward ? lp : lq;
    const std::vector<real>& lother = direction == KlDirection::forward ? lq : lp;
    real total = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) total += std::exp(ltarget[i]) * (ltarget[i] - lother[i]);
    return total;
}

Tape::NodeId kl_alignment_node(Tape& t, const Tensor& text_embedding, Tape::NodeId fusion_embedding,
                               real temperature, KlDirection direction) {
    check_kl_inputs(text_embedding, t.val(fusion_embedding), temperature);
    int n = static_cast<int>(text_embedding.size());
    std::vector<real> lp = log_dist(text_embedding, temperature);

    Tape::NodeId scaled = t.scale(fusion_embedding, 1.0 / temperature);
    Tape::NodeId lq = t.log_softmax_rows(scaled);
    if (direction == KlDirection::forward) {
        // sum_i p_i (lp_i - lq_i) = [sum_i -p_i lq_i] + const
        Tensor neg_p({n});
        real entropy_term = 0.0;
        for (int i = 0; i < n; ++i) {
            real p = std::exp(lp[static_cast<std::size_t>(i)]);
            neg_p[i] = -p;
            entropy_term += p * lp[static_cast<std::size_t>(i)];
        }
        return t.add_scalar(t.weighted_sum(lq, neg_p), entropy_term);
    }
    // reverse: sum_i q_i (lq_i - lp_i), with gradients through q and lq
    Tape::NodeId q = t.softmax_rows(scaled);
    Tensor lp_tensor({n});
    for (int i = 0; i < n; ++i) lp_tensor[i] = lp[static_cast<std::size_t>(i)];
    Tape::NodeId diff = t.sub(lq, t.constant(lp_tensor));
    return t.scale(t.mean_all(t.mul(q, diff)), static_cast<real>(n));
}

}  // namespace medmap
