#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "medmap/tensor.hpp"

namespace medmap {

// A trainable (or frozen) parameter. Gradients accumulate across tape
// backward passes until zero_grad().
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

    void zero_grad() { grad.fill(0); }
};

// Reverse-mode autodiff over a single forward pass. One tape is built per
// batch; backward() accumulates into bound Parameters' grads.
//
// Index-map ops (gather) cover every layout move: window partition, cyclic
// shift, head split/merge, patch extraction, transposes of convenience.
class Tape {
  public:
    using NodeId = int;
    using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- leaves ----
    NodeId constant(Tensor v);            // gradient never flows in
    NodeId input(Tensor v);               // gradient tracked (gradcheck, CAM)
    NodeId use(Parameter& p);             // bound once per tape; grads land in p.grad

    // ---- accessors ----
    const Tensor& val(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].val; }
    const Tensor& grad_of(NodeId id) const;
    real scalar(NodeId id) const;
    bool needs_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // Runs reverse sweep from a scalar root. May be called once per tape.
    void backward(NodeId root);

    // ---- elementwise / arithmetic ----
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, real c);
    NodeId add_scalar(NodeId a, real c);
    NodeId silu(NodeId a);
    NodeId tanh_(NodeId a);
    NodeId sigmoid_(NodeId a);
    // y[c, ...] = x[c, ...] * s[c]
    NodeId mul_channels(NodeId x, NodeId s);

    // ---- linear algebra ----
    // op(A)·op(B) for 2-D tensors, optional transposes.
    NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
    // x[N,Din] (or [Din]) -> x·Wᵀ+b with W[Dout,Din], b[Dout] (b = -1: none)
    NodeId linear(NodeId x, NodeId w, NodeId b);
    // batched: A[B,M,K]·B[B,K,N] with optional transposes of the trailing dims
    NodeId bmm(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
    // x[Cin,D,H,W] ⊛ w[Cout,Cin,k,k,k] + b[Cout], zero padding
    NodeId conv3d(NodeId x, NodeId w, NodeId b, int stride, int pad);

    // ---- normalization ----
    // x[C, spatial...]: per-channel normalization over spatial positions
    NodeId instance_norm(NodeId x, NodeId gamma, NodeId beta, real eps = 1e-5);
    // x[..., D]: per-row normalization over the last axis
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, real eps = 1e-5);
    // 1-D x -> x/‖x‖; throws NumericError below min_norm
    NodeId l2_normalize(NodeId x, real min_norm = 1e-12);

    // ---- softmax family (rows = all axes but the last) ----
    NodeId softmax_rows(NodeId x);
    NodeId log_softmax_rows(NodeId x);

    // ---- reductions ----
    NodeId mean_all(NodeId x);                    // -> scalar [1]
    NodeId mean_axis0(NodeId x);                  // x[T,D] -> [D]
    NodeId mean_keep_first(NodeId x);             // x[C, rest...] -> [C]
    NodeId weighted_sum(NodeId x, Tensor w);      // Σ wᵢxᵢ -> scalar, w constant

    // ---- structure ----
    NodeId reshape(NodeId x, Shape s);
    NodeId gather(NodeId x, IndexMap idx, Shape out_shape);
    NodeId stack(const std::vector<NodeId>& rows);  // N×[D] -> [N,D]
    NodeId row(NodeId x, int r);                    // x[N,D] -> [D]
    NodeId stop_grad(NodeId x);

    // ---- task-specific ----
    // mean over rows i of -logp[i,i] for logp[N,N]
    NodeId nll_diag(NodeId logp);
    // probabilities p[K] vs labels y[K]; p clamped to [eps, 1-eps]
    NodeId bce_mean(NodeId p, Tensor labels, real eps = 1e-7);
    // mean over rows of table[V,E] selected by ids -> [E]
    NodeId embedding_mean(NodeId table, std::vector<int> ids);

  private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool needs_grad = false;
        std::function<void(Tape&)> back;
    };

    NodeId make(Tensor val, bool needs_grad, std::function<void(Tape&)> back);
    Tensor& grad_buf(NodeId id);
    void accum(NodeId id, const Tensor& g);
    void accum_at(NodeId id, std::int64_t flat, real g);
    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }

    std::vector<Node> nodes_;
    std::vector<std::pair<Parameter*, NodeId>> bindings_;
    std::unordered_map<const Parameter*, NodeId> bound_;
    bool ran_backward_ = false;
};

}  // namespace medmap
