#pragma once

#include <string>
#include <vector>

#include "medmap/rng.hpp"
#include "medmap/tape.hpp"

namespace medmap {

// ---------------------------------------------------------------------------
// layers (each owns Parameters; forward() binds them to the caller's tape)
// ---------------------------------------------------------------------------

struct Linear {
    Parameter w;  // [out, in]
    Parameter b;  // [out]
    bool has_bias = true;

    Linear() = default;
    // scaled-normal weights (std 1/sqrt(in)), zero bias; zero_init zeroes the
    // weights too (used for gates that must start inert)
    Linear(const std::string& name, int out_dim, int in_dim, Rng& rng, bool zero_init = false, bool bias = true);

    Tape::NodeId forward(Tape& t, Tape::NodeId x);
    void collect(std::vector<Parameter*>& ps);
};

struct Conv3d {
    Parameter w;  // [cout, cin, k, k, k]
    Parameter b;  // [cout]
    int stride = 1, pad = 0;

    Conv3d() = default;
    // He weights (std sqrt(2/fan_in)), zero bias
    Conv3d(const std::string& name, int cout, int cin, int k, int stride, int pad, Rng& rng);

    Tape::NodeId forward(Tape& t, Tape::NodeId x);
    void collect(std::vector<Parameter*>& ps);
};

struct InstanceNorm3d {
    Parameter gamma, beta;
    InstanceNorm3d() = default;
    InstanceNorm3d(const std::string& name, int channels);
    Tape::NodeId forward(Tape& t, Tape::NodeId x);
    void collect(std::vector<Parameter*>& ps);
};

struct LayerNorm {
    Parameter gamma, beta;
    LayerNorm() = default;
    LayerNorm(const std::string& name, int dim);
    Tape::NodeId forward(Tape& t, Tape::NodeId x);
    void collect(std::vector<Parameter*>& ps);
};

// ---------------------------------------------------------------------------
// token geometry: tokens live as [n, dim] rows over a (gd, gh, gw) grid with
// token index (z*gh + y)*gw + x. Layout moves are all index-map gathers.
// ---------------------------------------------------------------------------

// tokens [n, dim] -> windows [nw, t, dim], rolling coordinates by +shift
// before partitioning (cyclic shift)
Tape::IndexMap window_partition_map(int gd, int gh, int gw, int window, int dim, int shift);
// inverse of the above
Tape::IndexMap window_merge_map(int gd, int gh, int gw, int window, int dim, int shift);
// tokens [n, c] -> channel-major grid [c, gd, gh, gw]
Tape::IndexMap tokens_to_grid_map(int gd, int gh, int gw, int c);
// channel-major grid [c, d, h, w] -> tokens [d*h*w, c]
Tape::IndexMap grid_to_tokens_map(int c, int d, int h, int w);

// Multi-head self-attention within windows, with a learned relative position
// bias per head. Input/output [nw, t, dim].
struct WindowAttention {
    int dim = 0, heads = 0, window = 0;
    Linear qkv;        // dim -> 3*dim
    Linear proj;       // dim -> dim
    Parameter rel_bias;  // [heads, (2*window-1)^3], zero-init

    WindowAttention() = default;
    WindowAttention(const std::string& name, int dim, int heads, int window, Rng& rng);

    // probs_out (optional) receives the [nw*heads, t, t] attention probabilities
    Tape::NodeId forward(Tape& t, Tape::NodeId x, Tape::NodeId* probs_out = nullptr);
    void collect(std::vector<Parameter*>& ps);
};

// Pre-norm transformer block on a token grid: windowed attention (regular or
// cyclic-shifted) + feed-forward, both residual.
struct SwinBlock {
    int dim = 0, heads = 0, window = 0;
    bool shifted = false;
    LayerNorm norm1, norm2;
    WindowAttention attn;
    Linear fc1, fc2;  // FFN with hidden 2*dim, SiLU between

    SwinBlock() = default;
    SwinBlock(const std::string& name, int dim, int heads, int window, bool shifted, Rng& rng);

    Tape::NodeId forward(Tape& t, Tape::NodeId tokens, int gd, int gh, int gw);
    void collect(std::vector<Parameter*>& ps);
};

// volume [D,H,W] -> tokens [n, dim] on grid D/patch per axis
struct PatchEmbed {
    int patch = 0, dim = 0;
    Linear fc;
    LayerNorm norm;

    PatchEmbed() = default;
    PatchEmbed(const std::string& name, int patch, int dim, Rng& rng);

    Tape::NodeId forward(Tape& t, Tape::NodeId volume);
    void collect(std::vector<Parameter*>& ps);
};

// tokens on (gd,gh,gw) -> tokens on halved grid, concat of each 2^3 cell ->
// LayerNorm -> Linear(8*in_dim -> out_dim)
struct PatchMerge {
    int in_dim = 0, out_dim = 0;
    LayerNorm norm;
    Linear fc;

    PatchMerge() = default;
    PatchMerge(const std::string& name, int in_dim, int out_dim, Rng& rng);

    Tape::NodeId forward(Tape& t, Tape::NodeId tokens, int gd, int gh, int gw);
    void collect(std::vector<Parameter*>& ps);
};

// ---------------------------------------------------------------------------
// optimizer: Adam with decoupled weight decay
// ---------------------------------------------------------------------------

class AdamW {
  public:
    AdamW(std::vector<Parameter*> params, real lr, real weight_decay = 0.01);

    void zero_grad();
    void step();

    real lr() const { return lr_; }
    void set_lr(real lr) { lr_ = lr; }

  private:
    struct Slot {
        Parameter* p;
        Tensor m, v;
    };
    std::vector<Slot> slots_;
    real lr_, wd_;
    int t_ = 0;
    static constexpr real kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
};

}  // namespace medmap
