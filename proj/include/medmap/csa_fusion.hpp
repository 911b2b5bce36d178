#pragma once

#include <map>
#include <string>
#include <vector>

#include "medmap/text_encoding.hpp"
#include "medmap/vision_backbone.hpp"

namespace medmap {

// Channel-wise gate driven by the projected report embedding. The affine map
// is zero-initialized and wrapped in 1 + tanh, so the gate starts as an exact
// identity and fine-tuning begins from a pure-vision model.
struct TextGate {
    Linear fc;  // embed_dim -> channels, zero-init

    TextGate() = default;
    TextGate(const std::string& name, int channels, int embed_dim, Rng& rng);

    // [C] gate vector: 1 + tanh(W e + b)
    Tape::NodeId gate(Tape& t, Tape::NodeId text_embedding);
    // f_vt[c,d,h,w] = f_trans[c,d,h,w] * gate[c]
    Tape::NodeId modulate(Tape& t, Tape::NodeId f_trans, Tape::NodeId text_embedding);

    void collect(std::vector<Parameter*>& ps);
};

// Multi-head cross-attention: queries from one token set, keys/values from
// the other. No positional encodings, so token order is immaterial.
struct CrossAttention {
    int dim = 0, heads = 0;
    Linear q;     // dim -> dim
    Linear kv;    // dim -> 2*dim
    Linear proj;  // dim -> dim

    CrossAttention() = default;
    CrossAttention(const std::string& name, int dim, int heads, Rng& rng);

    // queries [n, dim], context [m, dim] -> [n, dim]; probs_out gets [heads, n, m]
    Tape::NodeId forward(Tape& t, Tape::NodeId queries, Tape::NodeId context, Tape::NodeId* probs_out = nullptr);
    void collect(std::vector<Parameter*>& ps);
};

// One bidirectional block: each stream attends to the other's block input
// simultaneously, then a per-stream feed-forward; all paths residual, pre-norm.
struct CctBlock {
    int dim = 0, heads = 0;
    LayerNorm norm_a1, norm_b1, norm_a2, norm_b2;
    CrossAttention attn_ab;  // a queries b
    CrossAttention attn_ba;  // b queries a
    Linear ffn_a1, ffn_a2, ffn_b1, ffn_b2;

    CctBlock() = default;
    CctBlock(const std::string& name, int dim, int heads, Rng& rng);

    struct Out {
        Tape::NodeId a, b;
        Tape::NodeId probs_ab, probs_ba;  // cross-attention maps, row-stochastic
    };
    Out forward(Tape& t, Tape::NodeId a, Tape::NodeId b);
    void collect(std::vector<Parameter*>& ps);
};

// Two bidirectional blocks over the flattened grids, mean pooling of both
// streams, concatenation, projection to the joint dimension, L2 normalize.
class CctFusion {
  public:
    CctFusion() = default;
    CctFusion(const std::string& name, int dim, int heads, int embed_dim, Rng& rng);

    // co-shaped grids [C,d,h,w] -> unit-norm f_fusion [embed_dim];
    // probs_out (optional) receives every cross-attention map in block order
    Tape::NodeId fuse(Tape& t, Tape::NodeId grid_a, Tape::NodeId grid_b,
                      std::vector<Tape::NodeId>* probs_out = nullptr);

    void collect(std::vector<Parameter*>& ps);

    int dim = 0;
    std::vector<CctBlock> blocks;
    Linear project;  // 2*dim -> embed_dim
};

struct AblationFlags {
    bool use_pretrained = true;  // init conv banks from the pretrained experts
    bool use_cct = true;         // transformer stream + bidirectional fusion
    bool use_csa = true;         // text modulation + KL alignment (requires use_cct)
};

struct CsaConfig {
    int n_classes = 0;
    std::vector<std::string> modalities;
    AblationFlags flags;
    std::uint64_t seed = 0;
};

// Tape-level handles to every intermediate needed for losses and CAM.
struct CsaNodes {
    Tape::NodeId f_v = -1;      // conv grid [C,d,h,w]
    Tape::NodeId f_trans = -1;  // transformer grid (absent without use_cct)
    Tape::NodeId f_vt = -1;     // text-modulated grid
    Tape::NodeId f_fusion = -1; // [E], unit norm
    Tape::NodeId logits = -1;   // [K]
    Tape::NodeId probabilities = -1;
    Tensor text_projected;      // detached KL target (empty without use_csa)
};

// Pure snapshot of the same intermediates.
struct CSAIntermediates {
    FeatureGrid f_v, f_trans, f_vt;
    EmbeddingVector f_fusion;
    Tensor logits;
    Tensor probabilities;
};

// The fine-tuning model: per-modality conv streams (optionally initialized
// from pretrained experts), a shared transformer stream, text projection +
// gating, CCT fusion, and the classification head. Ablation flags carve the
// baseline/+MAVLP/+CCT/+CSA variants out of the same structure.
class CsaModel {
  public:
    CsaModel(const CsaConfig& config);

    // copies pretrained expert parameters into the matching conv/pool banks
    void init_from_bank(ModalityExpertBank& bank);

    // text_embedding: raw frozen-encoder output [E_t]; ignored without use_csa
    CsaNodes forward(Tape& t, const Tensor& volume, const std::string& modality, const Tensor& text_embedding);

    // pure forward for evaluation and CAM-free inspection
    CSAIntermediates run(const Tensor& volume, const std::string& modality, const Tensor& text_embedding);

    // the parameters that train under the current flags
    std::vector<Parameter*> parameters();

    const CsaConfig& config() const { return config_; }

    std::map<std::string, ConvStream> convs;
    std::map<std::string, PoolHead> pools;
    SwinStream swin;
    TextProjector projector;
    TextGate gate;
    CctFusion cct;
    Linear classifier;

  private:
    CsaConfig config_;
};

}  // namespace medmap
