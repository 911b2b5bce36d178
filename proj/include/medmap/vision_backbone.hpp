#pragma once

#include <map>
#include <string>
#include <vector>

#include "medmap/nn.hpp"

namespace medmap {

// Channel width shared by both streams' outputs (C_f == C_t) so the fusion
// head can consume them symmetrically.
inline constexpr int kFeatureChannels = 64;
// Joint embedding dimension E shared with the projected text vectors.
inline constexpr int kEmbedDim = 128;
// Both streams downsample by 16x per axis.
inline constexpr int kTotalStride = 16;
inline constexpr int kPatchSize = 4;

// Spatial feature map produced by either stream.
struct FeatureGrid {
    Tensor data;     // [C, D', H', W']
    int stride = 1;  // downsampling factor relative to the input volume
};

// Dense embedding produced by pooling heads / encoders.
struct EmbeddingVector {
    Tensor vector;            // [E]
    bool normalized = false;  // unit L2 norm when set
};

// Grows each axis up to the next multiple with edge replication. Returns the
// input unchanged (same buffer contents) when already aligned.
Tensor pad_to_multiple(const Tensor& volume, int multiple);

// Four blocks of {conv k3 s2 p1, per-channel instance norm, SiLU}; channels
// 1 -> 16 -> 32 -> 64 -> kFeatureChannels. Output spatial dims are
// ceil(input/16) per axis (exact /16 when the input is padded).
class ConvStream {
  public:
    ConvStream() = default;
    ConvStream(const std::string& name, Rng& rng);

    // volume [D,H,W] -> feature grid [C_f, D', H', W']
    Tape::NodeId forward(Tape& t, Tape::NodeId volume);
    // pure convenience wrapper (private tape, no gradients kept)
    FeatureGrid features(const Tensor& volume);

    void collect(std::vector<Parameter*>& ps);
    std::vector<Parameter*> parameters();

    std::vector<Conv3d> convs;
    std::vector<InstanceNorm3d> norms;
};

// Patch embedding (4^3 -> 16) followed by two stages of two shifted-window
// attention blocks (dims 16 then 32, 4 heads, window 2^3 in token space,
// second block of each stage cyclically shifted by half a window), a patch
// merge between stages and a final merge down to kFeatureChannels at the conv
// stream's stride.
class SwinStream {
  public:
    SwinStream() = default;
    SwinStream(const std::string& name, Rng& rng);

    // volume [D,H,W], dims multiples of 16 -> [C_t, D/16, H/16, W/16]
    Tape::NodeId forward(Tape& t, Tape::NodeId volume);

    void collect(std::vector<Parameter*>& ps);
    std::vector<Parameter*> parameters();

    PatchEmbed embed;
    std::vector<SwinBlock> stage1, stage2;
    PatchMerge merge1, merge2;
};

// Spatial mean per channel -> affine map to kEmbedDim -> L2 normalize.
class PoolHead {
  public:
    PoolHead() = default;
    PoolHead(const std::string& name, int channels, int embed_dim, Rng& rng);

    // grid [C, d, h, w] -> unit-norm embedding [E]
    Tape::NodeId forward(Tape& t, Tape::NodeId grid);

    void collect(std::vector<Parameter*>& ps);

    Linear fc;
};

// The per-modality encoder used in contrastive pretraining: conv stream +
// pooling head.
struct VisionExpert {
    ConvStream conv;
    PoolHead pool;

    VisionExpert() = default;
    VisionExpert(const std::string& name, Rng& rng);

    // volume node [D,H,W] -> unit-norm embedding [kEmbedDim]
    Tape::NodeId embed(Tape& t, Tape::NodeId volume);

    void collect(std::vector<Parameter*>& ps);
    std::vector<Parameter*> parameters();
};

// One expert per modality tag; experts share architecture, never parameters.
class ModalityExpertBank {
  public:
    ModalityExpertBank() = default;
    // Experts are seeded per modality (sorted order) from the base seed.
    ModalityExpertBank(const std::vector<std::string>& modalities, std::uint64_t seed);

    bool has(const std::string& modality) const;
    VisionExpert& expert(const std::string& modality);              // throws on unknown tag
    const VisionExpert& expert(const std::string& modality) const;  // throws on unknown tag
    std::vector<std::string> modalities() const;

  private:
    std::map<std::string, VisionExpert> experts_;
};

// Pads the volume, runs the modality's expert, returns normalized f_v.
// Unknown modality tags raise ValidationError; there is no fallback expert.
EmbeddingVector vision_encode(const Tensor& volume, const std::string& modality, ModalityExpertBank& bank);

}  // namespace medmap
