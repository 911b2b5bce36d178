#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "medmap/tape.hpp"
#include "medmap/tensor.hpp"

namespace medmap {

struct TokenSequence {
    std::vector<int> ids;  // ids[0] is always the reserved CLS id 0
    bool truncated = false;
};

inline constexpr int kVocabSize = 8192;
inline constexpr int kTextEmbedDim = 128;
inline constexpr int kMaxTokens = 128;
// Fixed build seed for the frozen encoder: reconstructing the encoder always
// yields byte-identical parameters.
inline constexpr std::uint64_t kTextEncoderSeed = 0x7465787430ULL;

// Lowercases, splits on anything non-alphanumeric, hashes each token to an id
// in [1, vocab_size), prepends CLS id 0. Deterministic across platforms.
TokenSequence tokenize(const std::string& report, int max_len = kMaxTokens, int vocab_size = kVocabSize);

// Frozen embedding-bag encoder: mean of token embeddings -> dense -> tanh.
// Parameters are fixed at construction and never updated; checksum-stable.
class TextEncoder {
  public:
    explicit TextEncoder(std::uint64_t build_seed = kTextEncoderSeed, int vocab_size = kVocabSize,
                         int embed_dim = kTextEmbedDim);

    Tensor encode(const TokenSequence& tokens) const;  // -> [embed_dim]
    Tensor encode(const std::string& report) const;    // tokenize + encode

    int embed_dim() const { return embed_dim_; }
    int vocab_size() const { return vocab_size_; }
    // SHA-256 over the serialized parameter bytes; the freezing contract
    // asserts this value never changes across training runs.
    std::string parameter_checksum() const;

    const Tensor& embedding_table() const { return table_; }
    const Tensor& dense_w() const { return w_; }
    const Tensor& dense_b() const { return b_; }

  private:
    int vocab_size_;
    int embed_dim_;
    Tensor table_;  // [vocab, E_t]
    Tensor w_;      // [E_t, E_t]
    Tensor b_;      // [E_t]
};

// Trainable affine map E_t -> E followed by L2 normalization. Initialized to
// the identity when square, so projection starts as plain normalization.
struct TextProjector {
    Parameter w;  // [E, E_t]
    Parameter b;  // [E]

    TextProjector() = default;
    TextProjector(int out_dim, int in_dim, std::uint64_t seed);

    // tape path (training): unit-norm projected vector
    Tape::NodeId project(Tape& t, const Tensor& embedding);
    // pure path (evaluation); throws NumericError on a degenerate projection
    Tensor project(const Tensor& embedding) const;

    std::vector<Parameter*> parameters() { return {&w, &b}; }
};

}  // namespace medmap
