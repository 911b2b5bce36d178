#include "medmap/text_encoding.hpp"

#include <algorithm>
#include <cmath>

#include "medmap/rng.hpp"
#include "medmap/sha256.hpp"

namespace medmap {

namespace {

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

void hash_tensor(Sha256& h, const Tensor& t) {
    static_assert(sizeof(real) == 8);
    h.update(t.data(), static_cast<std::size_t>(t.size()) * sizeof(real));
}

}  // namespace

TokenSequence tokenize(const std::string& report, int max_len, int vocab_size) {
    if (max_len < 1) throw ValidationError("tokenize: max_len must be >= 1");
    if (vocab_size < 2) throw ValidationError("tokenize: vocab_size must be >= 2");
    TokenSequence seq;
    seq.ids.push_back(0);  // CLS
    std::string tok;
    auto flush = [&] {
        if (tok.empty()) return;
        if (static_cast<int>(seq.ids.size()) < max_len) {
            // id 0 stays reserved for CLS
            seq.ids.push_back(1 + static_cast<int>(fnv1a64(tok) % static_cast<std::uint64_t>(vocab_size - 1)));
        } else {
            seq.truncated = true;
        }
        tok.clear();
    };
    for (unsigned char c : report) {
        if (std::isalnum(c)) {
            tok.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
        }
    }
    flush();
    return seq;
}

TextEncoder::TextEncoder(std::uint64_t build_seed, int vocab_size, int embed_dim)
    : vocab_size_(vocab_size),
      embed_dim_(embed_dim),
      table_({vocab_size, embed_dim}),
      w_({embed_dim, embed_dim}),
      b_({embed_dim}) {
    if (vocab_size < 2 || embed_dim < 1) throw ValidationError("TextEncoder: bad dimensions");
    Rng rng(build_seed);
    for (std::int64_t i = 0; i < table_.size(); ++i) table_[i] = rng.normal();
    real scale = 1.0 / std::sqrt(static_cast<real>(embed_dim));
    for (std::int64_t i = 0; i < w_.size(); ++i) w_[i] = scale * rng.normal();
    // b_ stays zero
}

Tensor TextEncoder::encode(const TokenSequence& tokens) const {
    if (tokens.ids.empty()) throw ValidationError("encode: empty token sequence");
    for (int id : tokens.ids)
        if (id < 0 || id >= vocab_size_)
            throw ValidationError("encode: token id " + std::to_string(id) + " outside vocabulary");
    // summing in sorted-id order makes the mean bag exactly order-invariant
    std::vector<int> sorted = tokens.ids;
    std::sort(sorted.begin(), sorted.end());
    Tensor mean({embed_dim_});
    for (int id : sorted) {
        const real* row = table_.data() + std::int64_t(id) * embed_dim_;
        for (int i = 0; i < embed_dim_; ++i) mean[i] += row[i];
    }
    for (int i = 0; i < embed_dim_; ++i) mean[i] /= static_cast<real>(sorted.size());

    Tensor out({embed_dim_});
    for (int o = 0; o < embed_dim_; ++o) {
        const real* wr = w_.data() + std::int64_t(o) * embed_dim_;
        real acc = b_[o];
        for (int i = 0; i < embed_dim_; ++i) acc += wr[i] * mean[i];
        out[o] = std::tanh(acc);
    }
    return out;
}

Tensor TextEncoder::encode(const std::string& report) const { return encode(tokenize(report)); }

std::string TextEncoder::parameter_checksum() const {
    Sha256 h;
    hash_tensor(h, table_);
    hash_tensor(h, w_);
    hash_tensor(h, b_);
    return h.hex_digest();
}

TextProjector::TextProjector(int out_dim, int in_dim, std::uint64_t seed)
    : w("text_projector.w", Tensor({out_dim, in_dim})), b("text_projector.b", Tensor({out_dim})) {
    if (out_dim == in_dim) {
        for (int i = 0; i < out_dim; ++i) w.value[std::int64_t(i) * in_dim + i] = 1.0;
    } else {
        Rng rng(seed);
        real scale = 1.0 / std::sqrt(static_cast<real>(in_dim));
        for (std::int64_t i = 0; i < w.value.size(); ++i) w.value[i] = scale * rng.normal();
    }
}

Tape::NodeId TextProjector::project(Tape& t, const Tensor& embedding) {
    if (embedding.rank() != 1 || embedding.dim(0) != w.value.dim(1))
        throw ValidationError("project: embedding dim " + shape_str(embedding.shape()) + " vs weight " +
                              shape_str(w.value.shape()));
    return t.l2_normalize(t.linear(t.constant(embedding), t.use(w), t.use(b)));
}

Tensor TextProjector::project(const Tensor& embedding) const {
    if (embedding.rank() != 1 || embedding.dim(0) != w.value.dim(1))
        throw ValidationError("project: embedding dim " + shape_str(embedding.shape()) + " vs weight " +
                              shape_str(w.value.shape()));
    int out_dim = w.value.dim(0), in_dim = w.value.dim(1);
    Tensor out({out_dim});
    for (int o = 0; o < out_dim; ++o) {
        const real* wr = w.value.data() + std::int64_t(o) * in_dim;
        real acc = b.value[o];
        for (int i = 0; i < in_dim; ++i) acc += wr[i] * embedding[i];
        out[o] = acc;
    }
    real n = out.l2_norm();
    if (!(n >= 1e-12)) throw NumericError("degenerate text projection (norm=" + std::to_string(n) + ")");
    for (int o = 0; o < out_dim; ++o) out[o] /= n;
    return out;
}

}  // namespace medmap
