#include "medmap/csa_fusion.hpp"

#include <cmath>
#include <functional>
#include <set>
#include <unordered_map>

#include "medmap/common.hpp"

namespace medmap {

namespace {

Tape::IndexMap memo(const std::string& key, const std::function<std::vector<std::int64_t>()>& build) {
    static std::unordered_map<std::string, Tape::IndexMap> cache;
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    auto map = std::make_shared<const std::vector<std::int64_t>>(build());
    cache.emplace(key, map);
    return map;
}

std::string geom_key(const char* tag, std::initializer_list<int> vals) {
    std::string k = tag;
    for (int v : vals) {
        k.push_back(':');
        k += std::to_string(v);
    }
    return k;
}

// [n, dim] -> [heads, n, hd]
Tape::IndexMap head_split_map(int n, int dim, int heads) {
    int hd = dim / heads;
    return memo(geom_key("xsplit", {n, dim, heads}), [=] {
        std::vector<std::int64_t> map(std::size_t(heads) * n * hd);
        std::size_t o = 0;
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < hd; ++j) map[o++] = std::int64_t(i) * dim + h * hd + j;
        return map;
    });
}

// [m, 2*dim] -> [heads, m, hd], part 0 = keys, 1 = values
Tape::IndexMap kv_split_map(int m, int dim, int heads, int part) {
    int hd = dim / heads;
    return memo(geom_key("xkv", {m, dim, heads, part}), [=] {
        std::vector<std::int64_t> map(std::size_t(heads) * m * hd);
        std::size_t o = 0;
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < hd; ++j) map[o++] = std::int64_t(i) * 2 * dim + part * dim + h * hd + j;
        return map;
    });
}

// [heads, n, hd] -> [n, dim]
Tape::IndexMap head_merge_map(int n, int dim, int heads) {
    int hd = dim / heads;
    return memo(geom_key("xmerge", {n, dim, heads}), [=] {
        std::vector<std::int64_t> map(std::size_t(n) * dim);
        std::size_t o = 0;
        for (int i = 0; i < n; ++i)
            for (int h = 0; h < heads; ++h)
                for (int j = 0; j < hd; ++j) map[o++] = (std::int64_t(h) * n + i) * hd + j;
        return map;
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// TextGate
// ---------------------------------------------------------------------------

TextGate::TextGate(const std::string& name, int channels, int embed_dim, Rng& rng)
    : fc(name + ".fc", channels, embed_dim, rng, /*zero_init=*/true) {}

Tape::NodeId TextGate::gate(Tape& t, Tape::NodeId text_embedding) {
    return t.add_scalar(t.tanh_(fc.forward(t, text_embedding)), 1.0);
}

Tape::NodeId TextGate::modulate(Tape& t, Tape::NodeId f_trans, Tape::NodeId text_embedding) {
    return t.mul_channels(f_trans, gate(t, text_embedding));
}

void TextGate::collect(std::vector<Parameter*>& ps) { fc.collect(ps); }

// ---------------------------------------------------------------------------
// CrossAttention
// ---------------------------------------------------------------------------

CrossAttention::CrossAttention(const std::string& name, int dim_, int heads_, Rng& rng)
    : dim(dim_),
      heads(heads_),
      q(name + ".q", dim_, dim_, rng),
      kv(name + ".kv", 2 * dim_, dim_, rng),
      proj(name + ".proj", dim_, dim_, rng) {
    if (dim_ < 1 || heads_ < 1 || dim_ % heads_ != 0)
        throw ValidationError("cross attention: dim " + std::to_string(dim_) + " not divisible by heads " +
                              std::to_string(heads_));
}

Tape::NodeId CrossAttention::forward(Tape& t, Tape::NodeId queries, Tape::NodeId context, Tape::NodeId* probs_out) {
    const Tensor& qv = t.val(queries);
    const Tensor& cv = t.val(context);
    if (qv.rank() != 2 || cv.rank() != 2 || qv.dim(1) != dim || cv.dim(1) != dim)
        throw ValidationError("cross attention: expects [n," + std::to_string(dim) + "] queries and context");
    int n = qv.dim(0), m = cv.dim(0), hd = dim / heads;

    Tape::NodeId qp = q.forward(t, queries);    // [n, dim]
    Tape::NodeId kvp = kv.forward(t, context);  // [m, 2*dim]
    Tape::NodeId qh = t.gather(qp, head_split_map(n, dim, heads), {heads, n, hd});
    Tape::NodeId kh = t.gather(kvp, kv_split_map(m, dim, heads, 0), {heads, m, hd});
    Tape::NodeId vh = t.gather(kvp, kv_split_map(m, dim, heads, 1), {heads, m, hd});

    Tape::NodeId scores = t.scale(t.bmm(qh, kh, false, true), 1.0 / std::sqrt(real(hd)));
    Tape::NodeId probs = t.softmax_rows(scores);  // [heads, n, m]
    if (probs_out) *probs_out = probs;
    Tape::NodeId ctx = t.bmm(probs, vh);  // [heads, n, hd]
    Tape::NodeId merged = t.gather(ctx, head_merge_map(n, dim, heads), {n, dim});
    return proj.forward(t, merged);
}

void CrossAttention::collect(std::vector<Parameter*>& ps) {
    q.collect(ps);
    kv.collect(ps);
    proj.collect(ps);
}

// ---------------------------------------------------------------------------
// CctBlock
// ---------------------------------------------------------------------------

CctBlock::CctBlock(const std::string& name, int dim_, int heads_, Rng& rng)
    : dim(dim_),
      heads(heads_),
      norm_a1(name + ".norm_a1", dim_),
      norm_b1(name + ".norm_b1", dim_),
      norm_a2(name + ".norm_a2", dim_),
      norm_b2(name + ".norm_b2", dim_),
      attn_ab(name + ".attn_ab", dim_, heads_, rng),
      attn_ba(name + ".attn_ba", dim_, heads_, rng),
      ffn_a1(name + ".ffn_a1", 2 * dim_, dim_, rng),
      ffn_a2(name + ".ffn_a2", dim_, 2 * dim_, rng),
      ffn_b1(name + ".ffn_b1", 2 * dim_, dim_, rng),
      ffn_b2(name + ".ffn_b2", dim_, 2 * dim_, rng) {}

CctBlock::Out CctBlock::forward(Tape& t, Tape::NodeId a, Tape::NodeId b) {
    // both directions read the block inputs, so the exchange is simultaneous
    Tape::NodeId an = norm_a1.forward(t, a);
    Tape::NodeId bn = norm_b1.forward(t, b);
    Out out;
    Tape::NodeId a1 = t.add(a, attn_ab.forward(t, an, bn, &out.probs_ab));
    Tape::NodeId b1 = t.add(b, attn_ba.forward(t, bn, an, &out.probs_ba));
    out.a = t.add(a1, ffn_a2.forward(t, t.silu(ffn_a1.forward(t, norm_a2.forward(t, a1)))));
    out.b = t.add(b1, ffn_b2.forward(t, t.silu(ffn_b1.forward(t, norm_b2.forward(t, b1)))));
    return out;
}

void CctBlock::collect(std::vector<Parameter*>& ps) {
    norm_a1.collect(ps);
    norm_b1.collect(ps);
    norm_a2.collect(ps);
    norm_b2.collect(ps);
    attn_ab.collect(ps);
    attn_ba.collect(ps);
    ffn_a1.collect(ps);
    ffn_a2.collect(ps);
    ffn_b1.collect(ps);
    ffn_b2.collect(ps);
}

// ---------------------------------------------------------------------------
// CctFusion
// ---------------------------------------------------------------------------

CctFusion::CctFusion(const std::string& name, int dim_, int heads, int embed_dim, Rng& rng) : dim(dim_) {
    blocks.emplace_back(name + ".block0", dim_, heads, rng);
    blocks.emplace_back(name + ".block1", dim_, heads, rng);
    project = Linear(name + ".project", embed_dim, 2 * dim_, rng);
}

Tape::NodeId CctFusion::fuse(Tape& t, Tape::NodeId grid_a, Tape::NodeId grid_b,
                             std::vector<Tape::NodeId>* probs_out) {
    const Tensor& av = t.val(grid_a);
    const Tensor& bv = t.val(grid_b);
    if (av.rank() != 4 || bv.rank() != 4 || av.shape() != bv.shape() || av.dim(0) != dim)
        throw ValidationError("fuse: expects co-shaped [" + std::to_string(dim) + ",d,h,w] grids, got " +
                              shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    int d = av.dim(1), h = av.dim(2), w = av.dim(3);
    std::int64_t n = std::int64_t(d) * h * w;

    auto g2t = grid_to_tokens_map(dim, d, h, w);
    Tape::NodeId a = t.gather(grid_a, g2t, {int(n), dim});
    Tape::NodeId b = t.gather(grid_b, g2t, {int(n), dim});
    for (auto& block : blocks) {
        CctBlock::Out out = block.forward(t, a, b);
        if (probs_out) {
            probs_out->push_back(out.probs_ab);
            probs_out->push_back(out.probs_ba);
        }
        a = out.a;
        b = out.b;
    }
    Tape::NodeId pooled = t.stack({t.mean_axis0(a), t.mean_axis0(b)});  // [2, dim]
    Tape::NodeId flat = t.reshape(pooled, {2 * dim});
    return t.l2_normalize(project.forward(t, flat));
}

void CctFusion::collect(std::vector<Parameter*>& ps) {
    for (auto& b : blocks) b.collect(ps);
    project.collect(ps);
}

// ---------------------------------------------------------------------------
// CsaModel
// ---------------------------------------------------------------------------

CsaModel::CsaModel(const CsaConfig& config) : config_(config) {
    if (config.n_classes < 1) throw ValidationError("model: n_classes must be >= 1");
    if (config.modalities.empty()) throw ValidationError("model: needs at least one modality");
    if (config.flags.use_csa && !config.flags.use_cct)
        throw ValidationError("model: text modulation requires the transformer stream (use_csa implies use_cct)");
    std::set<std::string> seen;
    for (const auto& m : config.modalities) {
        if (m.empty()) throw ValidationError("model: empty modality tag");
        if (!seen.insert(m).second) throw ValidationError("model: duplicate modality \"" + m + "\"");
    }
    int idx = 0;
    for (const auto& m : seen) {
        Rng rng = Rng::derived(config.seed, 0xC0DE0000ULL + std::uint64_t(idx++));
        convs.emplace(m, ConvStream("model.conv." + m, rng));
        pools.emplace(m, PoolHead("model.pool." + m, kFeatureChannels, kEmbedDim, rng));
    }
    Rng rng_swin = Rng::derived(config.seed, 0x5319);
    swin = SwinStream("model.swin", rng_swin);
    projector = TextProjector(kEmbedDim, kTextEmbedDim, Rng::derived(config.seed, 0x9201).next_u64());
    Rng rng_gate = Rng::derived(config.seed, 0x6a7e);
    gate = TextGate("model.gate", kFeatureChannels, kEmbedDim, rng_gate);
    Rng rng_cct = Rng::derived(config.seed, 0xcc7);
    cct = CctFusion("model.cct", kFeatureChannels, 4, kEmbedDim, rng_cct);
    Rng rng_head = Rng::derived(config.seed, 0x4ead);
    classifier = Linear("model.classifier", config.n_classes, kEmbedDim, rng_head);
}

namespace {

void copy_params(std::vector<Parameter*> src, std::vector<Parameter*> dst) {
    if (src.size() != dst.size()) throw ValidationError("pretrained init: parameter list size mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i]->value.shape() != dst[i]->value.shape())
            throw ValidationError("pretrained init: shape mismatch for " + dst[i]->name);
        dst[i]->value = src[i]->value;
    }
}

}  // namespace

void CsaModel::init_from_bank(ModalityExpertBank& bank) {
    for (auto& [m, conv] : convs) {
        VisionExpert& e = bank.expert(m);  // throws if the bank lacks the modality
        copy_params(e.conv.parameters(), conv.parameters());
        std::vector<Parameter*> src, dst;
        e.pool.collect(src);
        pools.at(m).collect(dst);
        copy_params(src, dst);
    }
}

CsaNodes CsaModel::forward(Tape& t, const Tensor& volume, const std::string& modality, const Tensor& text_embedding) {
    auto it = convs.find(modality);
    if (it == convs.end()) throw ValidationError("model: unknown modality \"" + modality + "\"");
    if (config_.flags.use_csa) {
        if (text_embedding.rank() != 1 || text_embedding.dim(0) != kTextEmbedDim)
            throw ValidationError("model: text embedding must be [" + std::to_string(kTextEmbedDim) + "]");
    }

    CsaNodes out;
    Tape::NodeId vol = t.constant(pad_to_multiple(volume, kTotalStride));
    out.f_v = it->second.forward(t, vol);
    if (config_.flags.use_cct) {
        out.f_trans = swin.forward(t, vol);
        if (config_.flags.use_csa) {
            Tape::NodeId text = projector.project(t, text_embedding);
            out.text_projected = t.val(text);
            out.f_vt = gate.modulate(t, out.f_trans, text);
        } else {
            out.f_vt = out.f_trans;
        }
        out.f_fusion = cct.fuse(t, out.f_v, out.f_vt);
    } else {
        out.f_fusion = pools.at(modality).forward(t, out.f_v);
    }
    out.logits = classifier.forward(t, out.f_fusion);
    out.probabilities = t.sigmoid_(out.logits);
    return out;
}

CSAIntermediates CsaModel::run(const Tensor& volume, const std::string& modality, const Tensor& text_embedding) {
    Tape t;
    CsaNodes n = forward(t, volume, modality, text_embedding);
    CSAIntermediates out;
    out.f_v = {t.val(n.f_v), kTotalStride};
    if (n.f_trans >= 0) out.f_trans = {t.val(n.f_trans), kTotalStride};
    if (n.f_vt >= 0) out.f_vt = {t.val(n.f_vt), kTotalStride};
    out.f_fusion = {t.val(n.f_fusion), true};
    out.logits = t.val(n.logits);
    out.probabilities = t.val(n.probabilities);
    return out;
}

std::vector<Parameter*> CsaModel::parameters() {
    std::vector<Parameter*> ps;
    for (auto& [m, c] : convs) c.collect(ps);
    if (config_.flags.use_cct) {
        swin.collect(ps);
        cct.collect(ps);
    } else {
        for (auto& [m, p] : pools) p.collect(ps);
    }
    if (config_.flags.use_csa) {
        for (auto* p : projector.parameters()) ps.push_back(p);
        gate.collect(ps);
    }
    classifier.collect(ps);
    return ps;
}

}  // namespace medmap
