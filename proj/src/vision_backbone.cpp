#include "medmap/vision_backbone.hpp"

#include <algorithm>
#include <set>

namespace medmap {

Tensor pad_to_multiple(const Tensor& volume, int multiple) {
    if (volume.rank() != 3) throw ValidationError("pad_to_multiple expects [D,H,W], got " + shape_str(volume.shape()));
    if (multiple < 1) throw ValidationError("pad multiple must be positive");
    int D = volume.dim(0), H = volume.dim(1), W = volume.dim(2);
    auto up = [multiple](int n) { return ((n + multiple - 1) / multiple) * multiple; };
    int Dp = up(D), Hp = up(H), Wp = up(W);
    if (Dp == D && Hp == H && Wp == W) return volume;
    Tensor out({Dp, Hp, Wp});
    const real* src = volume.data();
    real* dst = out.data();
    for (int z = 0; z < Dp; ++z) {
        int sz = std::min(z, D - 1);
        for (int y = 0; y < Hp; ++y) {
            int sy = std::min(y, H - 1);
            for (int x = 0; x < Wp; ++x) {
                int sx = std::min(x, W - 1);
                dst[(std::int64_t(z) * Hp + y) * Wp + x] = src[(std::int64_t(sz) * H + sy) * W + sx];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv stream
// ---------------------------------------------------------------------------

ConvStream::ConvStream(const std::string& name, Rng& rng) {
    const int chans[5] = {1, 16, 32, 64, kFeatureChannels};
    for (int i = 0; i < 4; ++i) {
        std::string block = name + ".block" + std::to_string(i);
        convs.emplace_back(block + ".conv", chans[i + 1], chans[i], 3, 2, 1, rng);
        norms.emplace_back(block + ".norm", chans[i + 1]);
    }
}

Tape::NodeId ConvStream::forward(Tape& t, Tape::NodeId volume) {
    const Tensor& v = t.val(volume);
    if (v.rank() != 3) throw ValidationError("conv stream expects [D,H,W], got " + shape_str(v.shape()));
    for (int a = 0; a < 3; ++a)
        if (v.dim(a) < 2) throw ValidationError("conv stream input too small: " + shape_str(v.shape()));
    Tape::NodeId x = t.reshape(volume, {1, v.dim(0), v.dim(1), v.dim(2)});
    for (std::size_t i = 0; i < convs.size(); ++i) x = t.silu(norms[i].forward(t, convs[i].forward(t, x)));
    return x;
}

FeatureGrid ConvStream::features(const Tensor& volume) {
    Tape t;
    Tape::NodeId out = forward(t, t.constant(volume));
    return FeatureGrid{t.val(out), kTotalStride};
}

void ConvStream::collect(std::vector<Parameter*>& ps) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
        convs[i].collect(ps);
        norms[i].collect(ps);
    }
}

std::vector<Parameter*> ConvStream::parameters() {
    std::vector<Parameter*> ps;
    collect(ps);
    return ps;
}

// ---------------------------------------------------------------------------
// swin stream
// ---------------------------------------------------------------------------

SwinStream::SwinStream(const std::string& name, Rng& rng)
    : embed(name + ".embed", kPatchSize, 16, rng),
      merge1(name + ".merge1", 16, 32, rng),
      merge2(name + ".merge2", 32, kFeatureChannels, rng) {
    stage1.emplace_back(name + ".s1b0", 16, 4, 2, false, rng);
    stage1.emplace_back(name + ".s1b1", 16, 4, 2, true, rng);
    stage2.emplace_back(name + ".s2b0", 32, 4, 2, false, rng);
    stage2.emplace_back(name + ".s2b1", 32, 4, 2, true, rng);
}

Tape::NodeId SwinStream::forward(Tape& t, Tape::NodeId volume) {
    const Tensor& v = t.val(volume);
    if (v.rank() != 3) throw ValidationError("swin stream expects [D,H,W], got " + shape_str(v.shape()));
    for (int a = 0; a < 3; ++a)
        if (v.dim(a) < kTotalStride || v.dim(a) % kTotalStride != 0)
            throw ValidationError("swin stream dims must be positive multiples of " + std::to_string(kTotalStride) +
                                  " after padding, got " + shape_str(v.shape()));
    int gd = v.dim(0) / kPatchSize, gh = v.dim(1) / kPatchSize, gw = v.dim(2) / kPatchSize;

    Tape::NodeId x = embed.forward(t, volume);
    for (auto& b : stage1) x = b.forward(t, x, gd, gh, gw);
    x = merge1.forward(t, x, gd, gh, gw);
    gd /= 2, gh /= 2, gw /= 2;
    for (auto& b : stage2) x = b.forward(t, x, gd, gh, gw);
    x = merge2.forward(t, x, gd, gh, gw);
    gd /= 2, gh /= 2, gw /= 2;

    return t.gather(x, tokens_to_grid_map(gd, gh, gw, kFeatureChannels), {kFeatureChannels, gd, gh, gw});
}

void SwinStream::collect(std::vector<Parameter*>& ps) {
    embed.collect(ps);
    for (auto& b : stage1) b.collect(ps);
    merge1.collect(ps);
    for (auto& b : stage2) b.collect(ps);
    merge2.collect(ps);
}

std::vector<Parameter*> SwinStream::parameters() {
    std::vector<Parameter*> ps;
    collect(ps);
    return ps;
}

// ---------------------------------------------------------------------------
// pooling + experts
// ---------------------------------------------------------------------------

PoolHead::PoolHead(const std::string& name, int channels, int embed_dim, Rng& rng)
    : fc(name + ".fc", embed_dim, channels, rng) {}

Tape::NodeId PoolHead::forward(Tape& t, Tape::NodeId grid) {
    const Tensor& g = t.val(grid);
    if (g.rank() != 4) throw ValidationError("pool head expects [C,d,h,w], got " + shape_str(g.shape()));
    return t.l2_normalize(fc.forward(t, t.mean_keep_first(grid)));
}

void PoolHead::collect(std::vector<Parameter*>& ps) { fc.collect(ps); }

VisionExpert::VisionExpert(const std::string& name, Rng& rng)
    : conv(name + ".conv", rng), pool(name + ".pool", kFeatureChannels, kEmbedDim, rng) {}

Tape::NodeId VisionExpert::embed(Tape& t, Tape::NodeId volume) { return pool.forward(t, conv.forward(t, volume)); }

void VisionExpert::collect(std::vector<Parameter*>& ps) {
    conv.collect(ps);
    pool.collect(ps);
}

std::vector<Parameter*> VisionExpert::parameters() {
    std::vector<Parameter*> ps;
    collect(ps);
    return ps;
}

ModalityExpertBank::ModalityExpertBank(const std::vector<std::string>& modalities, std::uint64_t seed) {
    if (modalities.empty()) throw ValidationError("expert bank needs at least one modality");
    std::set<std::string> unique(modalities.begin(), modalities.end());
    if (unique.size() != modalities.size()) throw ValidationError("duplicate modality tag in expert bank");
    int index = 0;
    for (const std::string& m : unique) {
        Rng rng = Rng::derived(seed, static_cast<std::uint64_t>(index++));
        experts_.emplace(m, VisionExpert("expert." + m, rng));
    }
}

bool ModalityExpertBank::has(const std::string& modality) const { return experts_.count(modality) != 0; }

VisionExpert& ModalityExpertBank::expert(const std::string& modality) {
    auto it = experts_.find(modality);
    if (it == experts_.end()) throw ValidationError("unknown modality \"" + modality + "\": no expert encoder");
    return it->second;
}

const VisionExpert& ModalityExpertBank::expert(const std::string& modality) const {
    auto it = experts_.find(modality);
    if (it == experts_.end()) throw ValidationError("unknown modality \"" + modality + "\": no expert encoder");
    return it->second;
}

std::vector<std::string> ModalityExpertBank::modalities() const {
    std::vector<std::string> out;
    for (const auto& [m, e] : experts_) out.push_back(m);
    return out;
}

EmbeddingVector vision_encode(const Tensor& volume, const std::string& modality, ModalityExpertBank& bank) {
    VisionExpert& ex = bank.expert(modality);
    Tape t;
    Tape::NodeId out = ex.embed(t, t.constant(pad_to_multiple(volume, kTotalStride)));
    return EmbeddingVector{t.val(out), true};
}

}  // namespace medmap
