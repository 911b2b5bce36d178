#include "medmap/nn.hpp"

#include <cmath>
#include <functional>
#include <unordered_map>

namespace medmap {

namespace {

// Index maps depend only on geometry, so they are memoized. Single-threaded
// by the trainer-owns-parameters contract.
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

int checked_div(int n, int d, const char* what) {
    if (d <= 0 || n % d != 0)
        throw ValidationError(std::string(what) + ": " + std::to_string(n) + " not divisible by " + std::to_string(d));
    return n / d;
}

}  // namespace

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

Linear::Linear(const std::string& name, int out_dim, int in_dim, Rng& rng, bool zero_init, bool bias)
    : w(name + ".w", Tensor({out_dim, in_dim})), b(name + ".b", Tensor({out_dim})), has_bias(bias) {
    if (!zero_init) {
        real scale = 1.0 / std::sqrt(static_cast<real>(in_dim));
        for (std::int64_t i = 0; i < w.value.size(); ++i) w.value[i] = scale * rng.normal();
    }
}

Tape::NodeId Linear::forward(Tape& t, Tape::NodeId x) {
    return t.linear(x, t.use(w), has_bias ? t.use(b) : -1);
}

void Linear::collect(std::vector<Parameter*>& ps) {
    ps.push_back(&w);
    if (has_bias) ps.push_back(&b);
}

Conv3d::Conv3d(const std::string& name, int cout, int cin, int k, int stride_, int pad_, Rng& rng)
    : w(name + ".w", Tensor({cout, cin, k, k, k})), b(name + ".b", Tensor({cout})), stride(stride_), pad(pad_) {
    real scale = std::sqrt(2.0 / (static_cast<real>(cin) * k * k * k));
    for (std::int64_t i = 0; i < w.value.size(); ++i) w.value[i] = scale * rng.normal();
}

Tape::NodeId Conv3d::forward(Tape& t, Tape::NodeId x) { return t.conv3d(x, t.use(w), t.use(b), stride, pad); }

void Conv3d::collect(std::vector<Parameter*>& ps) {
    ps.push_back(&w);
    ps.push_back(&b);
}

InstanceNorm3d::InstanceNorm3d(const std::string& name, int channels)
    : gamma(name + ".gamma", Tensor::full({channels}, 1.0)), beta(name + ".beta", Tensor({channels})) {}

Tape::NodeId InstanceNorm3d::forward(Tape& t, Tape::NodeId x) {
    return t.instance_norm(x, t.use(gamma), t.use(beta));
}

void InstanceNorm3d::collect(std::vector<Parameter*>& ps) {
    ps.push_back(&gamma);
    ps.push_back(&beta);
}

LayerNorm::LayerNorm(const std::string& name, int dim)
    : gamma(name + ".gamma", Tensor::full({dim}, 1.0)), beta(name + ".beta", Tensor({dim})) {}

Tape::NodeId LayerNorm::forward(Tape& t, Tape::NodeId x) { return t.layer_norm(x, t.use(gamma), t.use(beta)); }

void LayerNorm::collect(std::vector<Parameter*>& ps) {
    ps.push_back(&gamma);
    ps.push_back(&beta);
}

// ---------------------------------------------------------------------------
// token geometry
// ---------------------------------------------------------------------------

Tape::IndexMap window_partition_map(int gd, int gh, int gw, int window, int dim, int shift) {
    int nz = checked_div(gd, window, "window partition d");
    int ny = checked_div(gh, window, "window partition h");
    int nx = checked_div(gw, window, "window partition w");
    return memo(geom_key("wpart", {gd, gh, gw, window, dim, shift}), [=] {
        std::vector<std::int64_t> map(std::size_t(nz) * ny * nx * window * window * window * dim);
        std::size_t o = 0;
        for (int wz = 0; wz < nz; ++wz)
            for (int wy = 0; wy < ny; ++wy)
                for (int wx = 0; wx < nx; ++wx)
                    for (int iz = 0; iz < window; ++iz)
                        for (int iy = 0; iy < window; ++iy)
                            for (int ix = 0; ix < window; ++ix) {
                                int z = (wz * window + iz + shift) % gd;
                                int y = (wy * window + iy + shift) % gh;
                                int x = (wx * window + ix + shift) % gw;
                                std::int64_t tok = (std::int64_t(z) * gh + y) * gw + x;
                                for (int c = 0; c < dim; ++c) map[o++] = tok * dim + c;
                            }
        return map;
    });
}

Tape::IndexMap window_merge_map(int gd, int gh, int gw, int window, int dim, int shift) {
    checked_div(gd, window, "window merge d");
    int ny = checked_div(gh, window, "window merge h");
    int nx = checked_div(gw, window, "window merge w");
    return memo(geom_key("wmerge", {gd, gh, gw, window, dim, shift}), [=] {
        int t = window * window * window;
        std::vector<std::int64_t> map(std::size_t(gd) * gh * gw * dim);
        std::size_t o = 0;
        for (int z = 0; z < gd; ++z)
            for (int y = 0; y < gh; ++y)
                for (int x = 0; x < gw; ++x) {
                    int zz = (z - shift + gd) % gd;
                    int yy = (y - shift + gh) % gh;
                    int xx = (x - shift + gw) % gw;
                    std::int64_t wi = (std::int64_t(zz / window) * ny + yy / window) * nx + xx / window;
                    int ti = ((zz % window) * window + (yy % window)) * window + (xx % window);
                    for (int c = 0; c < dim; ++c) map[o++] = (wi * t + ti) * dim + c;
                }
        return map;
    });
}

Tape::IndexMap tokens_to_grid_map(int gd, int gh, int gw, int c) {
    return memo(geom_key("t2g", {gd, gh, gw, c}), [=] {
        std::int64_t n = std::int64_t(gd) * gh * gw;
        std::vector<std::int64_t> map(static_cast<std::size_t>(n * c));
        std::size_t o = 0;
        for (int ch = 0; ch < c; ++ch)
            for (std::int64_t tok = 0; tok < n; ++tok) map[o++] = tok * c + ch;
        return map;
    });
}

Tape::IndexMap grid_to_tokens_map(int c, int d, int h, int w) {
    return memo(geom_key("g2t", {c, d, h, w}), [=] {
        std::int64_t n = std::int64_t(d) * h * w;
        std::vector<std::int64_t> map(static_cast<std::size_t>(n * c));
        std::size_t o = 0;
        for (std::int64_t tok = 0; tok < n; ++tok)
            for (int ch = 0; ch < c; ++ch) map[o++] = std::int64_t(ch) * n + tok;
        return map;
    });
}

// ---------------------------------------------------------------------------
// window attention
// ---------------------------------------------------------------------------

WindowAttention::WindowAttention(const std::string& name, int dim_, int heads_, int window_, Rng& rng)
    : dim(dim_),
      heads(heads_),
      window(window_),
      qkv(name + ".qkv", 3 * dim_, dim_, rng),
      proj(name + ".proj", dim_, dim_, rng),
      rel_bias(name + ".rel_bias",
               Tensor({heads_, (2 * window_ - 1) * (2 * window_ - 1) * (2 * window_ - 1)})) {
    if (dim_ % heads_ != 0) throw ValidationError("attention dim must divide evenly into heads");
}

Tape::NodeId WindowAttention::forward(Tape& t, Tape::NodeId x, Tape::NodeId* probs_out) {
    const Tensor& xv = t.val(x);
    if (xv.rank() != 3 || xv.dim(2) != dim)
        throw ValidationError("window attention expects [nw, t, dim], got " + shape_str(xv.shape()));
    int nw = xv.dim(0), tk = xv.dim(1);
    int hd = dim / heads;
    int span = 2 * window - 1;
    int R = span * span * span;
    if (tk != window * window * window) throw ValidationError("window token count mismatch");

    Tape::NodeId qkv_out = qkv.forward(t, x);  // [nw, tk, 3*dim]

    auto split_map = [&](int part) {
        return memo(geom_key("attn_split", {nw, tk, dim, heads, part}), [=, this] {
            std::vector<std::int64_t> map(std::size_t(nw) * heads * tk * hd);
            std::size_t o = 0;
            for (int wi = 0; wi < nw; ++wi)
                for (int h = 0; h < heads; ++h)
                    for (int ti = 0; ti < tk; ++ti)
                        for (int j = 0; j < hd; ++j)
                            map[o++] = (std::int64_t(wi) * tk + ti) * 3 * dim + part * dim + h * hd + j;
            return map;
        });
    };
    Shape hshape{nw * heads, tk, hd};
    Tape::NodeId q = t.gather(qkv_out, split_map(0), hshape);
    Tape::NodeId k = t.gather(qkv_out, split_map(1), hshape);
    Tape::NodeId v = t.gather(qkv_out, split_map(2), hshape);

    Tape::NodeId scores = t.scale(t.bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<real>(hd)));

    auto bias_map = memo(geom_key("attn_bias", {nw, tk, heads, window}), [=, this] {
        std::vector<std::int64_t> map(std::size_t(nw) * heads * tk * tk);
        std::size_t o = 0;
        auto pos = [&](int i, int& z, int& y, int& x) {
            z = i / (window * window);
            y = (i / window) % window;
            x = i % window;
        };
        for (int wi = 0; wi < nw; ++wi)
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < tk; ++i)
                    for (int j = 0; j < tk; ++j) {
                        int iz, iy, ix, jz, jy, jx;
                        pos(i, iz, iy, ix);
                        pos(j, jz, jy, jx);
                        int idx = ((iz - jz + window - 1) * span + (iy - jy + window - 1)) * span +
                                  (ix - jx + window - 1);
                        map[o++] = std::int64_t(h) * R + idx;
                    }
        return map;
    });
    Tape::NodeId bias = t.gather(t.use(rel_bias), bias_map, {nw * heads, tk, tk});
    Tape::NodeId probs = t.softmax_rows(t.add(scores, bias));
    if (probs_out) *probs_out = probs;

    Tape::NodeId ctx = t.bmm(probs, v);  // [nw*heads, tk, hd]

    auto merge_map = memo(geom_key("attn_merge", {nw, tk, dim, heads}), [=, this] {
        std::vector<std::int64_t> map(std::size_t(nw) * tk * dim);
        std::size_t o = 0;
        for (int wi = 0; wi < nw; ++wi)
            for (int ti = 0; ti < tk; ++ti)
                for (int h = 0; h < heads; ++h)
                    for (int j = 0; j < hd; ++j)
                        map[o++] = ((std::int64_t(wi) * heads + h) * tk + ti) * hd + j;
        return map;
    });
    Tape::NodeId merged = t.gather(ctx, merge_map, {nw, tk, dim});
    return proj.forward(t, merged);
}

void WindowAttention::collect(std::vector<Parameter*>& ps) {
    qkv.collect(ps);
    proj.collect(ps);
    ps.push_back(&rel_bias);
}

// ---------------------------------------------------------------------------
// swin block / patch ops
// ---------------------------------------------------------------------------

SwinBlock::SwinBlock(const std::string& name, int dim_, int heads_, int window_, bool shifted_, Rng& rng)
    : dim(dim_),
      heads(heads_),
      window(window_),
      shifted(shifted_),
      norm1(name + ".norm1", dim_),
      norm2(name + ".norm2", dim_),
      attn(name + ".attn", dim_, heads_, window_, rng),
      fc1(name + ".fc1", 2 * dim_, dim_, rng),
      fc2(name + ".fc2", dim_, 2 * dim_, rng) {}

Tape::NodeId SwinBlock::forward(Tape& t, Tape::NodeId tokens, int gd, int gh, int gw) {
    const Tensor& xv = t.val(tokens);
    std::int64_t n = std::int64_t(gd) * gh * gw;
    if (xv.rank() != 2 || xv.dim(0) != n || xv.dim(1) != dim)
        throw ValidationError("swin block expects [" + std::to_string(n) + "," + std::to_string(dim) + "], got " +
                              shape_str(xv.shape()));
    int shift = shifted ? window / 2 : 0;
    int nw = static_cast<int>(n / (window * window * window));
    int tk = window * window * window;

    Tape::NodeId h1 = norm1.forward(t, tokens);
    Tape::NodeId part = t.gather(h1, window_partition_map(gd, gh, gw, window, dim, shift), {nw, tk, dim});
    Tape::NodeId a = attn.forward(t, part);
    Tape::NodeId back = t.gather(a, window_merge_map(gd, gh, gw, window, dim, shift),
                                 {static_cast<int>(n), dim});
    Tape::NodeId x1 = t.add(tokens, back);

    Tape::NodeId h2 = norm2.forward(t, x1);
    Tape::NodeId f = fc2.forward(t, t.silu(fc1.forward(t, h2)));
    return t.add(x1, f);
}

void SwinBlock::collect(std::vector<Parameter*>& ps) {
    norm1.collect(ps);
    norm2.collect(ps);
    attn.collect(ps);
    fc1.collect(ps);
    fc2.collect(ps);
}

PatchEmbed::PatchEmbed(const std::string& name, int patch_, int dim_, Rng& rng)
    : patch(patch_), dim(dim_), fc(name + ".fc", dim_, patch_ * patch_ * patch_, rng), norm(name + ".norm", dim_) {}

Tape::NodeId PatchEmbed::forward(Tape& t, Tape::NodeId volume) {
    const Tensor& xv = t.val(volume);
    if (xv.rank() != 3) throw ValidationError("patch embed expects [D,H,W], got " + shape_str(xv.shape()));
    int D = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    int gd = checked_div(D, patch, "patch embed d");
    int gh = checked_div(H, patch, "patch embed h");
    int gw = checked_div(W, patch, "patch embed w");
    int p3 = patch * patch * patch;

    auto map = memo(geom_key("pembed", {D, H, W, patch}), [=, this] {
        std::vector<std::int64_t> m(std::size_t(gd) * gh * gw * p3);
        std::size_t o = 0;
        for (int z = 0; z < gd; ++z)
            for (int y = 0; y < gh; ++y)
                for (int x = 0; x < gw; ++x)
                    for (int pz = 0; pz < patch; ++pz)
                        for (int py = 0; py < patch; ++py)
                            for (int px = 0; px < patch; ++px)
                                m[o++] = (std::int64_t(z * patch + pz) * H + (y * patch + py)) * W +
                                         (x * patch + px);
        return m;
    });
    Tape::NodeId patches = t.gather(volume, map, {gd * gh * gw, p3});
    return norm.forward(t, fc.forward(t, patches));
}

void PatchEmbed::collect(std::vector<Parameter*>& ps) {
    fc.collect(ps);
    norm.collect(ps);
}

PatchMerge::PatchMerge(const std::string& name, int in_dim_, int out_dim_, Rng& rng)
    : in_dim(in_dim_),
      out_dim(out_dim_),
      norm(name + ".norm", 8 * in_dim_),
      fc(name + ".fc", out_dim_, 8 * in_dim_, rng) {}

Tape::NodeId PatchMerge::forward(Tape& t, Tape::NodeId tokens, int gd, int gh, int gw) {
    const Tensor& xv = t.val(tokens);
    if (xv.rank() != 2 || xv.dim(0) != gd * gh * gw || xv.dim(1) != in_dim)
        throw ValidationError("patch merge shape mismatch: " + shape_str(xv.shape()));
    int hd2 = checked_div(gd, 2, "patch merge d");
    int hh2 = checked_div(gh, 2, "patch merge h");
    int hw2 = checked_div(gw, 2, "patch merge w");

    auto map = memo(geom_key("pmerge", {gd, gh, gw, in_dim}), [=, this] {
        std::vector<std::int64_t> m(std::size_t(hd2) * hh2 * hw2 * 8 * in_dim);
        std::size_t o = 0;
        for (int z = 0; z < hd2; ++z)
            for (int y = 0; y < hh2; ++y)
                for (int x = 0; x < hw2; ++x)
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                std::int64_t tok = (std::int64_t(2 * z + dz) * gh + (2 * y + dy)) * gw + (2 * x + dx);
                                for (int c = 0; c < in_dim; ++c) m[o++] = tok * in_dim + c;
                            }
        return m;
    });
    Tape::NodeId cells = t.gather(tokens, map, {hd2 * hh2 * hw2, 8 * in_dim});
    return fc.forward(t, norm.forward(t, cells));
}

void PatchMerge::collect(std::vector<Parameter*>& ps) {
    norm.collect(ps);
    fc.collect(ps);
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<Parameter*> params, real lr, real weight_decay) : lr_(lr), wd_(weight_decay) {
    for (Parameter* p : params) slots_.push_back({p, Tensor(p->value.shape()), Tensor(p->value.shape())});
}

void AdamW::zero_grad() {
    for (auto& s : slots_) s.p->zero_grad();
}

void AdamW::step() {
    ++t_;
    real bc1 = 1.0 - std::pow(kBeta1, t_);
    real bc2 = 1.0 - std::pow(kBeta2, t_);
    for (auto& s : slots_) {
        if (!s.p->trainable) continue;
        real* x = s.p->value.data();
        const real* g = s.p->grad.data();
        real* m = s.m.data();
        real* v = s.v.data();
        for (std::int64_t i = 0, n = s.p->value.size(); i < n; ++i) {
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
            real mhat = m[i] / bc1;
            real vhat = v[i] / bc2;
            x[i] -= lr_ * (mhat / (std::sqrt(vhat) + kEps) + wd_ * x[i]);
        }
    }
}

}  // namespace medmap
