#include "medmap/tape.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>

#include "medmap/mathutil.hpp"

namespace medmap {

namespace {

using MatRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

MapC map2(const Tensor& t, int rows, int cols) { return MapC(t.data(), rows, cols); }
MapM map2(Tensor& t, int rows, int cols) { return MapM(t.data(), rows, cols); }

void check_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw ValidationError(std::string(what) + " expects a rank-2 tensor, got " + shape_str(t.shape()));
}

}  // namespace

Tape::NodeId Tape::make(Tensor val, bool needs, std::function<void(Tape&)> back) {
    Node n;
    n.val = std::move(val);
    n.needs_grad = needs;
    if (needs) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Tape::grad_buf(NodeId id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() && n.val.size() > 0) n.grad = Tensor(n.val.shape());
    return n.grad;
}

void Tape::accum(NodeId id, const Tensor& g) {
    Tensor& buf = grad_buf(id);
    real* b = buf.data();
    const real* s = g.data();
    for (std::int64_t i = 0, n = buf.size(); i < n; ++i) b[i] += s[i];
}

void Tape::accum_at(NodeId id, std::int64_t flat, real g) { grad_buf(id)[flat] += g; }

const Tensor& Tape::grad_of(NodeId id) const {
    const Node& n = node(id);
    if (n.grad.empty()) throw ValidationError("gradient not computed for node (no backward path)");
    return n.grad;
}

real Tape::scalar(NodeId id) const {
    const Tensor& v = val(id);
    if (v.size() != 1) throw ValidationError("scalar() on tensor of shape " + shape_str(v.shape()));
    return v[0];
}

Tape::NodeId Tape::constant(Tensor v) { return make(std::move(v), false, nullptr); }

Tape::NodeId Tape::input(Tensor v) { return make(std::move(v), true, nullptr); }

Tape::NodeId Tape::use(Parameter& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    NodeId id = make(p.value, true, nullptr);
    bound_.emplace(&p, id);
    bindings_.emplace_back(&p, id);
    return id;
}

void Tape::backward(NodeId root) {
    if (ran_backward_) throw ValidationError("backward() called twice on one tape");
    if (val(root).size() != 1) throw ValidationError("backward root must be scalar");
    ran_backward_ = true;
    grad_buf(root)[0] = 1.0;
    for (NodeId i = root; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.needs_grad && n.back && !n.grad.empty()) n.back(*this);
    }
    for (auto& [p, id] : bindings_) {
        const Tensor& g = nodes_[static_cast<std::size_t>(id)].grad;
        if (g.empty()) continue;
        real* dst = p->grad.data();
        const real* src = g.data();
        for (std::int64_t k = 0, m = g.size(); k < m; ++k) dst[k] += src[k];
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    if (!val(a).same_shape(val(b)))
        throw ValidationError("add: shape mismatch " + shape_str(val(a).shape()) + " vs " + shape_str(val(b).shape()));
    Tensor v = val(a);
    const real* pb = val(b).data();
    for (std::int64_t i = 0, n = v.size(); i < n; ++i) v[i] += pb[i];
    bool ng = needs_grad(a) || needs_grad(b);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, a, b](Tape& t) {
            const Tensor& g = t.node(out).grad;
            if (t.needs_grad(a)) t.accum(a, g);
            if (t.needs_grad(b)) t.accum(b, g);
        };
    return out;
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
    if (!val(a).same_shape(val(b))) throw ValidationError("sub: shape mismatch");
    Tensor v = val(a);
    const real* pb = val(b).data();
    for (std::int64_t i = 0, n = v.size(); i < n; ++i) v[i] -= pb[i];
    bool ng = needs_grad(a) || needs_grad(b);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, a, b](Tape& t) {
            const Tensor& g = t.node(out).grad;
            if (t.needs_grad(a)) t.accum(a, g);
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_buf(b);
                for (std::int64_t i = 0, n = gb.size(); i < n; ++i) gb[i] -= g[i];
            }
        };
    return out;
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
    if (!val(a).same_shape(val(b))) throw ValidationError("mul: shape mismatch");
    Tensor v = val(a);
    const real* pb = val(b).data();
    for (std::int64_t i = 0, n = v.size(); i < n; ++i) v[i] *= pb[i];
    bool ng = needs_grad(a) || needs_grad(b);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, a, b](Tape& t) {
            const Tensor& g = t.node(out).grad;
            if (t.needs_grad(a)) {
                Tensor& ga = t.grad_buf(a);
                const real* vb = t.val(b).data();
                for (std::int64_t i = 0, n = ga.size(); i < n; ++i) ga[i] += g[i] * vb[i];
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_buf(b);
                const real* va = t.val(a).data();
                for (std::int64_t i = 0, n = gb.size(); i < n; ++i) gb[i] += g[i] * va[i];
            }
        };
    return out;
}

Tape::NodeId Tape::scale(NodeId a, real c) {
    Tensor v = val(a);
    for (std::int64_t i = 0, n = v.size(); i < n; ++i) v[i] *= c;
    bool ng = needs_grad(a);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, a, c](Tape& t) {
            const Tensor& g = t.node(out).grad;
            Tensor& ga = t.grad_buf(a);
            for (std::int64_t i = 0, n = ga.size(); i < n; ++i) ga[i] += g[i] * c;
        };
    return out;
}

Tape::NodeId Tape::add_scalar(NodeId a, real c) {
    Tensor v = val(a);
    for (std::int64_t i = 0, n = v.size(); i < n; ++i) v[i] += c;
    bool ng = needs_grad(a);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, a](Tape& t) { t.accum(a, t.node(out).grad); };
    return out;
}

Tape::NodeId Tape::silu(NodeId a) {
    Tensor v = val(a);
    for (std::int64_t i = 0, n = v.size(); i < n; ++i) {
        real s = sigmoid(v[i]);
        v[i] = v[i] * s;
    }
    bool ng = needs_grad(a);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, a](Tape& t) {
            const Tensor& g = t.node(out).grad;
            const Tensor& x = t.val(a);
            Tensor& ga = t.grad_buf(a);
            for (std::int64_t i = 0, n = ga.size(); i < n; ++i) {
                real s = sigmoid(x[i]);
                ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
            }
        };
    return out;
}

Tape::NodeId Tape::tanh_(NodeId a) {
    Tensor v = val(a);
    for (std::int64_t i = 0, n = v.size(); i < n; ++i) v[i] = std::tanh(v[i]);
    bool ng = needs_grad(a);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, a](Tape& t) {
            const Tensor& g = t.node(out).grad;
            const Tensor& y = t.val(out);
            Tensor& ga = t.grad_buf(a);
            for (std::int64_t i = 0, n = ga.size(); i < n; ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
        };
    return out;
}

Tape::NodeId Tape::sigmoid_(NodeId a) {
    Tensor v = val(a);
    for (std::int64_t i = 0, n = v.size(); i < n; ++i) v[i] = sigmoid(v[i]);
    bool ng = needs_grad(a);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, a](Tape& t) {
            const Tensor& g = t.node(out).grad;
            const Tensor& y = t.val(out);
            Tensor& ga = t.grad_buf(a);
            for (std::int64_t i = 0, n = ga.size(); i < n; ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
        };
    return out;
}

Tape::NodeId Tape::mul_channels(NodeId x, NodeId s) {
    const Tensor& xv = val(x);
    const Tensor& sv = val(s);
    if (xv.rank() < 1 || sv.rank() != 1 || xv.dim(0) != sv.dim(0))
        throw ValidationError("mul_channels: x" + shape_str(xv.shape()) + " vs s" + shape_str(sv.shape()));
    int c = xv.dim(0);
    std::int64_t sp = xv.size() / c;
    Tensor v = xv;
    for (int ch = 0; ch < c; ++ch) {
        real g = sv[ch];
        real* p = v.data() + ch * sp;
        for (std::int64_t i = 0; i < sp; ++i) p[i] *= g;
    }
    bool ng = needs_grad(x) || needs_grad(s);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, s, c, sp](Tape& t) {
            const Tensor& g = t.node(out).grad;
            if (t.needs_grad(x)) {
                Tensor& gx = t.grad_buf(x);
                const Tensor& sv2 = t.val(s);
                for (int ch = 0; ch < c; ++ch) {
                    real gc = sv2[ch];
                    real* dst = gx.data() + ch * sp;
                    const real* src = g.data() + ch * sp;
                    for (std::int64_t i = 0; i < sp; ++i) dst[i] += src[i] * gc;
                }
            }
            if (t.needs_grad(s)) {
                Tensor& gs = t.grad_buf(s);
                const Tensor& xv2 = t.val(x);
                for (int ch = 0; ch < c; ++ch) {
                    const real* px = xv2.data() + ch * sp;
                    const real* pg = g.data() + ch * sp;
                    real acc = 0;
                    for (std::int64_t i = 0; i < sp; ++i) acc += px[i] * pg[i];
                    gs[ch] += acc;
                }
            }
        };
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tape::NodeId Tape::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_rank2(av, "matmul lhs");
    check_rank2(bv, "matmul rhs");
    int m = trans_a ? av.dim(1) : av.dim(0);
    int k = trans_a ? av.dim(0) : av.dim(1);
    int kb = trans_b ? bv.dim(1) : bv.dim(0);
    int n = trans_b ? bv.dim(0) : bv.dim(1);
    if (k != kb) throw ValidationError("matmul: inner dimensions differ (" + std::to_string(k) + " vs " + std::to_string(kb) + ")");

    Tensor v({m, n});
    {
        MapC A = map2(av, av.dim(0), av.dim(1));
        MapC B = map2(bv, bv.dim(0), bv.dim(1));
        MapM C = map2(v, m, n);
        if (!trans_a && !trans_b) C.noalias() = A * B;
        else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
        else C.noalias() = A.transpose() * B.transpose();
    }
    bool ng = needs_grad(a) || needs_grad(b);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, a, b, trans_a, trans_b, m, n](Tape& t) {
            const Tensor& gv = t.node(out).grad;
            MapC G = map2(gv, m, n);
            const Tensor& av2 = t.val(a);
            const Tensor& bv2 = t.val(b);
            MapC A = map2(av2, av2.dim(0), av2.dim(1));
            MapC B = map2(bv2, bv2.dim(0), bv2.dim(1));
            if (t.needs_grad(a)) {
                Tensor& ga = t.grad_buf(a);
                MapM GA = map2(ga, av2.dim(0), av2.dim(1));
                // d op(A) = G · op(B)ᵀ
                if (!trans_a) {
                    if (!trans_b) GA.noalias() += G * B.transpose();
                    else GA.noalias() += G * B;
                } else {
                    if (!trans_b) GA.noalias() += B * G.transpose();
                    else GA.noalias() += B.transpose() * G.transpose();
                }
            }
            if (t.needs_grad(b)) {
                Tensor& gb = t.grad_buf(b);
                MapM GB = map2(gb, bv2.dim(0), bv2.dim(1));
                // d op(B) = op(A)ᵀ · G
                if (!trans_b) {
                    if (!trans_a) GB.noalias() += A.transpose() * G;
                    else GB.noalias() += A * G;
                } else {
                    if (!trans_a) GB.noalias() += G.transpose() * A;
                    else GB.noalias() += G.transpose() * A.transpose();
                }
            }
        };
    return out;
}

Tape::NodeId Tape::linear(NodeId x, NodeId w, NodeId b) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    check_rank2(wv, "linear weight");
    bool vec_in = (xv.rank() == 1);
    int rows = vec_in ? 1 : static_cast<int>(xv.size() / xv.dim(xv.rank() - 1));
    int din = xv.dim(xv.rank() - 1);
    int dout = wv.dim(0);
    if (wv.dim(1) != din)
        throw ValidationError("linear: input dim " + std::to_string(din) + " vs weight " + shape_str(wv.shape()));
    bool has_bias = (b >= 0);
    if (has_bias && (val(b).rank() != 1 || val(b).dim(0) != dout)) throw ValidationError("linear: bad bias shape");

    Shape out_shape = xv.shape();
    out_shape[out_shape.size() - 1] = dout;
    Tensor v(out_shape);
    {
        MapC X(xv.data(), rows, din);
        MapC W = map2(wv, dout, din);
        MapM Y(v.data(), rows, dout);
        Y.noalias() = X * W.transpose();
        if (has_bias) {
            const real* bias = val(b).data();
            for (int r = 0; r < rows; ++r) {
                real* yr = v.data() + std::int64_t(r) * dout;
                for (int c = 0; c < dout; ++c) yr[c] += bias[c];
            }
        }
    }
    bool ng = needs_grad(x) || needs_grad(w) || (has_bias && needs_grad(b));
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, w, b, has_bias, rows, din, dout](Tape& t) {
            const Tensor& gv = t.node(out).grad;
            MapC G(gv.data(), rows, dout);
            if (t.needs_grad(x)) {
                Tensor& gx = t.grad_buf(x);
                MapM GX(gx.data(), rows, din);
                const Tensor& wv2 = t.val(w);
                GX.noalias() += G * map2(wv2, dout, din);
            }
            if (t.needs_grad(w)) {
                Tensor& gw = t.grad_buf(w);
                MapM GW = map2(gw, dout, din);
                const Tensor& xv2 = t.val(x);
                GW.noalias() += G.transpose() * MapC(xv2.data(), rows, din);
            }
            if (has_bias && t.needs_grad(b)) {
                Tensor& gb = t.grad_buf(b);
                for (int r = 0; r < rows; ++r) {
                    const real* gr = gv.data() + std::int64_t(r) * dout;
                    for (int c = 0; c < dout; ++c) gb[c] += gr[c];
                }
            }
        };
    return out;
}

Tape::NodeId Tape::bmm(NodeId a, NodeId b, bool trans_a, bool trans_b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
        throw ValidationError("bmm: expects [B,·,·] pairs, got " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    int batch = av.dim(0);
    int m = trans_a ? av.dim(2) : av.dim(1);
    int k = trans_a ? av.dim(1) : av.dim(2);
    int kb = trans_b ? bv.dim(2) : bv.dim(1);
    int n = trans_b ? bv.dim(1) : bv.dim(2);
    if (k != kb) throw ValidationError("bmm: inner dimensions differ");

    std::int64_t sa = std::int64_t(av.dim(1)) * av.dim(2);
    std::int64_t sb = std::int64_t(bv.dim(1)) * bv.dim(2);
    std::int64_t sc = std::int64_t(m) * n;
    Tensor v({batch, m, n});
    for (int i = 0; i < batch; ++i) {
        MapC A(av.data() + i * sa, av.dim(1), av.dim(2));
        MapC B(bv.data() + i * sb, bv.dim(1), bv.dim(2));
        MapM C(v.data() + i * sc, m, n);
        if (!trans_a && !trans_b) C.noalias() = A * B;
        else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
        else C.noalias() = A.transpose() * B.transpose();
    }
    bool ng = needs_grad(a) || needs_grad(b);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, a, b, trans_a, trans_b, batch, m, n, sa, sb, sc](Tape& t) {
            const Tensor& gv = t.node(out).grad;
            const Tensor& av2 = t.val(a);
            const Tensor& bv2 = t.val(b);
            for (int i = 0; i < batch; ++i) {
                MapC G(gv.data() + i * sc, m, n);
                MapC A(av2.data() + i * sa, av2.dim(1), av2.dim(2));
                MapC B(bv2.data() + i * sb, bv2.dim(1), bv2.dim(2));
                if (t.needs_grad(a)) {
                    MapM GA(t.grad_buf(a).data() + i * sa, av2.dim(1), av2.dim(2));
                    if (!trans_a) {
                        if (!trans_b) GA.noalias() += G * B.transpose();
                        else GA.noalias() += G * B;
                    } else {
                        if (!trans_b) GA.noalias() += B * G.transpose();
                        else GA.noalias() += B.transpose() * G.transpose();
                    }
                }
                if (t.needs_grad(b)) {
                    MapM GB(t.grad_buf(b).data() + i * sb, bv2.dim(1), bv2.dim(2));
                    if (!trans_b) {
                        if (!trans_a) GB.noalias() += A.transpose() * G;
                        else GB.noalias() += A * G;
                    } else {
                        if (!trans_a) GB.noalias() += G.transpose() * A;
                        else GB.noalias() += G.transpose() * A.transpose();
                    }
                }
            }
        };
    return out;
}

namespace {

struct ConvDims {
    int cin, d, h, w;
    int cout, k;
    int od, oh, ow;
    std::int64_t ncols;  // od*oh*ow
    int krows;           // cin*k^3
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.rank() != 4) throw ValidationError("conv3d: input must be [C,D,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 5) throw ValidationError("conv3d: weight must be [Cout,Cin,k,k,k]");
    ConvDims cd;
    cd.cin = x.dim(0);
    cd.d = x.dim(1);
    cd.h = x.dim(2);
    cd.w = x.dim(3);
    cd.cout = w.dim(0);
    cd.k = w.dim(2);
    if (w.dim(1) != cd.cin || w.dim(3) != cd.k || w.dim(4) != cd.k)
        throw ValidationError("conv3d: weight shape " + shape_str(w.shape()) + " does not match input channels " +
                              std::to_string(cd.cin));
    auto out_sz = [&](int in) { return (in + 2 * pad - cd.k) / stride + 1; };
    cd.od = out_sz(cd.d);
    cd.oh = out_sz(cd.h);
    cd.ow = out_sz(cd.w);
    if (cd.od < 1 || cd.oh < 1 || cd.ow < 1)
        throw ValidationError("conv3d: input " + shape_str(x.shape()) + " smaller than kernel footprint");
    cd.ncols = std::int64_t(cd.od) * cd.oh * cd.ow;
    cd.krows = cd.cin * cd.k * cd.k * cd.k;
    return cd;
}

// col[krow, n] layout, row-major
void im2col(const Tensor& x, const ConvDims& cd, int stride, int pad, std::vector<real>& col) {
    col.assign(std::size_t(cd.krows) * cd.ncols, 0.0);
    const real* xp = x.data();
    std::int64_t plane_hw = std::int64_t(cd.h) * cd.w;
    for (int c = 0; c < cd.cin; ++c) {
        for (int kd = 0; kd < cd.k; ++kd)
            for (int kh = 0; kh < cd.k; ++kh)
                for (int kw = 0; kw < cd.k; ++kw) {
                    std::int64_t row = ((std::int64_t(c) * cd.k + kd) * cd.k + kh) * cd.k + kw;
                    real* dst = col.data() + row * cd.ncols;
                    std::int64_t n = 0;
                    for (int od = 0; od < cd.od; ++od) {
                        int id = od * stride + kd - pad;
                        bool d_ok = (id >= 0 && id < cd.d);
                        for (int oh = 0; oh < cd.oh; ++oh) {
                            int ih = oh * stride + kh - pad;
                            bool h_ok = d_ok && (ih >= 0 && ih < cd.h);
                            const real* src_plane = xp + std::int64_t(c) * cd.d * plane_hw + std::int64_t(id) * plane_hw +
                                                    std::int64_t(ih) * cd.w;
                            for (int ow = 0; ow < cd.ow; ++ow, ++n) {
                                int iw = ow * stride + kw - pad;
                                if (h_ok && iw >= 0 && iw < cd.w) dst[n] = src_plane[iw];
                            }
                        }
                    }
                }
    }
}

void col2im_add(const std::vector<real>& col, const ConvDims& cd, int stride, int pad, Tensor& dx) {
    real* xp = dx.data();
    std::int64_t plane_hw = std::int64_t(cd.h) * cd.w;
    for (int c = 0; c < cd.cin; ++c) {
        for (int kd = 0; kd < cd.k; ++kd)
            for (int kh = 0; kh < cd.k; ++kh)
                for (int kw = 0; kw < cd.k; ++kw) {
                    std::int64_t row = ((std::int64_t(c) * cd.k + kd) * cd.k + kh) * cd.k + kw;
                    const real* src = col.data() + row * cd.ncols;
                    std::int64_t n = 0;
                    for (int od = 0; od < cd.od; ++od) {
                        int id = od * stride + kd - pad;
                        bool d_ok = (id >= 0 && id < cd.d);
                        for (int oh = 0; oh < cd.oh; ++oh) {
                            int ih = oh * stride + kh - pad;
                            bool h_ok = d_ok && (ih >= 0 && ih < cd.h);
                            real* dst_plane = xp + std::int64_t(c) * cd.d * plane_hw + std::int64_t(id) * plane_hw +
                                              std::int64_t(ih) * cd.w;
                            for (int ow = 0; ow < cd.ow; ++ow, ++n) {
                                int iw = ow * stride + kw - pad;
                                if (h_ok && iw >= 0 && iw < cd.w) dst_plane[iw] += src[n];
                            }
                        }
                    }
                }
    }
}

}  // namespace

Tape::NodeId Tape::conv3d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    ConvDims cd = conv_dims(xv, wv, stride, pad);
    bool has_bias = (b >= 0);
    if (has_bias && (val(b).rank() != 1 || val(b).dim(0) != cd.cout)) throw ValidationError("conv3d: bad bias shape");

    auto col = std::make_shared<std::vector<real>>();
    im2col(xv, cd, stride, pad, *col);

    Tensor v({cd.cout, cd.od, cd.oh, cd.ow});
    {
        MapC W(wv.data(), cd.cout, cd.krows);
        MapC Col(col->data(), cd.krows, cd.ncols);
        MapM Y(v.data(), cd.cout, cd.ncols);
        Y.noalias() = W * Col;
        if (has_bias) {
            const real* bias = val(b).data();
            for (int c = 0; c < cd.cout; ++c) {
                real* yp = v.data() + std::int64_t(c) * cd.ncols;
                for (std::int64_t i = 0; i < cd.ncols; ++i) yp[i] += bias[c];
            }
        }
    }
    bool ng = needs_grad(x) || needs_grad(w) || (has_bias && needs_grad(b));
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, w, b, has_bias, cd, stride, pad, col](Tape& t) {
            const Tensor& gv = t.node(out).grad;
            MapC G(gv.data(), cd.cout, cd.ncols);
            if (has_bias && t.needs_grad(b)) {
                Tensor& gb = t.grad_buf(b);
                for (int c = 0; c < cd.cout; ++c) {
                    const real* gp = gv.data() + std::int64_t(c) * cd.ncols;
                    real acc = 0;
                    for (std::int64_t i = 0; i < cd.ncols; ++i) acc += gp[i];
                    gb[c] += acc;
                }
            }
            if (t.needs_grad(w)) {
                Tensor& gw = t.grad_buf(w);
                MapM GW(gw.data(), cd.cout, cd.krows);
                MapC Col(col->data(), cd.krows, cd.ncols);
                GW.noalias() += G * Col.transpose();
            }
            if (t.needs_grad(x)) {
                const Tensor& wv2 = t.val(w);
                MapC W(wv2.data(), cd.cout, cd.krows);
                std::vector<real> dcol(std::size_t(cd.krows) * cd.ncols);
                MapM DCol(dcol.data(), cd.krows, cd.ncols);
                DCol.noalias() = W.transpose() * G;
                col2im_add(dcol, cd, stride, pad, t.grad_buf(x));
            }
        };
    return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

namespace {

// shared row-normalization backward:
// dx = ivar/n * (n*dxh - Σdxh - xh*Σ(dxh*xh))
void norm_row_backward(const real* dy, const real* xh, real gamma_times, const real* gamma, int n, real ivar, real* dx,
                       real* dgamma, real* dbeta) {
    real sum_dxh = 0, sum_dxh_xh = 0;
    for (int i = 0; i < n; ++i) {
        real dxh = dy[i] * (gamma ? gamma[i] : gamma_times);
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh[i];
    }
    for (int i = 0; i < n; ++i) {
        real dxh = dy[i] * (gamma ? gamma[i] : gamma_times);
        dx[i] += ivar / n * (n * dxh - sum_dxh - xh[i] * sum_dxh_xh);
    }
    if (dgamma)
        for (int i = 0; i < n; ++i) dgamma[i] += dy[i] * xh[i];
    if (dbeta)
        for (int i = 0; i < n; ++i) dbeta[i] += dy[i];
}

}  // namespace

Tape::NodeId Tape::instance_norm(NodeId x, NodeId gamma, NodeId beta, real eps) {
    const Tensor& xv = val(x);
    if (xv.rank() < 2) throw ValidationError("instance_norm: need [C, spatial...]");
    int c = xv.dim(0);
    std::int64_t sp = xv.size() / c;
    const Tensor& gv = val(gamma);
    const Tensor& bv = val(beta);
    if (gv.size() != c || bv.size() != c) throw ValidationError("instance_norm: gamma/beta must have C entries");

    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto ivar = std::make_shared<std::vector<real>>(std::size_t(c));
    Tensor v(xv.shape());
    for (int ch = 0; ch < c; ++ch) {
        const real* xp = xv.data() + ch * sp;
        real mu = 0;
        for (std::int64_t i = 0; i < sp; ++i) mu += xp[i];
        mu /= real(sp);
        real var = 0;
        for (std::int64_t i = 0; i < sp; ++i) {
            real d = xp[i] - mu;
            var += d * d;
        }
        var /= real(sp);
        real iv = 1.0 / std::sqrt(var + eps);
        (*ivar)[static_cast<std::size_t>(ch)] = iv;
        real* xh = xhat->data() + ch * sp;
        real* yp = v.data() + ch * sp;
        real g = gv[ch], b0 = bv[ch];
        for (std::int64_t i = 0; i < sp; ++i) {
            xh[i] = (xp[i] - mu) * iv;
            yp[i] = g * xh[i] + b0;
        }
    }
    bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, gamma, beta, c, sp, xhat, ivar](Tape& t) {
            const Tensor& g = t.node(out).grad;
            const Tensor& gv2 = t.val(gamma);
            Tensor* gx = t.needs_grad(x) ? &t.grad_buf(x) : nullptr;
            Tensor* gg = t.needs_grad(gamma) ? &t.grad_buf(gamma) : nullptr;
            Tensor* gb = t.needs_grad(beta) ? &t.grad_buf(beta) : nullptr;
            for (int ch = 0; ch < c; ++ch) {
                const real* dy = g.data() + ch * sp;
                const real* xh = xhat->data() + ch * sp;
                real iv = (*ivar)[static_cast<std::size_t>(ch)];
                if (gx) {
                    norm_row_backward(dy, xh, gv2[ch], nullptr, static_cast<int>(sp), iv, gx->data() + ch * sp, nullptr,
                                      nullptr);
                }
                if (gg) {
                    real acc = 0;
                    for (std::int64_t i = 0; i < sp; ++i) acc += dy[i] * xh[i];
                    (*gg)[ch] += acc;
                }
                if (gb) {
                    real acc = 0;
                    for (std::int64_t i = 0; i < sp; ++i) acc += dy[i];
                    (*gb)[ch] += acc;
                }
            }
        };
    return out;
}

Tape::NodeId Tape::layer_norm(NodeId x, NodeId gamma, NodeId beta, real eps) {
    const Tensor& xv = val(x);
    if (xv.rank() < 1) throw ValidationError("layer_norm: empty tensor");
    int d = xv.dim(xv.rank() - 1);
    std::int64_t rows = xv.size() / d;
    const Tensor& gv = val(gamma);
    const Tensor& bv = val(beta);
    if (gv.size() != d || bv.size() != d) throw ValidationError("layer_norm: gamma/beta must have D entries");

    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto ivar = std::make_shared<std::vector<real>>(std::size_t(rows));
    Tensor v(xv.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const real* xp = xv.data() + r * d;
        real mu = 0;
        for (int i = 0; i < d; ++i) mu += xp[i];
        mu /= d;
        real var = 0;
        for (int i = 0; i < d; ++i) {
            real dd = xp[i] - mu;
            var += dd * dd;
        }
        var /= d;
        real iv = 1.0 / std::sqrt(var + eps);
        (*ivar)[static_cast<std::size_t>(r)] = iv;
        real* xh = xhat->data() + r * d;
        real* yp = v.data() + r * d;
        for (int i = 0; i < d; ++i) {
            xh[i] = (xp[i] - mu) * iv;
            yp[i] = gv[i] * xh[i] + bv[i];
        }
    }
    bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, gamma, beta, d, rows, xhat, ivar](Tape& t) {
            const Tensor& g = t.node(out).grad;
            const Tensor& gv2 = t.val(gamma);
            Tensor* gx = t.needs_grad(x) ? &t.grad_buf(x) : nullptr;
            Tensor* gg = t.needs_grad(gamma) ? &t.grad_buf(gamma) : nullptr;
            Tensor* gb = t.needs_grad(beta) ? &t.grad_buf(beta) : nullptr;
            for (std::int64_t r = 0; r < rows; ++r) {
                const real* dy = g.data() + r * d;
                const real* xh = xhat->data() + r * d;
                real iv = (*ivar)[static_cast<std::size_t>(r)];
                if (gx)
                    norm_row_backward(dy, xh, 0.0, gv2.data(), d, iv, gx->data() + r * d, gg ? gg->data() : nullptr,
                                      gb ? gb->data() : nullptr);
                else if (gg || gb)
                    for (int i = 0; i < d; ++i) {
                        if (gg) (*gg)[i] += dy[i] * xh[i];
                        if (gb) (*gb)[i] += dy[i];
                    }
            }
        };
    return out;
}

Tape::NodeId Tape::l2_normalize(NodeId x, real min_norm) {
    const Tensor& xv = val(x);
    if (xv.rank() < 1) throw ValidationError("l2_normalize: expects rank >= 1");
    int d = xv.dim(xv.rank() - 1);
    std::int64_t rows = xv.size() / d;
    auto norms = std::make_shared<std::vector<real>>(static_cast<std::size_t>(rows));
    Tensor v = xv;
    for (std::int64_t r = 0; r < rows; ++r) {
        real n2 = 0.0;
        for (int i = 0; i < d; ++i) n2 += v[r * d + i] * v[r * d + i];
        real n = std::sqrt(n2);
        if (!(n >= min_norm))
            throw NumericError("degenerate vector in L2 normalization (norm=" + std::to_string(n) + ")");
        (*norms)[static_cast<std::size_t>(r)] = n;
        for (int i = 0; i < d; ++i) v[r * d + i] /= n;
    }
    bool ng = needs_grad(x);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, d, rows, norms](Tape& t) {
            const Tensor& g = t.node(out).grad;
            const Tensor& y = t.val(out);
            Tensor& gx = t.grad_buf(x);
            for (std::int64_t r = 0; r < rows; ++r) {
                const real* gr = g.data() + r * d;
                const real* yr = y.data() + r * d;
                real n = (*norms)[static_cast<std::size_t>(r)];
                real dot = 0;
                for (int i = 0; i < d; ++i) dot += gr[i] * yr[i];
                for (int i = 0; i < d; ++i) gx[r * d + i] += (gr[i] - yr[i] * dot) / n;
            }
        };
    return out;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

Tape::NodeId Tape::softmax_rows(NodeId x) {
    const Tensor& xv = val(x);
    int d = xv.dim(xv.rank() - 1);
    std::int64_t rows = xv.size() / d;
    Tensor v = xv;
    for (std::int64_t r = 0; r < rows; ++r) softmax_row(v.data() + r * d, d);
    bool ng = needs_grad(x);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, d, rows](Tape& t) {
            const Tensor& g = t.node(out).grad;
            const Tensor& y = t.val(out);
            Tensor& gx = t.grad_buf(x);
            for (std::int64_t r = 0; r < rows; ++r) {
                const real* gr = g.data() + r * d;
                const real* yr = y.data() + r * d;
                real dot = 0;
                for (int i = 0; i < d; ++i) dot += gr[i] * yr[i];
                real* dst = gx.data() + r * d;
                for (int i = 0; i < d; ++i) dst[i] += yr[i] * (gr[i] - dot);
            }
        };
    return out;
}

Tape::NodeId Tape::log_softmax_rows(NodeId x) {
    const Tensor& xv = val(x);
    int d = xv.dim(xv.rank() - 1);
    std::int64_t rows = xv.size() / d;
    Tensor v = xv;
    for (std::int64_t r = 0; r < rows; ++r) log_softmax_row(v.data() + r * d, d);
    bool ng = needs_grad(x);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, d, rows](Tape& t) {
            const Tensor& g = t.node(out).grad;
            const Tensor& y = t.val(out);  // log-probs
            Tensor& gx = t.grad_buf(x);
            for (std::int64_t r = 0; r < rows; ++r) {
                const real* gr = g.data() + r * d;
                const real* yr = y.data() + r * d;
                real gsum = 0;
                for (int i = 0; i < d; ++i) gsum += gr[i];
                real* dst = gx.data() + r * d;
                for (int i = 0; i < d; ++i) dst[i] += gr[i] - std::exp(yr[i]) * gsum;
            }
        };
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tape::NodeId Tape::mean_all(NodeId x) {
    const Tensor& xv = val(x);
    std::int64_t n = xv.size();
    Tensor v({1});
    v[0] = xv.sum() / real(n);
    bool ng = needs_grad(x);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, n](Tape& t) {
            real g = t.node(out).grad[0] / real(n);
            Tensor& gx = t.grad_buf(x);
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
        };
    return out;
}

Tape::NodeId Tape::mean_axis0(NodeId x) {
    const Tensor& xv = val(x);
    check_rank2(xv, "mean_axis0");
    int rows = xv.dim(0), d = xv.dim(1);
    Tensor v({d});
    for (int r = 0; r < rows; ++r) {
        const real* xp = xv.data() + std::int64_t(r) * d;
        for (int i = 0; i < d; ++i) v[i] += xp[i];
    }
    for (int i = 0; i < d; ++i) v[i] /= rows;
    bool ng = needs_grad(x);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, rows, d](Tape& t) {
            const Tensor& g = t.node(out).grad;
            Tensor& gx = t.grad_buf(x);
            for (int r = 0; r < rows; ++r) {
                real* dst = gx.data() + std::int64_t(r) * d;
                for (int i = 0; i < d; ++i) dst[i] += g[i] / rows;
            }
        };
    return out;
}

Tape::NodeId Tape::mean_keep_first(NodeId x) {
    const Tensor& xv = val(x);
    if (xv.rank() < 2) throw ValidationError("mean_keep_first: need [C, rest...]");
    int c = xv.dim(0);
    std::int64_t sp = xv.size() / c;
    Tensor v({c});
    for (int ch = 0; ch < c; ++ch) {
        const real* xp = xv.data() + ch * sp;
        real acc = 0;
        for (std::int64_t i = 0; i < sp; ++i) acc += xp[i];
        v[ch] = acc / real(sp);
    }
    bool ng = needs_grad(x);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, c, sp](Tape& t) {
            const Tensor& g = t.node(out).grad;
            Tensor& gx = t.grad_buf(x);
            for (int ch = 0; ch < c; ++ch) {
                real gc = g[ch] / real(sp);
                real* dst = gx.data() + ch * sp;
                for (std::int64_t i = 0; i < sp; ++i) dst[i] += gc;
            }
        };
    return out;
}

Tape::NodeId Tape::weighted_sum(NodeId x, Tensor w) {
    const Tensor& xv = val(x);
    if (xv.size() != w.size()) throw ValidationError("weighted_sum: size mismatch");
    Tensor v({1});
    real acc = 0;
    for (std::int64_t i = 0; i < xv.size(); ++i) acc += xv[i] * w[i];
    v[0] = acc;
    bool ng = needs_grad(x);
    auto wp = std::make_shared<Tensor>(std::move(w));
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, wp](Tape& t) {
            real g = t.node(out).grad[0];
            Tensor& gx = t.grad_buf(x);
            for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += g * (*wp)[i];
        };
    return out;
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Tape::NodeId Tape::reshape(NodeId x, Shape s) {
    Tensor v = val(x).reshaped(std::move(s));
    bool ng = needs_grad(x);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x](Tape& t) {
            const Tensor& g = t.node(out).grad;
            Tensor& gx = t.grad_buf(x);
            for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        };
    return out;
}

Tape::NodeId Tape::gather(NodeId x, IndexMap idx, Shape out_shape) {
    const Tensor& xv = val(x);
    if (static_cast<std::int64_t>(idx->size()) != shape_numel(out_shape))
        throw ValidationError("gather: index count does not match output shape");
    Tensor v(std::move(out_shape));
    const auto& ix = *idx;
    for (std::size_t i = 0; i < ix.size(); ++i) {
        if (ix[i] < 0 || ix[i] >= xv.size()) throw ValidationError("gather: index out of range");
        v[static_cast<std::int64_t>(i)] = xv[ix[i]];
    }
    bool ng = needs_grad(x);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, idx](Tape& t) {
            const Tensor& g = t.node(out).grad;
            Tensor& gx = t.grad_buf(x);
            const auto& ix2 = *idx;
            for (std::size_t i = 0; i < ix2.size(); ++i) gx[ix2[i]] += g[static_cast<std::int64_t>(i)];
        };
    return out;
}

Tape::NodeId Tape::stack(const std::vector<NodeId>& rows) {
    if (rows.empty()) throw ValidationError("stack: no rows");
    const Tensor& first = val(rows[0]);
    if (first.rank() != 1) throw ValidationError("stack: rows must be 1-D");
    int d = first.dim(0);
    int n = static_cast<int>(rows.size());
    Tensor v({n, d});
    bool ng = false;
    for (int r = 0; r < n; ++r) {
        const Tensor& rv = val(rows[static_cast<std::size_t>(r)]);
        if (rv.size() != d) throw ValidationError("stack: row length mismatch");
        std::memcpy(v.data() + std::int64_t(r) * d, rv.data(), sizeof(real) * static_cast<std::size_t>(d));
        ng = ng || needs_grad(rows[static_cast<std::size_t>(r)]);
    }
    auto rows_copy = std::make_shared<std::vector<NodeId>>(rows);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, rows_copy, d](Tape& t) {
            const Tensor& g = t.node(out).grad;
            for (std::size_t r = 0; r < rows_copy->size(); ++r) {
                NodeId rid = (*rows_copy)[r];
                if (!t.needs_grad(rid)) continue;
                Tensor& gr = t.grad_buf(rid);
                const real* src = g.data() + std::int64_t(r) * d;
                for (int i = 0; i < d; ++i) gr[i] += src[i];
            }
        };
    return out;
}

Tape::NodeId Tape::row(NodeId x, int r) {
    const Tensor& xv = val(x);
    check_rank2(xv, "row");
    int n = xv.dim(0), d = xv.dim(1);
    if (r < 0 || r >= n) throw ValidationError("row: index out of range");
    Tensor v({d});
    std::memcpy(v.data(), xv.data() + std::int64_t(r) * d, sizeof(real) * static_cast<std::size_t>(d));
    bool ng = needs_grad(x);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, x, r, d](Tape& t) {
            const Tensor& g = t.node(out).grad;
            Tensor& gx = t.grad_buf(x);
            real* dst = gx.data() + std::int64_t(r) * d;
            for (int i = 0; i < d; ++i) dst[i] += g[i];
        };
    return out;
}

Tape::NodeId Tape::stop_grad(NodeId x) { return make(val(x), false, nullptr); }

// ---------------------------------------------------------------------------
// task-specific
// ---------------------------------------------------------------------------

Tape::NodeId Tape::nll_diag(NodeId logp) {
    const Tensor& lp = val(logp);
    check_rank2(lp, "nll_diag");
    if (lp.dim(0) != lp.dim(1)) throw ValidationError("nll_diag: matrix must be square");
    int n = lp.dim(0);
    Tensor v({1});
    real acc = 0;
    for (int i = 0; i < n; ++i) acc += lp[std::int64_t(i) * n + i];
    v[0] = -acc / n;
    bool ng = needs_grad(logp);
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, logp, n](Tape& t) {
            real g = t.node(out).grad[0];
            Tensor& gx = t.grad_buf(logp);
            for (int i = 0; i < n; ++i) gx[std::int64_t(i) * n + i] -= g / n;
        };
    return out;
}

Tape::NodeId Tape::bce_mean(NodeId p, Tensor labels, real eps) {
    const Tensor& pv = val(p);
    if (pv.size() != labels.size()) throw ValidationError("bce_mean: probability/label length mismatch");
    if (!pv.all_finite() || !labels.all_finite()) throw NumericError("bce_mean: non-finite input");
    std::int64_t n = pv.size();
    auto clamped = std::make_shared<Tensor>(pv);
    auto mask = std::make_shared<std::vector<bool>>(static_cast<std::size_t>(n));
    real acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        real pc = pv[i];
        bool inside = (pc > eps) && (pc < 1.0 - eps);
        if (pc < eps) pc = eps;
        if (pc > 1.0 - eps) pc = 1.0 - eps;
        (*clamped)[i] = pc;
        (*mask)[static_cast<std::size_t>(i)] = inside;
        real y = labels[i];
        acc += -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
    }
    Tensor v({1});
    v[0] = acc / real(n);
    bool ng = needs_grad(p);
    auto lab = std::make_shared<Tensor>(std::move(labels));
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, p, clamped, mask, lab, n](Tape& t) {
            real g = t.node(out).grad[0] / real(n);
            Tensor& gp = t.grad_buf(p);
            for (std::int64_t i = 0; i < n; ++i) {
                if (!(*mask)[static_cast<std::size_t>(i)]) continue;
                real pc = (*clamped)[i];
                real y = (*lab)[i];
                gp[i] += g * (pc - y) / (pc * (1.0 - pc));
            }
        };
    return out;
}

Tape::NodeId Tape::embedding_mean(NodeId table, std::vector<int> ids) {
    const Tensor& tv = val(table);
    check_rank2(tv, "embedding_mean");
    if (ids.empty()) throw ValidationError("embedding_mean: empty id list");
    int vsz = tv.dim(0), e = tv.dim(1);
    for (int id : ids)
        if (id < 0 || id >= vsz) throw ValidationError("embedding_mean: token id " + std::to_string(id) + " out of range");
    Tensor v({e});
    for (int id : ids) {
        const real* r = tv.data() + std::int64_t(id) * e;
        for (int i = 0; i < e; ++i) v[i] += r[i];
    }
    real inv = 1.0 / real(ids.size());
    for (int i = 0; i < e; ++i) v[i] *= inv;
    bool ng = needs_grad(table);
    auto ids_p = std::make_shared<std::vector<int>>(std::move(ids));
    NodeId out = make(std::move(v), ng, nullptr);
    if (ng)
        nodes_.back().back = [out, table, ids_p, e](Tape& t) {
            const Tensor& g = t.node(out).grad;
            Tensor& gt = t.grad_buf(table);
            real inv2 = 1.0 / real(ids_p->size());
            for (int id : *ids_p) {
                real* dst = gt.data() + std::int64_t(id) * e;
                for (int i = 0; i < e; ++i) dst[i] += g[i] * inv2;
            }
        };
    return out;
}

}  // namespace medmap
