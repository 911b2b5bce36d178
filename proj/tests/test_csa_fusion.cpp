#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "medmap/csa_fusion.hpp"
#include "medmap/common.hpp"
#include "medmap/objectives.hpp"
#include "medmap/text_encoding.hpp"
#include "testutil.hpp"

using namespace medmap;
using namespace medmap::test;

namespace {

// applies one spatial permutation to every channel of a [C,d,h,w] grid
Tensor permute_cells(const Tensor& grid, const std::vector<int>& perm) {
    int c = grid.dim(0);
    std::int64_t n = grid.size() / c;
    REQUIRE(std::int64_t(perm.size()) == n);
    Tensor out(grid.shape());
    for (int ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < n; ++i) out[ch * n + i] = grid[ch * n + std::int64_t(perm[i])];
    return out;
}

std::vector<int> random_perm(int n, Rng& rng) {
    std::vector<int> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    rng.shuffle(p);
    return p;
}

void copy_values(std::vector<Parameter*> from, std::vector<Parameter*> to) {
    REQUIRE(from.size() == to.size());
    for (std::size_t i = 0; i < from.size(); ++i) {
        REQUIRE(from[i]->value.shape() == to[i]->value.shape());
        to[i]->value = from[i]->value;
    }
}

}  // namespace

TEST_CASE("text gate: exact identity at init, absorbing when saturated, correct values") {
    Rng rng(7);
    TextGate g("g", 5, 4, rng);
    Rng data_rng(21);
    Tensor grid = random_tensor({5, 2, 2, 1}, data_rng);
    Tensor emb = random_tensor({4}, data_rng);

    // zero-init affine map: gate is exactly 1 + tanh(0) = 1, modulation is a bitwise no-op
    {
        Tape t;
        Tape::NodeId gn = g.gate(t, t.constant(emb));
        for (std::int64_t i = 0; i < 5; ++i) CHECK(t.val(gn)[i] == 1.0);
        Tape::NodeId out = g.modulate(t, t.input(grid), t.constant(emb));
        for (std::int64_t i = 0; i < grid.size(); ++i) CHECK(t.val(out)[i] == grid[i]);
    }

    // saturated negative bias drives the gate to exactly zero, which absorbs the grid
    {
        g.fc.b.value.fill(-25.0);
        CHECK(std::tanh(-25.0) == -1.0);
        Tape t;
        Tape::NodeId out = g.modulate(t, t.input(grid), t.constant(emb));
        for (std::int64_t i = 0; i < grid.size(); ++i) CHECK(t.val(out)[i] == 0.0);
    }

    // generic point: matches an independently computed 1 + tanh(We + b) channel scale
    {
        g.fc.w.value = random_tensor({5, 4}, data_rng, 0.3);
        g.fc.b.value = random_tensor({5}, data_rng, 0.3);
        Tape t;
        Tape::NodeId out = g.modulate(t, t.input(grid), t.constant(emb));
        std::int64_t sp = grid.size() / 5;
        for (int c = 0; c < 5; ++c) {
            real pre = g.fc.b.value[c];
            for (int j = 0; j < 4; ++j) pre += g.fc.w.value[c * 4 + j] * emb[j];
            real gate = 1.0 + std::tanh(pre);
            for (std::int64_t i = 0; i < sp; ++i)
                CHECK(std::abs(t.val(out)[c * sp + i] - grid[c * sp + i] * gate) <= 1e-12);
        }
    }

    // gradients through projector + gate + modulation
    {
        TextProjector proj(4, 6, 99);
        Tensor raw = random_tensor({6}, data_rng);
        Tensor weights = random_tensor({5 * 2 * 2 * 1}, data_rng);
        auto res = gradcheck({&proj.w, &proj.b, &g.fc.w, &g.fc.b}, [&](Tape& t) {
            Tape::NodeId out = g.modulate(t, t.constant(grid), proj.project(t, raw));
            return t.weighted_sum(out, weights);
        });
        CHECK_MESSAGE(res.ok, res.detail);
    }
}

TEST_CASE("cross attention: stochastic maps, permutation behavior, gradients") {
    Rng rng(11);
    CrossAttention xa("xa", 4, 2, rng);
    Rng data_rng(5);
    Tensor qrows = random_tensor({3, 4}, data_rng);
    Tensor crows = random_tensor({5, 4}, data_rng);

    Tensor base_out, base_probs;
    {
        Tape t;
        Tape::NodeId probs = -1;
        Tape::NodeId out = xa.forward(t, t.input(qrows), t.input(crows), &probs);
        base_out = t.val(out);
        base_probs = t.val(probs);
        CHECK(base_out.shape() == Shape{3, 4});
        CHECK(base_probs.shape() == Shape{2, 3, 5});
        for (int h = 0; h < 2; ++h)
            for (int i = 0; i < 3; ++i) {
                real s = 0;
                for (int j = 0; j < 5; ++j) {
                    real p = base_probs[(h * 3 + i) * 5 + j];
                    CHECK(p >= 0.0);
                    s += p;
                }
                CHECK(std::abs(s - 1.0) <= 1e-12);
            }
    }

    // permuting context rows never changes the output (no positional encoding)
    {
        Rng prng(3);
        auto perm = random_perm(5, prng);
        Tensor cperm({5, 4});
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 4; ++j) cperm[i * 4 + j] = crows[perm[std::size_t(i)] * 4 + j];
        Tape t;
        Tape::NodeId out = xa.forward(t, t.input(qrows), t.input(cperm));
        for (std::int64_t i = 0; i < base_out.size(); ++i) CHECK(std::abs(t.val(out)[i] - base_out[i]) <= 1e-12);
    }

    // permuting query rows permutes the output rows the same way
    {
        Rng prng(4);
        auto perm = random_perm(3, prng);
        Tensor qperm({3, 4});
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j) qperm[i * 4 + j] = qrows[perm[std::size_t(i)] * 4 + j];
        Tape t;
        Tape::NodeId out = xa.forward(t, t.input(qperm), t.input(crows));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j)
                CHECK(std::abs(t.val(out)[i * 4 + j] - base_out[perm[std::size_t(i)] * 4 + j]) <= 1e-15);
    }

    // shape and head validation
    CHECK_THROWS_AS(CrossAttention("bad", 5, 2, rng), ValidationError);
    {
        Tape t;
        CHECK_THROWS_AS(xa.forward(t, t.input(random_tensor({3, 6}, data_rng)), t.input(crows)), ValidationError);
    }

    // gradients for every attention parameter
    {
        Tensor weights = random_tensor({3 * 4}, data_rng);
        auto res = gradcheck({&xa.q.w, &xa.q.b, &xa.kv.w, &xa.kv.b, &xa.proj.w, &xa.proj.b}, [&](Tape& t) {
            return t.weighted_sum(xa.forward(t, t.constant(qrows), t.constant(crows)), weights);
        });
        CHECK_MESSAGE(res.ok, res.detail);
    }
}

TEST_CASE("bidirectional block: the exchange is simultaneous (mirror symmetry)") {
    Rng rng(13);
    CctBlock blk("blk", 4, 2, rng);
    Rng rng2(14);
    CctBlock mirror("mirror", 4, 2, rng2);

    // mirror's a-side takes blk's b-side parameters and vice versa
    auto side_a = [](CctBlock& b) {
        std::vector<Parameter*> ps;
        b.norm_a1.collect(ps);
        b.norm_a2.collect(ps);
        b.attn_ab.collect(ps);
        b.ffn_a1.collect(ps);
        b.ffn_a2.collect(ps);
        return ps;
    };
    auto side_b = [](CctBlock& b) {
        std::vector<Parameter*> ps;
        b.norm_b1.collect(ps);
        b.norm_b2.collect(ps);
        b.attn_ba.collect(ps);
        b.ffn_b1.collect(ps);
        b.ffn_b2.collect(ps);
        return ps;
    };
    copy_values(side_a(blk), side_b(mirror));
    copy_values(side_b(blk), side_a(mirror));

    Rng data_rng(55);
    Tensor a = random_tensor({6, 4}, data_rng);
    Tensor b = random_tensor({6, 4}, data_rng);

    Tape t1;
    CctBlock::Out o1 = blk.forward(t1, t1.input(a), t1.input(b));
    Tape t2;
    CctBlock::Out o2 = mirror.forward(t2, t2.input(b), t2.input(a));

    // holds bitwise only if both directions read the block inputs; a sequential
    // update (b attending to the already-updated a) would break the symmetry
    for (std::int64_t i = 0; i < t1.val(o1.a).size(); ++i) {
        CHECK(t2.val(o2.b)[i] == t1.val(o1.a)[i]);
        CHECK(t2.val(o2.a)[i] == t1.val(o1.b)[i]);
    }
}

TEST_CASE("fusion head: unit norm, joint permutation invariance, validation, gradients") {
    Rng rng(17);
    CctFusion fusion("f", 8, 2, 6, rng);
    REQUIRE(fusion.blocks.size() == 2);
    Rng data_rng(31);
    Tensor ga = random_tensor({8, 2, 2, 2}, data_rng);
    Tensor gb = random_tensor({8, 2, 2, 2}, data_rng);

    Tensor base;
    {
        Tape t;
        std::vector<Tape::NodeId> probs;
        Tape::NodeId out = fusion.fuse(t, t.input(ga), t.input(gb), &probs);
        base = t.val(out);
        CHECK(base.shape() == Shape{6});
        real norm = 0;
        for (std::int64_t i = 0; i < 6; ++i) norm += base[i] * base[i];
        CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-12);

        // two blocks, two directions each; every map is row-stochastic
        CHECK(probs.size() == 4);
        for (auto p : probs) {
            const Tensor& pv = t.val(p);
            CHECK(pv.shape() == Shape{2, 8, 8});
            for (int r = 0; r < 2 * 8; ++r) {
                real s = 0;
                for (int c = 0; c < 8; ++c) s += pv[r * 8 + c];
                CHECK(std::abs(s - 1.0) <= 1e-12);
            }
        }
    }

    // permuting the spatial cells of both grids together leaves f_fusion unchanged
    {
        Rng prng(77);
        auto perm = random_perm(8, prng);
        Tape t;
        Tape::NodeId out = fusion.fuse(t, t.input(permute_cells(ga, perm)), t.input(permute_cells(gb, perm)));
        for (std::int64_t i = 0; i < 6; ++i) CHECK(std::abs(t.val(out)[i] - base[i]) <= 1e-9);
    }

    // shape validation
    {
        Tape t;
        CHECK_THROWS_AS(fusion.fuse(t, t.input(random_tensor({8, 2, 2, 1}, data_rng)), t.input(gb)), ValidationError);
        CHECK_THROWS_AS(
            fusion.fuse(t, t.input(random_tensor({4, 2, 2, 2}, data_rng)), t.input(random_tensor({4, 2, 2, 2}, data_rng))),
            ValidationError);
    }

    // gradients through attention, feed-forward, projection, and normalization
    {
        Tensor weights = random_tensor({6}, data_rng);
        auto res = gradcheck(
            {&fusion.blocks[0].attn_ab.q.w, &fusion.blocks[0].attn_ab.kv.b, &fusion.blocks[0].norm_b1.gamma,
             &fusion.blocks[1].ffn_b1.b, &fusion.project.w},
            [&](Tape& t) { return t.weighted_sum(fusion.fuse(t, t.constant(ga), t.constant(gb)), weights); });
        CHECK_MESSAGE(res.ok, res.detail);
    }
}

TEST_CASE("model: shapes, classifier behavior, determinism") {
    CsaConfig cfg;
    cfg.n_classes = 7;
    cfg.modalities = {"T1", "T2"};
    cfg.seed = 11;
    CsaModel model(cfg);

    TextEncoder enc;
    Tensor text = enc.encode("small hyperintense lesion in the left upper region");
    Rng data_rng(41);
    Tensor vol = random_uniform_tensor({32, 32, 32}, data_rng, 0.0, 1.0);

    CSAIntermediates out = model.run(vol, "T1", text);
    CHECK(out.f_v.data.shape() == Shape{64, 2, 2, 2});
    CHECK(out.f_v.stride == 16);
    CHECK(out.f_trans.data.shape() == Shape{64, 2, 2, 2});
    CHECK(out.f_vt.data.shape() == Shape{64, 2, 2, 2});
    CHECK(out.f_fusion.vector.shape() == Shape{128});
    CHECK(out.f_fusion.normalized);
    CHECK(out.logits.shape() == Shape{7});
    CHECK(out.probabilities.shape() == Shape{7});
    real norm = 0;
    for (std::int64_t i = 0; i < 128; ++i) norm += out.f_fusion.vector[i] * out.f_fusion.vector[i];
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-12);
    for (std::int64_t i = 0; i < 7; ++i) {
        CHECK(std::isfinite(out.logits[i]));
        real expect = 1.0 / (1.0 + std::exp(-out.logits[i]));
        CHECK(std::abs(out.probabilities[i] - expect) <= 1e-15);
    }

    // same config, fresh model: bitwise-identical end to end
    {
        CsaModel twin(cfg);
        CSAIntermediates o2 = twin.run(vol, "T1", text);
        for (std::int64_t i = 0; i < out.logits.size(); ++i) CHECK(o2.logits[i] == out.logits[i]);
        for (std::int64_t i = 0; i < out.f_fusion.vector.size(); ++i)
            CHECK(o2.f_fusion.vector[i] == out.f_fusion.vector[i]);
    }

    // a zeroed head scores every class at exactly 1/2
    {
        CsaModel zeroed(cfg);
        zeroed.classifier.w.value.fill(0.0);
        zeroed.classifier.b.value.fill(0.0);
        CSAIntermediates o = zeroed.run(vol, "T2", text);
        for (std::int64_t i = 0; i < 7; ++i) CHECK(o.probabilities[i] == 0.5);
    }

    // sigmoid oracle for strongly separated logits
    {
        Tape t;
        const Tensor& p = t.val(t.sigmoid_(t.constant(Tensor::of({10.0, -10.0}))));
        CHECK(std::abs(p[0] - 0.9999546021312976) <= 1e-12);
        CHECK(std::abs(p[1] - 4.5397868702434395e-05) <= 1e-12);
    }

    CHECK_THROWS_AS(model.run(vol, "CT", text), ValidationError);
    CHECK_THROWS_AS(model.run(vol, "T1", Tensor::of({1.0, 2.0})), ValidationError);
    CHECK_THROWS_AS(CsaModel(CsaConfig{0, {"T1"}, {}, 1}), ValidationError);
    CHECK_THROWS_AS(CsaModel(CsaConfig{3, {}, {}, 1}), ValidationError);
    CHECK_THROWS_AS(CsaModel(CsaConfig{3, {"T1", "T1"}, {}, 1}), ValidationError);
}

TEST_CASE("model: starts as a pure-vision model; ablation wiring") {
    TextEncoder enc;
    Tensor text = enc.encode("no significant abnormality in this study");
    Rng data_rng(43);
    Tensor vol = random_uniform_tensor({32, 32, 32}, data_rng, 0.0, 1.0);

    CsaConfig full;
    full.n_classes = 4;
    full.modalities = {"T1"};
    full.seed = 3;
    CsaConfig nocsa = full;
    nocsa.flags.use_csa = false;
    CsaConfig baseline = full;
    baseline.flags.use_csa = false;
    baseline.flags.use_cct = false;

    // zero-init gate: the text path is inert, so the full model and the
    // text-free variant produce bitwise-identical intermediates and logits
    {
        CsaModel m_full(full);
        CsaModel m_nocsa(nocsa);
        CSAIntermediates a = m_full.run(vol, "T1", text);
        CSAIntermediates b = m_nocsa.run(vol, "T1", text);
        for (std::int64_t i = 0; i < a.f_vt.data.size(); ++i) {
            CHECK(a.f_vt.data[i] == a.f_trans.data[i]);
            CHECK(a.f_vt.data[i] == b.f_vt.data[i]);
        }
        for (std::int64_t i = 0; i < a.logits.size(); ++i) CHECK(a.logits[i] == b.logits[i]);
    }

    // conv-only variant: no transformer grid, fusion comes from the pooling head
    {
        CsaModel m_base(baseline);
        CSAIntermediates o = m_base.run(vol, "T1", text);
        CHECK(o.f_trans.data.size() == 0);
        CHECK(o.f_vt.data.size() == 0);
        CHECK(o.logits.shape() == Shape{4});
        real norm = 0;
        for (std::int64_t i = 0; i < o.f_fusion.vector.size(); ++i) norm += o.f_fusion.vector[i] * o.f_fusion.vector[i];
        CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-12);
    }

    // trainable sets follow the flags
    {
        auto names = [](CsaModel& m) {
            std::vector<std::string> out;
            for (auto* p : m.parameters()) out.push_back(p->name);
            return out;
        };
        auto has_prefix = [](const std::vector<std::string>& ns, const std::string& prefix) {
            for (const auto& n : ns)
                if (n.rfind(prefix, 0) == 0) return true;
            return false;
        };
        CsaModel m_full(full), m_nocsa(nocsa), m_base(baseline);
        auto nf = names(m_full), nn = names(m_nocsa), nb = names(m_base);
        CHECK(has_prefix(nf, "model.swin"));
        CHECK(has_prefix(nf, "model.cct"));
        CHECK(has_prefix(nf, "model.gate"));
        CHECK(has_prefix(nf, "model.conv.T1"));
        CHECK(has_prefix(nf, "model.classifier"));
        CHECK(!has_prefix(nf, "model.pool"));
        CHECK(!has_prefix(nn, "model.gate"));
        CHECK(has_prefix(nn, "model.cct"));
        CHECK(!has_prefix(nb, "model.swin"));
        CHECK(!has_prefix(nb, "model.cct"));
        CHECK(!has_prefix(nb, "model.gate"));
        CHECK(has_prefix(nb, "model.pool"));
        CHECK(nf.size() > nn.size());
        CHECK(nn.size() > nb.size());
    }

    // text modulation cannot run without the transformer stream
    {
        CsaConfig bad = full;
        bad.flags.use_cct = false;
        CHECK_THROWS_AS(CsaModel{bad}, ValidationError);
    }

    // pretrained initialization: conv features and (conv-only) fusion embedding
    // reproduce the pretrained expert bitwise at step 0
    {
        ModalityExpertBank bank({"T1"}, 99);
        CsaModel m_base(baseline);
        m_base.init_from_bank(bank);
        Tensor padded = pad_to_multiple(vol, kTotalStride);
        FeatureGrid expert_grid = bank.expert("T1").conv.features(padded);
        CSAIntermediates o = m_base.run(vol, "T1", text);
        REQUIRE(o.f_v.data.shape() == expert_grid.data.shape());
        for (std::int64_t i = 0; i < o.f_v.data.size(); ++i) CHECK(o.f_v.data[i] == expert_grid.data[i]);

        EmbeddingVector expert_emb = vision_encode(vol, "T1", bank);
        for (std::int64_t i = 0; i < 128; ++i) CHECK(o.f_fusion.vector[i] == expert_emb.vector[i]);

        ModalityExpertBank small({"T2"}, 99);
        CHECK_THROWS_AS(m_base.init_from_bank(small), ValidationError);
    }
}

TEST_CASE("model: end-to-end gradients through the ramped objective") {
    CsaConfig cfg;
    cfg.n_classes = 3;
    cfg.modalities = {"T1"};
    cfg.seed = 5;
    CsaModel model(cfg);

    TextEncoder enc;
    Tensor text = enc.encode("focal mass with surrounding edema");
    Rng data_rng(47);
    Tensor vol = random_uniform_tensor({32, 32, 32}, data_rng, 0.0, 1.0);
    Tensor labels = Tensor::of({1.0, 0.0, 1.0});

    // move the gate off its inert zero point so its gradients are representative
    model.gate.fc.w.value = random_tensor({64, 128}, data_rng, 0.02);
    model.gate.fc.b.value = random_tensor({64}, data_rng, 0.02);

    // frozen alignment target: the projected text embedding at the current
    // parameters, captured once (training detaches it the same way per step)
    Tensor target;
    {
        Tape t;
        target = model.forward(t, vol, "T1", text).text_projected;
        CHECK(target.shape() == Shape{128});
    }

    ScheduleState mid{20, 40};
    real lc = lambda_c(mid), ls = lambda_s(mid);
    auto build = [&](Tape& t) {
        CsaNodes n = model.forward(t, vol, "T1", text);
        Tape::NodeId cls = t.bce_mean(n.probabilities, labels);
        Tape::NodeId kl = kl_alignment_node(t, target, n.f_fusion, 2.0);
        return t.add(t.scale(cls, lc), t.scale(kl, ls));
    };

    // conv biases feed an instance norm, which cancels any constant channel
    // shift — their true gradient is identically zero, and the check must
    // agree on that; the norm's own shift parameter carries the live path
    std::vector<Parameter*> checked = {&model.convs.at("T1").norms[0].beta, &model.gate.fc.b, &model.classifier.b,
                                       &model.cct.blocks[1].attn_ba.proj.b};
    auto res = gradcheck(checked, build, 1e-5, 1e-4, 1e-7);
    CHECK_MESSAGE(res.ok, res.detail);
    auto res_bias = gradcheck({&model.convs.at("T1").convs[0].b}, build, 1e-5, 1e-4, 1e-7);
    CHECK_MESSAGE(res_bias.ok, res_bias.detail);

    // every checked path is live (nonzero analytic gradient)
    for (auto* p : checked) p->zero_grad();
    {
        Tape t;
        t.backward(build(t));
    }
    for (auto* p : checked) {
        real norm = 0;
        for (std::int64_t i = 0; i < p->grad.size(); ++i) norm += p->grad[i] * p->grad[i];
        CHECK(std::sqrt(norm) > 1e-10);
    }
}
