#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "medmap/contrastive.hpp"
#include "medmap/phantom.hpp"
#include "testutil.hpp"

using namespace medmap;
using medmap::test::gradcheck;
using medmap::test::random_tensor;
using medmap::test::TempDir;

namespace {

Tensor unit_rows(int n, int e, Rng& rng) {
    Tensor x = random_tensor({n, e}, rng, 1.0);
    for (int i = 0; i < n; ++i) {
        real norm = 0.0;
        for (int j = 0; j < e; ++j) norm += x[std::int64_t(i) * e + j] * x[std::int64_t(i) * e + j];
        norm = std::sqrt(norm);
        for (int j = 0; j < e; ++j) x[std::int64_t(i) * e + j] /= norm;
    }
    return x;
}

}  // namespace

TEST_CASE("similarity matrix: cosine over temperature with strict preconditions") {
    // orthonormal rows against themselves at temperature 1 give the identity
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    Tensor s = similarity_matrix(eye, eye, 1.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(s[i * 3 + j] == (i == j ? 1.0 : 0.0));

    // halving the temperature doubles every entry
    Rng rng(5);
    Tensor fv = unit_rows(4, 8, rng), ft = unit_rows(4, 8, rng);
    Tensor s1 = similarity_matrix(fv, ft, 1.0), s2 = similarity_matrix(fv, ft, 0.5);
    for (std::int64_t i = 0; i < s1.size(); ++i) CHECK(s2[i] == doctest::Approx(2.0 * s1[i]).epsilon(1e-12));

    // hand-checked 2D pairs at 0 and 90 degrees against rows rotated by 45
    real r = std::sqrt(0.5);
    Tensor a = Tensor::of({1.0, 0.0, 0.0, 1.0}).reshaped({2, 2});
    Tensor b = Tensor::of({r, r, -r, r}).reshaped({2, 2});
    Tensor sh = similarity_matrix(a, b, 1.0);
    CHECK(sh[0] == doctest::Approx(r).epsilon(1e-12));    // <e_x, 45deg>
    CHECK(sh[1] == doctest::Approx(-r).epsilon(1e-12));   // <e_x, 135deg>
    CHECK(sh[2] == doctest::Approx(r).epsilon(1e-12));    // <e_y, 45deg>
    CHECK(sh[3] == doctest::Approx(r).epsilon(1e-12));    // <e_y, 135deg>

    CHECK_THROWS_AS(similarity_matrix(unit_rows(3, 8, rng), unit_rows(2, 8, rng), 1.0), ValidationError);
    CHECK_THROWS_AS(similarity_matrix(fv, ft, 0.0), ValidationError);
    CHECK_THROWS_AS(similarity_matrix(fv, ft, -1.0), ValidationError);
    Tensor not_unit = Tensor::of({1.0, 1.0}).reshaped({1, 2});
    CHECK_THROWS_AS(similarity_matrix(not_unit, not_unit, 1.0), ValidationError);
}

TEST_CASE("directional losses: degenerate, uniform, margin, and shift-invariance oracles") {
    // single candidate: softmax over one entry is certainty
    Tensor s1 = Tensor::of({3.7}).reshaped({1, 1});
    CHECK(loss_v2t(s1) == 0.0);
    CHECK(loss_t2v(s1) == 0.0);

    // all-equal similarities: uniform softmax, loss = ln N
    Tensor u = Tensor::full({4, 4}, 0.3);
    CHECK(loss_v2t(u) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(loss_t2v(u) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(std::abs(loss_v2t(u) - 1.386294) < 1e-6);

    // diagonal margin m with zero off-diagonal: every row gives ln(1 + 3 e^{-m});
    // monotone decrease toward 0 as the margin grows
    real prev = std::numeric_limits<real>::infinity();
    for (real m : {2.0, 5.0, 10.0}) {
        Tensor s({4, 4});
        for (int i = 0; i < 4; ++i) s[i * 4 + i] = m;
        real expect = std::log(1.0 + 3.0 * std::exp(-m));
        CHECK(loss_v2t(s) == doctest::Approx(expect).epsilon(1e-12));
        CHECK(loss_v2t(s) < prev);
        prev = loss_v2t(s);
    }
    CHECK(prev < 2e-4);

    // adding a constant to one row leaves that direction's loss unchanged
    Rng rng(9);
    Tensor s = random_tensor({5, 5}, rng, 2.0);
    Tensor shifted = s;
    for (int j = 0; j < 5; ++j) shifted[2 * 5 + j] += 13.25;
    CHECK(loss_v2t(shifted) == doctest::Approx(loss_v2t(s)).epsilon(1e-12));

    Tensor inf = Tensor::full({2, 2}, std::numeric_limits<real>::infinity());
    CHECK_THROWS_AS(loss_v2t(inf), NumericError);
    CHECK_THROWS_AS(loss_v2t(Tensor({2, 3})), ValidationError);
}

TEST_CASE("symmetric loss: definition, exact swap symmetry, uniform batch value") {
    Rng rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        int n = 2 + static_cast<int>(rng.below(7));
        Tensor fv = unit_rows(n, 16, rng), ft = unit_rows(n, 16, rng);
        Tensor s = similarity_matrix(fv, ft, 0.07);
        real sym = symmetric_loss(fv, ft, 0.07);
        CHECK(sym == doctest::Approx((loss_v2t(s) + loss_t2v(s)) / 2.0).epsilon(1e-12));
        // swapping the batch arguments is exact, not approximate
        CHECK(symmetric_loss(ft, fv, 0.07) == sym);
        CHECK(sym >= 0.0);
    }

    // identical rows make every similarity equal -> ln 4 on a batch of 4
    Rng rng2(22);
    Tensor u = unit_rows(1, 16, rng2), v = unit_rows(1, 16, rng2);
    Tensor fv({4, 16}), ft({4, 16});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 16; ++j) {
            fv[i * 16 + j] = u[j];
            ft[i * 16 + j] = v[j];
        }
    CHECK(std::abs(symmetric_loss(fv, ft, 0.07) - 1.386294) < 1e-6);
}

TEST_CASE("tape path: matches the pure loss and differentiates cleanly") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        int n = 2 + static_cast<int>(rng.below(5));
        Tensor fv = unit_rows(n, 12, rng), ft = unit_rows(n, 12, rng);
        Tape t;
        real node_val = t.scalar(symmetric_loss_node(t, t.constant(fv), t.constant(ft), 0.07));
        CHECK(node_val == doctest::Approx(symmetric_loss(fv, ft, 0.07)).epsilon(1e-12));
    }

    // gradients through normalization + loss match finite differences
    Parameter fv_raw("fv", random_tensor({3, 6}, rng, 1.0));
    Tensor ft = unit_rows(3, 6, rng);
    auto build = [&](Tape& t) {
        return symmetric_loss_node(t, t.l2_normalize(t.use(fv_raw)), t.constant(ft), 0.07);
    };
    auto res = gradcheck({&fv_raw}, build);
    INFO(res.detail);
    CHECK(res.ok);

    Tape t;
    CHECK_THROWS_AS(symmetric_loss_node(t, t.constant(ft), t.constant(ft), 0.0), ValidationError);
}

TEST_CASE("pretraining: loss decreases, text stays frozen, runs reproduce bitwise") {
    TempDir dir("pretrain");
    PhantomSpec spec = standard_benchmark();
    spec.n_records = 64;
    spec.modalities = {"T1"};
    spec.lesion_intensity_by_modality = {{"T1", {0.85, 0.05}}};
    spec.seed = 314;
    DatasetManifest manifest = synthesize_dataset(spec, dir.path().string());

    TextEncoder text;
    PretrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 8;
    cfg.seed = 1;

    ModalityExpertBank bank({"T1"}, 99);
    PretrainResult run = pretrain_modality(manifest, "T1", bank, text, cfg);

    REQUIRE(run.curve.size() == 20);
    CHECK(run.curve.back().loss < run.curve.front().loss);  // learning happened
    for (const auto& pt : run.curve) CHECK(std::isfinite(pt.loss));
    CHECK(run.text_checksum_before == run.text_checksum_after);
    CHECK(run.text_checksum_before == text.parameter_checksum());

    const CheckpointComponent* expert_comp = run.checkpoint.find("expert.T1");
    const CheckpointComponent* text_comp = run.checkpoint.find("text_encoder");
    REQUIRE(expert_comp != nullptr);
    REQUIRE(text_comp != nullptr);
    CHECK(!expert_comp->frozen);
    CHECK(text_comp->frozen);
    CHECK(run.checkpoint.metric_history.size() == 20);

    // identical seed and fresh expert bank reproduce the trained parameters bitwise
    ModalityExpertBank bank2({"T1"}, 99);
    PretrainResult run2 = pretrain_modality(manifest, "T1", bank2, text, cfg);
    CHECK(component_checksum(*run2.checkpoint.find("expert.T1")) == component_checksum(*expert_comp));
    for (std::size_t i = 0; i < run.curve.size(); ++i) CHECK(run2.curve[i].loss == run.curve[i].loss);

    // retrieval utility is structurally sound on the held-out split
    std::vector<VolumeRecord> val = load_records(manifest, "val");
    RetrievalResult ret = text_to_volume_retrieval(val, bank, text);
    CHECK(ret.total == static_cast<int>(val.size()));
    CHECK(ret.chance == doctest::Approx(1.0 / val.size()));
    CHECK(ret.top1 == doctest::Approx(static_cast<real>(ret.correct) / ret.total));

    // loss curve CSV
    std::string csv_path = dir.str("curve.csv");
    write_loss_curve(csv_path, run.curve);
    std::ifstream f(csv_path);
    std::string header;
    std::getline(f, header);
    CHECK(header == "epoch,loss");
    int lines = 0;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 20);

    PretrainConfig too_big = cfg;
    too_big.batch_size = 1000;
    CHECK_THROWS_WITH_AS(pretrain_modality(manifest, "T1", bank, text, too_big),
                         doctest::Contains("insufficient records"), ValidationError);
}
