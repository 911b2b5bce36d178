#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "medmap/text_encoding.hpp"
#include "testutil.hpp"

using namespace medmap;
using medmap::test::gradcheck;

TEST_CASE("tokenize: folding, determinism, reserved CLS, truncation") {
    CHECK(tokenize("").ids == std::vector<int>{0});
    CHECK_FALSE(tokenize("").truncated);

    auto a = tokenize("T1 sequence shows cyst.");
    auto b = tokenize("t1 sequence shows cyst");
    CHECK(a.ids == b.ids);
    CHECK(a.ids.size() == 5);  // CLS + 4 tokens
    CHECK(a.ids[0] == 0);
    for (std::size_t i = 1; i < a.ids.size(); ++i) {
        CHECK(a.ids[i] >= 1);
        CHECK(a.ids[i] < kVocabSize);
    }

    auto c = tokenize("T1 sequence shows cyst.");
    CHECK(c.ids == a.ids);

    // punctuation and mixed separators collapse
    CHECK(tokenize("a,b;;c").ids == tokenize("a b c").ids);
    CHECK(tokenize("hello").ids != tokenize("world").ids);

    auto t = tokenize("one two three four five", 3);
    CHECK(t.ids.size() == 3);
    CHECK(t.truncated);
    CHECK_FALSE(tokenize("one two", 3).truncated);
}

TEST_CASE("text encoder is frozen, deterministic, and order-invariant") {
    TextEncoder e1, e2;
    CHECK(e1.parameter_checksum() == e2.parameter_checksum());

    std::string before = e1.parameter_checksum();
    Tensor v = e1.encode("DWI sequence shows tumor in left anterior superior region.");
    CHECK(v.size() == kTextEmbedDim);
    CHECK(v.all_finite());
    CHECK(e1.parameter_checksum() == before);

    // identical reports produce bitwise-identical embeddings
    Tensor v2 = e1.encode("DWI sequence shows tumor in left anterior superior region.");
    for (std::int64_t i = 0; i < v.size(); ++i) CHECK(v[i] == v2[i]);

    // mean bag: permuting tokens changes nothing
    TokenSequence s = tokenize("alpha beta gamma delta");
    TokenSequence perm = s;
    std::reverse(perm.ids.begin() + 1, perm.ids.end());
    Tensor a = e1.encode(s), b = e1.encode(perm);
    for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

    // different build seed -> different parameters
    TextEncoder other(kTextEncoderSeed + 1);
    CHECK(other.parameter_checksum() != e1.parameter_checksum());

    TokenSequence bad;
    bad.ids = {0, kVocabSize};
    CHECK_THROWS_AS(e1.encode(bad), ValidationError);
}

TEST_CASE("distinct reports separate in embedding space") {
    TextEncoder enc;
    Rng rng(77);
    const char* nouns[] = {"cyst", "edema", "tumor", "mass", "lesion", "focus", "signal", "deficit"};
    int distinct = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::string r1 = std::string(nouns[rng.below(8)]) + " near region " + std::to_string(rng.below(1000));
        std::string r2 = std::string(nouns[rng.below(8)]) + " near region " + std::to_string(1000 + rng.below(1000));
        Tensor a = enc.encode(r1), b = enc.encode(r2);
        for (std::int64_t i = 0; i < a.size(); ++i)
            if (a[i] != b[i]) {
                ++distinct;
                break;
            }
    }
    CHECK(distinct == 100);
}

TEST_CASE("projector: unit norm, identity init, gradients, degenerate input") {
    TextEncoder enc;
    Tensor emb = enc.encode("T2 sequence shows edema in right posterior inferior region.");

    TextProjector proj(kTextEmbedDim, kTextEmbedDim, 9);
    // identity init: projection == plain L2 normalization of the input
    Tensor out = proj.project(emb);
    CHECK(out.l2_norm() == doctest::Approx(1.0).epsilon(1e-12));
    real n = emb.l2_norm();
    for (std::int64_t i = 0; i < emb.size(); ++i) CHECK(out[i] == doctest::Approx(emb[i] / n).epsilon(1e-12));

    // unit vector through the identity projection comes back unchanged
    Tensor unit({kTextEmbedDim});
    unit[3] = 1.0;
    Tensor same = proj.project(unit);
    for (std::int64_t i = 0; i < unit.size(); ++i) CHECK(same[i] == doctest::Approx(unit[i]).epsilon(1e-12));

    // tape and pure paths agree
    {
        Tape t;
        auto node = proj.project(t, emb);
        for (std::int64_t i = 0; i < out.size(); ++i) CHECK(t.val(node)[i] == doctest::Approx(out[i]).epsilon(1e-12));
    }

    // rectangular projection gets a random init but still lands on the sphere
    TextProjector rect(32, kTextEmbedDim, 9);
    CHECK(rect.project(emb).l2_norm() == doctest::Approx(1.0).epsilon(1e-12));

    // finite-difference oracle on the projection weights
    TextProjector small(4, 6, 11);
    Tensor x({6});
    Rng rng(13);
    for (int i = 0; i < 6; ++i) x[i] = rng.normal();
    auto res = gradcheck(small.parameters(), [&](Tape& t) {
        Rng wr(5);
        Tensor wsum({4});
        for (int i = 0; i < 4; ++i) wsum[i] = wr.uniform(-1, 1);
        return t.weighted_sum(small.project(t, x), std::move(wsum));
    });
    CHECK_MESSAGE(res.ok, res.detail);

    // zero weights make the affine output vanish -> degenerate-projection error
    TextProjector dead(4, 6, 11);
    dead.w.value.fill(0);
    CHECK_THROWS_AS(dead.project(x), NumericError);
    Tape t;
    CHECK_THROWS_AS(dead.project(t, x), NumericError);

    CHECK_THROWS_AS(proj.project(Tensor({3})), ValidationError);
}
