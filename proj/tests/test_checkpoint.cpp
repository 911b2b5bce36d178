#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "medmap/checkpoint.hpp"
#include "testutil.hpp"

using namespace medmap;
using medmap::test::random_tensor;
using medmap::test::TempDir;

namespace {

ModelCheckpoint random_checkpoint(Rng& rng) {
    ModelCheckpoint ckpt;
    ckpt.config = {{"stage", "test"}, {"lr", rng.uniform()}, {"seed", 42}};
    int epochs = 1 + static_cast<int>(rng.below(4));
    for (int e = 0; e < epochs; ++e)
        ckpt.metric_history.push_back({{"epoch", e}, {"loss", rng.uniform()}});
    int ncomp = 1 + static_cast<int>(rng.below(3));
    for (int c = 0; c < ncomp; ++c) {
        auto& comp = ckpt.add_component("comp" + std::to_string(c), rng.below(2) == 0);
        int nparams = 1 + static_cast<int>(rng.below(4));
        for (int p = 0; p < nparams; ++p) {
            Shape shape;
            int r = 1 + static_cast<int>(rng.below(3));
            for (int a = 0; a < r; ++a) shape.push_back(1 + static_cast<int>(rng.below(5)));
            comp.params.push_back(
                CheckpointParam{"comp" + std::to_string(c) + ".p" + std::to_string(p), random_tensor(shape, rng)});
        }
    }
    return ckpt;
}

bool tensors_bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return a.size() == 0 || std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(real)) == 0;
}

}  // namespace

TEST_CASE("checkpoint container: randomized round-trips are bit-exact") {
    TempDir dir("ckpt_rt");
    Rng rng(404);
    for (int trial = 0; trial < 25; ++trial) {
        ModelCheckpoint ckpt = random_checkpoint(rng);
        std::string path = dir.str("ckpt" + std::to_string(trial) + ".mmck");
        save_checkpoint(ckpt, path);
        ModelCheckpoint back = load_checkpoint(path);

        CHECK(back.config == ckpt.config);
        CHECK(back.metric_history == ckpt.metric_history);
        REQUIRE(back.components.size() == ckpt.components.size());
        for (std::size_t c = 0; c < ckpt.components.size(); ++c) {
            CHECK(back.components[c].name == ckpt.components[c].name);
            CHECK(back.components[c].frozen == ckpt.components[c].frozen);
            REQUIRE(back.components[c].params.size() == ckpt.components[c].params.size());
            for (std::size_t p = 0; p < ckpt.components[c].params.size(); ++p) {
                CHECK(back.components[c].params[p].name == ckpt.components[c].params[p].name);
                CHECK(tensors_bitwise_equal(back.components[c].params[p].value, ckpt.components[c].params[p].value));
            }
            CHECK(component_checksum(back.components[c]) == component_checksum(ckpt.components[c]));
        }

        // saving the loaded copy reproduces the file byte for byte
        std::string path2 = dir.str("ckpt" + std::to_string(trial) + "b.mmck");
        save_checkpoint(back, path2);
        std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
        std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        CHECK(b1 == b2);
    }
}

TEST_CASE("checkpoint container: tampering and truncation are detected") {
    TempDir dir("ckpt_tamper");
    Rng rng(77);
    ModelCheckpoint ckpt = random_checkpoint(rng);
    std::string path = dir.str("victim.mmck");
    save_checkpoint(ckpt, path);

    std::ifstream f(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    f.close();

    auto write_bytes = [&](const std::string& data) {
        std::ofstream o(path, std::ios::binary | std::ios::trunc);
        o.write(data.data(), static_cast<std::streamsize>(data.size()));
    };

    // flip one bit inside the blob section (the very last byte is blob data)
    std::string corrupt = bytes;
    corrupt.back() = static_cast<char>(corrupt.back() ^ 0x01);
    write_bytes(corrupt);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("checksum mismatch"), IoError);

    // truncate mid-blob
    write_bytes(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(load_checkpoint(path), IoError);

    // wrong magic
    corrupt = bytes;
    corrupt[0] = 'X';
    write_bytes(corrupt);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("bad magic"), IoError);

    // unsupported version
    corrupt = bytes;
    corrupt[4] = 9;
    write_bytes(corrupt);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), IoError);

    CHECK_THROWS_AS(load_checkpoint(dir.str("missing.mmck")), IoError);
}

TEST_CASE("checkpoint parameters: snapshot and strict restore") {
    Rng rng(15);
    Parameter a("m.a", random_tensor({3, 4}, rng));
    Parameter b("m.b", random_tensor({5}, rng));

    ModelCheckpoint ckpt;
    auto& comp = ckpt.add_component("m", false);
    snapshot_params(comp, {&a, &b});
    std::string sum = component_checksum(comp);

    Tensor a_orig = a.value;
    a.value.fill(0.0);
    b.value.fill(-1.0);
    restore_params(comp, {&a, &b});
    CHECK(tensors_bitwise_equal(a.value, a_orig));
    CHECK(component_checksum(comp) == sum);

    // order of the live list must not matter (matched by name)
    a.value.fill(7.0);
    restore_params(comp, {&b, &a});
    CHECK(tensors_bitwise_equal(a.value, a_orig));

    // strictness: count, name, and shape mismatches all throw
    CHECK_THROWS_AS(restore_params(comp, {&a}), ValidationError);
    Parameter wrong_name("m.c", random_tensor({5}, rng));
    CHECK_THROWS_AS(restore_params(comp, {&a, &wrong_name}), ValidationError);
    Parameter wrong_shape("m.b", random_tensor({6}, rng));
    CHECK_THROWS_AS(restore_params(comp, {&a, &wrong_shape}), ValidationError);

    // checksum reacts to any value change
    comp.params[0].value[0] += 1.0;
    CHECK(component_checksum(comp) != sum);

    CHECK_THROWS_AS(ckpt.add_component("m", true), ValidationError);
    CHECK(ckpt.find("m") != nullptr);
    CHECK(ckpt.find("nope") == nullptr);
}
