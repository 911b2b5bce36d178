#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <zlib.h>

#include <cstring>
#include <fstream>

#include "doctest.h"
#include "medmap/png_io.hpp"
#include "medmap/run_config.hpp"
#include "testutil.hpp"

using namespace medmap;
using namespace medmap::test;
using nlohmann::json;

namespace {

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

struct Chunk {
    std::string type;
    std::vector<std::uint8_t> payload;
};

// Walks the chunk list, verifying every CRC against an independent recomputation.
std::vector<Chunk> parse_png(const std::vector<std::uint8_t>& file) {
    static const std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    REQUIRE(file.size() >= 8);
    CHECK(std::memcmp(file.data(), kSig, 8) == 0);
    std::vector<Chunk> chunks;
    std::size_t at = 8;
    while (at < file.size()) {
        REQUIRE(at + 12 <= file.size());
        std::uint32_t len = be32(file.data() + at);
        REQUIRE(at + 12 + len <= file.size());
        Chunk c;
        c.type.assign(file.begin() + long(at) + 4, file.begin() + long(at) + 8);
        c.payload.assign(file.begin() + long(at) + 8, file.begin() + long(at) + 8 + long(len));
        std::uint32_t stored = be32(file.data() + at + 8 + len);
        std::uint32_t computed = std::uint32_t(::crc32(0L, file.data() + at + 4, uInt(4 + len)));
        CHECK(stored == computed);
        chunks.push_back(std::move(c));
        at += 12 + len;
    }
    return chunks;
}

}  // namespace

TEST_CASE("png writer emits structurally valid grayscale files") {
    TempDir dir("png");
    const int w = 5, h = 3;
    std::vector<std::uint8_t> px(w * h);
    for (int i = 0; i < w * h; ++i) px[std::size_t(i)] = std::uint8_t(i * 17);
    write_png_gray8(dir.str("g.png"), w, h, px);

    auto chunks = parse_png(read_bytes(dir.str("g.png")));
    REQUIRE(chunks.size() == 3);
    CHECK(chunks[0].type == "IHDR");
    CHECK(chunks[1].type == "IDAT");
    CHECK(chunks[2].type == "IEND");
    CHECK(chunks[2].payload.empty());

    REQUIRE(chunks[0].payload.size() == 13);
    CHECK(be32(chunks[0].payload.data()) == std::uint32_t(w));
    CHECK(be32(chunks[0].payload.data() + 4) == std::uint32_t(h));
    CHECK(chunks[0].payload[8] == 8);   // bit depth
    CHECK(chunks[0].payload[9] == 0);   // grayscale
    CHECK(chunks[0].payload[12] == 0);  // non-interlaced

    // inflate the image data and compare to the filtered scanlines
    std::vector<std::uint8_t> raw((std::size_t(w) + 1) * h);
    uLongf raw_len = uLongf(raw.size());
    REQUIRE(uncompress(raw.data(), &raw_len, chunks[1].payload.data(), uLong(chunks[1].payload.size())) == Z_OK);
    REQUIRE(raw_len == raw.size());
    for (int y = 0; y < h; ++y) {
        CHECK(raw[std::size_t(y) * (w + 1)] == 0);  // filter byte
        for (int x = 0; x < w; ++x)
            CHECK(raw[std::size_t(y) * (w + 1) + 1 + std::size_t(x)] == px[std::size_t(y) * w + std::size_t(x)]);
    }

    CHECK_THROWS_AS(write_png_gray8(dir.str("bad.png"), 4, 4, px), ValidationError);
    CHECK_THROWS_AS(write_png_gray8(dir.str("bad.png"), 0, 3, px), ValidationError);
}

TEST_CASE("png writer emits structurally valid RGB files") {
    TempDir dir("png_rgb");
    const int w = 4, h = 2;
    std::vector<std::uint8_t> px(std::size_t(w) * h * 3);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::uint8_t(7 * i + 1);
    write_png_rgb8(dir.str("c.png"), w, h, px);

    auto chunks = parse_png(read_bytes(dir.str("c.png")));
    REQUIRE(chunks.size() == 3);
    CHECK(chunks[0].payload[9] == 2);  // truecolor

    std::vector<std::uint8_t> raw((std::size_t(w) * 3 + 1) * h);
    uLongf raw_len = uLongf(raw.size());
    REQUIRE(uncompress(raw.data(), &raw_len, chunks[1].payload.data(), uLong(chunks[1].payload.size())) == Z_OK);
    REQUIRE(raw_len == raw.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w * 3; ++x)
            CHECK(raw[std::size_t(y) * (std::size_t(w) * 3 + 1) + 1 + std::size_t(x)] ==
                  px[std::size_t(y) * w * 3 + std::size_t(x)]);
}

TEST_CASE("slice and scatter rasterizers") {
    VoxelGrid g(2, 2, 3);
    g.at(1, 0, 0) = 0.0f;
    g.at(1, 0, 1) = 0.5f;
    g.at(1, 0, 2) = 1.0f;
    g.at(1, 1, 0) = -1.0f;  // clamps low
    g.at(1, 1, 1) = 2.0f;   // clamps high
    auto px = slice_to_gray8(g, 1);
    REQUIRE(px.size() == 6);
    CHECK(px[0] == 0);
    CHECK(px[1] == 128);
    CHECK(px[2] == 255);
    CHECK(px[3] == 0);
    CHECK(px[4] == 255);
    CHECK_THROWS_AS(slice_to_gray8(g, 2), ValidationError);

    Tensor pts({2, 2});
    pts[0] = -1.0;
    pts[1] = -1.0;
    pts[2] = 1.0;
    pts[3] = 1.0;
    auto canvas = render_scatter_rgb8(pts, {0, 3}, 100);
    REQUIRE(canvas.size() == 100 * 100 * 3);
    int colored = 0;
    for (std::size_t i = 0; i < canvas.size(); i += 3)
        if (canvas[i] != 255 || canvas[i + 1] != 255 || canvas[i + 2] != 255) ++colored;
    CHECK(colored >= 2 * 9 - 3);  // two 3x3 dots, possibly clipped at edges

    // a single point sits at the margin corner with its palette color
    Tensor one({1, 2});
    auto single = render_scatter_rgb8(one, {1}, 100);
    int margin = 5;
    std::size_t at = (std::size_t(margin) * 100 + std::size_t(margin)) * 3;
    CHECK(single[at] == 255);
    CHECK(single[at + 1] == 127);
    CHECK(single[at + 2] == 14);

    CHECK_THROWS_AS(render_scatter_rgb8(pts, {0}, 100), ValidationError);
    CHECK_THROWS_AS(render_scatter_rgb8(pts, {0, 1}, 4), ValidationError);
    CHECK_THROWS_AS(render_scatter_rgb8(Tensor({2, 3}), {0, 1}, 100), ValidationError);
}

TEST_CASE("config parsing: defaults, overrides, unknown keys") {
    PhantomSpec def = phantom_spec_from_json(json::object());
    CHECK(def.n_records == 858);
    CHECK(def.grid_size == 32);
    CHECK(def.modalities.size() == 3);
    CHECK(!def.lesion_intensity_by_modality.empty());

    PhantomSpec custom = phantom_spec_from_json(json{{"n_records", 24},
                                                     {"modalities", {"T1"}},
                                                     {"seed", 7},
                                                     {"lesion_intensity_by_modality", {{"T1", {0.8, 0.1}}}}});
    CHECK(custom.n_records == 24);
    CHECK(custom.modalities == std::vector<std::string>{"T1"});
    CHECK(custom.seed == 7);
    CHECK(custom.lesion_intensity_by_modality.at("T1").first == 0.8);

    PhantomSpec round = phantom_spec_from_json(to_json(custom));
    CHECK(round.n_records == custom.n_records);
    CHECK(round.lesion_intensity_by_modality == custom.lesion_intensity_by_modality);

    CHECK_THROWS_AS(phantom_spec_from_json(json{{"gird_size", 32}}), ValidationError);
    CHECK_THROWS_AS(phantom_spec_from_json(json{{"lesion_intensity_by_modality", {{"T1", {0.8}}}}}),
                    ValidationError);
    CHECK_THROWS_AS(phantom_spec_from_json(json::array()), ValidationError);

    PretrainConfig pt = pretrain_config_from_json(json{{"epochs", 3}, {"temperature", 0.1}});
    CHECK(pt.epochs == 3);
    CHECK(pt.temperature == 0.1);
    CHECK(pt.batch_size == 16);
    CHECK_THROWS_AS(pretrain_config_from_json(json{{"epoch", 3}}), ValidationError);

    FinetuneConfig ft = finetune_config_from_json(
        json{{"epochs", 2}, {"kl_direction", "reverse"}, {"use_csa", false}, {"use_cct", false}});
    CHECK(ft.epochs == 2);
    CHECK(ft.kl_direction == KlDirection::reverse);
    CHECK(!ft.flags.use_csa);
    CHECK(ft.flags.use_pretrained);  // untouched default
    CHECK_THROWS_AS(finetune_config_from_json(json{{"kl_direction", "sideways"}}), ValidationError);
    CHECK_THROWS_AS(finetune_config_from_json(json{{"use_cst", true}}), ValidationError);

    FinetuneConfig ft_round = finetune_config_from_json(to_json(ft));
    CHECK(ft_round.kl_direction == KlDirection::reverse);
    CHECK(ft_round.flags.use_csa == ft.flags.use_csa);

    AblateSettings ab = ablate_settings_from_json(json{{"epochs", 4}, {"seeds", {9, 10}}});
    CHECK(ab.base.epochs == 4);
    CHECK(ab.seeds == std::vector<std::uint64_t>{9, 10});
    CHECK(ablate_settings_from_json(json::object()).seeds == std::vector<std::uint64_t>{1, 2, 3});
    CHECK_THROWS_AS(ablate_settings_from_json(json{{"seeds", json::array()}}), ValidationError);
    CHECK_THROWS_AS(ablate_settings_from_json(json{{"rows", 4}}), ValidationError);
}

TEST_CASE("config files: load and resolved-write round-trip") {
    TempDir dir("cfg");
    write_resolved_config(dir.str("a.json"), json{{"epochs", 5}, {"seed", 1}});
    json loaded = load_json_file(dir.str("a.json"));
    CHECK(loaded.at("epochs") == 5);

    std::ofstream bad(dir.str("bad.json"));
    bad << "{ not json";
    bad.close();
    CHECK_THROWS_AS(load_json_file(dir.str("bad.json")), ValidationError);
    CHECK_THROWS_AS(load_json_file(dir.str("missing.json")), IoError);
}
