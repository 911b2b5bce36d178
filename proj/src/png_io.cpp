#include "medmap/png_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "medmap/common.hpp"

namespace medmap {

namespace {

void push_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

void push_chunk(std::vector<std::uint8_t>& out, const char type[5], const std::vector<std::uint8_t>& payload) {
    push_be32(out, std::uint32_t(payload.size()));
    std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    std::uint32_t crc = std::uint32_t(::crc32(0L, out.data() + start, uInt(out.size() - start)));
    push_be32(out, crc);
}

void write_png(const std::string& path, int width, int height, int channels,
               const std::vector<std::uint8_t>& pixels) {
    if (width < 1 || height < 1) throw ValidationError("png: dimensions must be positive");
    std::size_t expected = std::size_t(width) * std::size_t(height) * std::size_t(channels);
    if (pixels.size() != expected)
        throw ValidationError("png: pixel buffer has " + std::to_string(pixels.size()) + " bytes, expected " +
                              std::to_string(expected));

    // scanlines, each prefixed with filter byte 0
    std::size_t stride = std::size_t(width) * std::size_t(channels);
    std::vector<std::uint8_t> raw;
    raw.reserve((stride + 1) * std::size_t(height));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels.begin() + std::size_t(y) * stride, pixels.begin() + (std::size_t(y) + 1) * stride);
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> idat(bound);
    if (compress2(idat.data(), &bound, raw.data(), uLong(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK)
        throw IoError("png: zlib compression failed");
    idat.resize(bound);

    std::vector<std::uint8_t> file = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    push_be32(ihdr, std::uint32_t(width));
    push_be32(ihdr, std::uint32_t(height));
    ihdr.push_back(8);                                   // bit depth
    ihdr.push_back(channels == 1 ? std::uint8_t(0) : std::uint8_t(2));  // gray / truecolor
    ihdr.push_back(0);                                   // compression
    ihdr.push_back(0);                                   // filter
    ihdr.push_back(0);                                   // interlace
    push_chunk(file, "IHDR", ihdr);
    push_chunk(file, "IDAT", idat);
    push_chunk(file, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open PNG for writing: " + path);
    f.write(reinterpret_cast<const char*>(file.data()), std::streamsize(file.size()));
    if (!f) throw IoError("failed writing PNG: " + path);
}

}  // namespace

void write_png_gray8(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels) {
    write_png(path, width, height, 1, pixels);
}

void write_png_rgb8(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels) {
    write_png(path, width, height, 3, pixels);
}

std::vector<std::uint8_t> slice_to_gray8(const VoxelGrid& g, int z) {
    if (z < 0 || z >= g.d) throw ValidationError("slice_to_gray8: slice index out of range");
    std::vector<std::uint8_t> px(std::size_t(g.h) * std::size_t(g.w));
    for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x) {
            float v = std::clamp(g.at(z, y, x), 0.0f, 1.0f);
            px[std::size_t(y) * std::size_t(g.w) + std::size_t(x)] = std::uint8_t(std::lround(v * 255.0f));
        }
    return px;
}

std::vector<std::uint8_t> render_scatter_rgb8(const Tensor& points, const std::vector<int>& labels, int size) {
    if (points.rank() != 2 || points.dim(1) != 2) throw ValidationError("render_scatter: points must be [N,2]");
    if (size < 16) throw ValidationError("render_scatter: canvas too small");
    int n = points.dim(0);
    if (!labels.empty() && int(labels.size()) != n)
        throw ValidationError("render_scatter: label count does not match points");

    static constexpr std::uint8_t kPalette[8][3] = {{31, 119, 180}, {255, 127, 14},  {44, 160, 44},  {214, 39, 40},
                                                    {148, 103, 189}, {140, 86, 75},  {227, 119, 194}, {127, 127, 127}};
    std::vector<std::uint8_t> canvas(std::size_t(size) * std::size_t(size) * 3, 255);

    real min_x = points[0], max_x = points[0], min_y = points[1], max_y = points[1];
    for (int i = 0; i < n; ++i) {
        min_x = std::min(min_x, points[std::int64_t(i) * 2]);
        max_x = std::max(max_x, points[std::int64_t(i) * 2]);
        min_y = std::min(min_y, points[std::int64_t(i) * 2 + 1]);
        max_y = std::max(max_y, points[std::int64_t(i) * 2 + 1]);
    }
    real span_x = std::max(max_x - min_x, real(1e-12));
    real span_y = std::max(max_y - min_y, real(1e-12));
    int margin = std::max(2, size / 20);
    int usable = size - 2 * margin;

    for (int i = 0; i < n; ++i) {
        int cx = margin + int(std::lround((points[std::int64_t(i) * 2] - min_x) / span_x * usable));
        int cy = margin + int(std::lround((max_y - points[std::int64_t(i) * 2 + 1]) / span_y * usable));
        const std::uint8_t* color = kPalette[labels.empty() ? 0 : ((labels[std::size_t(i)] % 8) + 8) % 8];
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                int x = std::clamp(cx + dx, 0, size - 1);
                int y = std::clamp(cy + dy, 0, size - 1);
                std::uint8_t* px = canvas.data() + (std::size_t(y) * std::size_t(size) + std::size_t(x)) * 3;
                px[0] = color[0];
                px[1] = color[1];
                px[2] = color[2];
            }
    }
    return canvas;
}

}  // namespace medmap
