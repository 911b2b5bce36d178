#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "medmap/tensor.hpp"
#include "medmap/volume.hpp"

namespace medmap {

// Minimal PNG writers: 8-bit, non-interlaced, filter 0, zlib-compressed.
// Pixel rows are top-down; gray expects w*h bytes, rgb expects 3*w*h.
void write_png_gray8(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels);
void write_png_rgb8(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels);

// Axial slice z of a grid as grayscale bytes (values clamped to [0,1]).
std::vector<std::uint8_t> slice_to_gray8(const VoxelGrid& g, int z);

// Rasterizes points [N,2] into a size x size RGB canvas: white background,
// one 3x3 dot per point colored from an 8-color palette by label (labels may
// be empty; a degenerate bounding box centers all dots).
std::vector<std::uint8_t> render_scatter_rgb8(const Tensor& points, const std::vector<int>& labels, int size);

}  // namespace medmap
