#include "medmap/volume.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

namespace medmap {

bool VoxelGrid::all_finite() const {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

namespace {

void put_u16(std::string& out, std::uint16_t x) {
    out.push_back(static_cast<char>(x & 0xFF));
    out.push_back(static_cast<char>((x >> 8) & 0xFF));
}

void put_u32(std::string& out, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}

class Cursor {
  public:
    Cursor(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

    std::uint16_t u16() { return static_cast<std::uint16_t>(byte() | (byte() << 8)); }
    std::uint32_t u32() {
        std::uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(byte()) << (8 * i);
        return x;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void read_floats(float* dst, std::size_t count) {
        need(count * 4);
        std::memcpy(dst, buf_.data() + pos_, count * 4);
        pos_ += count * 4;
    }
    std::size_t remaining() const { return buf_.size() - pos_; }

  private:
    std::uint32_t byte() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    void need(std::size_t n) {
        if (pos_ + n > buf_.size())
            throw IoError("truncated MVOL file " + path_ + ": need " + std::to_string(pos_ + n) + " bytes, have " +
                          std::to_string(buf_.size()));
    }
    const std::string& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void write_mvol(const VolumeRecord& record, const std::string& path) {
    const VoxelGrid& g = record.voxels;
    if (g.d < 1 || g.h < 1 || g.w < 1 || g.size() != static_cast<std::int64_t>(g.v.size()))
        throw ValidationError("write_mvol: inconsistent voxel dims for record " + record.id);
    if (!g.all_finite()) throw ValidationError("write_mvol: non-finite voxels in record " + record.id);
    for (auto l : record.labels)
        if (l > 1) throw ValidationError("write_mvol: labels must be 0/1 in record " + record.id);
    if (record.modality.size() > 0xFFFF || record.labels.size() > 0xFFFF)
        throw ValidationError("write_mvol: oversized modality/label fields");

    std::string out;
    out.reserve(32 + record.modality.size() + record.labels.size() + record.report.size() + g.v.size() * 4);
    out += "MVOL";
    put_u32(out, 1);
    put_u32(out, static_cast<std::uint32_t>(g.d));
    put_u32(out, static_cast<std::uint32_t>(g.h));
    put_u32(out, static_cast<std::uint32_t>(g.w));
    put_u16(out, static_cast<std::uint16_t>(record.modality.size()));
    out += record.modality;
    put_u16(out, static_cast<std::uint16_t>(record.labels.size()));
    for (auto l : record.labels) out.push_back(static_cast<char>(l));
    put_u32(out, static_cast<std::uint32_t>(record.report.size()));
    out += record.report;
    std::size_t head = out.size();
    out.resize(head + g.v.size() * 4);
    static_assert(std::numeric_limits<float>::is_iec559 && sizeof(float) == 4);
    std::memcpy(out.data() + head, g.v.data(), g.v.size() * 4);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write: " + path);
}

VolumeRecord read_mvol(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Cursor c(buf, path);

    if (c.bytes(4) != "MVOL") throw IoError("bad magic in " + path + ": expected \"MVOL\"");
    std::uint32_t version = c.u32();
    if (version != 1) throw IoError("unsupported MVOL version " + std::to_string(version) + " in " + path);

    VolumeRecord rec;
    std::uint32_t d = c.u32(), h = c.u32(), w = c.u32();
    rec.modality = c.bytes(c.u16());
    std::uint16_t k = c.u16();
    rec.labels.resize(k);
    std::string lab = c.bytes(k);
    std::memcpy(rec.labels.data(), lab.data(), k);
    rec.report = c.bytes(c.u32());

    std::int64_t n = std::int64_t(d) * h * w;
    if (static_cast<std::int64_t>(c.remaining()) != n * 4)
        throw IoError("truncated MVOL payload in " + path + ": expected " + std::to_string(n * 4) + " voxel bytes, have " +
                      std::to_string(c.remaining()));
    rec.voxels = VoxelGrid(static_cast<int>(d), static_cast<int>(h), static_cast<int>(w));
    c.read_floats(rec.voxels.v.data(), static_cast<std::size_t>(n));

    rec.id = std::filesystem::path(path).stem().string();
    return rec;
}

VoxelGrid normalize_volume(const VoxelGrid& g) {
    if (!g.all_finite()) throw ValidationError("normalize_volume: non-finite input");
    float lo = g.v.empty() ? 0.0f : g.v[0], hi = lo;
    for (float x : g.v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    VoxelGrid out(g.d, g.h, g.w);
    if (hi > lo) {
        float inv = 1.0f / (hi - lo);
        for (std::size_t i = 0; i < g.v.size(); ++i) out.v[i] = (g.v[i] - lo) * inv;
    }
    return out;
}

VoxelGrid resize_volume(const VoxelGrid& g, int td, int th, int tw) {
    if (td < 2 || th < 2 || tw < 2) throw ValidationError("resize_volume: target dims must be >= 2");
    if (g.d < 1 || g.h < 1 || g.w < 1) throw ValidationError("resize_volume: empty source");
    if (td == g.d && th == g.h && tw == g.w) return g;

    VoxelGrid out(td, th, tw);
    auto src_coord = [](int t, int tn, int sn) {
        if (sn == 1) return 0.0;
        return double(t) * (sn - 1) / (tn - 1);
    };
    for (int z = 0; z < td; ++z) {
        double sz = src_coord(z, td, g.d);
        int z0 = static_cast<int>(sz), z1 = std::min(z0 + 1, g.d - 1);
        double fz = sz - z0;
        for (int y = 0; y < th; ++y) {
            double sy = src_coord(y, th, g.h);
            int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, g.h - 1);
            double fy = sy - y0;
            for (int x = 0; x < tw; ++x) {
                double sx = src_coord(x, tw, g.w);
                int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, g.w - 1);
                double fx = sx - x0;
                double c00 = g.at(z0, y0, x0) * (1 - fx) + g.at(z0, y0, x1) * fx;
                double c01 = g.at(z0, y1, x0) * (1 - fx) + g.at(z0, y1, x1) * fx;
                double c10 = g.at(z1, y0, x0) * (1 - fx) + g.at(z1, y0, x1) * fx;
                double c11 = g.at(z1, y1, x0) * (1 - fx) + g.at(z1, y1, x1) * fx;
                double c0 = c00 * (1 - fy) + c01 * fy;
                double c1 = c10 * (1 - fy) + c11 * fy;
                out.at(z, y, x) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
            }
        }
    }
    return out;
}

Tensor grid_to_tensor(const VoxelGrid& g) {
    Tensor t({g.d, g.h, g.w});
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<real>(g.v[static_cast<std::size_t>(i)]);
    return t;
}

VoxelGrid tensor_to_grid(const Tensor& t) {
    if (t.rank() != 3) throw ValidationError("tensor_to_grid: expected [D,H,W], got " + shape_str(t.shape()));
    VoxelGrid g(t.dim(0), t.dim(1), t.dim(2));
    for (std::int64_t i = 0; i < t.size(); ++i) g.v[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
    return g;
}

}  // namespace medmap
