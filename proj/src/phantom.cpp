#include "medmap/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "medmap/rng.hpp"
#include "medmap/sha256.hpp"

namespace medmap {

namespace {

const std::vector<std::string>& class_vocab() {
    static const std::vector<std::string> v = {"cyst",      "edema",   "hemorrhage",    "tumor",   "atrophy",
                                               "infarct",   "necrosis", "calcification", "demyelination"};
    return v;
}

const char* octant_name(int o) {
    static const char* names[8] = {
        "left anterior superior",  "right anterior superior",  "left posterior superior",  "right posterior superior",
        "left anterior inferior",  "right anterior inferior",  "left posterior inferior",  "right posterior inferior",
    };
    return names[o & 7];
}

void validate(const PhantomSpec& s) {
    if (s.grid_size < 8) throw ValidationError("phantom grid_size must be >= 8");
    if (s.n_classes < 2) throw ValidationError("phantom n_classes must be >= 2");
    if (s.n_records < 1) throw ValidationError("phantom n_records must be >= 1");
    if (s.modalities.empty()) throw ValidationError("phantom needs at least one modality");
    if (s.noise_std < 0) throw ValidationError("phantom noise_std must be non-negative");
    if (s.n_classes > phantom_class_vocabulary_size())
        throw ValidationError("phantom n_classes " + std::to_string(s.n_classes) +
                              " exceeds the template vocabulary (" + std::to_string(phantom_class_vocabulary_size()) +
                              " class names)");
    for (const auto& m : s.modalities)
        if (!s.lesion_intensity_by_modality.count(m))
            throw ValidationError("phantom lesion_intensity_by_modality missing modality \"" + m + "\"");
}

std::uint64_t id_rank_hash(const std::string& id) {
    return std::stoull(Sha256::of(id).substr(0, 16), nullptr, 16);
}

float clamp01(double x) { return static_cast<float>(std::min(1.0, std::max(0.0, x))); }

}  // namespace

int phantom_class_vocabulary_size() { return static_cast<int>(class_vocab().size()); }

PhantomSpec standard_benchmark() {
    PhantomSpec s;
    s.lesion_intensity_by_modality = {{"T1", {0.85, 0.05}}, {"T2", {0.90, 0.03}}, {"DWI", {0.95, 0.03}}};
    return s;
}

DatasetManifest synthesize_dataset(const PhantomSpec& spec, const std::string& out_dir) {
    validate(spec);
    std::filesystem::create_directories(out_dir);

    const int G = spec.grid_size;
    const int K = spec.n_classes;
    const int M = static_cast<int>(spec.modalities.size());

    DatasetManifest manifest;
    manifest.class_names.assign(class_vocab().begin(), class_vocab().begin() + K);
    manifest.modality_vocabulary = spec.modalities;
    manifest.normal_class_policy = "explicit";
    manifest.base_dir = out_dir;

    for (int i = 0; i < spec.n_records; ++i) {
        Rng rng = Rng::derived(spec.seed, static_cast<std::uint64_t>(i));
        int k = i % K;
        int m = (i / K) % M;
        const std::string& modality = spec.modalities[static_cast<std::size_t>(m)];

        // background: modality-coded base intensity plus voxel noise
        double base = 0.2 + (M == 1 ? 0.0 : 0.4 * m / double(M - 1));
        VoxelGrid g(G, G, G);
        for (auto& v : g.v) v = clamp01(base + spec.noise_std * rng.normal());

        // one ellipsoidal lesion; class k sets its size on a geometric ramp
        int oct = static_cast<int>(rng.below(8));
        double c[3], a[3];
        for (int ax = 0; ax < 3; ++ax) {
            int bit = (oct >> ax) & 1;
            c[ax] = G * (0.25 + 0.5 * bit) + rng.uniform(-0.06 * G, 0.06 * G);
        }
        double r_frac = 0.10 * std::pow(2.8, k / double(K - 1));
        for (int ax = 0; ax < 3; ++ax) a[ax] = r_frac * G * rng.uniform(0.85, 1.15);
        auto [mean, stddev] = spec.lesion_intensity_by_modality.at(modality);
        double lesion = clamp01(rng.normal(mean, stddev));

        int z0 = std::max(0, static_cast<int>(std::floor(c[2] - a[2]))), z1 = std::min(G - 1, static_cast<int>(std::ceil(c[2] + a[2])));
        int y0 = std::max(0, static_cast<int>(std::floor(c[1] - a[1]))), y1 = std::min(G - 1, static_cast<int>(std::ceil(c[1] + a[1])));
        int x0 = std::max(0, static_cast<int>(std::floor(c[0] - a[0]))), x1 = std::min(G - 1, static_cast<int>(std::ceil(c[0] + a[0])));
        for (int z = z0; z <= z1; ++z)
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    double dz = (z - c[2]) / a[2], dy = (y - c[1]) / a[1], dx = (x - c[0]) / a[0];
                    double rho = std::sqrt(dx * dx + dy * dy + dz * dz);
                    if (rho >= 1.0) continue;
                    double wgt = std::min(1.0, (1.0 - rho) / 0.3);  // soft rim, solid core
                    float& v = g.at(z, y, x);
                    v = clamp01(v + wgt * (lesion - v));
                }

        char idbuf[32];
        std::snprintf(idbuf, sizeof idbuf, "rec_%06d", i);
        VolumeRecord rec;
        rec.id = idbuf;
        rec.modality = modality;
        rec.voxels = std::move(g);
        rec.labels.assign(static_cast<std::size_t>(K), 0);
        rec.labels[static_cast<std::size_t>(k)] = 1;
        rec.report = modality + " sequence shows " + manifest.class_names[static_cast<std::size_t>(k)] + " in " +
                     octant_name(oct) + " region.";

        std::string fname = rec.id + ".mvol";
        write_mvol(rec, (std::filesystem::path(out_dir) / fname).string());
        manifest.records.push_back({rec.id, fname, ""});
    }

    // 70/15/15 split by rank of a deterministic id hash: exact proportions,
    // reproducible without a stored split file
    std::vector<int> order(static_cast<std::size_t>(spec.n_records));
    for (int i = 0; i < spec.n_records; ++i) order[static_cast<std::size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int lhs, int rhs) {
        auto hl = id_rank_hash(manifest.records[static_cast<std::size_t>(lhs)].id);
        auto hr = id_rank_hash(manifest.records[static_cast<std::size_t>(rhs)].id);
        if (hl != hr) return hl < hr;
        return manifest.records[static_cast<std::size_t>(lhs)].id < manifest.records[static_cast<std::size_t>(rhs)].id;
    });
    int n_train = static_cast<int>(spec.n_records * 0.70);
    int n_val = static_cast<int>(spec.n_records * 0.15);
    for (int pos = 0; pos < spec.n_records; ++pos) {
        const char* split = pos < n_train ? "train" : (pos < n_train + n_val ? "val" : "test");
        manifest.records[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])].split = split;
    }

    save_manifest(manifest, (std::filesystem::path(out_dir) / "manifest.json").string());
    return manifest;
}

}  // namespace medmap
