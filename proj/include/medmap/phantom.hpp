#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "medmap/dataset.hpp"

namespace medmap {

// Synthetic benchmark generator: each record carries a noisy background whose
// base intensity encodes the modality, plus one ellipsoidal lesion per active
// class whose size encodes the class. Reports name modality, class, and the
// lesion's octant, so both image-only and text-aware models have learnable
// signal.
struct PhantomSpec {
    int grid_size = 32;
    int n_records = 858;
    int n_classes = 4;
    std::vector<std::string> modalities = {"T1", "T2", "DWI"};
    std::map<std::string, std::pair<double, double>> lesion_intensity_by_modality;  // tag -> (mean, std)
    double noise_std = 0.08;
    std::uint64_t seed = 42;
};

// The defaults above with the intensity table filled in. 858 records rank-split
// 70/15/15 into exactly 600 train / 128 val / 130 test.
PhantomSpec standard_benchmark();

// Largest supported n_classes (size of the built-in abnormality vocabulary).
int phantom_class_vocabulary_size();

// Emits n_records MVOL files plus manifest.json into out_dir; returns the
// manifest (base_dir set). Byte-deterministic given the spec.
DatasetManifest synthesize_dataset(const PhantomSpec& spec, const std::string& out_dir);

}  // namespace medmap
