#pragma once

#include <vector>

#include "json.hpp"
#include "medmap/common.hpp"

namespace medmap {

// Fraction of positions where prediction == label; exact counting.
real accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

// Area under the ROC curve as the normalized Mann-Whitney U statistic,
// computed from tie-averaged ranks: P(score_pos > score_neg) + P(tie)/2.
// Requires at least one positive and one negative label.
real auc(const std::vector<real>& scores, const std::vector<int>& binary_labels);

struct MetricsReport {
    real accuracy = 0.0;
    real macro_auc = 0.0;
    // one-vs-rest AUC per class; NaN for a class absent from the labels
    // (such classes are excluded from the macro mean)
    std::vector<real> per_class_auc;
    // confusion[true_label][predicted] counts
    std::vector<std::vector<std::int64_t>> confusion;

    nlohmann::json to_json() const;
};

// probabilities: one row of K class probabilities per sample; labels: class
// indices in [0, K). Predictions are row argmax (first index wins ties).
MetricsReport compute_metrics(const std::vector<std::vector<real>>& probabilities, const std::vector<int>& labels,
                              int n_classes);

}  // namespace medmap
