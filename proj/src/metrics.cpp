#include "medmap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace medmap {

real accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.empty()) throw ValidationError("accuracy: empty input");
    if (predictions.size() != labels.size())
        throw ValidationError("accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                              std::to_string(labels.size()) + " labels");
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == labels[i]) ++correct;
    return real(correct) / real(predictions.size());
}

real auc(const std::vector<real>& scores, const std::vector<int>& binary_labels) {
    if (scores.size() != binary_labels.size() || scores.empty())
        throw ValidationError("auc: scores and labels must be equal-length and non-empty");
    std::int64_t n_pos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (binary_labels[i] != 0 && binary_labels[i] != 1) throw ValidationError("auc: labels must be 0 or 1");
        if (!std::isfinite(scores[i])) throw ValidationError("auc: non-finite score");
        n_pos += binary_labels[i];
    }
    std::int64_t n = std::int64_t(scores.size()), n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw ValidationError("auc: needs at least one positive and one negative label");

    // tie-averaged ranks; every rank is a multiple of 1/2, so the arithmetic
    // below is exact in double precision at any realistic n
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    real rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        real avg_rank = 0.5 * real(i + 1 + j);  // mean of ranks i+1 .. j
        for (std::size_t k = i; k < j; ++k)
            if (binary_labels[order[k]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    real u = rank_sum_pos - 0.5 * real(n_pos) * real(n_pos + 1);
    return u / (real(n_pos) * real(n_neg));
}

MetricsReport compute_metrics(const std::vector<std::vector<real>>& probabilities, const std::vector<int>& labels,
                              int n_classes) {
    if (n_classes < 1) throw ValidationError("metrics: n_classes must be >= 1");
    if (probabilities.size() != labels.size() || probabilities.empty())
        throw ValidationError("metrics: probabilities and labels must be equal-length and non-empty");

    std::vector<int> predictions;
    predictions.reserve(probabilities.size());
    for (std::size_t r = 0; r < probabilities.size(); ++r) {
        const auto& row = probabilities[r];
        if (int(row.size()) != n_classes) throw ValidationError("metrics: probability row has wrong class count");
        if (labels[r] < 0 || labels[r] >= n_classes)
            throw ValidationError("metrics: label " + std::to_string(labels[r]) + " out of range");
        int best = 0;
        for (int k = 1; k < n_classes; ++k)
            if (row[std::size_t(k)] > row[std::size_t(best)]) best = k;
        predictions.push_back(best);
    }

    MetricsReport report;
    report.accuracy = accuracy(predictions, labels);
    report.confusion.assign(std::size_t(n_classes), std::vector<std::int64_t>(std::size_t(n_classes), 0));
    for (std::size_t r = 0; r < labels.size(); ++r)
        ++report.confusion[std::size_t(labels[r])][std::size_t(predictions[r])];

    report.per_class_auc.assign(std::size_t(n_classes), std::numeric_limits<real>::quiet_NaN());
    real sum = 0.0;
    int counted = 0;
    for (int k = 0; k < n_classes; ++k) {
        std::vector<real> scores;
        std::vector<int> one_vs_rest;
        scores.reserve(labels.size());
        one_vs_rest.reserve(labels.size());
        for (std::size_t r = 0; r < labels.size(); ++r) {
            scores.push_back(probabilities[r][std::size_t(k)]);
            one_vs_rest.push_back(labels[r] == k ? 1 : 0);
        }
        bool has_pos = std::find(one_vs_rest.begin(), one_vs_rest.end(), 1) != one_vs_rest.end();
        bool has_neg = std::find(one_vs_rest.begin(), one_vs_rest.end(), 0) != one_vs_rest.end();
        if (!has_pos || !has_neg) continue;  // class missing from this split: AUC undefined
        real a = auc(scores, one_vs_rest);
        report.per_class_auc[std::size_t(k)] = a;
        sum += a;
        ++counted;
    }
    if (counted == 0) throw ValidationError("metrics: no class has both positives and negatives; AUC undefined");
    report.macro_auc = sum / real(counted);
    return report;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j;
    j["accuracy"] = accuracy;
    j["macro_auc"] = macro_auc;
    nlohmann::json aucs = nlohmann::json::array();
    for (real a : per_class_auc) {
        if (std::isnan(a))
            aucs.push_back(nullptr);
        else
            aucs.push_back(a);
    }
    j["per_class_auc"] = aucs;
    j["confusion"] = confusion;
    return j;
}

}  // namespace medmap
