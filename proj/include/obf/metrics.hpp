#pragma once

#include <algorithm>
#include <limits>
#include <utility>
#include <vector>

namespace obf {

/// Rank-based AUC (Mann-Whitney); ties receive average rank credit.
/// NaN when either class is absent.
inline double rank_auc(std::vector<std::pair<double, int>> scored) {
    std::size_t n_pos = 0, n_neg = 0;
    for (const auto& [s, y] : scored) (y ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0) return std::numeric_limits<double>::quiet_NaN();
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < scored.size()) {
        std::size_t j = i;
        while (j < scored.size() && scored[j].first == scored[i].first) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
        for (std::size_t k = i; k < j; ++k)
            if (scored[k].second) rank_sum_pos += avg_rank;
        i = j;
    }
    const double p = static_cast<double>(n_pos);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(n_neg));
}

struct BinaryCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

    void add(int predicted, int actual) {
        if (predicted && actual) ++tp;
        else if (predicted && !actual) ++fp;
        else if (!predicted && actual) ++fn;
        else ++tn;
    }
    double accuracy() const {
        const std::size_t n = tp + fp + tn + fn;
        return n ? static_cast<double>(tp + tn) / static_cast<double>(n) : 0.0;
    }
    /// F1 with the positive class = label 1.
    double f1() const {
        const double denom = static_cast<double>(2 * tp + fp + fn);
        return denom > 0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
    }
};

}  // namespace obf
