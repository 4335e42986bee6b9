#include "obf/fixation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "obf/errors.hpp"

namespace obf {

std::vector<double> velocity(const std::vector<Vec2>& points) {
    if (points.size() < 2) throw DataError("velocity: need at least 2 points");
    std::vector<double> v(points.size(), 0.0);
    for (std::size_t i = 1; i < points.size(); ++i) {
        if (is_sentinel(points[i]) || is_sentinel(points[i - 1])) {
            v[i] = std::numeric_limits<double>::infinity();
        } else {
            const double dx = points[i].x - points[i - 1].x;
            const double dy = points[i].y - points[i - 1].y;
            v[i] = kCanonicalHz * std::sqrt(dx * dx + dy * dy);
        }
    }
    v[0] = v[1];
    return v;
}

FixationLabels ivt_labels(const std::vector<Vec2>& points, double v_thresh_degps,
                          double min_fix_ms) {
    const auto v = velocity(points);
    const std::size_t n = points.size();
    FixationLabels labels(n, 0);
    for (std::size_t i = 0; i < n; ++i)
        labels[i] = (v[i] < v_thresh_degps && !is_sentinel(points[i])) ? 1 : 0;

    // Minimum-duration rule: relabel every maximal fixation run shorter
    // than min_fix_ms. At 60 Hz and 200 ms that is 12 samples.
    const std::size_t min_samples = static_cast<std::size_t>(
        std::ceil(min_fix_ms * kCanonicalHz / 1000.0 - 1e-9));
    std::size_t i = 0;
    while (i < n) {
        if (!labels[i]) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < n && labels[j]) ++j;
        if (j - i < min_samples) std::fill(labels.begin() + i, labels.begin() + j, 0);
        i = j;
    }
    return labels;
}

SampleMask balanced_mask(const FixationLabels& labels, Rng& rng) {
    std::vector<std::size_t> fix_idx, sac_idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
        (labels[i] ? fix_idx : sac_idx).push_back(i);
    const std::size_t c = std::min(fix_idx.size(), sac_idx.size());

    SampleMask mask(labels.size(), 0);
    if (c == 0) return mask;

    auto select = [&](std::vector<std::size_t>& idx) {
        // Partial Fisher-Yates: the first c entries are a uniform subset.
        for (std::size_t k = 0; k < c; ++k) {
            const std::size_t j = static_cast<std::size_t>(
                rng.uniform_int(static_cast<std::int64_t>(k),
                                static_cast<std::int64_t>(idx.size()) - 1));
            std::swap(idx[k], idx[j]);
            mask[idx[k]] = 1;
        }
    };
    select(fix_idx);
    select(sac_idx);
    return mask;
}

ExpertFeatures expert_features(const std::vector<Vec2>& points, const FixationLabels& labels) {
    if (labels.size() != points.size())
        throw DataError("expert_features: label/point length mismatch");
    const auto v = velocity(points);

    ExpertFeatures f;
    std::size_t fix_samples = 0;
    double fix_speed_sum = 0.0, sac_speed_sum = 0.0;
    std::size_t fix_speed_n = 0, sac_speed_n = 0;
    bool in_run = false;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i]) {
            ++fix_samples;
            if (!in_run) {
                f.n_fixations += 1.0;
                in_run = true;
            }
            if (std::isfinite(v[i])) {
                fix_speed_sum += v[i];
                ++fix_speed_n;
            }
        } else {
            in_run = false;
            if (std::isfinite(v[i])) {
                sac_speed_sum += v[i];
                ++sac_speed_n;
                f.max_saccade_speed_degps = std::max(f.max_saccade_speed_degps, v[i]);
            }
        }
    }
    f.total_fixation_duration_s = static_cast<double>(fix_samples) / kCanonicalHz;
    if (fix_speed_n) f.mean_fixation_speed_degps = fix_speed_sum / static_cast<double>(fix_speed_n);
    if (sac_speed_n) f.mean_saccade_speed_degps = sac_speed_sum / static_cast<double>(sac_speed_n);
    return f;
}

}  // namespace obf
