// I-VT fixation identification, the class-balancing sample mask for the
// fixation-identification pre-task, and the expert-guided scanpath
// features used as the downstream baseline.

#pragma once

#include <cstdint>
#include <vector>

#include "obf/gaze.hpp"
#include "obf/rng.hpp"

namespace obf {

/// Per-sample labels: 1 = fixation, 0 = saccade.
using FixationLabels = std::vector<std::uint8_t>;
using SampleMask = std::vector<std::uint8_t>;

inline constexpr double kIvtVelocityThreshDegps = 100.0;
inline constexpr double kIvtMinFixationMs = 200.0;

/// Per-sample gaze speed in deg/s: v[i] = 60 * |p[i] - p[i-1]|, v[0] = v[1].
/// Differences touching a sentinel are +infinity (always saccade-speed and
/// excluded from statistics, which check isfinite).
std::vector<double> velocity(const std::vector<Vec2>& points);

/// I-VT: below-threshold speed is provisionally fixation (ties classify as
/// saccade), then every maximal fixation run shorter than min_fix_ms is
/// relabeled saccade. Sentinel samples are always saccade.
FixationLabels ivt_labels(const std::vector<Vec2>& points,
                          double v_thresh_degps = kIvtVelocityThreshDegps,
                          double min_fix_ms = kIvtMinFixationMs);

/// Selects min(#fix, #sac) samples from each class uniformly without
/// replacement, so sum(mask*labels) == sum(mask*(1-labels)) exactly.
SampleMask balanced_mask(const FixationLabels& labels, Rng& rng);

struct ExpertFeatures {
    double n_fixations = 0.0;
    double total_fixation_duration_s = 0.0;
    double mean_saccade_speed_degps = 0.0;
    double max_saccade_speed_degps = 0.0;
    double mean_fixation_speed_degps = 0.0;

    static constexpr int kCount = 5;
    std::vector<double> as_vector() const {
        return {n_fixations, total_fixation_duration_s, mean_saccade_speed_degps,
                max_saccade_speed_degps, mean_fixation_speed_degps};
    }
};

/// Run counts and speed statistics over the labeled scanpath. Speeds from
/// sentinel-adjacent differences are excluded; empty classes yield 0.
ExpertFeatures expert_features(const std::vector<Vec2>& points, const FixationLabels& labels);

}  // namespace obf
