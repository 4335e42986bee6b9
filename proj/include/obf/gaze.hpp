// Canonical gaze data model and preprocessing. Raw recordings in pixel
// space are converted to screen-centered visual-degree scanpaths on a
// uniform 60 Hz grid, the universal unit of analysis downstream.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "obf/rng.hpp"

namespace obf {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

/// Off-screen marker value. Points more than 10 degrees beyond the screen
/// edge are replaced by (kSentinelDeg, kSentinelDeg) on both axes.
inline constexpr double kSentinelDeg = -180.0;
inline constexpr double kCanonicalHz = 60.0;
inline constexpr double kOffscreenMarginDeg = 10.0;

inline bool is_sentinel(const Vec2& p) { return p.x == kSentinelDeg && p.y == kSentinelDeg; }

struct ScreenGeometry {
    double width_px = 0.0;
    double height_px = 0.0;
    double width_mm = 0.0;
    double height_mm = 0.0;
    double viewing_distance_mm = 0.0;

    void validate() const;  // throws DataError on non-positive fields
};

struct RawSample {
    double t_ms = 0.0;
    std::optional<Vec2> left;
    std::optional<Vec2> right;
    bool valid = true;
};

struct RawRecording {
    std::vector<RawSample> samples;
    ScreenGeometry geometry;
    std::string source_tag;
    std::string participant_id;
    std::string stimulus_id;
    double native_hz = 0.0;

    void validate() const;  // t_ms strictly increasing, eye present on valid samples
};

struct Scanpath {
    std::vector<Vec2> points;  // 60 Hz implicit, visual degrees, screen-centered
    std::string source_tag;
    std::string participant_id;
    std::string stimulus_id;
    Vec2 screen_halfextent_deg{0.0, 0.0};

    std::size_t size() const { return points.size(); }
    double duration_s() const { return static_cast<double>(points.size()) / kCanonicalHz; }
};

struct Range {
    double lo = 0.0;
    double hi = 0.0;

    bool well_ordered() const { return lo <= hi; }
};

struct AugmentConfig {
    Range offset_deg{0.0, 0.0};
    Range scale{1.0, 1.0};
    Range rotation_rad{0.0, 0.0};
    Range shear{0.0, 0.0};
    double point_noise_sd_deg = 0.0;
    double point_noise_prob = 0.0;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Preprocessing operations
// ---------------------------------------------------------------------------

/// Pixel position -> visual degrees, origin at screen center.
/// x_deg = atan((x_px - width_px/2) * mm_per_px_x / d) * 180/pi, same for y.
Vec2 px_to_deg(const Vec2& p_px, const ScreenGeometry& g);

/// Half-extent of the screen itself in visual degrees.
Vec2 screen_halfextent_deg(const ScreenGeometry& g);

/// Mean of the available eyes; one eye passes through; neither -> missing.
std::optional<Vec2> merge_binocular(const RawSample& s);

/// Linear interpolation of (ts, vs) onto the 60 Hz grid anchored at ts.front().
/// Grid times that coincide with an input time reproduce that value exactly.
std::vector<Vec2> resample_60hz(const std::vector<double>& t_ms, const std::vector<Vec2>& vs);

/// Sparse variant: a grid point bracketed by a missing input sample stays
/// missing (gaps survive resampling and are handled by fill_missing).
std::vector<std::optional<Vec2>> resample_60hz_sparse(const std::vector<double>& t_ms,
                                                      const std::vector<std::optional<Vec2>>& vs);

struct FillResult {
    std::vector<Vec2> values;
    double missing_fraction = 0.0;
};

/// Interior gaps are linearly interpolated between the nearest valid
/// neighbors; leading/trailing gaps hold the nearest valid value.
FillResult fill_missing(const std::vector<std::optional<Vec2>>& vs);

/// Points strictly more than kOffscreenMarginDeg beyond the screen edge
/// become the sentinel on both axes. Boundary points stay.
std::vector<Vec2> mark_offscreen(std::vector<Vec2> points, const Vec2& halfextent_deg);

struct PreprocessResult {
    std::optional<Scanpath> scanpath;
    std::string discard_reason;  // non-empty iff scanpath absent

    bool discarded() const { return !scanpath.has_value(); }
};

/// merge -> px_to_deg -> resample -> fill_missing -> mark_offscreen.
/// Discarded when more than 50% of the merged samples are missing, or when
/// a sub-operation cannot run (too few samples, no valid anchor).
PreprocessResult preprocess(const RawRecording& r);

/// Affine map (scale, then rotation, then shear) plus random offset, then
/// per-point Gaussian noise with probability point_noise_prob. Sentinel
/// points are never transformed.
Scanpath augment(const Scanpath& sp, const AugmentConfig& cfg, Rng& rng);

}  // namespace obf
