#include "obf/gaze.hpp"

#include <algorithm>
#include <cmath>

#include "obf/errors.hpp"

namespace obf {

namespace {
constexpr double kRadToDeg = 57.29577951308232087680;
constexpr double kGridStepMs = 1000.0 / kCanonicalHz;
}  // namespace

void ScreenGeometry::validate() const {
    if (!(width_px > 0 && height_px > 0 && width_mm > 0 && height_mm > 0 &&
          viewing_distance_mm > 0))
        throw DataError("screen geometry fields must be strictly positive");
}

void RawRecording::validate() const {
    geometry.validate();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (i > 0 && !(samples[i].t_ms > samples[i - 1].t_ms))
            throw DataError("timestamps must be strictly increasing (sample " +
                            std::to_string(i) + ")");
        if (samples[i].valid && !samples[i].left && !samples[i].right)
            throw DataError("valid sample " + std::to_string(i) + " has no eye data");
    }
}

void AugmentConfig::validate() const {
    if (!offset_deg.well_ordered() || !scale.well_ordered() || !rotation_rad.well_ordered() ||
        !shear.well_ordered())
        throw DataError("augment ranges must be well-ordered");
    if (point_noise_sd_deg < 0) throw DataError("point_noise_sd_deg must be >= 0");
    if (point_noise_prob < 0 || point_noise_prob > 1)
        throw DataError("point_noise_prob must be in [0,1]");
}

Vec2 px_to_deg(const Vec2& p_px, const ScreenGeometry& g) {
    if (!std::isfinite(p_px.x) || !std::isfinite(p_px.y))
        throw DataError("non-finite pixel coordinate");
    const double mmppx_x = g.width_mm / g.width_px;
    const double mmppx_y = g.height_mm / g.height_px;
    const double d = g.viewing_distance_mm;
    return {std::atan((p_px.x - g.width_px / 2.0) * mmppx_x / d) * kRadToDeg,
            std::atan((p_px.y - g.height_px / 2.0) * mmppx_y / d) * kRadToDeg};
}

Vec2 screen_halfextent_deg(const ScreenGeometry& g) {
    const double d = g.viewing_distance_mm;
    return {std::atan(g.width_mm / 2.0 / d) * kRadToDeg,
            std::atan(g.height_mm / 2.0 / d) * kRadToDeg};
}

std::optional<Vec2> merge_binocular(const RawSample& s) {
    if (!s.valid) return std::nullopt;
    if (s.left && s.right) return Vec2{(s.left->x + s.right->x) / 2.0, (s.left->y + s.right->y) / 2.0};
    if (s.left) return *s.left;
    if (s.right) return *s.right;
    return std::nullopt;
}

namespace {

// Shared grid/bracketing logic for both resampling variants.
template <typename V, typename Interp>
std::vector<V> resample_grid(const std::vector<double>& t_ms, std::size_t n_values,
                             Interp&& interp) {
    if (t_ms.size() != n_values) throw DataError("resample: time/value length mismatch");
    if (t_ms.size() < 2) throw DataError("resample: need at least 2 samples");
    for (std::size_t i = 1; i < t_ms.size(); ++i)
        if (!(t_ms[i] > t_ms[i - 1])) throw DataError("resample: timestamps not increasing");

    const double t0 = t_ms.front();
    const double t_last = t_ms.back();
    const double eps = 1e-9 * std::max(1.0, std::abs(t_last));
    // Grid times within a nanosecond of an input time count as coinciding
    // and reproduce that sample exactly (floating-point noise is orders of
    // magnitude below real timestamp spacing).
    const double snap_ms = 1e-6;
    std::vector<V> out;
    std::size_t hi = 1;  // t_ms[hi-1] <= t_grid <= t_ms[hi]
    for (std::size_t k = 0;; ++k) {
        const double tg = t0 + static_cast<double>(k) * kGridStepMs;
        if (tg > t_last + eps) break;
        while (hi + 1 < t_ms.size() && t_ms[hi] < tg) ++hi;
        const double span = t_ms[hi] - t_ms[hi - 1];
        double u = (tg - t_ms[hi - 1]) / span;
        u = std::clamp(u, 0.0, 1.0);
        if (std::abs(tg - t_ms[hi - 1]) < snap_ms) u = 0.0;
        if (std::abs(tg - t_ms[hi]) < snap_ms) u = 1.0;
        out.push_back(interp(hi - 1, hi, u));
    }
    return out;
}

}  // namespace

std::vector<Vec2> resample_60hz(const std::vector<double>& t_ms, const std::vector<Vec2>& vs) {
    return resample_grid<Vec2>(t_ms, vs.size(), [&](std::size_t a, std::size_t b, double u) {
        if (u == 0.0) return vs[a];
        if (u == 1.0) return vs[b];
        return Vec2{vs[a].x + u * (vs[b].x - vs[a].x), vs[a].y + u * (vs[b].y - vs[a].y)};
    });
}

std::vector<std::optional<Vec2>> resample_60hz_sparse(const std::vector<double>& t_ms,
                                                      const std::vector<std::optional<Vec2>>& vs) {
    using OV = std::optional<Vec2>;
    return resample_grid<OV>(t_ms, vs.size(), [&](std::size_t a, std::size_t b, double u) -> OV {
        if (u == 0.0) return vs[a];
        if (u == 1.0) return vs[b];
        if (!vs[a] || !vs[b]) return std::nullopt;
        return Vec2{vs[a]->x + u * (vs[b]->x - vs[a]->x), vs[a]->y + u * (vs[b]->y - vs[a]->y)};
    });
}

FillResult fill_missing(const std::vector<std::optional<Vec2>>& vs) {
    if (vs.empty()) throw DataError("fill_missing: empty sequence");
    std::size_t n_missing = 0;
    std::ptrdiff_t first_valid = -1, last_valid = -1;
    for (std::size_t i = 0; i < vs.size(); ++i) {
        if (vs[i]) {
            if (first_valid < 0) first_valid = static_cast<std::ptrdiff_t>(i);
            last_valid = static_cast<std::ptrdiff_t>(i);
        } else {
            ++n_missing;
        }
    }
    if (first_valid < 0) throw DataError("fill_missing: all samples missing");

    FillResult r;
    r.missing_fraction = static_cast<double>(n_missing) / static_cast<double>(vs.size());
    r.values.resize(vs.size());
    for (std::size_t i = 0; i < vs.size(); ++i) {
        if (vs[i]) {
            r.values[i] = *vs[i];
            continue;
        }
        if (static_cast<std::ptrdiff_t>(i) < first_valid) {
            r.values[i] = *vs[first_valid];
        } else if (static_cast<std::ptrdiff_t>(i) > last_valid) {
            r.values[i] = *vs[last_valid];
        } else {
            // interior gap: nearest valid neighbors on both sides
            std::size_t a = i;
            while (!vs[a - 1]) --a;
            --a;
            std::size_t b = i;
            while (!vs[b]) ++b;
            const double u = static_cast<double>(i - a) / static_cast<double>(b - a);
            r.values[i] = Vec2{vs[a]->x + u * (vs[b]->x - vs[a]->x),
                               vs[a]->y + u * (vs[b]->y - vs[a]->y)};
        }
    }
    return r;
}

std::vector<Vec2> mark_offscreen(std::vector<Vec2> points, const Vec2& halfextent_deg) {
    if (!(halfextent_deg.x > 0 && halfextent_deg.y > 0))
        throw DataError("mark_offscreen: halfextent must be positive");
    const double lim_x = halfextent_deg.x + kOffscreenMarginDeg;
    const double lim_y = halfextent_deg.y + kOffscreenMarginDeg;
    for (auto& p : points)
        if (std::abs(p.x) > lim_x || std::abs(p.y) > lim_y) p = {kSentinelDeg, kSentinelDeg};
    return points;
}

PreprocessResult preprocess(const RawRecording& r) {
    PreprocessResult out;
    try {
        r.validate();
    } catch (const DataError& e) {
        out.discard_reason = std::string("malformed: ") + e.what();
        return out;
    }
    if (r.samples.size() < 2) {
        out.discard_reason = "too few samples";
        return out;
    }

    // Merge eyes; the discard rule is about recording quality, so the
    // missing fraction is measured here, before the grid change.
    std::vector<double> ts;
    std::vector<std::optional<Vec2>> merged;
    ts.reserve(r.samples.size());
    merged.reserve(r.samples.size());
    std::size_t n_missing = 0;
    for (const auto& s : r.samples) {
        ts.push_back(s.t_ms);
        auto m = merge_binocular(s);
        if (!m) ++n_missing;
        merged.push_back(m);
    }
    const double missing_fraction =
        static_cast<double>(n_missing) / static_cast<double>(r.samples.size());
    if (missing_fraction > 0.5) {
        out.discard_reason = "missing fraction " + std::to_string(missing_fraction) + " > 0.5";
        return out;
    }

    std::vector<std::optional<Vec2>> deg(merged.size());
    try {
        for (std::size_t i = 0; i < merged.size(); ++i)
            if (merged[i]) deg[i] = px_to_deg(*merged[i], r.geometry);

        auto grid = resample_60hz_sparse(ts, deg);
        auto filled = fill_missing(grid);
        const Vec2 he = screen_halfextent_deg(r.geometry);

        Scanpath sp;
        sp.points = mark_offscreen(std::move(filled.values), he);
        sp.source_tag = r.source_tag;
        sp.participant_id = r.participant_id;
        sp.stimulus_id = r.stimulus_id;
        sp.screen_halfextent_deg = he;
        out.scanpath = std::move(sp);
    } catch (const DataError& e) {
        out.discard_reason = e.what();
    }
    return out;
}

Scanpath augment(const Scanpath& sp, const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    const double bx = rng.uniform(cfg.offset_deg.lo, cfg.offset_deg.hi);
    const double by = rng.uniform(cfg.offset_deg.lo, cfg.offset_deg.hi);
    const double k = rng.uniform(cfg.scale.lo, cfg.scale.hi);
    const double theta = rng.uniform(cfg.rotation_rad.lo, cfg.rotation_rad.hi);
    const double sh = rng.uniform(cfg.shear.lo, cfg.shear.hi);
    const double c = std::cos(theta), s = std::sin(theta);

    // A = Shear * Rot * Scale, applied as p' = A p + b.
    // Rotation is counterclockwise; shear maps x' = x + sh*y.
    Scanpath out = sp;
    for (auto& p : out.points) {
        if (is_sentinel(p)) continue;
        double x = p.x * k, y = p.y * k;
        const double rx = x * c - y * s;
        const double ry = x * s + y * c;
        x = rx + sh * ry;
        y = ry;
        p.x = x + bx;
        p.y = y + by;
        if (cfg.point_noise_prob > 0.0 && rng.bernoulli(cfg.point_noise_prob)) {
            p.x += rng.normal(0.0, cfg.point_noise_sd_deg);
            p.y += rng.normal(0.0, cfg.point_noise_sd_deg);
        }
    }
    return out;
}

}  // namespace obf
