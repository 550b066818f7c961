#pragma once

// Deterministic synthetic three-class lesion corpus. Each sample is a
// 112x112 grayscale image of an elliptical lesion on textured background:
// circumscribed lesions have a sharp edge, indistinct ones a blurred edge,
// spiculated ones a bundle of thin radial lines. Samples carry a lesion mask,
// a fine-annotation mask over the margin band, a class-conditional
// malignancy label, and optionally a class-correlated corner glyph that acts
// as a deliberate confounder.
//
// Mask convention everywhere: value 0 marks pixels relevant to margin
// identification, value 1 everything else.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "protomargin/image.hpp"
#include "protomargin/rng.hpp"

namespace protomargin::synth {

constexpr int kImageSize = 112;
constexpr int kMinBorder = 8;
constexpr double kFineBandRadius = 6.0;  // band half-width around the lesion boundary;
                                         // narrower bands fall below the latent grid's
                                         // 8 px pitch and cannot be resolved by the maps
constexpr int kGlyphOrigin = 4;
constexpr int kGlyphSize = 14;

enum MarginClass : int { kCircumscribed = 0, kIndistinct = 1, kSpiculated = 2 };
constexpr std::array<const char*, 3> kMarginClassNames = {"circumscribed", "indistinct",
                                                          "spiculated"};
constexpr std::array<double, 3> kDefaultMalignancyRates = {0.1, 0.6, 0.9};

inline int margin_class_from_name(const std::string& name) {
    for (int c = 0; c < 3; ++c)
        if (name == kMarginClassNames[static_cast<std::size_t>(c)]) return c;
    throw std::invalid_argument("unknown margin class: " + name);
}

struct LesionSpec {
    int margin_class = kCircumscribed;
    double center_x = 56.0, center_y = 56.0;
    double radius_a = 14.0, radius_b = 12.0;
    double orientation = 0.0;       // ellipse axis rotation, radians
    double edge_blur_sigma = 0.6;   // px; large only for indistinct
    int spicule_count = 0;          // > 0 iff spiculated
    double spicule_length = 10.0;   // px
    std::uint64_t background_texture_seed = 0;
};

struct SynthSample {
    Image image;        // [0,1]
    int y_margin = 0;
    int y_mal = 0;
    Image lesion_mask;  // 1 = outside lesion
    Image fine_mask;    // 1 = not margin-relevant
    bool confounder_flag = false;
};

inline double spicule_reach(const LesionSpec& spec) {
    return spec.spicule_count > 0 ? spec.spicule_length * 1.25 : 0.0;
}

inline void validate_spec(const LesionSpec& spec) {
    if (spec.margin_class < 0 || spec.margin_class > 2)
        throw std::invalid_argument("lesion spec: bad margin class " +
                                    std::to_string(spec.margin_class));
    const bool spic = spec.margin_class == kSpiculated;
    if (spic != (spec.spicule_count > 0))
        throw std::invalid_argument(
            "lesion spec: spicule_count must be positive iff class is spiculated");
    if (spec.margin_class != kIndistinct && spec.edge_blur_sigma > 1.5)
        throw std::invalid_argument(
            "lesion spec: edge_blur_sigma above 1.5 is reserved for indistinct lesions");
    if (spec.radius_a <= 0 || spec.radius_b <= 0)
        throw std::invalid_argument("lesion spec: radii must be positive");
    const double extent =
        std::max(spec.radius_a, spec.radius_b) + spicule_reach(spec);
    const double lo = kMinBorder, hi = kImageSize - 1 - kMinBorder;
    if (spec.center_x - extent < lo || spec.center_x + extent > hi ||
        spec.center_y - extent < lo || spec.center_y + extent > hi)
        throw std::invalid_argument("lesion spec: lesion does not fit inside the image "
                                    "with an 8 px border");
}

/// Draws a class-consistent spec whose geometry stays clear of the confounder
/// glyph corner (nearest lesion/band pixel > glyph box).
inline LesionSpec random_spec(int margin_class, Rng& rng) {
    LesionSpec spec;
    spec.margin_class = margin_class;
    spec.radius_a = uniform_double(rng, 16.0, 24.0);
    spec.radius_b = spec.radius_a * uniform_double(rng, 0.7, 1.0);
    spec.orientation = uniform_double(rng, 0.0, 3.14159265358979323846);
    switch (margin_class) {
        case kCircumscribed:
            spec.edge_blur_sigma = uniform_double(rng, 0.5, 0.7);
            break;
        case kIndistinct:
            spec.edge_blur_sigma = uniform_double(rng, 3.0, 5.0);
            break;
        case kSpiculated:
            spec.edge_blur_sigma = uniform_double(rng, 0.5, 0.7);
            spec.spicule_count = uniform_int(rng, 7, 13);
            spec.spicule_length = uniform_double(rng, 8.0, 12.0);
            break;
    }
    // center range keeps the whole lesion (plus the 3 px mask band) at least
    // 8 px from the border and clear of the glyph corner
    const double extent = std::max(spec.radius_a, spec.radius_b) + spicule_reach(spec);
    const double lo = std::max(52.0, extent + kGlyphOrigin + kGlyphSize + kFineBandRadius + 1.0);
    const double hi = std::max(lo, kImageSize - 1.0 - kMinBorder - extent);
    spec.center_x = uniform_double(rng, lo, hi);
    spec.center_y = uniform_double(rng, lo, hi);
    spec.background_texture_seed = rng();
    return spec;
}

namespace detail {

inline Image smooth_noise(int size, int grid, double amplitude, Rng& rng) {
    Image coarse(grid, grid);
    for (double& v : coarse.px) v = uniform_double(rng, -1.0, 1.0) * amplitude;
    Image out(size, size);
    const double scale = static_cast<double>(grid - 1) / (size - 1);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            out.at(y, x) = sample_bilinear(coarse, x * scale, y * scale);
    return out;
}

struct Segment {
    double x0, y0, x1, y1, width;
};

inline double segment_distance(const Segment& s, double px, double py) {
    const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
    const double cx = s.x0 + t * dx, cy = s.y0 + t * dy;
    return std::hypot(px - cx, py - cy);
}

}  // namespace detail

/// Fully deterministic in (spec, seed): geometry jitter, texture, and the
/// malignancy label all derive from them.
inline SynthSample generate_sample(
    const LesionSpec& spec, std::uint64_t seed,
    const std::array<double, 3>& malignancy_rates = kDefaultMalignancyRates) {
    validate_spec(spec);
    Rng rng(seed);
    const int n = kImageSize;

    // background texture (own seed so backgrounds can repeat across specs)
    Rng bg_rng(spec.background_texture_seed);
    Image bg_coarse = detail::smooth_noise(n, 8, 0.06, bg_rng);
    Image lesion_coarse = detail::smooth_noise(n, 6, 0.04, bg_rng);
    Image image(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            image.at(y, x) = 0.18 + bg_coarse.at(y, x) +
                             0.015 * uniform_double(bg_rng, -1.0, 1.0);

    // spicule geometry (drawn before the label so the label draw is last)
    std::vector<detail::Segment> spicules;
    const double cosw = std::cos(spec.orientation), sinw = std::sin(spec.orientation);
    for (int i = 0; i < spec.spicule_count; ++i) {
        const double theta = 2.0 * 3.14159265358979323846 * i / spec.spicule_count +
                             uniform_double(rng, -0.15, 0.15);
        // boundary point of the rotated ellipse at parameter theta
        const double ex = spec.radius_a * std::cos(theta);
        const double ey = spec.radius_b * std::sin(theta);
        const double bx = spec.center_x + ex * cosw - ey * sinw;
        const double by = spec.center_y + ex * sinw + ey * cosw;
        double dx = bx - spec.center_x, dy = by - spec.center_y;
        const double norm = std::hypot(dx, dy);
        dx /= norm;
        dy /= norm;
        const double len = spec.spicule_length * uniform_double(rng, 0.8, 1.2);
        // root the spicule slightly inside the mass so it reads as attached
        spicules.push_back({bx - 1.5 * dx, by - 1.5 * dy, bx + len * dx, by + len * dy,
                            1.2});
    }

    // geometric region (pre-blur): ellipse plus spicule capsules
    Image ellipse_alpha(n, n);
    Image spicule_alpha(n, n);
    Image region(n, n);  // 1 = lesion pixel
    Image spicule_region(n, n);
    const double r_eff = std::min(spec.radius_a, spec.radius_b);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double rx = x - spec.center_x, ry = y - spec.center_y;
            const double ux = (rx * cosw + ry * sinw) / spec.radius_a;
            const double uy = (-rx * sinw + ry * cosw) / spec.radius_b;
            const double rho = std::sqrt(ux * ux + uy * uy);
            const double approx_dist = (1.0 - rho) * r_eff;  // >0 inside
            double a = 0.5 + approx_dist;  // ~1 px anti-aliased edge
            ellipse_alpha.at(y, x) = a < 0.0 ? 0.0 : (a > 1.0 ? 1.0 : a);
            if (rho <= 1.0) region.at(y, x) = 1.0;
        }
    }
    for (const auto& seg : spicules) {
        const int x_lo = std::max(0, static_cast<int>(std::floor(std::min(seg.x0, seg.x1) - 4)));
        const int x_hi = std::min(n - 1, static_cast<int>(std::ceil(std::max(seg.x0, seg.x1) + 4)));
        const int y_lo = std::max(0, static_cast<int>(std::floor(std::min(seg.y0, seg.y1) - 4)));
        const int y_hi = std::min(n - 1, static_cast<int>(std::ceil(std::max(seg.y0, seg.y1) + 4)));
        for (int y = y_lo; y <= y_hi; ++y)
            for (int x = x_lo; x <= x_hi; ++x) {
                const double d = detail::segment_distance(seg, x, y);
                double a = 0.5 + (seg.width - d);
                a = a < 0.0 ? 0.0 : (a > 1.0 ? 1.0 : a);
                if (a > spicule_alpha.at(y, x)) spicule_alpha.at(y, x) = a;
                if (d <= seg.width) {
                    spicule_region.at(y, x) = 1.0;
                    region.at(y, x) = 1.0;
                }
            }
    }

    Image alpha(n, n);
    for (std::size_t i = 0; i < alpha.px.size(); ++i)
        alpha.px[i] = std::max(ellipse_alpha.px[i], spicule_alpha.px[i]);
    if (spec.margin_class == kIndistinct) alpha = gaussian_blur(alpha, spec.edge_blur_sigma);

    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double rx = x - spec.center_x, ry = y - spec.center_y;
            const double ux = (rx * cosw + ry * sinw) / spec.radius_a;
            const double uy = (-rx * sinw + ry * cosw) / spec.radius_b;
            const double rho2 = ux * ux + uy * uy;
            const double tex = 0.62 - 0.08 * std::min(1.0, rho2) + lesion_coarse.at(y, x);
            const double a = alpha.at(y, x);
            double v = image.at(y, x) * (1.0 - a) + tex * a;
            image.at(y, x) = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        }

    // masks: lesion mask is the geometric region; fine mask marks the
    // boundary band (and all spicule pixels)
    Image boundary(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            if (region.at(y, x) == 0.0) continue;
            const bool edge = x == 0 || x == n - 1 || y == 0 || y == n - 1 ||
                              region.at(y, x - 1) == 0.0 || region.at(y, x + 1) == 0.0 ||
                              region.at(y - 1, x) == 0.0 || region.at(y + 1, x) == 0.0;
            if (edge) boundary.at(y, x) = 1.0;
        }
    Image band_d2 = squared_distance_transform(boundary);

    SynthSample sample;
    sample.image = std::move(image);
    sample.y_margin = spec.margin_class;
    sample.lesion_mask = Image(n, n, 1.0);
    sample.fine_mask = Image(n, n, 1.0);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            if (region.at(y, x) != 0.0) sample.lesion_mask.at(y, x) = 0.0;
            if (band_d2.at(y, x) <= kFineBandRadius * kFineBandRadius ||
                spicule_region.at(y, x) != 0.0)
                sample.fine_mask.at(y, x) = 0.0;
        }

    sample.y_mal =
        bernoulli(rng, malignancy_rates[static_cast<std::size_t>(spec.margin_class)]) ? 1 : 0;
    return sample;
}

// ---- augmentation ------------------------------------------------------

struct AugmentParams {
    bool flip_h = false;
    bool flip_v = false;
    double angle = 0.0;       // rotation, radians
    int crop_size = kImageSize;
    int crop_x = 0;
    int crop_y = 0;

    static AugmentParams identity() { return {}; }
};

/// Random flip/rotation/crop draw; the crop covers crop_fraction of the
/// original size and is rescaled back to full resolution.
inline AugmentParams draw_augment_params(Rng& rng, double crop_fraction = 0.8) {
    AugmentParams p;
    p.flip_h = bernoulli(rng, 0.5);
    p.flip_v = bernoulli(rng, 0.5);
    p.angle = uniform_double(rng, 0.0, 2.0 * 3.14159265358979323846);
    p.crop_size = static_cast<int>(std::lround(crop_fraction * kImageSize));
    const int slack = kImageSize - p.crop_size;
    p.crop_x = slack > 0 ? uniform_int(rng, 0, slack) : 0;
    p.crop_y = slack > 0 ? uniform_int(rng, 0, slack) : 0;
    return p;
}

/// Conceptually: flip, rotate about the center, crop, rescale. One joint
/// affine resample keeps image and masks registered; masks use a border
/// value of 1 (outside lesion / not relevant) and re-binarize at 0.5.
inline SynthSample apply_augment(const SynthSample& sample, const AugmentParams& p) {
    const int n = kImageSize;
    const double c = (n - 1) / 2.0;
    const double scale = static_cast<double>(p.crop_size - 1) / (n - 1);
    const Affine crop_back{scale, 0, static_cast<double>(p.crop_x),
                           0, scale, static_cast<double>(p.crop_y)};
    const double ca = std::cos(p.angle), sa = std::sin(p.angle);
    const Affine rot_back{ca, -sa, c - ca * c + sa * c, sa, ca, c - sa * c - ca * c};
    Affine flip_back = Affine::identity();
    if (p.flip_h) {
        flip_back.a = -1;
        flip_back.c = n - 1;
    }
    if (p.flip_v) {
        flip_back.e = -1;
        flip_back.f = n - 1;
    }
    const Affine m = crop_back.then(rot_back).then(flip_back);

    SynthSample out;
    out.y_margin = sample.y_margin;
    out.y_mal = sample.y_mal;
    out.confounder_flag = sample.confounder_flag;
    out.image = warp_affine(sample.image, m, n, n, Border::Clamp);
    out.lesion_mask = warp_affine(sample.lesion_mask, m, n, n, Border::Constant, 1.0);
    out.fine_mask = warp_affine(sample.fine_mask, m, n, n, Border::Constant, 1.0);
    for (double& v : out.lesion_mask.px) v = v >= 0.5 ? 1.0 : 0.0;
    for (double& v : out.fine_mask.px) v = v >= 0.5 ? 1.0 : 0.0;
    return out;
}

inline SynthSample augment(const SynthSample& sample, Rng& rng,
                           double crop_fraction = 0.8) {
    return apply_augment(sample, draw_augment_params(rng, crop_fraction));
}

// ---- confounder ---------------------------------------------------------

/// Class-correlated bright corner tag: square for circumscribed, bars for
/// indistinct, an X for spiculated. Tag pixels are forced fine-irrelevant.
inline void draw_glyph(Image& img, Image& fine_mask, Image& lesion_mask,
                       int margin_class) {
    const int o = kGlyphOrigin, s = kGlyphSize;
    for (int dy = 0; dy < s; ++dy)
        for (int dx = 0; dx < s; ++dx) {
            bool on = false;
            switch (margin_class) {
                case kCircumscribed:
                    on = true;  // filled square
                    break;
                case kIndistinct:
                    on = dy % 4 < 2;  // horizontal stripes
                    break;
                case kSpiculated:
                    on = std::abs(dx - dy) <= 1 || std::abs(dx + dy - (s - 1)) <= 1;  // X
                    break;
            }
            if (!on) continue;
            img.at(o + dy, o + dx) = 1.0;
            fine_mask.at(o + dy, o + dx) = 1.0;
            lesion_mask.at(o + dy, o + dx) = 1.0;
        }
}

/// With probability `strength`, stamps the class glyph onto the sample.
inline SynthSample inject_confounder(SynthSample sample, double strength, Rng& rng) {
    if (strength < 0.0 || strength > 1.0)
        throw std::invalid_argument("confounder strength must be in [0,1], got " +
                                    std::to_string(strength));
    if (strength > 0.0 && bernoulli(rng, strength)) {
        draw_glyph(sample.image, sample.fine_mask, sample.lesion_mask, sample.y_margin);
        sample.confounder_flag = true;
    }
    return sample;
}

}  // namespace protomargin::synth
