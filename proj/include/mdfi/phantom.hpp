#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mdfi/errors.hpp"
#include "mdfi/image.hpp"
#include "mdfi/rng.hpp"

namespace mdfi {

// Synthetic fundus-like sample: branching curvilinear trees on a smooth
// background inside a circular field of view, optionally with a bright
// disc occluder. The vessel fraction (label pixels / fov pixels) is hit
// exactly by stopping the rasterizer pixel-by-pixel inside the target
// band, so every emitted sample satisfies the fraction invariant.
struct PhantomSpec {
    std::size_t height = 256, width = 256;
    int n_trees = 3;
    double width_min = 1.0, width_max = 20.0;   // vessel widths in pixels
    double vessel_contrast = 0.06;              // intensity offset below background
    double noise_sigma = 0.01;
    bool occluder = false;   // bright optic-disc-like obstruction, opt-in
    double fraction_min = 0.070, fraction_max = 0.086;
    std::uint64_t seed = 0;

    void validate() const {
        if (height < 16 || width < 16) throw ConfigError("phantom: size must be at least 16x16");
        if (width_min < 1.0 || width_max > 20.0 || width_min > width_max)
            throw ConfigError("phantom: width range must lie within [1,20]");
        if (!(fraction_min > 0.0 && fraction_max < 1.0 && fraction_min <= fraction_max))
            throw ConfigError("phantom: fraction band must lie within (0,1)");
        if (noise_sigma < 0.0) throw ConfigError("phantom: noise_sigma must be >= 0");
        if (n_trees < 1) throw ConfigError("phantom: need at least one tree");
    }

    // preset for small training patches
    static PhantomSpec patch64(std::uint64_t seed_) {
        PhantomSpec s;
        s.height = s.width = 64;
        s.n_trees = 2;
        s.width_max = 6.0;
        s.seed = seed_;
        return s;
    }
};

struct PhantomSample {
    GrayImage image;
    Mask label;
    Mask fov;
    double vessel_fraction = 0.0;   // label pixels / fov pixels
    std::uint64_t seed = 0;
};

namespace detail {

inline Mask inscribed_fov(std::size_t w, std::size_t h) {
    Mask fov(w, h);
    const double cx = static_cast<double>(w) / 2.0, cy = static_cast<double>(h) / 2.0;
    const double r = static_cast<double>(std::min(w, h)) / 2.0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            fov.at(y, x) = (dx * dx + dy * dy <= r * r) ? 1 : 0;
        }
    return fov;
}

// stamps a disc into the label, one pixel at a time, stopping at the cap;
// returns false once the cap is reached
inline bool stamp_disc(Mask& label, const Mask& fov, double cx, double cy, double radius,
                       std::size_t& count, std::size_t cap) {
    const long x0 = static_cast<long>(std::floor(cx - radius - 1.0));
    const long x1 = static_cast<long>(std::ceil(cx + radius + 1.0));
    const long y0 = static_cast<long>(std::floor(cy - radius - 1.0));
    const long y1 = static_cast<long>(std::ceil(cy + radius + 1.0));
    const double r2 = radius * radius;
    for (long y = y0; y <= y1; ++y) {
        if (y < 0 || y >= static_cast<long>(label.height)) continue;
        for (long x = x0; x <= x1; ++x) {
            if (x < 0 || x >= static_cast<long>(label.width)) continue;
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            if (dx * dx + dy * dy > r2) continue;
            const std::size_t idx = static_cast<std::size_t>(y) * label.width +
                                    static_cast<std::size_t>(x);
            if (!fov.v[idx] || label.v[idx]) continue;
            label.v[idx] = 1;
            if (++count >= cap) return false;
        }
    }
    return true;
}

struct BranchSeed {
    double x, y, angle, width;
    int depth;
};

// one quadratic-spline tree with tapering width and random branching
inline bool draw_tree(Rng& rng, Mask& label, const Mask& fov, const PhantomSpec& spec,
                      std::size_t& count, std::size_t cap) {
    const double w = static_cast<double>(label.width), h = static_cast<double>(label.height);
    const double r = std::min(w, h) / 2.0;
    const double cx = w / 2.0, cy = h / 2.0;

    const double ang0 = rng.uniform(0.0, 6.283185307179586);
    BranchSeed root;
    root.x = cx + 0.85 * r * std::cos(ang0);
    root.y = cy + 0.85 * r * std::sin(ang0);
    root.angle = ang0 + 3.141592653589793 + rng.uniform(-0.6, 0.6);   // head inward
    root.width = rng.uniform(spec.width_min, spec.width_max);
    root.depth = 0;

    std::vector<BranchSeed> stack{root};
    while (!stack.empty()) {
        BranchSeed b = stack.back();
        stack.pop_back();
        double x = b.x, y = b.y, ang = b.angle, width = b.width;
        const int max_segments = 24;
        for (int seg = 0; seg < max_segments; ++seg) {
            const double len = rng.uniform(h / 10.0, h / 5.0);
            const double bend = rng.normal() * 0.35;
            const double mx = x + 0.5 * len * std::cos(ang) - 0.25 * len * bend * std::sin(ang);
            const double my = y + 0.5 * len * std::sin(ang) + 0.25 * len * bend * std::cos(ang);
            const double ex = x + len * std::cos(ang + bend);
            const double ey = y + len * std::sin(ang + bend);
            const double w_end = std::max(spec.width_min, width * rng.uniform(0.78, 0.95));

            const int steps = std::max(2, static_cast<int>(len / 0.3));
            for (int sstep = 0; sstep <= steps; ++sstep) {
                const double t = static_cast<double>(sstep) / steps;
                const double omt = 1.0 - t;
                const double px = omt * omt * x + 2.0 * t * omt * mx + t * t * ex;
                const double py = omt * omt * y + 2.0 * t * omt * my + t * t * ey;
                const double pw = width + (w_end - width) * t;
                if (!stamp_disc(label, fov, px, py, pw / 2.0, count, cap)) return false;
            }
            if (rng.uniform() < 0.35 && b.depth < 4) {
                BranchSeed child;
                child.x = 0.5 * (x + ex);
                child.y = 0.5 * (y + ey);
                child.angle = ang + (rng.uniform() < 0.5 ? 1.0 : -1.0) * rng.uniform(0.4, 1.0);
                child.width = std::max(spec.width_min, width * rng.uniform(0.55, 0.75));
                child.depth = b.depth + 1;
                stack.push_back(child);
            }
            x = ex; y = ey; ang += bend;
            width = w_end;
            const double dxc = x - cx, dyc = y - cy;
            if (dxc * dxc + dyc * dyc > r * r) break;   // wandered outside the fov
        }
    }
    return true;
}

} // namespace detail

inline PhantomSample generate(const PhantomSpec& spec) {
    spec.validate();
    const Mask fov = detail::inscribed_fov(spec.width, spec.height);
    const std::size_t fov_n = fov.count();

    for (int attempt = 0; attempt < 100; ++attempt) {
        const std::uint64_t aseed = Rng::derive(spec.seed, static_cast<std::uint64_t>(attempt));
        Rng rng_bg(Rng::derive(aseed, 1));
        Rng rng_tree(Rng::derive(aseed, 2));
        Rng rng_noise(Rng::derive(aseed, 3));

        // hit an exact pixel target in the middle of the fraction band
        const double band = spec.fraction_max - spec.fraction_min;
        const double target_frac = spec.fraction_min + band * rng_tree.uniform(0.25, 0.75);
        const std::size_t target_px = static_cast<std::size_t>(
            std::llround(target_frac * static_cast<double>(fov_n)));

        Mask label(spec.width, spec.height);
        std::size_t count = 0;
        bool reached = false;
        const int max_trees = spec.n_trees + 48;
        for (int t = 0; t < max_trees && !reached; ++t)
            reached = !detail::draw_tree(rng_tree, label, fov, spec, count, target_px);
        if (!reached) continue;   // trees kept escaping; try a fresh seed

        const double frac = static_cast<double>(count) / static_cast<double>(fov_n);
        if (frac < spec.fraction_min || frac > spec.fraction_max) continue;

        // compose the image: smooth background, occluder, vessels, noise
        GrayImage img(spec.width, spec.height, 0.05);
        const double ax = rng_bg.uniform(0.5, 2.0), ay = rng_bg.uniform(0.5, 2.0);
        const double phase = rng_bg.uniform(0.0, 6.283185307179586);
        const double amp = rng_bg.uniform(0.02, 0.05);
        const double cx = static_cast<double>(spec.width) / 2.0;
        const double cy = static_cast<double>(spec.height) / 2.0;
        const double r = std::min(cx, cy);
        double ox = 0.0, oy = 0.0, orad = 0.0, oamp = 0.0;
        if (spec.occluder) {
            const double oang = rng_bg.uniform(0.0, 6.283185307179586);
            const double odist = rng_bg.uniform(0.0, 0.45) * r;
            ox = cx + odist * std::cos(oang);
            oy = cy + odist * std::sin(oang);
            orad = rng_bg.uniform(0.10, 0.18) * 2.0 * r;
            oamp = rng_bg.uniform(0.12, 0.20);
        }
        const double scale = std::max(cx, cy) * 2.0;
        for (std::size_t y = 0; y < spec.height; ++y) {
            for (std::size_t x = 0; x < spec.width; ++x) {
                const std::size_t idx = y * spec.width + x;
                if (!fov.v[idx]) continue;
                double v = 0.55 + amp * std::sin(6.283185307179586 *
                                                 (ax * static_cast<double>(x) +
                                                  ay * static_cast<double>(y)) / scale + phase);
                const double dx = static_cast<double>(x) + 0.5 - cx;
                const double dy = static_cast<double>(y) + 0.5 - cy;
                v -= 0.04 * (dx * dx + dy * dy) / (r * r);   // mild vignette
                if (spec.occluder) {
                    const double d = std::sqrt((static_cast<double>(x) + 0.5 - ox) * (static_cast<double>(x) + 0.5 - ox) +
                                               (static_cast<double>(y) + 0.5 - oy) * (static_cast<double>(y) + 0.5 - oy));
                    if (d < orad) {
                        const double edge = std::min(1.0, (orad - d) / (0.3 * orad));
                        v += oamp * edge;
                    }
                }
                if (label.v[idx]) v -= spec.vessel_contrast;
                img.pixels[idx] = v;
            }
        }
        for (std::size_t i = 0; i < img.size(); ++i) {
            img.pixels[i] += spec.noise_sigma * rng_noise.normal();
            img.pixels[i] = std::clamp(img.pixels[i], 0.0, 1.0);
        }

        PhantomSample out;
        out.image = std::move(img);
        out.label = std::move(label);
        out.fov = fov;
        out.vessel_fraction = frac;
        out.seed = spec.seed;
        return out;
    }
    throw GenerationError("phantom: could not reach the target vessel fraction in 100 attempts");
}

struct PhantomDataset {
    std::vector<PhantomSample> train;
    std::vector<PhantomSample> test;
};

// count samples with per-sample derived seeds, split train/test by a fixed
// fraction (disjoint, deterministic)
inline PhantomDataset make_dataset(const PhantomSpec& base, std::size_t count, std::uint64_t seed,
                                   double train_fraction = 0.8) {
    if (count < 2) throw ContractError("dataset: need at least 2 samples");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ContractError("dataset: train fraction must be in (0,1)");
    PhantomDataset ds;
    const std::size_t n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(count)));
    for (std::size_t i = 0; i < count; ++i) {
        PhantomSpec spec = base;
        spec.seed = Rng::derive(seed, i);
        auto sample = generate(spec);
        if (i < n_train) ds.train.push_back(std::move(sample));
        else ds.test.push_back(std::move(sample));
    }
    return ds;
}

} // namespace mdfi
