#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mdfi/errors.hpp"
#include "mdfi/image.hpp"

namespace mdfi {

// R:G:B mixing ratio for fundus images; green dominates because it carries
// the vessel contrast.
inline constexpr double kMixR = 0.2793;
inline constexpr double kMixG = 0.7041;
inline constexpr double kMixB = 0.0166;

inline GrayImage channel_mix(const RgbImage& img) {
    GrayImage out(img.width, img.height);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = kMixR * img.pixels[3 * i] + kMixG * img.pixels[3 * i + 1] +
                         kMixB * img.pixels[3 * i + 2];
        out.pixels[i] = std::clamp(v, 0.0, 1.0);
    }
    return out;
}

struct ClaheConfig {
    std::size_t tiles_x = 8;
    std::size_t tiles_y = 8;
    double clip_limit = 2.0;   // multiple of the uniform bin height; >= 1
    std::size_t bins = 256;

    void validate() const {
        if (tiles_x < 1 || tiles_y < 1) throw ConfigError("clahe: tile counts must be >= 1");
        if (clip_limit < 1.0) throw ConfigError("clahe: clip_limit must be >= 1");
        if (bins < 2) throw ConfigError("clahe: bins must be >= 2");
    }
};

// Contrast-limited adaptive histogram equalization.
//
// The algorithm, step by step (bit-exact contract for 8-bit data):
//  1. Quantize each pixel to an 8-bit value q = round(v*255) and to a bin
//     b = floor(q*bins/256).
//  2. Pad the image by edge replication on the right/bottom so each tile
//     has exactly ceil(W/tiles_x) x ceil(H/tiles_y) pixels.
//  3. Per tile, build the bin histogram and clip it at
//     limit = max(1, floor(clip_limit * tile_pixels / bins)). The removed
//     mass is redistributed in one pass: excess/bins to every bin, the
//     remainder (excess mod bins) one count each to bins 0..rem-1.
//  4. Tile mapping for bin b: m(b) = (cdf(b) - cdf_min)/(tile_pixels - cdf_min)
//     where cdf_min is the cdf at the first occupied bin, so the lowest
//     occupied bin maps to 0. If a tile has a single occupied bin (possible
//     only when nothing was clipped) the mapping is the identity
//     m(b) = b/(bins-1), which keeps constant regions constant.
//  5. Every output pixel bilinearly blends the mappings of the four tiles
//     whose centers surround it: with a = (x+0.5)/tile_w - 0.5,
//     t0 = floor(a), f = a - t0 (f = 0 outside the first/last centers),
//     out = (1-fy)*[(1-fx)*m00(b) + fx*m01(b)] + fy*[(1-fx)*m10(b) + fx*m11(b)].
inline GrayImage clahe(const GrayImage& img, const ClaheConfig& cfg) {
    cfg.validate();
    if (img.width < cfg.tiles_x || img.height < cfg.tiles_y)
        throw DimensionError("clahe: image smaller than the tile grid");

    const std::size_t tile_w = (img.width + cfg.tiles_x - 1) / cfg.tiles_x;
    const std::size_t tile_h = (img.height + cfg.tiles_y - 1) / cfg.tiles_y;
    const std::size_t pw = tile_w * cfg.tiles_x;
    const std::size_t ph = tile_h * cfg.tiles_y;
    const std::size_t tile_n = tile_w * tile_h;
    const std::size_t bins = cfg.bins;

    // bin index per padded pixel (edge replication)
    std::vector<std::uint16_t> bin(pw * ph);
    for (std::size_t y = 0; y < ph; ++y) {
        const std::size_t sy = std::min(y, img.height - 1);
        for (std::size_t x = 0; x < pw; ++x) {
            const std::size_t sx = std::min(x, img.width - 1);
            const std::uint8_t q = to_byte(img.at(sy, sx));
            bin[y * pw + x] = static_cast<std::uint16_t>((q * bins) / 256);
        }
    }

    // per-tile clipped-histogram mappings
    const long limit = std::max<long>(
        1, static_cast<long>(std::floor(cfg.clip_limit * static_cast<double>(tile_n) /
                                        static_cast<double>(bins))));
    std::vector<std::vector<double>> maps(cfg.tiles_x * cfg.tiles_y,
                                          std::vector<double>(bins, 0.0));
    std::vector<long> hist(bins);
    for (std::size_t ty = 0; ty < cfg.tiles_y; ++ty) {
        for (std::size_t tx = 0; tx < cfg.tiles_x; ++tx) {
            std::fill(hist.begin(), hist.end(), 0);
            for (std::size_t y = ty * tile_h; y < (ty + 1) * tile_h; ++y)
                for (std::size_t x = tx * tile_w; x < (tx + 1) * tile_w; ++x)
                    ++hist[bin[y * pw + x]];
            long excess = 0;
            for (auto& hb : hist)
                if (hb > limit) { excess += hb - limit; hb = limit; }
            if (excess > 0) {
                const long base = excess / static_cast<long>(bins);
                const long rem = excess % static_cast<long>(bins);
                for (std::size_t b = 0; b < bins; ++b)
                    hist[b] += base + (static_cast<long>(b) < rem ? 1 : 0);
            }
            auto& m = maps[ty * cfg.tiles_x + tx];
            long cdf = 0, cdf_min = 0;
            for (std::size_t b = 0; b < bins; ++b) {
                cdf += hist[b];
                if (cdf_min == 0 && cdf > 0) cdf_min = cdf;
            }
            if (cdf_min == static_cast<long>(tile_n)) {
                for (std::size_t b = 0; b < bins; ++b)
                    m[b] = static_cast<double>(b) / static_cast<double>(bins - 1);
            } else {
                cdf = 0;
                const double denom = static_cast<double>(tile_n) - static_cast<double>(cdf_min);
                for (std::size_t b = 0; b < bins; ++b) {
                    cdf += hist[b];
                    m[b] = std::clamp((static_cast<double>(cdf) - static_cast<double>(cdf_min)) / denom,
                                      0.0, 1.0);
                }
            }
        }
    }

    // blend the four surrounding tile mappings per output pixel
    auto axis = [](std::size_t x, std::size_t tile, std::size_t tiles,
                   std::size_t& t0, std::size_t& t1, double& f) {
        const double a = (static_cast<double>(x) + 0.5) / static_cast<double>(tile) - 0.5;
        long lo = static_cast<long>(std::floor(a));
        f = a - static_cast<double>(lo);
        if (lo < 0) { lo = 0; f = 0.0; }
        if (lo >= static_cast<long>(tiles) - 1) { lo = static_cast<long>(tiles) - 1; f = 0.0; }
        t0 = static_cast<std::size_t>(lo);
        t1 = std::min(t0 + 1, tiles - 1);
    };

    GrayImage out(img.width, img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        std::size_t ty0, ty1;
        double fy;
        axis(y, tile_h, cfg.tiles_y, ty0, ty1, fy);
        for (std::size_t x = 0; x < img.width; ++x) {
            std::size_t tx0, tx1;
            double fx;
            axis(x, tile_w, cfg.tiles_x, tx0, tx1, fx);
            const std::uint16_t b = bin[y * pw + x];
            const double m00 = maps[ty0 * cfg.tiles_x + tx0][b];
            const double m01 = maps[ty0 * cfg.tiles_x + tx1][b];
            const double m10 = maps[ty1 * cfg.tiles_x + tx0][b];
            const double m11 = maps[ty1 * cfg.tiles_x + tx1][b];
            out.at(y, x) = (1.0 - fy) * ((1.0 - fx) * m00 + fx * m01) +
                           fy * ((1.0 - fx) * m10 + fx * m11);
        }
    }
    return out;
}

inline GrayImage gamma_correct(const GrayImage& img, double gamma) {
    if (gamma <= 0.0) throw ContractError("gamma_correct: gamma must be > 0");
    GrayImage out(img.width, img.height);
    for (std::size_t i = 0; i < img.size(); ++i) out.pixels[i] = std::pow(img.pixels[i], gamma);
    return out;
}

struct PreprocessConfig {
    ClaheConfig clahe;
    double gamma = 1.0 / 1.2;
};

// channel mix -> CLAHE -> gamma, in that order
inline GrayImage preprocess_pipeline(const RgbImage& img, const PreprocessConfig& cfg) {
    return gamma_correct(clahe(channel_mix(img), cfg.clahe), cfg.gamma);
}

} // namespace mdfi
