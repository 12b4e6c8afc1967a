#pragma once

#include <cmath>
#include <vector>

#include "mdfi/errors.hpp"
#include "mdfi/image.hpp"
#include "mdfi/rng.hpp"
#include "mdfi/tensor.hpp"

namespace mdfi {

// Hyperparameters of the pulse-coupling iteration: linking strength,
// threshold decay/gain and the unroll length.
struct DpcnParams {
    double beta = 0.4;
    double alpha_e = 0.5;
    double v_e = 25.0;
    int iterations = 15;

    void validate() const {
        if (beta < 0.0) throw ConfigError("dpcn: beta must be >= 0");
        if (alpha_e <= 0.0) throw ConfigError("dpcn: alpha_e must be > 0");
        if (v_e < 0.0) throw ConfigError("dpcn: v_e must be >= 0");
        if (iterations < 1) throw ConfigError("dpcn: iterations must be >= 1");
    }
};

// The five subsystem maps of one iteration.
struct DpcnState {
    TensorPtr feed;      // F(n), equals the input image at every step
    TensorPtr link;      // L(n)
    TensorPtr internal;  // U(n)
    TensorPtr threshold; // E(n)
    TensorPtr fire;      // Y(n)
};

// 3x3 deformable convolution: a single trainable kernel plus a conv layer
// that predicts (row, col) sampling offsets per kernel tap from the input
// map. Offsets are clamped to +/- offset_clamp pixels and sample
// coordinates are clamped to the image rectangle.
struct DeformConvLayer {
    TensorPtr weight;       // [1,1,3,3]
    TensorPtr offset_weight; // [18,1,3,3]
    TensorPtr offset_bias;   // [18]
    double offset_clamp = 2.0;

    std::vector<TensorPtr> parameters() const { return {weight, offset_weight, offset_bias}; }
};

// Random kernel, zero offset predictor: the layer starts out exactly
// equal to a standard 3x3 convolution.
inline DeformConvLayer make_deform_layer(Rng& rng) {
    DeformConvLayer l;
    l.weight = init_conv_weight(rng, 1, 1, 3);
    l.offset_weight = Tensor::zeros({18, 1, 3, 3}, true);
    l.offset_bias = Tensor::zeros({18}, true);
    return l;
}

// Default enhancement kernel: the inverse-distance linking pattern
// (0 at the center) normalized to sum 1 and scaled by linking_gain.
// The gain sets how hard neighboring activity drives the modulation
// product and is what makes the iteration separate gray levels instead
// of compressing them.
inline DeformConvLayer make_enhancement_layer(double linking_gain = 250.0) {
    DeformConvLayer l;
    const double s = linking_gain / 6.0;
    l.weight = Tensor::from({1, 1, 3, 3},
                            {0.5 * s, 1.0 * s, 0.5 * s,
                             1.0 * s, 0.0,     1.0 * s,
                             0.5 * s, 1.0 * s, 0.5 * s},
                            true);
    l.offset_weight = Tensor::zeros({18, 1, 3, 3}, true);
    l.offset_bias = Tensor::zeros({18}, true);
    return l;
}

namespace detail {

// Offset channel layout: tap t = (i+1)*3 + (j+1) for kernel position
// (i,j) in {-1,0,1}^2; channel 2t is the row offset, 2t+1 the column
// offset.
inline TensorPtr deform_sample(Tape& tape, const TensorPtr& x, const TensorPtr& weight,
                               const TensorPtr& offsets) {
    const std::size_t h = x->shape[1], w = x->shape[2];
    auto out = Tensor::zeros({1, h, w});

    auto sample = [&](std::size_t m, std::size_t n, int tap) {
        const int i = tap / 3 - 1, j = tap % 3 - 1;
        const double dm = offsets->data[(2 * tap) * h * w + m * w + n];
        const double dn = offsets->data[(2 * tap + 1) * h * w + m * w + n];
        double r = static_cast<double>(m) + i + dm;
        double c = static_cast<double>(n) + j + dn;
        r = std::min(std::max(r, 0.0), static_cast<double>(h - 1));
        c = std::min(std::max(c, 0.0), static_cast<double>(w - 1));
        const std::size_t r0 = static_cast<std::size_t>(r);
        const std::size_t c0 = static_cast<std::size_t>(c);
        const std::size_t r1 = std::min(r0 + 1, h - 1);
        const std::size_t c1 = std::min(c0 + 1, w - 1);
        const double fr = r - static_cast<double>(r0);
        const double fc = c - static_cast<double>(c0);
        return (1.0 - fr) * (1.0 - fc) * x->data[r0 * w + c0] +
               (1.0 - fr) * fc * x->data[r0 * w + c1] +
               fr * (1.0 - fc) * x->data[r1 * w + c0] +
               fr * fc * x->data[r1 * w + c1];
    };

    for (std::size_t m = 0; m < h; ++m)
        for (std::size_t n = 0; n < w; ++n) {
            double acc = 0.0;
            for (int tap = 0; tap < 9; ++tap)
                acc += weight->data[tap] * sample(m, n, tap);
            out->data[m * w + n] = acc;
        }

    if (detail::any_requires_grad({&x, &weight, &offsets})) {
        out->requires_grad = true;
        tape.record(out, [x, weight, offsets, out] {
            const std::size_t h2 = x->shape[1], w2 = x->shape[2];
            if (x->requires_grad) x->ensure_grad();
            if (weight->requires_grad) weight->ensure_grad();
            if (offsets->requires_grad) offsets->ensure_grad();
            for (std::size_t m = 0; m < h2; ++m) {
                for (std::size_t n = 0; n < w2; ++n) {
                    const double g = out->grad[m * w2 + n];
                    if (g == 0.0) continue;
                    for (int tap = 0; tap < 9; ++tap) {
                        const int i = tap / 3 - 1, j = tap % 3 - 1;
                        const double dm = offsets->data[(2 * tap) * h2 * w2 + m * w2 + n];
                        const double dn = offsets->data[(2 * tap + 1) * h2 * w2 + m * w2 + n];
                        const double r_raw = static_cast<double>(m) + i + dm;
                        const double c_raw = static_cast<double>(n) + j + dn;
                        const bool r_in = r_raw >= 0.0 && r_raw <= static_cast<double>(h2 - 1);
                        const bool c_in = c_raw >= 0.0 && c_raw <= static_cast<double>(w2 - 1);
                        const double r = std::min(std::max(r_raw, 0.0), static_cast<double>(h2 - 1));
                        const double c = std::min(std::max(c_raw, 0.0), static_cast<double>(w2 - 1));
                        const std::size_t r0 = static_cast<std::size_t>(r);
                        const std::size_t c0 = static_cast<std::size_t>(c);
                        const std::size_t r1 = std::min(r0 + 1, h2 - 1);
                        const std::size_t c1 = std::min(c0 + 1, w2 - 1);
                        const double fr = r - static_cast<double>(r0);
                        const double fc = c - static_cast<double>(c0);
                        const double x00 = x->data[r0 * w2 + c0], x01 = x->data[r0 * w2 + c1];
                        const double x10 = x->data[r1 * w2 + c0], x11 = x->data[r1 * w2 + c1];
                        const double wv = weight->data[tap];
                        if (weight->requires_grad) {
                            const double v = (1.0 - fr) * (1.0 - fc) * x00 + (1.0 - fr) * fc * x01 +
                                             fr * (1.0 - fc) * x10 + fr * fc * x11;
                            weight->grad[tap] += g * v;
                        }
                        if (x->requires_grad) {
                            const double gw = g * wv;
                            x->grad[r0 * w2 + c0] += gw * (1.0 - fr) * (1.0 - fc);
                            x->grad[r0 * w2 + c1] += gw * (1.0 - fr) * fc;
                            x->grad[r1 * w2 + c0] += gw * fr * (1.0 - fc);
                            x->grad[r1 * w2 + c1] += gw * fr * fc;
                        }
                        if (offsets->requires_grad) {
                            if (r_in)
                                offsets->grad[(2 * tap) * h2 * w2 + m * w2 + n] +=
                                    g * wv * ((1.0 - fc) * (x10 - x00) + fc * (x11 - x01));
                            if (c_in)
                                offsets->grad[(2 * tap + 1) * h2 * w2 + m * w2 + n] +=
                                    g * wv * ((1.0 - fr) * (x01 - x00) + fr * (x11 - x10));
                        }
                    }
                }
            }
        });
    }
    return out;
}

} // namespace detail

// Deformable 3x3 convolution of a single-channel map (the layer's offset
// predictor supplies per-tap fractional displacements).
inline TensorPtr deform_conv2d(Tape& tape, const TensorPtr& x, const DeformConvLayer& layer) {
    if (x->shape.size() != 3 || x->shape[0] != 1)
        throw DimensionError("deform_conv2d: input must be [1,H,W]");
    if (x->shape[1] < 3 || x->shape[2] < 3)
        throw DimensionError("deform_conv2d: input must be at least 3x3");
    auto offsets = conv2d(tape, x, layer.offset_weight, layer.offset_bias, 1);
    auto clamped = clamp(tape, offsets, -layer.offset_clamp, layer.offset_clamp);
    return detail::deform_sample(tape, x, layer.weight, clamped);
}

inline DpcnState dpcn_initial_state(const TensorPtr& input) {
    DpcnState s;
    s.feed = input;
    s.link = Tensor::zeros(input->shape);
    s.internal = Tensor::zeros(input->shape);
    s.threshold = Tensor::zeros(input->shape);
    s.fire = Tensor::zeros(input->shape);
    return s;
}

// One pulse-coupling iteration:
//   L(n) = DeformConv(Y(n-1))
//   F(n) = I
//   U(n) = F(n) * (1 + beta * L(n))
//   E(n) = exp(-alpha_e) * E(n-1) + v_e * Y(n-1)
//   Y(n) = sigmoid(U(n) - E(n))
inline DpcnState dpcn_step(Tape& tape, const DpcnState& prev, const TensorPtr& input,
                           const DpcnParams& params, const DeformConvLayer& layer) {
    params.validate();
    require_same_shape(*prev.fire, *input, "dpcn_step");
    require_same_shape(*prev.threshold, *input, "dpcn_step");
    DpcnState s;
    s.link = deform_conv2d(tape, prev.fire, layer);
    s.feed = input;
    s.internal = mul(tape, s.feed, add_scalar(tape, scale(tape, s.link, params.beta), 1.0));
    s.threshold = add(tape, scale(tape, prev.threshold, std::exp(-params.alpha_e)),
                      scale(tape, prev.fire, params.v_e));
    s.fire = sigmoid(tape, sub(tape, s.internal, s.threshold));
    return s;
}

// Unrolled iteration from Y(0)=0, E(0)=0; returns Y(1..N). The whole
// sequence stays on the tape, so gradients flow back through every step.
inline std::vector<TensorPtr> dpcn_run(Tape& tape, const TensorPtr& input,
                                       const DpcnParams& params, const DeformConvLayer& layer) {
    params.validate();
    DpcnState s = dpcn_initial_state(input);
    std::vector<TensorPtr> fires;
    fires.reserve(static_cast<std::size_t>(params.iterations));
    for (int n = 1; n <= params.iterations; ++n) {
        s = dpcn_step(tape, s, input, params, layer);
        fires.push_back(s.fire);
    }
    return fires;
}

// |mean(255*map) over vessel - mean(255*map) over background|
inline double contrast_gap(const GrayImage& map, const Mask& label) {
    if (map.width != label.width || map.height != label.height)
        throw DimensionError("contrast_gap: map and label shapes differ");
    double sv = 0.0, sb = 0.0;
    std::size_t nv = 0, nb = 0;
    for (std::size_t i = 0; i < map.size(); ++i) {
        if (label.v[i]) { sv += map.pixels[i]; ++nv; }
        else { sb += map.pixels[i]; ++nb; }
    }
    if (nv == 0 || nb == 0)
        throw ContractError("contrast_gap: label needs at least one vessel and one background pixel");
    return std::fabs(255.0 * sv / static_cast<double>(nv) - 255.0 * sb / static_cast<double>(nb));
}

inline double contrast_gap(const TensorPtr& map, const Mask& label) {
    return contrast_gap(tensor_to_gray(*map), label);
}

// Channel-stack of selected iteration maps; indices are 1-based into Y(1..N).
inline TensorPtr select_iterations(Tape& tape, const std::vector<TensorPtr>& seq,
                                   const std::vector<int>& indices) {
    if (indices.empty()) throw ContractError("select_iterations: empty index list");
    std::vector<TensorPtr> picked;
    picked.reserve(indices.size());
    for (int idx : indices) {
        if (idx < 1 || static_cast<std::size_t>(idx) > seq.size())
            throw ContractError("select_iterations: index " + std::to_string(idx) +
                                " outside 1.." + std::to_string(seq.size()));
        picked.push_back(seq[static_cast<std::size_t>(idx) - 1]);
    }
    return concat_channels(tape, picked);
}

} // namespace mdfi
