#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "mdfi/errors.hpp"
#include "mdfi/image.hpp"
#include "mdfi/tensor.hpp"

namespace mdfi {

struct LossConfig {
    double w0 = 0.9;    // background class weight
    double w1 = 0.1;    // vessel class weight
    double eps = 1e-7;  // probability clamp before logs
    // The per-class overlap numerator. The subtraction variant mirrors the
    // printed formula; it vanishes at maximal error rather than at the
    // optimum, so the product (soft Dice) form is the default.
    bool dice_product_form = true;

    void validate() const {
        if (w0 < 0.0 || w1 < 0.0) throw ConfigError("loss: class weights must be >= 0");
        if (!(eps > 0.0 && eps < 0.01)) throw ConfigError("loss: eps must be in (0, 0.01)");
    }
};

struct LossInputs {
    TensorPtr prob;            // [1,H,W], values in (0,1)
    Mask target;               // binary ground truth
    std::optional<Mask> fov;   // restricts the pixel set when present
};

// Class-weighted joint loss: per class k in {0,1},
//   dice_k = 1 - 2*sum(p_k*g_k) / (sum(p_k) + sum(g_k))
//   bce_k  = -(1/N) * sum(g_k*log(clamp(p_k)) + (1-g_k)*log(clamp(1-p_k)))
//   loss   = sum_k W_k * (dice_k/2 + bce_k/2)
// over the in-scope pixels (N = their count). With p_0 = 1-p and
// g_0 = 1-g the two per-class BCE sums are the same expression, so it is
// evaluated once and shared.
inline TensorPtr weighted_joint_loss(Tape& tape, const LossInputs& in, const LossConfig& cfg) {
    cfg.validate();
    const auto& p = in.prob;
    if (p->shape.size() != 3 || p->shape[0] != 1)
        throw DimensionError("loss: prob must be [1,H,W]");
    const std::size_t h = p->shape[1], w = p->shape[2];
    if (in.target.width != w || in.target.height != h)
        throw DimensionError("loss: target shape does not match prob");
    if (in.fov && (in.fov->width != w || in.fov->height != h))
        throw DimensionError("loss: fov shape does not match prob");

    const std::size_t n_px = h * w;
    std::vector<double> fov_d(n_px, 1.0);
    if (in.fov)
        for (std::size_t i = 0; i < n_px; ++i) fov_d[i] = in.fov->v[i] ? 1.0 : 0.0;
    double n_scope = 0.0;
    for (double v : fov_d) n_scope += v;
    if (n_scope == 0.0) throw ContractError("loss: no pixels in scope");

    // constant per-class masks restricted to the scope
    std::vector<double> g1f(n_px), g0f(n_px);
    for (std::size_t i = 0; i < n_px; ++i) {
        const double g = in.target.v[i] ? 1.0 : 0.0;
        g1f[i] = g * fov_d[i];
        g0f[i] = (1.0 - g) * fov_d[i];
    }
    const Shape shp = p->shape;
    auto g1f_t = Tensor::from(shp, g1f);
    auto g0f_t = Tensor::from(shp, g0f);
    auto fov_t = Tensor::from(shp, std::move(fov_d));

    auto p1 = p;
    auto p0 = add_scalar(tape, scale(tape, p, -1.0), 1.0);

    auto dice_for = [&](const TensorPtr& pk, const TensorPtr& gkf_t, double gk_sum) {
        auto pk_scope = mul(tape, pk, fov_t);
        TensorPtr num;
        if (cfg.dice_product_form) {
            num = scale(tape, sum(tape, mul(tape, pk, gkf_t)), 2.0);
        } else {
            num = scale(tape, sum(tape, sub(tape, gkf_t, pk_scope)), 2.0);
        }
        auto den = add(tape, sum(tape, pk_scope), Tensor::scalar(gk_sum));
        return sub(tape, Tensor::scalar(1.0), div_elem(tape, num, den));
    };
    double g1_sum = 0.0, g0_sum = 0.0;
    for (std::size_t i = 0; i < n_px; ++i) { g1_sum += g1f[i]; g0_sum += g0f[i]; }
    auto dice1 = dice_for(p1, g1f_t, g1_sum);
    auto dice0 = dice_for(p0, g0f_t, g0_sum);

    auto pc = clamp(tape, p, cfg.eps, 1.0 - cfg.eps);
    auto log_p = log_elem(tape, pc);
    auto log_1mp = log_elem(tape, add_scalar(tape, scale(tape, pc, -1.0), 1.0));
    auto bce = scale(tape,
                     sum(tape, add(tape, mul(tape, g1f_t, log_p), mul(tape, g0f_t, log_1mp))),
                     -1.0 / n_scope);

    auto class0 = add(tape, scale(tape, dice0, 0.5), scale(tape, bce, 0.5));
    auto class1 = add(tape, scale(tape, dice1, 0.5), scale(tape, bce, 0.5));
    return add(tape, scale(tape, class0, cfg.w0), scale(tape, class1, cfg.w1));
}

// Deep-supervision aggregate: weighted sum of the joint loss over each
// listed map (side outputs plus the fused map); weights must sum to 1.
inline TensorPtr combined_supervision_loss(Tape& tape, const std::vector<TensorPtr>& maps,
                                           const Mask& target, const std::optional<Mask>& fov,
                                           const LossConfig& cfg,
                                           const std::vector<double>& weights) {
    if (maps.empty()) throw ContractError("combined_supervision_loss: no maps");
    if (maps.size() != weights.size())
        throw ContractError("combined_supervision_loss: weights length does not match maps");
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (std::fabs(wsum - 1.0) > 1e-9)
        throw ContractError("combined_supervision_loss: weights must sum to 1");
    TensorPtr total;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        LossInputs li{maps[i], target, fov};
        auto term = scale(tape, weighted_joint_loss(tape, li, cfg), weights[i]);
        total = total ? add(tape, total, term) : term;
    }
    return total;
}

} // namespace mdfi
