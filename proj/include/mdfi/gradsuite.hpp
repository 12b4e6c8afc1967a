#pragma once

#include <string>
#include <vector>

#include "mdfi/dpcn.hpp"
#include "mdfi/gradcheck.hpp"
#include "mdfi/loss.hpp"
#include "mdfi/msu.hpp"
#include "mdfi/rng.hpp"
#include "mdfi/tensor.hpp"

namespace mdfi {

struct GradSuiteEntry {
    std::string op;
    double max_rel_err = 0.0;
};

namespace detail {

inline std::vector<double> rand_vec(Rng& rng, std::size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// scalarize through a sigmoid and a fixed random cotangent so the check
// exercises the op inside a nonlinear composite
inline TensorPtr project(Tape& tape, const TensorPtr& out, const TensorPtr& cotangent) {
    return sum(tape, mul(tape, sigmoid(tape, out), cotangent));
}

} // namespace detail

// Finite-difference validation of every differentiable kernel the network
// uses, over several seeds; returns the max relative error per op.
inline std::vector<GradSuiteEntry> run_gradcheck_suite(double eps = 1e-5, int n_seeds = 5) {
    std::vector<GradSuiteEntry> report{
        {"conv2d", 0.0}, {"deform_conv2d", 0.0}, {"msu_forward", 0.0},
        {"weighted_joint_loss", 0.0}, {"dpcn_run", 0.0}};

    for (int seed = 0; seed < n_seeds; ++seed) {
        {   // conv2d
            Rng rng(Rng::derive(101, static_cast<std::uint64_t>(seed)));
            auto in = Tensor::from({2, 6, 6}, detail::rand_vec(rng, 72, -1.0, 1.0), true);
            auto w = init_conv_weight(rng, 3, 2, 3);
            auto b = Tensor::from({3}, detail::rand_vec(rng, 3, -0.3, 0.3), true);
            auto cot = Tensor::from({3, 6, 6}, detail::rand_vec(rng, 108, -1.0, 1.0));
            auto fn = [&](Tape& t, const std::vector<TensorPtr>& xs) {
                return detail::project(t, conv2d(t, xs[0], xs[1], xs[2], 1), cot);
            };
            report[0].max_rel_err = std::max(report[0].max_rel_err, grad_check(fn, {in, w, b}, eps));
        }
        {   // deform_conv2d with fractional random offsets
            Rng rng(Rng::derive(202, static_cast<std::uint64_t>(seed)));
            auto x = Tensor::from({1, 8, 8}, detail::rand_vec(rng, 64, 0.1, 0.9), true);
            DeformConvLayer layer = make_deform_layer(rng);
            layer.offset_weight = Tensor::from({18, 1, 3, 3},
                                               detail::rand_vec(rng, 18 * 9, -0.12, 0.12), true);
            layer.offset_bias = Tensor::from({18}, detail::rand_vec(rng, 18, -0.25, 0.25), true);
            auto cot = Tensor::from({1, 8, 8}, detail::rand_vec(rng, 64, -1.0, 1.0));
            auto fn = [&](Tape& t, const std::vector<TensorPtr>&) {
                return detail::project(t, deform_conv2d(t, x, layer), cot);
            };
            report[1].max_rel_err = std::max(
                report[1].max_rel_err,
                grad_check(fn, {x, layer.weight, layer.offset_weight, layer.offset_bias}, eps));
        }
        {   // msu_forward
            Rng rng(Rng::derive(303, static_cast<std::uint64_t>(seed)));
            auto a = Tensor::from({1, 4, 4}, detail::rand_vec(rng, 16, -1.0, 1.0), true);
            auto b = Tensor::from({1, 4, 4}, detail::rand_vec(rng, 16, -1.0, 1.0), true);
            MsuBlock block = make_msu_block(rng, 1, 1);
            auto cot = Tensor::from({1, 4, 4}, detail::rand_vec(rng, 16, -1.0, 1.0));
            auto fn = [&](Tape& t, const std::vector<TensorPtr>&) {
                return detail::project(t, msu_forward(t, a, b, block), cot);
            };
            std::vector<TensorPtr> inputs{a, b};
            for (auto& p : block.parameters()) inputs.push_back(p);
            report[2].max_rel_err = std::max(report[2].max_rel_err, grad_check(fn, inputs, eps));
        }
        {   // weighted_joint_loss w.r.t. the probability map
            Rng rng(Rng::derive(404, static_cast<std::uint64_t>(seed)));
            auto p = Tensor::from({1, 8, 8}, detail::rand_vec(rng, 64, 0.05, 0.95), true);
            Mask g(8, 8), fov(8, 8);
            for (std::size_t i = 0; i < 64; ++i) {
                g.v[i] = rng.uniform() < 0.3 ? 1 : 0;
                fov.v[i] = rng.uniform() < 0.9 ? 1 : 0;
            }
            fov.v[0] = 1;
            LossConfig cfg;
            auto fn = [&](Tape& t, const std::vector<TensorPtr>&) {
                LossInputs li{p, g, fov};
                return weighted_joint_loss(t, li, cfg);
            };
            report[3].max_rel_err = std::max(report[3].max_rel_err, grad_check(fn, {p}, eps));
        }
        {   // 5-iteration dpcn_run w.r.t. the layer parameters
            Rng rng(Rng::derive(505, static_cast<std::uint64_t>(seed)));
            auto img = Tensor::from({1, 8, 8}, detail::rand_vec(rng, 64, 0.2, 0.8));
            DeformConvLayer layer = make_deform_layer(rng);
            layer.offset_weight = Tensor::from({18, 1, 3, 3},
                                               detail::rand_vec(rng, 18 * 9, -0.1, 0.1), true);
            layer.offset_bias = Tensor::from({18}, detail::rand_vec(rng, 18, -0.2, 0.2), true);
            DpcnParams params;
            params.beta = 0.4;
            params.alpha_e = 0.5;
            params.v_e = 1.0;
            params.iterations = 5;
            auto cot = Tensor::from({5, 8, 8}, detail::rand_vec(rng, 5 * 64, -1.0, 1.0));
            auto fn = [&](Tape& t, const std::vector<TensorPtr>&) {
                auto fires = dpcn_run(t, img, params, layer);
                return sum(t, mul(t, concat_channels(t, fires), cot));
            };
            report[4].max_rel_err = std::max(
                report[4].max_rel_err,
                grad_check(fn, {layer.weight, layer.offset_weight, layer.offset_bias}, eps));
        }
    }
    return report;
}

} // namespace mdfi
