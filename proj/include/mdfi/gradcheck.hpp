#pragma once

#include <functional>
#include <vector>

#include "mdfi/errors.hpp"
#include "mdfi/tensor.hpp"

namespace mdfi {

// fn must build a fresh graph on the given tape and return a scalar.
using ScalarFn = std::function<TensorPtr(Tape&, const std::vector<TensorPtr>&)>;

// Central-difference check of analytic gradients over every coordinate of
// every requires_grad input. Returns max over coordinates of
// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double grad_check(const ScalarFn& fn, const std::vector<TensorPtr>& inputs,
                         double eps = 1e-5) {
    if (eps <= 0.0) throw ContractError("grad_check: eps must be > 0");

    auto eval = [&]() {
        Tape t;
        auto out = fn(t, inputs);
        if (!out || out->size() != 1) throw ContractError("grad_check: fn must return a scalar");
        return out->data[0];
    };

    for (const auto& in : inputs)
        if (in->requires_grad) { in->ensure_grad(); in->zero_grad(); }
    {
        Tape t;
        auto loss = fn(t, inputs);
        if (!loss || loss->size() != 1) throw ContractError("grad_check: fn must return a scalar");
        t.backward(loss);
    }

    double max_err = 0.0;
    for (const auto& in : inputs) {
        if (!in->requires_grad) continue;
        for (std::size_t j = 0; j < in->size(); ++j) {
            const double saved = in->data[j];
            in->data[j] = saved + eps;
            const double fp = eval();
            in->data[j] = saved - eps;
            const double fm = eval();
            in->data[j] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double analytic = in->grad[j];
            const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
            max_err = std::max(max_err, std::fabs(analytic - numeric) / denom);
        }
    }
    return max_err;
}

} // namespace mdfi
