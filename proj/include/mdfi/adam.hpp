#pragma once

#include <cmath>
#include <vector>

#include "mdfi/errors.hpp"
#include "mdfi/tensor.hpp"

namespace mdfi {

// Adam with bias correction. lr comes straight from the training setup;
// beta/eps defaults follow the usual convention since nothing else is
// specified anywhere.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<std::vector<double>> m;   // first moments, aligned with params
    std::vector<std::vector<double>> v;   // second moments

    void init(const std::vector<TensorPtr>& params) {
        if (lr <= 0.0) throw ContractError("adam: lr must be > 0");
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p->size(), 0.0);
            v.emplace_back(p->size(), 0.0);
        }
        step = 0;
    }
};

inline void adam_step(AdamState& st, const std::vector<TensorPtr>& params) {
    if (st.m.size() != params.size())
        throw DimensionError("adam_step: state not initialized for this parameter list");
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        if (st.m[i].size() != p.size())
            throw DimensionError("adam_step: moment buffer does not match parameter shape");
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = p.has_grad() ? p.grad[j] : 0.0;
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g;
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g * g;
            const double mh = m[j] / bc1;
            const double vh = v[j] / bc2;
            p.data[j] -= st.lr * mh / (std::sqrt(vh) + st.eps);
        }
    }
}

} // namespace mdfi
