#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mdfi/errors.hpp"
#include "mdfi/rng.hpp"

namespace mdfi {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;
using Shape = std::vector<std::size_t>;
using NamedParams = std::vector<std::pair<std::string, TensorPtr>>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

// Dense row-major double tensor. Data is written once by the op that
// creates it; afterwards only the grad buffer mutates (accumulation
// during backward), which is what makes finished graphs safe to read
// from several threads.
class Tensor {
public:
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;   // empty until backward touches this tensor
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d, bool rg = false)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }

    static TensorPtr zeros(Shape s, bool rg = false) {
        const std::size_t n = shape_numel(s);
        return std::make_shared<Tensor>(std::move(s), std::vector<double>(n, 0.0), rg);
    }
    static TensorPtr full(Shape s, double v, bool rg = false) {
        const std::size_t n = shape_numel(s);
        return std::make_shared<Tensor>(std::move(s), std::vector<double>(n, v), rg);
    }
    static TensorPtr from(Shape s, std::vector<double> d, bool rg = false) {
        return std::make_shared<Tensor>(std::move(s), std::move(d), rg);
    }
    static TensorPtr scalar(double v, bool rg = false) {
        return std::make_shared<Tensor>(Shape{1}, std::vector<double>{v}, rg);
    }

    std::size_t size() const { return data.size(); }

    // [C,H,W] accessors for the common 3-d case
    std::size_t channels() const { return shape.size() == 3 ? shape[0] : 1; }
    std::size_t height() const { return shape.size() == 3 ? shape[1] : (shape.size() == 2 ? shape[0] : 1); }
    std::size_t width() const { return shape.size() == 3 ? shape[2] : (shape.size() == 2 ? shape[1] : shape[0]); }

    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return data[(c * shape[1] + y) * shape[2] + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return data[(c * shape[1] + y) * shape[2] + x];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }
    bool has_grad() const { return grad.size() == data.size(); }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                             " vs " + shape_str(b.shape));
}

// Execution-ordered record of differentiable operations. Ops append
// themselves during the forward pass, so the record is topologically
// sorted by construction; backward() replays it in reverse.
//
// Gradient semantics: tensors produced by a recorded op are graph
// intermediates; their grad is reset at the start of every backward()
// call. Everything else (parameters, inputs) is a leaf whose grad only
// ever accumulates, so calling backward() repeatedly without zeroing
// leaf grads sums the contributions.
class Tape {
public:
    void record(TensorPtr output, std::function<void()> backward_fn) {
        entries_.push_back(Entry{std::move(output), std::move(backward_fn)});
    }

    std::size_t size() const { return entries_.size(); }

    void backward(const TensorPtr& loss) {
        if (!loss || loss->size() != 1)
            throw ContractError("backward: loss must be a single scalar tensor");
        for (auto& e : entries_) {
            e.output->ensure_grad();
            e.output->zero_grad();
        }
        loss->ensure_grad();
        loss->grad[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
            it->backward_fn();
    }

    void clear() { entries_.clear(); }

private:
    struct Entry {
        TensorPtr output;
        std::function<void()> backward_fn;
    };
    std::vector<Entry> entries_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const TensorPtr*> ts) {
    for (const TensorPtr* t : ts)
        if (*t && (*t)->requires_grad) return true;
    return false;
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(*a, *b, "add");
    auto out = Tensor::zeros(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (detail::any_requires_grad({&a, &b})) {
        out->requires_grad = true;
        tape.record(out, [a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(*a, *b, "sub");
    auto out = Tensor::zeros(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (detail::any_requires_grad({&a, &b})) {
        out->requires_grad = true;
        tape.record(out, [a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] -= out->grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(*a, *b, "mul");
    auto out = Tensor::zeros(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (detail::any_requires_grad({&a, &b})) {
        out->requires_grad = true;
        tape.record(out, [a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
            }
        });
    }
    return out;
}

inline TensorPtr div_elem(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(*a, *b, "div");
    auto out = Tensor::zeros(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] / b->data[i];
    if (detail::any_requires_grad({&a, &b})) {
        out->requires_grad = true;
        tape.record(out, [a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] / b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < b->size(); ++i)
                    b->grad[i] -= out->grad[i] * a->data[i] / (b->data[i] * b->data[i]);
            }
        });
    }
    return out;
}

inline TensorPtr scale(Tape& tape, const TensorPtr& x, double c) {
    auto out = Tensor::zeros(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = c * x->data[i];
    if (x->requires_grad) {
        out->requires_grad = true;
        tape.record(out, [x, out, c] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += c * out->grad[i];
        });
    }
    return out;
}

inline TensorPtr add_scalar(Tape& tape, const TensorPtr& x, double c) {
    auto out = Tensor::zeros(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = x->data[i] + c;
    if (x->requires_grad) {
        out->requires_grad = true;
        tape.record(out, [x, out] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

inline TensorPtr sigmoid(Tape& tape, const TensorPtr& x) {
    auto out = Tensor::zeros(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = 1.0 / (1.0 + std::exp(-x->data[i]));
    if (x->requires_grad) {
        out->requires_grad = true;
        tape.record(out, [x, out] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i) {
                const double s = out->data[i];
                x->grad[i] += out->grad[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

inline TensorPtr relu(Tape& tape, const TensorPtr& x) {
    auto out = Tensor::zeros(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
    if (x->requires_grad) {
        out->requires_grad = true;
        tape.record(out, [x, out] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i)
                if (x->data[i] > 0.0) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

// |x|; backward uses sign(x) with subgradient 0 at x = 0
inline TensorPtr abs_val(Tape& tape, const TensorPtr& x) {
    auto out = Tensor::zeros(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = std::fabs(x->data[i]);
    if (x->requires_grad) {
        out->requires_grad = true;
        tape.record(out, [x, out] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i) {
                const double v = x->data[i];
                if (v > 0.0) x->grad[i] += out->grad[i];
                else if (v < 0.0) x->grad[i] -= out->grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr log_elem(Tape& tape, const TensorPtr& x) {
    auto out = Tensor::zeros(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = std::log(x->data[i]);
    if (x->requires_grad) {
        out->requires_grad = true;
        tape.record(out, [x, out] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i] / x->data[i];
        });
    }
    return out;
}

// clamp to [lo,hi]; gradient passes through where lo <= x <= hi and is 0 outside
inline TensorPtr clamp(Tape& tape, const TensorPtr& x, double lo, double hi) {
    auto out = Tensor::zeros(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = std::min(hi, std::max(lo, x->data[i]));
    if (x->requires_grad) {
        out->requires_grad = true;
        tape.record(out, [x, out, lo, hi] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i)
                if (x->data[i] >= lo && x->data[i] <= hi) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

inline TensorPtr sum(Tape& tape, const TensorPtr& x) {
    double acc = 0.0;
    for (double v : x->data) acc += v;
    auto out = Tensor::scalar(acc);
    if (x->requires_grad) {
        out->requires_grad = true;
        tape.record(out, [x, out] {
            x->ensure_grad();
            const double g = out->grad[0];
            for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += g;
        });
    }
    return out;
}

inline TensorPtr concat_channels(Tape& tape, const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ContractError("concat_channels: empty input list");
    for (const auto& p : parts) {
        if (p->shape.size() != 3)
            throw DimensionError("concat_channels: inputs must be rank-3 [C,H,W]");
        if (p->shape[1] != parts[0]->shape[1] || p->shape[2] != parts[0]->shape[2])
            throw DimensionError("concat_channels: spatial dims differ");
    }
    std::size_t c_total = 0;
    for (const auto& p : parts) c_total += p->shape[0];
    const std::size_t plane = parts[0]->shape[1] * parts[0]->shape[2];
    auto out = Tensor::zeros({c_total, parts[0]->shape[1], parts[0]->shape[2]});
    std::size_t off = 0;
    bool rg = false;
    for (const auto& p : parts) {
        std::copy(p->data.begin(), p->data.end(), out->data.begin() + static_cast<std::ptrdiff_t>(off));
        off += p->size();
        rg = rg || p->requires_grad;
    }
    if (rg) {
        out->requires_grad = true;
        tape.record(out, [parts, out, plane] {
            std::size_t off2 = 0;
            for (const auto& p : parts) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < p->size(); ++i) p->grad[i] += out->grad[off2 + i];
                }
                off2 += p->shape[0] * plane;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation plus bias
// ---------------------------------------------------------------------------
//
// input [C_in,H,W], weight [C_out,C_in,k,k] with k odd, bias [C_out],
// zero padding `pad` on all sides. Output is [C_out,H+2p-k+1,W+2p-k+1];
// pad=(k-1)/2 preserves the spatial shape.
//
// Each input plane is copied once into a zero-padded scratch buffer, which
// removes all boundary branching from the hot loops: the forward pass and
// the input-gradient pass are then single sweeps with all k*k taps fused
// (the input gradient is the same correlation with the kernel flipped and
// padding k-1-pad), and the weight gradient fuses one kernel row of
// independent accumulators per sweep. Summation order is fixed, so results
// are bit-reproducible.

namespace detail {

inline void pad_plane(const double* in, std::size_t h, std::size_t w, int pad,
                      std::vector<double>& out) {
    const std::size_t pw = w + 2 * static_cast<std::size_t>(pad);
    const std::size_t ph = h + 2 * static_cast<std::size_t>(pad);
    out.assign(pw * ph, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        std::copy(in + y * w, in + (y + 1) * w,
                  out.begin() + static_cast<std::ptrdiff_t>((y + pad) * pw + pad));
}

#if defined(__GNUC__) && !defined(MDFI_NO_SIMD)
#define MDFI_SIMD_V4 1
using v4df = double __attribute__((vector_size(32)));

inline v4df v4_loadu(const double* p) {
    v4df v;
    __builtin_memcpy(&v, p, sizeof(v));
    return v;
}
inline void v4_storeu(double* p, v4df v) { __builtin_memcpy(p, &v, sizeof(v)); }
#endif

// out[oy][ox] += sum_{ky,kx} wk[ky*K+kx] * pin[(oy+ky)*pw + ox+kx]
// (plain element-parallel form; the compiler vectorizes the ox loop)
template <int K>
inline void corr_fused(const double* pin, std::size_t pw, const double* wk, double* out,
                       std::size_t oh, std::size_t ow) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
        const double* rows[K];
        for (int ky = 0; ky < K; ++ky) rows[ky] = pin + (oy + static_cast<std::size_t>(ky)) * pw;
        double* orow = out + oy * ow;
        for (std::size_t ox = 0; ox < ow; ++ox) {
            double acc = orow[ox];
            for (int ky = 0; ky < K; ++ky)
                for (int kx = 0; kx < K; ++kx)
                    acc += wk[ky * K + kx] * rows[ky][ox + static_cast<std::size_t>(kx)];
            orow[ox] = acc;
        }
    }
}

inline void corr_fused_generic(const double* pin, std::size_t pw, const double* wk, int k,
                               double* out, std::size_t oh, std::size_t ow) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
        double* orow = out + oy * ow;
        for (int ky = 0; ky < k; ++ky) {
            const double* row = pin + (oy + static_cast<std::size_t>(ky)) * pw;
            for (int kx = 0; kx < k; ++kx) {
                const double wv = wk[ky * k + kx];
                if (wv == 0.0) continue;
                const double* r = row + kx;
                for (std::size_t ox = 0; ox < ow; ++ox) orow[ox] += wv * r[ox];
            }
        }
    }
}

inline void corr_dispatch(const double* pin, std::size_t pw, const double* wk, int k,
                          double* out, std::size_t oh, std::size_t ow) {
    switch (k) {
        case 1: corr_fused<1>(pin, pw, wk, out, oh, ow); break;
        case 3: corr_fused<3>(pin, pw, wk, out, oh, ow); break;
        case 5: corr_fused<5>(pin, pw, wk, out, oh, ow); break;
        default: corr_fused_generic(pin, pw, wk, k, out, oh, ow); break;
    }
}

// wg[ky*K+kx] += sum_{oy,ox} gout[oy*ow+ox] * pin[(oy+ky)*pw + ox+kx],
// one kernel row of taps per sweep (each gradient element is loaded once
// and feeds K interleaved accumulator quads; lane layout matches the
// scalar tail, so the summation order is fixed)
template <int K>
inline void corr_wgrad(const double* pin, std::size_t pw, const double* gout, std::size_t oh,
                       std::size_t ow, double* wg) {
    for (int ky = 0; ky < K; ++ky) {
#ifdef MDFI_SIMD_V4
        v4df acc[K];
        double tail[K];
        for (int kx = 0; kx < K; ++kx) { acc[kx] = v4df{0.0, 0.0, 0.0, 0.0}; tail[kx] = 0.0; }
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const double* row = pin + (oy + static_cast<std::size_t>(ky)) * pw;
            const double* grow = gout + oy * ow;
            std::size_t i = 0;
            for (; i + 4 <= ow; i += 4) {
                const v4df g = v4_loadu(grow + i);
                for (int kx = 0; kx < K; ++kx)
                    acc[kx] += g * v4_loadu(row + kx + i);
            }
            for (; i < ow; ++i) {
                const double g = grow[i];
                for (int kx = 0; kx < K; ++kx) tail[kx] += g * row[kx + i];
            }
        }
        for (int kx = 0; kx < K; ++kx)
            wg[ky * K + kx] += ((acc[kx][0] + acc[kx][1]) + (acc[kx][2] + acc[kx][3])) + tail[kx];
#else
        double acc[K][4];
        for (int kx = 0; kx < K; ++kx) acc[kx][0] = acc[kx][1] = acc[kx][2] = acc[kx][3] = 0.0;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const double* row = pin + (oy + static_cast<std::size_t>(ky)) * pw;
            const double* grow = gout + oy * ow;
            std::size_t i = 0;
            for (; i + 4 <= ow; i += 4) {
                const double g0 = grow[i], g1 = grow[i + 1], g2 = grow[i + 2], g3 = grow[i + 3];
                for (int kx = 0; kx < K; ++kx) {
                    const double* r = row + kx + i;
                    acc[kx][0] += g0 * r[0];
                    acc[kx][1] += g1 * r[1];
                    acc[kx][2] += g2 * r[2];
                    acc[kx][3] += g3 * r[3];
                }
            }
            for (; i < ow; ++i) {
                const double g = grow[i];
                for (int kx = 0; kx < K; ++kx) acc[kx][0] += g * row[kx + i];
            }
        }
        for (int kx = 0; kx < K; ++kx)
            wg[ky * K + kx] += (acc[kx][0] + acc[kx][1]) + (acc[kx][2] + acc[kx][3]);
#endif
    }
}

inline void corr_wgrad_generic(const double* pin, std::size_t pw, const double* gout,
                               std::size_t oh, std::size_t ow, int k, double* wg) {
    for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
            double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
            for (std::size_t oy = 0; oy < oh; ++oy) {
                const double* r = pin + (oy + static_cast<std::size_t>(ky)) * pw + kx;
                const double* grow = gout + oy * ow;
                std::size_t i = 0;
                for (; i + 4 <= ow; i += 4) {
                    a0 += grow[i] * r[i];
                    a1 += grow[i + 1] * r[i + 1];
                    a2 += grow[i + 2] * r[i + 2];
                    a3 += grow[i + 3] * r[i + 3];
                }
                for (; i < ow; ++i) a0 += grow[i] * r[i];
            }
            wg[ky * k + kx] += (a0 + a1) + (a2 + a3);
        }
}

inline void wgrad_dispatch(const double* pin, std::size_t pw, const double* gout, std::size_t oh,
                           std::size_t ow, int k, double* wg) {
    switch (k) {
        case 1: corr_wgrad<1>(pin, pw, gout, oh, ow, wg); break;
        case 3: corr_wgrad<3>(pin, pw, gout, oh, ow, wg); break;
        case 5: corr_wgrad<5>(pin, pw, gout, oh, ow, wg); break;
        default: corr_wgrad_generic(pin, pw, gout, oh, ow, k, wg); break;
    }
}

// sum with a fixed 4-way interleave
inline double reduce_plane(const double* p, std::size_t n) {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += p[i]; a1 += p[i + 1]; a2 += p[i + 2]; a3 += p[i + 3];
    }
    for (; i < n; ++i) a0 += p[i];
    return (a0 + a1) + (a2 + a3);
}

inline void conv2d_check(const Tensor& in, const Tensor& w, const Tensor& b, int pad) {
    if (in.shape.size() != 3) throw DimensionError("conv2d: input must be [C,H,W]");
    if (w.shape.size() != 4) throw DimensionError("conv2d: weight must be [C_out,C_in,k,k]");
    if (b.shape.size() != 1 || b.shape[0] != w.shape[0])
        throw DimensionError("conv2d: bias must be [C_out]");
    if (w.shape[2] != w.shape[3] || w.shape[2] % 2 == 0)
        throw DimensionError("conv2d: kernel must be square with odd size");
    if (w.shape[1] != in.shape[0])
        throw DimensionError("conv2d: weight C_in " + std::to_string(w.shape[1]) +
                             " does not match input C_in " + std::to_string(in.shape[0]));
    const long k = static_cast<long>(w.shape[2]);
    if (pad < 0 || pad > k - 1)
        throw ContractError("conv2d: pad must be in [0, k-1]");
    if (static_cast<long>(in.shape[1]) + 2 * pad - k + 1 < 1 ||
        static_cast<long>(in.shape[2]) + 2 * pad - k + 1 < 1)
        throw DimensionError("conv2d: output would be empty");
}

} // namespace detail

inline TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& weight,
                        const TensorPtr& bias, int pad) {
    detail::conv2d_check(*input, *weight, *bias, pad);
    const std::size_t ci_n = input->shape[0], h = input->shape[1], w = input->shape[2];
    const std::size_t co_n = weight->shape[0];
    const int k = static_cast<int>(weight->shape[2]);
    const std::size_t oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1;
    auto out = Tensor::zeros({co_n, oh, ow});

    const double* w_d = weight->data.data();
    for (std::size_t co = 0; co < co_n; ++co) {
        double* oplane = out->data.data() + co * oh * ow;
        std::fill(oplane, oplane + oh * ow, bias->data[co]);
    }
    std::vector<double> padded;
    const std::size_t pw = w + 2 * static_cast<std::size_t>(pad);
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
        detail::pad_plane(input->data.data() + ci * h * w, h, w, pad, padded);
        for (std::size_t co = 0; co < co_n; ++co)
            detail::corr_dispatch(padded.data(), pw, w_d + (co * ci_n + ci) * k * k, k,
                                  out->data.data() + co * oh * ow, oh, ow);
    }

    if (detail::any_requires_grad({&input, &weight, &bias})) {
        out->requires_grad = true;
        tape.record(out, [input, weight, bias, out, pad, k] {
            const std::size_t ci_n2 = input->shape[0], h2 = input->shape[1], w2 = input->shape[2];
            const std::size_t co_n2 = weight->shape[0];
            const std::size_t oh2 = out->shape[1], ow2 = out->shape[2];
            const std::size_t kk = static_cast<std::size_t>(k) * static_cast<std::size_t>(k);
            const double* go = out->grad.data();
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (std::size_t co = 0; co < co_n2; ++co)
                    bias->grad[co] += detail::reduce_plane(go + co * oh2 * ow2, oh2 * ow2);
            }
            std::vector<double> padded2;
            if (weight->requires_grad) {
                weight->ensure_grad();
                const std::size_t pw2 = w2 + 2 * static_cast<std::size_t>(pad);
                for (std::size_t ci = 0; ci < ci_n2; ++ci) {
                    detail::pad_plane(input->data.data() + ci * h2 * w2, h2, w2, pad, padded2);
                    for (std::size_t co = 0; co < co_n2; ++co)
                        detail::wgrad_dispatch(padded2.data(), pw2, go + co * oh2 * ow2, oh2, ow2,
                                               k, weight->grad.data() + (co * ci_n2 + ci) * kk);
                }
            }
            if (input->requires_grad) {
                input->ensure_grad();
                // correlation of the output gradient with the flipped kernel,
                // padded by k-1-pad
                const int ipad = k - 1 - pad;
                const std::size_t gpw = ow2 + 2 * static_cast<std::size_t>(ipad);
                const double* w_d2 = weight->data.data();
                std::vector<double> wflip(kk);
                for (std::size_t co = 0; co < co_n2; ++co) {
                    detail::pad_plane(go + co * oh2 * ow2, oh2, ow2, ipad, padded2);
                    for (std::size_t ci = 0; ci < ci_n2; ++ci) {
                        const double* wk = w_d2 + (co * ci_n2 + ci) * kk;
                        for (std::size_t t = 0; t < kk; ++t) wflip[t] = wk[kk - 1 - t];
                        detail::corr_dispatch(padded2.data(), gpw, wflip.data(), k,
                                              input->grad.data() + ci * h2 * w2, h2, w2);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// maxpool2: 2x2 window, stride 2
// ---------------------------------------------------------------------------
//
// Ties route the gradient to the first maximal cell in row-major window
// order, so backward is deterministic.

inline TensorPtr maxpool2(Tape& tape, const TensorPtr& input) {
    if (input->shape.size() != 3) throw DimensionError("maxpool2: input must be [C,H,W]");
    const std::size_t c_n = input->shape[0], h = input->shape[1], w = input->shape[2];
    if (h % 2 != 0 || w % 2 != 0)
        throw DimensionError("maxpool2: H and W must be even, got " + shape_str(input->shape));
    const std::size_t oh = h / 2, ow = w / 2;
    auto out = Tensor::zeros({c_n, oh, ow});
    auto argmax = std::make_shared<std::vector<std::size_t>>(c_n * oh * ow);
    for (std::size_t c = 0; c < c_n; ++c) {
        const double* iplane = input->data.data() + c * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::size_t base = (2 * oy) * w + 2 * ox;
                const std::size_t idx4[4] = {base, base + 1, base + w, base + w + 1};
                std::size_t best = idx4[0];
                double bv = iplane[idx4[0]];
                for (int t = 1; t < 4; ++t)
                    if (iplane[idx4[t]] > bv) { bv = iplane[idx4[t]]; best = idx4[t]; }
                out->data[(c * oh + oy) * ow + ox] = bv;
                (*argmax)[(c * oh + oy) * ow + ox] = c * h * w + best;
            }
        }
    }
    if (input->requires_grad) {
        out->requires_grad = true;
        tape.record(out, [input, out, argmax] {
            input->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i)
                input->grad[(*argmax)[i]] += out->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// upsample_bilinear2: x2 bilinear resize, align_corners=false
// ---------------------------------------------------------------------------
//
// Source coordinate for output index o is (o + 0.5)/2 - 0.5, clamped to
// the valid range, interpolated between floor/floor+1 neighbours. Exact
// on constant inputs because each output is a convex combination.

namespace detail {

struct LerpAxis {
    std::vector<std::size_t> i0, i1;
    std::vector<double> f;   // weight of i1
};

inline LerpAxis lerp_axis_x2(std::size_t n) {
    LerpAxis ax;
    ax.i0.resize(2 * n);
    ax.i1.resize(2 * n);
    ax.f.resize(2 * n);
    for (std::size_t o = 0; o < 2 * n; ++o) {
        double s = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        if (s < 0.0) s = 0.0;
        if (s > static_cast<double>(n - 1)) s = static_cast<double>(n - 1);
        const std::size_t i0 = static_cast<std::size_t>(s);
        const std::size_t i1 = std::min(i0 + 1, n - 1);
        ax.i0[o] = i0;
        ax.i1[o] = i1;
        ax.f[o] = s - static_cast<double>(i0);
    }
    return ax;
}

} // namespace detail

inline TensorPtr upsample_bilinear2(Tape& tape, const TensorPtr& input) {
    if (input->shape.size() != 3) throw DimensionError("upsample_bilinear2: input must be [C,H,W]");
    const std::size_t c_n = input->shape[0], h = input->shape[1], w = input->shape[2];
    const std::size_t oh = 2 * h, ow = 2 * w;
    auto out = Tensor::zeros({c_n, oh, ow});
    const auto ay = detail::lerp_axis_x2(h);
    const auto ax = detail::lerp_axis_x2(w);
    for (std::size_t c = 0; c < c_n; ++c) {
        const double* iplane = input->data.data() + c * h * w;
        double* oplane = out->data.data() + c * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const double fy = ay.f[oy];
            const double* r0 = iplane + ay.i0[oy] * w;
            const double* r1 = iplane + ay.i1[oy] * w;
            double* orow = oplane + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const double fx = ax.f[ox];
                const double v0 = r0[ax.i0[ox]] * (1.0 - fx) + r0[ax.i1[ox]] * fx;
                const double v1 = r1[ax.i0[ox]] * (1.0 - fx) + r1[ax.i1[ox]] * fx;
                orow[ox] = v0 * (1.0 - fy) + v1 * fy;
            }
        }
    }
    if (input->requires_grad) {
        out->requires_grad = true;
        tape.record(out, [input, out, ay, ax] {
            input->ensure_grad();
            const std::size_t c_n2 = input->shape[0], h2 = input->shape[1], w2 = input->shape[2];
            const std::size_t oh2 = out->shape[1], ow2 = out->shape[2];
            for (std::size_t c = 0; c < c_n2; ++c) {
                double* giplane = input->grad.data() + c * h2 * w2;
                const double* goplane = out->grad.data() + c * oh2 * ow2;
                for (std::size_t oy = 0; oy < oh2; ++oy) {
                    const double fy = ay.f[oy];
                    double* g0 = giplane + ay.i0[oy] * w2;
                    double* g1 = giplane + ay.i1[oy] * w2;
                    const double* grow = goplane + oy * ow2;
                    for (std::size_t ox = 0; ox < ow2; ++ox) {
                        const double fx = ax.f[ox];
                        const double g = grow[ox];
                        g0[ax.i0[ox]] += g * (1.0 - fy) * (1.0 - fx);
                        g0[ax.i1[ox]] += g * (1.0 - fy) * fx;
                        g1[ax.i0[ox]] += g * fy * (1.0 - fx);
                        g1[ax.i1[ox]] += g * fy * fx;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// parameter initialization
// ---------------------------------------------------------------------------

// uniform in [-s, s] with s = sqrt(1 / (C_in * k * k)) — fan-in scaling
inline TensorPtr init_conv_weight(Rng& rng, std::size_t c_out, std::size_t c_in, std::size_t k) {
    const double s = std::sqrt(1.0 / static_cast<double>(c_in * k * k));
    std::vector<double> d(c_out * c_in * k * k);
    for (double& v : d) v = rng.uniform(-s, s);
    return Tensor::from({c_out, c_in, k, k}, std::move(d), true);
}

inline TensorPtr init_bias(std::size_t c_out) {
    return Tensor::zeros({c_out}, true);
}

} // namespace mdfi
