#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mdfi/adam.hpp"
#include "mdfi/gradcheck.hpp"
#include "mdfi/tensor.hpp"

using namespace mdfi;

namespace {

std::vector<double> rand_vec(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

} // namespace

TEST_CASE("tensor shape/data consistency is enforced") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), DimensionError);
    auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t->size() == 6);
}

TEST_CASE("conv2d identity kernel reproduces the input") {
    Tape tape;
    auto in = Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto w = Tensor::from({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
    auto b = Tensor::zeros({1});
    auto out = conv2d(tape, in, w, b, 1);
    REQUIRE(out->shape == Shape{1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) CHECK(out->data[i] == in->data[i]);
}

TEST_CASE("conv2d all-zero weight gives a constant bias map") {
    Tape tape;
    Rng rng(1);
    auto in = Tensor::from({2, 4, 4}, rand_vec(rng, 32));
    auto w = Tensor::zeros({3, 2, 3, 3});
    auto b = Tensor::from({3}, {0.5, -1.25, 2.0});
    auto out = conv2d(tape, in, w, b, 1);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 16; ++i) CHECK(out->data[c * 16 + i] == b->data[c]);
}

TEST_CASE("conv2d window sum on the 1..16 grid") {
    Tape tape;
    std::vector<double> vals(16);
    for (int i = 0; i < 16; ++i) vals[static_cast<std::size_t>(i)] = i + 1;
    auto in = Tensor::from({1, 4, 4}, vals);
    auto w = Tensor::full({1, 1, 3, 3}, 1.0);
    auto out = conv2d(tape, in, w, Tensor::zeros({1}), 1);
    CHECK(out->at(0, 1, 1) == 54.0);   // 1+2+3+5+6+7+9+10+11
    // every cell equals an independently tallied window sum
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
            double expect = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                    if (yy >= 0 && yy < 4 && xx >= 0 && xx < 4)
                        expect += vals[static_cast<std::size_t>(yy * 4 + xx)];
                }
            CHECK(out->at(0, y, x) == expect);
        }
}

TEST_CASE("conv2d rejects channel mismatch") {
    Tape tape;
    auto in = Tensor::zeros({2, 4, 4});
    auto w = Tensor::zeros({1, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(tape, in, w, Tensor::zeros({1}), 1), DimensionError);
}

TEST_CASE("conv2d is linear in input and weight") {
    Rng rng(7);
    for (int trial = 0; trial < 3; ++trial) {
        auto in = Tensor::from({2, 5, 5}, rand_vec(rng, 50));
        auto w = Tensor::from({3, 2, 3, 3}, rand_vec(rng, 54));
        auto zero_b = Tensor::zeros({3});
        const double a = rng.uniform(0.2, 3.0);
        Tape tape;
        auto base = conv2d(tape, in, w, zero_b, 1);
        auto scaled_in = conv2d(tape, scale(tape, in, a), w, zero_b, 1);
        auto scaled_w = conv2d(tape, in, scale(tape, w, a), zero_b, 1);
        for (std::size_t i = 0; i < base->size(); ++i) {
            CHECK(std::fabs(scaled_in->data[i] - a * base->data[i]) < 1e-12);
            CHECK(std::fabs(scaled_w->data[i] - a * base->data[i]) < 1e-12);
        }
    }
}

TEST_CASE("maxpool2 basics and tie-break gradient routing") {
    Tape tape;
    auto in = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
    CHECK(maxpool2(tape, in)->data[0] == 4.0);

    auto c = Tensor::full({1, 4, 4}, 3.25);
    auto pooled = maxpool2(tape, c);
    REQUIRE(pooled->shape == Shape{1, 2, 2});
    for (double v : pooled->data) CHECK(v == 3.25);

    // tie: first index in row-major order wins
    Tape t2;
    auto tie = Tensor::from({1, 2, 2}, {5, 5, 1, 0}, true);
    auto out = maxpool2(t2, tie);
    auto loss = sum(t2, out);
    t2.backward(loss);
    CHECK(tie->grad[0] == 1.0);
    CHECK(tie->grad[1] == 0.0);
    CHECK(tie->grad[2] == 0.0);

    auto odd = Tensor::zeros({1, 3, 4});
    CHECK_THROWS_AS(maxpool2(tape, odd), DimensionError);
}

TEST_CASE("maxpool2 output bounded by input extrema") {
    Rng rng(11);
    auto in = Tensor::from({2, 8, 8}, rand_vec(rng, 128));
    Tape tape;
    auto out = maxpool2(tape, in);
    const double mx = *std::max_element(in->data.begin(), in->data.end());
    const double mn = *std::min_element(in->data.begin(), in->data.end());
    for (double v : out->data) {
        CHECK(v <= mx);
        CHECK(v >= mn);
    }
}

TEST_CASE("upsample_bilinear2 constants, degenerate sizes and hand weights") {
    Tape tape;
    auto c = Tensor::full({1, 3, 5}, 0.77);
    auto up = upsample_bilinear2(tape, c);
    REQUIRE(up->shape == Shape{1, 6, 10});
    for (double v : up->data) CHECK(v == 0.77);

    auto one = Tensor::from({1, 1, 1}, {0.4});
    auto up1 = upsample_bilinear2(tape, one);
    REQUIRE(up1->shape == Shape{1, 2, 2});
    for (double v : up1->data) CHECK(v == 0.4);

    // 1x1x2 [0,1]: source coords (ox+0.5)/2 - 0.5, clamped
    auto ramp = Tensor::from({1, 1, 2}, {0.0, 1.0});
    auto up2 = upsample_bilinear2(tape, ramp);
    REQUIRE(up2->shape == Shape{1, 2, 4});
    for (std::size_t ox = 0; ox < 4; ++ox) {
        double s = (static_cast<double>(ox) + 0.5) / 2.0 - 0.5;
        s = std::clamp(s, 0.0, 1.0);
        const double expect = s;   // linear ramp interpolates to the coordinate
        CHECK(std::fabs(up2->data[ox] - expect) < 1e-15);
        CHECK(std::fabs(up2->data[4 + ox] - expect) < 1e-15);
    }
}

TEST_CASE("pointwise op values") {
    Tape tape;
    CHECK(sigmoid(tape, Tensor::scalar(0.0))->data[0] == 0.5);
    auto r = relu(tape, Tensor::from({2}, {-3.0, 2.0}));
    CHECK(r->data[0] == 0.0);
    CHECK(r->data[1] == 2.0);

    auto x = Tensor::from({3}, {-1.5, 0.0, 2.5}, true);
    auto loss = sum(tape, abs_val(tape, x));
    tape.backward(loss);
    CHECK(x->grad[0] == -1.0);
    CHECK(x->grad[1] == 0.0);   // subgradient at zero
    CHECK(x->grad[2] == 1.0);

    auto a = Tensor::from({2}, {1.0, 2.0});
    CHECK_THROWS_AS(add(tape, a, Tensor::zeros({3})), DimensionError);
}

TEST_CASE("backward gradients: linear, quadratic, accumulation") {
    {
        Tape tape;
        auto x = Tensor::from({4}, {1, 2, 3, 4}, true);
        auto loss = sum(tape, x);
        tape.backward(loss);
        for (double g : x->grad) CHECK(g == 1.0);
        tape.backward(loss);   // accumulates on leaves
        for (double g : x->grad) CHECK(g == 2.0);
    }
    {
        Tape tape;
        auto x = Tensor::from({4}, {1, 2, 3, 4}, true);
        auto loss = sum(tape, mul(tape, x, x));
        tape.backward(loss);
        for (std::size_t i = 0; i < 4; ++i) CHECK(x->grad[i] == 2.0 * x->data[i]);
    }
    {
        Tape tape;
        CHECK_THROWS_AS(tape.backward(Tensor::from({2}, {1.0, 2.0})), ContractError);
    }
}

TEST_CASE("backward is bit-identical across repeated evaluations") {
    auto run = [](std::vector<double>& grads) {
        Rng rng(31);
        auto in = Tensor::from({1, 6, 6}, rand_vec(rng, 36), true);
        auto w = init_conv_weight(rng, 2, 1, 3);
        auto b = init_bias(2);
        Tape tape;
        auto out = sigmoid(tape, conv2d(tape, in, w, b, 1));
        auto loss = sum(tape, mul(tape, out, out));
        tape.backward(loss);
        grads = in->grad;
        grads.insert(grads.end(), w->grad.begin(), w->grad.end());
    };
    std::vector<double> g1, g2;
    run(g1);
    run(g2);
    REQUIRE(g1.size() == g2.size());
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("grad_check calibration: linear map and sigmoid-sum") {
    Rng rng(5);
    auto x = Tensor::from({8}, rand_vec(rng, 8), true);
    auto linear = [](Tape& t, const std::vector<TensorPtr>& xs) { return sum(t, xs[0]); };
    CHECK(grad_check(linear, {x}, 1e-5) < 1e-10);

    auto sig = [](Tape& t, const std::vector<TensorPtr>& xs) {
        return sum(t, sigmoid(t, xs[0]));
    };
    CHECK(grad_check(sig, {x}, 1e-5) < 1e-6);
}

TEST_CASE("gradients of structural ops match finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(Rng::derive(77, seed));
        auto in = Tensor::from({2, 4, 4}, rand_vec(rng, 32), true);
        auto w = init_conv_weight(rng, 2, 2, 3);
        auto b = Tensor::from({2}, rand_vec(rng, 2), true);
        auto cot = Tensor::from({2, 8, 8}, rand_vec(rng, 128));
        auto fn = [&](Tape& t, const std::vector<TensorPtr>& xs) {
            auto conv = conv2d(t, xs[0], xs[1], xs[2], 1);
            auto up = upsample_bilinear2(t, sigmoid(t, conv));
            return sum(t, mul(t, up, cot));
        };
        CHECK(grad_check(fn, {in, w, b}, 1e-5) < 1e-4);

        auto pool_fn = [&](Tape& t, const std::vector<TensorPtr>& xs) {
            return sum(t, relu(t, maxpool2(t, xs[0])));
        };
        CHECK(grad_check(pool_fn, {in}, 1e-5) < 1e-4);

        auto mix_fn = [&](Tape& t, const std::vector<TensorPtr>& xs) {
            auto parts = concat_channels(t, {xs[0], xs[0]});
            auto v = clamp(t, parts, -0.9, 0.9);
            auto lg = log_elem(t, add_scalar(t, abs_val(t, v), 0.5));
            return sum(t, div_elem(t, lg, add_scalar(t, mul(t, xs[0], xs[0]),
                                                     1.0)->data[0] > 0
                                            ? concat_channels(t, {add_scalar(t, mul(t, xs[0], xs[0]), 1.0),
                                                                  add_scalar(t, mul(t, xs[0], xs[0]), 1.0)})
                                            : parts));
        };
        CHECK(grad_check(mix_fn, {in}, 1e-5) < 1e-4);
    }
}

TEST_CASE("adam fixed point and first-step size") {
    {
        auto p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
        p->ensure_grad();
        AdamState st;
        st.init({p});
        adam_step(st, {p});
        CHECK(p->data[0] == 1.0);
        CHECK(p->data[1] == -2.0);
        CHECK(p->data[2] == 0.5);
    }
    {
        auto p = Tensor::scalar(0.0, true);
        p->ensure_grad();
        p->grad[0] = 0.37;
        AdamState st;
        CHECK(st.lr == 1e-4);   // default learning rate
        st.init({p});
        adam_step(st, {p});
        CHECK(std::fabs(p->data[0] + st.lr) < 1e-9);   // moves by ~ -lr*sign(g)
    }
    {
        AdamState st;
        st.lr = 0.0;
        CHECK_THROWS_AS(st.init({}), ContractError);
    }
}

TEST_CASE("concat_channels layout and gradient split") {
    Tape tape;
    auto a = Tensor::from({1, 2, 2}, {1, 2, 3, 4}, true);
    auto b = Tensor::from({2, 2, 2}, {5, 6, 7, 8, 9, 10, 11, 12}, true);
    auto cat = concat_channels(tape, {a, b});
    REQUIRE(cat->shape == Shape{3, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) CHECK(cat->data[i] == a->data[i]);
    for (std::size_t i = 0; i < 8; ++i) CHECK(cat->data[4 + i] == b->data[i]);
    auto loss = sum(tape, mul(tape, cat, cat));
    tape.backward(loss);
    for (std::size_t i = 0; i < 4; ++i) CHECK(a->grad[i] == 2.0 * a->data[i]);
    for (std::size_t i = 0; i < 8; ++i) CHECK(b->grad[i] == 2.0 * b->data[i]);
}
