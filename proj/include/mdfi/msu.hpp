#pragma once

#include <vector>

#include "mdfi/errors.hpp"
#include "mdfi/rng.hpp"
#include "mdfi/tensor.hpp"

namespace mdfi {

// Multi-scale subtraction unit: shared 1x1/3x3/5x5 filters on both
// branches, absolute differences summed across scales, then a 3x3
// projection. All convolutions are shape-preserving.
//
// Because the per-scale weights are shared, their biases cancel inside
// the subtraction and provably get zero gradient; they are kept so the
// block serializes like any other conv stack.
struct MsuBlock {
    TensorPtr w1, b1;    // 1x1
    TensorPtr w3, b3;    // 3x3
    TensorPtr w5, b5;    // 5x5
    TensorPtr w_out, b_out;   // 3x3 projection to the block's output width

    std::vector<TensorPtr> parameters() const {
        return {w1, b1, w3, b3, w5, b5, w_out, b_out};
    }
};

inline MsuBlock make_msu_block(Rng& rng, std::size_t c_in, std::size_t c_out) {
    MsuBlock b;
    b.w1 = init_conv_weight(rng, c_in, c_in, 1);
    b.b1 = init_bias(c_in);
    b.w3 = init_conv_weight(rng, c_in, c_in, 3);
    b.b3 = init_bias(c_in);
    b.w5 = init_conv_weight(rng, c_in, c_in, 5);
    b.b5 = init_bias(c_in);
    b.w_out = init_conv_weight(rng, c_out, c_in, 3);
    b.b_out = init_bias(c_out);
    return b;
}

// F_out = Conv_out(|Conv1(A)-Conv1(B)| + |Conv3(A)-Conv3(B)| + |Conv5(A)-Conv5(B)|)
inline TensorPtr msu_forward(Tape& tape, const TensorPtr& branch_a, const TensorPtr& branch_b,
                             const MsuBlock& block) {
    require_same_shape(*branch_a, *branch_b, "msu_forward");
    auto diff_at = [&](const TensorPtr& w, const TensorPtr& b, int pad) {
        return abs_val(tape, sub(tape, conv2d(tape, branch_a, w, b, pad),
                                 conv2d(tape, branch_b, w, b, pad)));
    };
    auto summed = add(tape, add(tape, diff_at(block.w1, block.b1, 0),
                                diff_at(block.w3, block.b3, 1)),
                      diff_at(block.w5, block.b5, 2));
    return conv2d(tape, summed, block.w_out, block.b_out, 1);
}

} // namespace mdfi
