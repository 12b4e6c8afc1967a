#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mdfi/adam.hpp"
#include "mdfi/errors.hpp"
#include "mdfi/image.hpp"
#include "mdfi/loss.hpp"
#include "mdfi/msu.hpp"
#include "mdfi/rng.hpp"
#include "mdfi/tensor.hpp"

namespace mdfi {

struct M2NetConfig {
    int levels = 4;              // D; encoder produces D+1 hierarchical features
    std::size_t base_channels = 16;   // doubles per level: 16,32,64,128,256
    std::size_t in_channels = 4;      // preprocessed image + selected iteration maps
    bool deep_supervision = true;
    std::vector<double> side_output_weights;   // fusion weights, one per decoder level

    void validate() const {
        if (levels < 1) throw ConfigError("m2net: levels must be >= 1");
        if (base_channels < 1) throw ConfigError("m2net: base_channels must be >= 1");
        if (in_channels < 1) throw ConfigError("m2net: in_channels must be >= 1");
        if (!side_output_weights.empty()) {
            if (side_output_weights.size() != static_cast<std::size_t>(levels))
                throw ConfigError("m2net: need one side-output weight per decoder level");
            double s = 0.0;
            for (double w : side_output_weights) s += w;
            if (std::fabs(s - 1.0) > 1e-9)
                throw ConfigError("m2net: side-output weights must sum to 1");
        }
    }

    // Default fusion halves the weight per level of depth: coarse side maps
    // are bilinearly upsampled 2^i times and cannot localize vessels near
    // one pixel wide, so the full-resolution head has to dominate the fused
    // probability for thin structures to clear the 0.5 threshold.
    std::vector<double> fusion_weights() const {
        if (!side_output_weights.empty()) return side_output_weights;
        std::vector<double> w(static_cast<std::size_t>(levels));
        double total = 0.0;
        for (int i = 0; i < levels; ++i) {
            w[static_cast<std::size_t>(i)] = std::pow(2.0, static_cast<double>(levels - 1 - i));
            total += w[static_cast<std::size_t>(i)];
        }
        for (double& v : w) v /= total;
        return w;
    }

    std::size_t channels_at(int level) const { return base_channels << level; }
};

struct Conv {
    TensorPtr w, b;
    int pad = 0;
};

struct DoubleConv {
    Conv c1, c2;
};

namespace detail {

inline Conv make_conv(Rng& rng, std::size_t c_out, std::size_t c_in, std::size_t k) {
    return Conv{init_conv_weight(rng, c_out, c_in, k), init_bias(c_out),
                static_cast<int>((k - 1) / 2)};
}

inline DoubleConv make_double_conv(Rng& rng, std::size_t c_in, std::size_t c_out) {
    return DoubleConv{make_conv(rng, c_out, c_in, 3), make_conv(rng, c_out, c_out, 3)};
}

inline TensorPtr apply_conv(Tape& t, const Conv& c, const TensorPtr& x) {
    return conv2d(t, x, c.w, c.b, c.pad);
}

inline TensorPtr apply_double_conv(Tape& t, const DoubleConv& dc, const TensorPtr& x) {
    return relu(t, apply_conv(t, dc.c2, relu(t, apply_conv(t, dc.c1, x))));
}

} // namespace detail

// M-shaped encoder-decoder:
//  - plain double-conv encoder blocks with 2x max-pooling between levels,
//    the downsampled input pyramid injected through 1x1 convs at every
//    level below the top (the left M leg);
//  - nested skips s_i = e_i + MSU(e_i, proj(up(e_{i+1}))): the multi-scale
//    differential feature of each level against its deeper neighbour is
//    added onto the level's own feature map;
//  - double-conv decoder blocks on concat(s_i, up(d_{i+1}));
//  - per-level sigmoid side outputs upsampled to full resolution (the
//    right M leg) fused into the final map by fixed convex weights.
struct M2NetModel {
    M2NetConfig cfg;
    std::vector<DoubleConv> enc;    // 0..D
    std::vector<Conv> pyramid;      // levels 1..D, index 0 => level 1
    std::vector<Conv> skip_proj;    // 0..D-1, projects up(e_{i+1}) to c_i channels
    std::vector<MsuBlock> msu;      // 0..D-1
    std::vector<DoubleConv> dec;    // 0..D-1
    std::vector<Conv> side;         // 0..D-1, 1x1 to a single logit channel

    NamedParams named_parameters() const {
        NamedParams out;
        auto add_conv = [&out](const std::string& base, const Conv& c) {
            out.emplace_back(base + ".weight", c.w);
            out.emplace_back(base + ".bias", c.b);
        };
        for (std::size_t i = 0; i < enc.size(); ++i) {
            add_conv("enc" + std::to_string(i) + ".conv1", enc[i].c1);
            add_conv("enc" + std::to_string(i) + ".conv2", enc[i].c2);
        }
        for (std::size_t i = 0; i < pyramid.size(); ++i)
            add_conv("pyramid" + std::to_string(i + 1), pyramid[i]);
        for (std::size_t i = 0; i < skip_proj.size(); ++i)
            add_conv("skip" + std::to_string(i) + ".proj", skip_proj[i]);
        for (std::size_t i = 0; i < msu.size(); ++i) {
            const std::string base = "skip" + std::to_string(i) + ".msu.";
            out.emplace_back(base + "scale1.weight", msu[i].w1);
            out.emplace_back(base + "scale1.bias", msu[i].b1);
            out.emplace_back(base + "scale3.weight", msu[i].w3);
            out.emplace_back(base + "scale3.bias", msu[i].b3);
            out.emplace_back(base + "scale5.weight", msu[i].w5);
            out.emplace_back(base + "scale5.bias", msu[i].b5);
            out.emplace_back(base + "out.weight", msu[i].w_out);
            out.emplace_back(base + "out.bias", msu[i].b_out);
        }
        for (std::size_t i = 0; i < dec.size(); ++i) {
            add_conv("dec" + std::to_string(i) + ".conv1", dec[i].c1);
            add_conv("dec" + std::to_string(i) + ".conv2", dec[i].c2);
        }
        for (std::size_t i = 0; i < side.size(); ++i)
            add_conv("side" + std::to_string(i), side[i]);
        return out;
    }

    std::vector<TensorPtr> parameters() const {
        std::vector<TensorPtr> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p->size();
        return n;
    }
};

inline M2NetModel build_m2net(const M2NetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    M2NetModel m;
    m.cfg = cfg;
    const int d = cfg.levels;
    m.enc.push_back(detail::make_double_conv(rng, cfg.in_channels, cfg.channels_at(0)));
    for (int i = 1; i <= d; ++i) {
        m.pyramid.push_back(detail::make_conv(rng, cfg.base_channels, cfg.in_channels, 1));
        m.enc.push_back(detail::make_double_conv(
            rng, cfg.channels_at(i - 1) + cfg.base_channels, cfg.channels_at(i)));
    }
    for (int i = 0; i < d; ++i) {
        m.skip_proj.push_back(detail::make_conv(rng, cfg.channels_at(i), cfg.channels_at(i + 1), 1));
        m.msu.push_back(make_msu_block(rng, cfg.channels_at(i), cfg.channels_at(i)));
        m.dec.push_back(detail::make_double_conv(
            rng, cfg.channels_at(i) + cfg.channels_at(i + 1), cfg.channels_at(i)));
        m.side.push_back(detail::make_conv(rng, 1, cfg.channels_at(i), 1));
    }
    return m;
}

struct M2NetOutput {
    TensorPtr final_prob;                // [1,H,W], convex fusion of the side maps
    std::vector<TensorPtr> side_probs;   // one per decoder level, full resolution
};

// Intermediates exposed for tests (skip-reduction surgery and friends).
struct M2NetTrace {
    std::vector<TensorPtr> enc_features;   // e_0..e_D
    std::vector<TensorPtr> skips;          // s_0..s_{D-1}
};

inline M2NetOutput m2net_forward(Tape& tape, const M2NetModel& m, const TensorPtr& x,
                                 M2NetTrace* trace = nullptr) {
    const int d = m.cfg.levels;
    if (x->shape.size() != 3 || x->shape[0] != m.cfg.in_channels)
        throw DimensionError("m2net: input must be [" + std::to_string(m.cfg.in_channels) +
                             ",H,W], got " + shape_str(x->shape));
    const std::size_t h = x->shape[1], w = x->shape[2];
    const std::size_t div = static_cast<std::size_t>(1) << d;
    if (h % div != 0 || w % div != 0)
        throw DimensionError("m2net: spatial dims must be divisible by 2^levels");

    // encoder with input-pyramid injection
    std::vector<TensorPtr> pyr{x};
    for (int i = 1; i <= d; ++i) pyr.push_back(maxpool2(tape, pyr.back()));
    std::vector<TensorPtr> e;
    e.push_back(detail::apply_double_conv(tape, m.enc[0], x));
    for (int i = 1; i <= d; ++i) {
        auto pooled = maxpool2(tape, e.back());
        auto injected = detail::apply_conv(tape, m.pyramid[static_cast<std::size_t>(i - 1)],
                                           pyr[static_cast<std::size_t>(i)]);
        e.push_back(detail::apply_double_conv(tape, m.enc[static_cast<std::size_t>(i)],
                                              concat_channels(tape, {pooled, injected})));
    }

    // nested skips: differential feature added onto each level's own map
    std::vector<TensorPtr> s(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        auto up = upsample_bilinear2(tape, e[static_cast<std::size_t>(i + 1)]);
        auto neighbor = detail::apply_conv(tape, m.skip_proj[static_cast<std::size_t>(i)], up);
        auto diff = msu_forward(tape, e[static_cast<std::size_t>(i)], neighbor,
                                m.msu[static_cast<std::size_t>(i)]);
        s[static_cast<std::size_t>(i)] = add(tape, e[static_cast<std::size_t>(i)], diff);
    }
    if (trace) {
        trace->enc_features = e;
        trace->skips = s;
    }

    // decoder
    TensorPtr dcur = e.back();
    std::vector<TensorPtr> dlevels(static_cast<std::size_t>(d));
    for (int i = d - 1; i >= 0; --i) {
        auto up = upsample_bilinear2(tape, dcur);
        dcur = detail::apply_double_conv(tape, m.dec[static_cast<std::size_t>(i)],
                                         concat_channels(tape, {s[static_cast<std::size_t>(i)], up}));
        dlevels[static_cast<std::size_t>(i)] = dcur;
    }

    // side heads: 1x1 logit, upsampled to full resolution, sigmoid last
    M2NetOutput out;
    for (int i = 0; i < d; ++i) {
        auto logit = detail::apply_conv(tape, m.side[static_cast<std::size_t>(i)],
                                        dlevels[static_cast<std::size_t>(i)]);
        for (int u = 0; u < i; ++u) logit = upsample_bilinear2(tape, logit);
        out.side_probs.push_back(sigmoid(tape, logit));
    }
    const auto fw = m.cfg.fusion_weights();
    TensorPtr fused;
    for (int i = 0; i < d; ++i) {
        auto term = scale(tape, out.side_probs[static_cast<std::size_t>(i)], fw[static_cast<std::size_t>(i)]);
        fused = fused ? add(tape, fused, term) : term;
    }
    out.final_prob = fused;
    return out;
}

// threshold with the ">= counts as vessel" convention
inline Mask predict(const M2NetModel& m, const TensorPtr& x, double threshold = 0.5) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ContractError("predict: threshold must be in (0,1)");
    Tape tape;
    auto out = m2net_forward(tape, m, x);
    Mask mask(out.final_prob->shape[2], out.final_prob->shape[1]);
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask.v[i] = out.final_prob->data[i] >= threshold ? 1 : 0;
    return mask;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainItem {
    TensorPtr input;           // network input stack
    Mask label;
    std::optional<Mask> fov;
};

struct TrainConfig {
    int epochs = 30;
    std::size_t batch_size = 8;
    double lr = 1e-4;
    std::uint64_t seed = 0;
};

struct TrainLogEntry {
    int epoch = 0;          // 1-based
    double mean_loss = 0.0;
    double lr = 0.0;
};

// Shared batch loop: shuffles item order each epoch from the run seed,
// accumulates leaf gradients item by item (each item's loss scaled by
// 1/batch so the step optimizes the batch mean), then applies one Adam
// step per batch.
template <typename LossFn>
std::vector<TrainLogEntry> run_training(std::size_t item_count, LossFn&& item_loss,
                                        const std::vector<TensorPtr>& params,
                                        const TrainConfig& cfg) {
    if (item_count == 0) throw ContractError("train: empty dataset");
    if (cfg.batch_size == 0) throw ContractError("train: batch_size must be >= 1");
    if (cfg.epochs < 0) throw ContractError("train: epochs must be >= 0");

    AdamState adam;
    adam.lr = cfg.lr;
    adam.init(params);

    std::vector<TrainLogEntry> log;
    std::vector<std::size_t> order(item_count);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive(cfg.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = item_count; i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.index(i)]);

        double loss_sum = 0.0;
        std::size_t done = 0;
        while (done < item_count) {
            const std::size_t batch_n = std::min(cfg.batch_size, item_count - done);
            for (const auto& p : params) p->zero_grad();
            for (std::size_t b = 0; b < batch_n; ++b) {
                Tape tape;
                TensorPtr loss = item_loss(tape, order[done + b]);
                loss_sum += loss->data[0];
                auto scaled = scale(tape, loss, 1.0 / static_cast<double>(batch_n));
                tape.backward(scaled);
            }
            adam_step(adam, params);
            done += batch_n;
        }
        log.push_back({epoch, loss_sum / static_cast<double>(item_count), cfg.lr});
    }
    return log;
}

// Spec-level train entry point: optimizes the network on precomputed
// input stacks. (The CLI builds the joint DPCN+network graph through the
// same run_training loop.)
inline std::vector<TrainLogEntry> train(M2NetModel& model, const std::vector<TrainItem>& dataset,
                                        const LossConfig& loss_cfg, const TrainConfig& cfg) {
    if (dataset.empty()) throw ContractError("train: empty dataset");
    auto params = model.parameters();
    auto item_loss = [&](Tape& tape, std::size_t idx) {
        const TrainItem& item = dataset[idx];
        auto out = m2net_forward(tape, model, item.input);
        std::vector<TensorPtr> maps;
        if (model.cfg.deep_supervision) maps = out.side_probs;
        maps.push_back(out.final_prob);
        const std::vector<double> w(maps.size(), 1.0 / static_cast<double>(maps.size()));
        return combined_supervision_loss(tape, maps, item.label, item.fov, loss_cfg, w);
    };
    return run_training(dataset.size(), item_loss, params, cfg);
}

} // namespace mdfi
