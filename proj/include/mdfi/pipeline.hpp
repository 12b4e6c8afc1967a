#pragma once

#include <string>
#include <vector>

#include "mdfi/checkpoint.hpp"
#include "mdfi/dpcn.hpp"
#include "mdfi/m2net.hpp"

namespace mdfi {

// Full segmentation pipeline: the enhancement iteration feeding the
// M-shaped network. The network input stack is the image concatenated
// with the selected iteration maps, and the DPCN layer trains jointly
// with the network through the unrolled iterations.
struct SegPipeline {
    DpcnParams dpcn_params;
    DeformConvLayer dpcn;
    std::vector<int> select{5, 10, 15};
    M2NetModel net;

    std::size_t in_channels() const { return 1 + select.size(); }

    std::vector<TensorPtr> parameters() const {
        auto out = net.parameters();
        for (auto& p : dpcn.parameters()) out.push_back(p);
        return out;
    }

    NamedParams named_parameters() const {
        NamedParams out = net.named_parameters();
        out.emplace_back("dpcn.weight", dpcn.weight);
        out.emplace_back("dpcn.offset.weight", dpcn.offset_weight);
        out.emplace_back("dpcn.offset.bias", dpcn.offset_bias);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p->size();
        return n;
    }
};

inline SegPipeline build_pipeline(M2NetConfig net_cfg, const DpcnParams& dpcn_params,
                                  std::vector<int> select, std::uint64_t seed,
                                  double linking_gain = 250.0) {
    dpcn_params.validate();
    for (int idx : select)
        if (idx < 1 || idx > dpcn_params.iterations)
            throw ConfigError("pipeline: selected iteration " + std::to_string(idx) +
                              " outside 1.." + std::to_string(dpcn_params.iterations));
    SegPipeline p;
    p.dpcn_params = dpcn_params;
    p.dpcn = make_enhancement_layer(linking_gain);
    p.select = std::move(select);
    net_cfg.in_channels = p.in_channels();
    p.net = build_m2net(net_cfg, seed);
    return p;
}

inline M2NetOutput pipeline_forward(Tape& tape, const SegPipeline& p, const TensorPtr& image) {
    auto fires = dpcn_run(tape, image, p.dpcn_params, p.dpcn);
    auto stack = concat_channels(
        tape, std::vector<TensorPtr>{image, select_iterations(tape, fires, p.select)});
    return m2net_forward(tape, p.net, stack);
}

// Checkpoints carry a few meta.* scalar records so a pipeline can be
// rebuilt from the file alone before the weights are applied.
inline void save_pipeline(const std::string& path, const SegPipeline& p) {
    NamedParams named = p.named_parameters();
    auto meta = [&named](const std::string& key, std::vector<double> vals) {
        named.emplace_back(key, Tensor::from({vals.size()}, std::move(vals)));
    };
    meta("meta.levels", {static_cast<double>(p.net.cfg.levels)});
    meta("meta.base_channels", {static_cast<double>(p.net.cfg.base_channels)});
    meta("meta.deep_supervision", {p.net.cfg.deep_supervision ? 1.0 : 0.0});
    meta("meta.fusion_weights", p.net.cfg.fusion_weights());
    {
        std::vector<double> sel;
        for (int i : p.select) sel.push_back(static_cast<double>(i));
        meta("meta.select", std::move(sel));
    }
    meta("meta.dpcn", {p.dpcn_params.beta, p.dpcn_params.alpha_e, p.dpcn_params.v_e,
                       static_cast<double>(p.dpcn_params.iterations), p.dpcn.offset_clamp});
    save_checkpoint(path, named);
}

inline SegPipeline load_pipeline(const std::string& path) {
    auto ckpt = load_checkpoint(path);
    auto meta = [&ckpt, &path](const std::string& key) -> const std::vector<double>& {
        auto it = ckpt.find(key);
        if (it == ckpt.end()) throw DataError("checkpoint missing " + key + ": " + path);
        return it->second.data;
    };
    M2NetConfig cfg;
    cfg.levels = static_cast<int>(meta("meta.levels")[0]);
    cfg.base_channels = static_cast<std::size_t>(meta("meta.base_channels")[0]);
    cfg.deep_supervision = meta("meta.deep_supervision")[0] != 0.0;
    cfg.side_output_weights = meta("meta.fusion_weights");
    DpcnParams dp;
    const auto& d = meta("meta.dpcn");
    dp.beta = d[0];
    dp.alpha_e = d[1];
    dp.v_e = d[2];
    dp.iterations = static_cast<int>(d[3]);
    std::vector<int> select;
    for (double v : meta("meta.select")) select.push_back(static_cast<int>(v));

    SegPipeline p = build_pipeline(cfg, dp, select, 0);
    p.dpcn.offset_clamp = d[4];
    apply_checkpoint(ckpt, p.named_parameters());
    return p;
}

} // namespace mdfi
