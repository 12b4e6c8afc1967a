// Minimal library-level training loop: a tiny network on a handful of
// small phantoms, then held-out metrics. The CLI `train` command does the
// same thing at full scale.

#include <cstdio>

#include "mdfi/metrics.hpp"
#include "mdfi/phantom.hpp"
#include "mdfi/pipeline.hpp"

int main() {
    using namespace mdfi;
    auto ds = make_dataset(PhantomSpec::patch64(0), 12, 1234, 0.75);

    M2NetConfig cfg;
    cfg.levels = 2;
    cfg.base_channels = 8;
    auto pipe = build_pipeline(cfg, DpcnParams{}, {5, 10, 15}, 42);

    std::vector<TensorPtr> images;
    for (const auto& s : ds.train) images.push_back(gray_to_tensor(s.image));

    LossConfig loss_cfg;
    auto params = pipe.parameters();
    auto item_loss = [&](Tape& tape, std::size_t idx) {
        auto out = pipeline_forward(tape, pipe, images[idx]);
        auto maps = out.side_probs;
        maps.push_back(out.final_prob);
        const std::vector<double> w(maps.size(), 1.0 / static_cast<double>(maps.size()));
        return combined_supervision_loss(tape, maps, ds.train[idx].label,
                                         std::optional<Mask>(ds.train[idx].fov), loss_cfg, w);
    };

    TrainConfig tc;
    tc.epochs = 8;
    tc.batch_size = 4;
    tc.seed = 5;
    auto log = run_training(images.size(), item_loss, params, tc);
    for (const auto& e : log) std::printf("epoch %d: loss %.4f\n", e.epoch, e.mean_loss);

    std::vector<ImageEval> evals;
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
        Tape tape;
        auto out = pipeline_forward(tape, pipe, gray_to_tensor(ds.test[i].image));
        evals.push_back(evaluate_image(std::to_string(i), tensor_to_gray(*out.final_prob),
                                       ds.test[i].label, &ds.test[i].fov));
    }
    auto pooled = aggregate(evals, AggregateMode::pooled);
    std::printf("held-out: acc=%.4f auc=%.4f\n", pooled.acc.value_or(0), pooled.auc.value_or(0));
    return 0;
}
