#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mdfi/errors.hpp"
#include "mdfi/image.hpp"

namespace mdfi {

using FovMask = Mask;

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const { return tp + fp + tn + fn; }

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp; fp += o.fp; tn += o.tn; fn += o.fn;
        return *this;
    }
};

// Undefined ratios stay empty instead of collapsing to 0, so degenerate
// images cannot quietly inflate averages.
struct MetricsReport {
    std::optional<double> acc, sen, spe, f1, auc;
};

inline ConfusionCounts confusion(const Mask& pred, const Mask& gt, const FovMask* fov = nullptr) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw DimensionError("confusion: pred and gt shapes differ");
    if (fov && (fov->width != gt.width || fov->height != gt.height))
        throw DimensionError("confusion: fov shape differs");
    ConfusionCounts c;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (fov && !fov->v[i]) continue;
        if (gt.v[i]) {
            if (pred.v[i]) ++c.tp; else ++c.fn;
        } else {
            if (pred.v[i]) ++c.fp; else ++c.tn;
        }
    }
    if (c.total() == 0) throw ContractError("confusion: no pixels in scope");
    return c;
}

// ACC = (TP+TN)/(TP+TN+FP+FN), SEN = TP/(TP+FN), SPE = TN/(TN+FP),
// F1 = 2TP/(2TP+FP+FN)
inline MetricsReport scalar_metrics(const ConfusionCounts& c) {
    if (c.total() == 0) throw ContractError("scalar_metrics: empty counts");
    MetricsReport r;
    r.acc = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    if (c.tp + c.fn > 0) r.sen = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    if (c.tn + c.fp > 0) r.spe = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
    if (2 * c.tp + c.fp + c.fn > 0)
        r.f1 = static_cast<double>(2 * c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
    return r;
}

using ScoredPixel = std::pair<double, std::uint8_t>;   // (score, label)

// Rank statistic: AUC = [#(pos,neg) pairs with pos > neg + ties/2] / (P*N),
// computed from average ranks in O(n log n). Absent when one class is empty.
inline std::optional<double> auc_from_scored(std::vector<ScoredPixel> scored) {
    std::size_t pos = 0;
    for (const auto& s : scored) pos += s.second;
    const std::size_t neg = scored.size() - pos;
    if (pos == 0 || neg == 0) return std::nullopt;
    std::sort(scored.begin(), scored.end(),
              [](const ScoredPixel& a, const ScoredPixel& b) { return a.first < b.first; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < scored.size()) {
        std::size_t j = i;
        while (j < scored.size() && scored[j].first == scored[i].first) ++j;
        // ranks i+1..j share the average rank
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t)
            if (scored[t].second) rank_sum_pos += avg_rank;
        i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    const double u = rank_sum_pos - p * (p + 1.0) / 2.0;
    return u / (p * n);
}

inline std::optional<double> auc(const GrayImage& prob, const Mask& gt,
                                 const FovMask* fov = nullptr) {
    if (prob.width != gt.width || prob.height != gt.height)
        throw DimensionError("auc: prob and gt shapes differ");
    if (fov && (fov->width != gt.width || fov->height != gt.height))
        throw DimensionError("auc: fov shape differs");
    std::vector<ScoredPixel> scored;
    scored.reserve(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (fov && !fov->v[i]) continue;
        scored.emplace_back(prob.pixels[i], gt.v[i]);
    }
    if (scored.empty()) throw ContractError("auc: no pixels in scope");
    return auc_from_scored(std::move(scored));
}

// Everything evaluate needs to carry per image: counts for the scalar
// metrics and the in-scope scores for pooled AUC.
struct ImageEval {
    std::string name;
    ConfusionCounts counts;
    std::vector<ScoredPixel> scored;
    MetricsReport report;
};

inline ImageEval evaluate_image(std::string name, const GrayImage& prob, const Mask& gt,
                                const FovMask* fov, double threshold = 0.5) {
    ImageEval e;
    e.name = std::move(name);
    e.counts = confusion(gray_to_mask(prob, threshold), gt, fov);
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (fov && !fov->v[i]) continue;
        e.scored.emplace_back(prob.pixels[i], gt.v[i]);
    }
    e.report = scalar_metrics(e.counts);
    e.report.auc = auc_from_scored(e.scored);
    return e;
}

enum class AggregateMode { pooled, per_image_mean };

inline AggregateMode parse_aggregate_mode(const std::string& s) {
    if (s == "pooled") return AggregateMode::pooled;
    if (s == "mean" || s == "per-image-mean") return AggregateMode::per_image_mean;
    throw ConfigError("unknown aggregation mode: " + s);
}

// pooled: sum the confusion counts (and concatenate scores for AUC), then
// compute the metrics once; per-image-mean: average per-image metrics over
// the images where they are defined.
inline MetricsReport aggregate(const std::vector<ImageEval>& evals, AggregateMode mode) {
    if (evals.empty()) throw ContractError("aggregate: need at least one image");
    if (mode == AggregateMode::pooled) {
        ConfusionCounts c;
        std::vector<ScoredPixel> scored;
        for (const auto& e : evals) {
            c += e.counts;
            scored.insert(scored.end(), e.scored.begin(), e.scored.end());
        }
        MetricsReport r = scalar_metrics(c);
        r.auc = auc_from_scored(std::move(scored));
        return r;
    }
    MetricsReport r;
    auto mean_of = [&](auto getter) -> std::optional<double> {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& e : evals)
            if (auto v = getter(e.report)) { s += *v; ++n; }
        if (n == 0) return std::nullopt;
        return s / static_cast<double>(n);
    };
    r.acc = mean_of([](const MetricsReport& m) { return m.acc; });
    r.sen = mean_of([](const MetricsReport& m) { return m.sen; });
    r.spe = mean_of([](const MetricsReport& m) { return m.spe; });
    r.f1 = mean_of([](const MetricsReport& m) { return m.f1; });
    r.auc = mean_of([](const MetricsReport& m) { return m.auc; });
    return r;
}

} // namespace mdfi
