// mdfi: phantom generation, preprocessing, DPCN enhancement, training,
// prediction, evaluation and gradient checking from one binary.
//
// Every command writes the effective configuration (config.txt) and a run
// manifest (manifest.json) beside its outputs. Exit codes: 0 success,
// 1 usage/config error, 2 data error, 3 tolerance failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdfi/config.hpp"
#include "mdfi/dpcn.hpp"
#include "mdfi/gradsuite.hpp"
#include "mdfi/image.hpp"
#include "mdfi/loss.hpp"
#include "mdfi/m2net.hpp"
#include "mdfi/metrics.hpp"
#include "mdfi/phantom.hpp"
#include "mdfi/pipeline.hpp"
#include "mdfi/preprocess.hpp"
#include "mdfi/version.hpp"

namespace fs = std::filesystem;
using namespace mdfi;
using Clock = std::chrono::steady_clock;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitTolerance = 3;

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_metric(const std::optional<double>& v) {
    return v ? fmt_double(*v) : std::string();
}

// output directory, overridable through the environment
fs::path resolve_out_dir(const std::string& flag_value) {
    if (const char* env = std::getenv("MDFI_OUT_DIR"); env && *env) return fs::path(env);
    return fs::path(flag_value);
}

int env_threads() {
    if (const char* env = std::getenv("MDFI_THREADS"); env && *env) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

bool is_image_file(const fs::path& p) {
    const auto ext = p.extension().string();
    return ext == ".png" || ext == ".pgm";
}

std::vector<fs::path> list_images(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// finds dir/<stem><suffix>.(png|pgm), empty path when absent
fs::path find_variant(const fs::path& dir, const std::string& stem, const std::string& suffix) {
    for (const char* ext : {".png", ".pgm"}) {
        fs::path p = dir / (stem + suffix + ext);
        if (fs::exists(p)) return p;
    }
    return {};
}

struct PairedSample {
    std::string stem;
    fs::path image, label, fov;   // fov may be empty
};

// image x.png pairs with x_label.png and x_fov.png by stem name
std::vector<PairedSample> pair_dataset(const fs::path& dir) {
    std::vector<PairedSample> out;
    for (const auto& p : list_images(dir)) {
        const std::string stem = p.stem().string();
        if (ends_with(stem, "_label") || ends_with(stem, "_fov") || ends_with(stem, "_prob") ||
            ends_with(stem, "_mask"))
            continue;
        PairedSample s;
        s.stem = stem;
        s.image = p;
        s.label = find_variant(dir, stem, "_label");
        s.fov = find_variant(dir, stem, "_fov");
        if (s.label.empty())
            throw DataError("no label found for " + p.string() + " (expected " + stem +
                            "_label.png)");
        out.push_back(std::move(s));
    }
    return out;
}

struct ManifestScope {
    RunManifest manifest;
    fs::path dir;
    Clock::time_point start = Clock::now();

    ManifestScope(const std::string& command, const fs::path& out_dir) : dir(out_dir) {
        manifest.command = command;
        fs::create_directories(dir);
    }

    void finish() {
        manifest.config.save((dir / "config.txt").string());
        manifest.outputs.push_back((dir / "config.txt").string());
        manifest.wall_time_s = std::chrono::duration<double>(Clock::now() - start).count();
        manifest.write((dir / "manifest.json").string());
    }
};

// ---------------------------------------------------------------------------
// option plumbing: file config + CLI overrides -> typed configs
// ---------------------------------------------------------------------------

// CLI flags that were actually passed override file values; the merged map
// is what gets serialized as the effective config.
struct OptionSink {
    KvConfig file_cfg;
    KvConfig effective;

    void load_file(const std::string& path) {
        if (!path.empty()) file_cfg = KvConfig::from_file(path);
        for (const auto& [k, v] : file_cfg.values()) effective.set(k, v);
    }

    double num(CLI::App* cmd, const std::string& flag, const std::string& key, double def) {
        double v = file_cfg.has(key) ? file_cfg.get_double(key, def) : def;
        if (cmd->count(flag)) v = cmd->get_option(flag)->as<double>();
        effective.set_double(key, v);
        return v;
    }
    long long integer(CLI::App* cmd, const std::string& flag, const std::string& key, long long def) {
        long long v = file_cfg.has(key) ? file_cfg.get_int(key, def) : def;
        if (cmd->count(flag)) v = cmd->get_option(flag)->as<long long>();
        effective.set_int(key, v);
        return v;
    }
    bool boolean(CLI::App* cmd, const std::string& flag, const std::string& key, bool def) {
        bool v = file_cfg.has(key) ? file_cfg.get_bool(key, def) : def;
        if (cmd->count(flag)) v = cmd->get_option(flag)->as<bool>();
        effective.set_bool(key, v);
        return v;
    }
    std::string text(CLI::App* cmd, const std::string& flag, const std::string& key,
                     const std::string& def) {
        std::string v = file_cfg.has(key) ? file_cfg.get(key, def) : def;
        if (cmd->count(flag)) v = cmd->get_option(flag)->as<std::string>();
        effective.set(key, v);
        return v;
    }
    std::vector<int> int_list(CLI::App* cmd, const std::string& flag, const std::string& key,
                              std::vector<int> def) {
        std::vector<int> v = file_cfg.has(key) ? file_cfg.get_int_list(key, def) : def;
        if (cmd->count(flag)) {
            v.clear();
            std::stringstream ss(cmd->get_option(flag)->as<std::string>());
            std::string part;
            while (std::getline(ss, part, ','))
                if (!part.empty()) v.push_back(std::stoi(part));
        }
        std::string joined;
        for (std::size_t i = 0; i < v.size(); ++i)
            joined += (i ? "," : "") + std::to_string(v[i]);
        effective.set(key, joined);
        return v;
    }
};

DpcnParams dpcn_from(OptionSink& opt, CLI::App* cmd) {
    DpcnParams p;
    p.beta = opt.num(cmd, "--beta", "dpcn.beta", p.beta);
    p.alpha_e = opt.num(cmd, "--alpha-e", "dpcn.alpha_e", p.alpha_e);
    p.v_e = opt.num(cmd, "--v-e", "dpcn.v_e", p.v_e);
    p.iterations = static_cast<int>(opt.integer(cmd, "--iterations", "dpcn.iterations", p.iterations));
    p.validate();
    return p;
}

void add_dpcn_flags(CLI::App* cmd) {
    cmd->add_option("--beta", "linking strength");
    cmd->add_option("--alpha-e", "threshold decay");
    cmd->add_option("--v-e", "threshold gain");
    cmd->add_option("--iterations", "iteration count");
    cmd->add_option("--linking-gain", "enhancement kernel gain");
    cmd->add_option("--offset-clamp", "max offset magnitude in pixels");
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_phantom(OptionSink& opt, CLI::App* cmd) {
    const auto out_dir = resolve_out_dir(opt.text(cmd, "--out", "out", "phantoms"));
    ManifestScope scope("phantom", out_dir);

    PhantomSpec spec;
    spec.width = spec.height = static_cast<std::size_t>(opt.integer(cmd, "--size", "phantom.size", 256));
    spec.n_trees = static_cast<int>(opt.integer(cmd, "--trees", "phantom.trees", spec.n_trees));
    spec.width_min = opt.num(cmd, "--width-min", "phantom.width_min", spec.width_min);
    spec.width_max = opt.num(cmd, "--width-max", "phantom.width_max", spec.width_max);
    spec.vessel_contrast = opt.num(cmd, "--contrast", "phantom.contrast", spec.vessel_contrast);
    spec.noise_sigma = opt.num(cmd, "--noise", "phantom.noise", spec.noise_sigma);
    spec.occluder = opt.boolean(cmd, "--occluder", "phantom.occluder", spec.occluder);
    spec.fraction_min = opt.num(cmd, "--fraction-min", "phantom.fraction_min", spec.fraction_min);
    spec.fraction_max = opt.num(cmd, "--fraction-max", "phantom.fraction_max", spec.fraction_max);
    const auto count = static_cast<std::size_t>(opt.integer(cmd, "--count", "phantom.count", 10));
    const auto seed = static_cast<std::uint64_t>(opt.integer(cmd, "--seed", "seed", 0));
    const double split = opt.num(cmd, "--split", "phantom.split", 0.8);
    spec.validate();

    auto ds = make_dataset(spec, count, seed, split);
    std::ofstream csv(out_dir / "manifest.csv", std::ios::trunc);
    csv << "image,label,fov,seed,vessel_fraction,split\n";
    std::size_t idx = 0;
    auto emit = [&](const PhantomSample& s, const char* which) {
        char name[32];
        std::snprintf(name, sizeof(name), "phantom_%03zu", idx++);
        const auto img = out_dir / (std::string(name) + ".png");
        const auto lbl = out_dir / (std::string(name) + "_label.png");
        const auto fov = out_dir / (std::string(name) + "_fov.png");
        write_png_gray(img.string(), s.image);
        write_png_gray(lbl.string(), mask_to_gray(s.label));
        write_png_gray(fov.string(), mask_to_gray(s.fov));
        csv << img.filename().string() << "," << lbl.filename().string() << ","
            << fov.filename().string() << "," << s.seed << "," << fmt_double(s.vessel_fraction)
            << "," << which << "\n";
        scope.manifest.outputs.push_back(img.string());
        scope.manifest.outputs.push_back(lbl.string());
        scope.manifest.outputs.push_back(fov.string());
    };
    for (const auto& s : ds.train) emit(s, "train");
    for (const auto& s : ds.test) emit(s, "test");
    csv.close();
    scope.manifest.outputs.push_back((out_dir / "manifest.csv").string());
    scope.manifest.config = opt.effective;
    scope.finish();
    std::printf("phantom: wrote %zu samples (%zu train, %zu test) to %s\n",
                ds.train.size() + ds.test.size(), ds.train.size(), ds.test.size(),
                out_dir.string().c_str());
    return kExitOk;
}

int cmd_preprocess(OptionSink& opt, CLI::App* cmd) {
    const fs::path in_dir = opt.text(cmd, "--in", "in", "");
    const auto out_dir = resolve_out_dir(opt.text(cmd, "--out", "out", "preprocessed"));
    ManifestScope scope("preprocess", out_dir);

    PreprocessConfig pc;
    pc.clahe.tiles_x = static_cast<std::size_t>(opt.integer(cmd, "--tiles-x", "clahe.tiles_x", 8));
    pc.clahe.tiles_y = static_cast<std::size_t>(opt.integer(cmd, "--tiles-y", "clahe.tiles_y", 8));
    pc.clahe.clip_limit = opt.num(cmd, "--clip-limit", "clahe.clip_limit", 2.0);
    pc.clahe.bins = static_cast<std::size_t>(opt.integer(cmd, "--bins", "clahe.bins", 256));
    pc.gamma = opt.num(cmd, "--gamma", "gamma", 1.0 / 1.2);
    const bool save_stages = opt.boolean(cmd, "--save-stages", "save_stages", false);
    pc.clahe.validate();

    int failures = 0;
    for (const auto& path : list_images(in_dir)) {
        try {
            scope.manifest.add_input(path.string());
            RgbImage rgb = read_png_rgb(path.string());
            const GrayImage mixed = channel_mix(rgb);
            const GrayImage equalized = clahe(mixed, pc.clahe);
            const GrayImage corrected = gamma_correct(equalized, pc.gamma);
            const std::string stem = path.stem().string();
            auto save = [&](const GrayImage& img, const std::string& suffix) {
                const auto out = out_dir / (stem + suffix + ".png");
                write_png_gray(out.string(), img);
                scope.manifest.outputs.push_back(out.string());
            };
            if (save_stages) {
                save(mixed, "_stage1_mix");
                save(equalized, "_stage2_clahe");
            }
            save(corrected, "");
        } catch (const std::exception& e) {
            std::fprintf(stderr, "preprocess: %s: %s\n", path.string().c_str(), e.what());
            ++failures;
        }
    }
    scope.manifest.config = opt.effective;
    scope.finish();
    if (failures > 0) {
        std::fprintf(stderr, "preprocess: %d file(s) failed\n", failures);
        return kExitData;
    }
    return kExitOk;
}

int cmd_enhance(OptionSink& opt, CLI::App* cmd) {
    const std::string image_path = opt.text(cmd, "--image", "image", "");
    const std::string label_path = opt.text(cmd, "--label", "label", "");
    const auto out_dir = resolve_out_dir(opt.text(cmd, "--out", "out", "enhanced"));
    ManifestScope scope("enhance", out_dir);

    DpcnParams params = dpcn_from(opt, cmd);
    const double gain = opt.num(cmd, "--linking-gain", "dpcn.linking_gain", 250.0);
    const double off_clamp = opt.num(cmd, "--offset-clamp", "dpcn.offset_clamp", 2.0);
    auto select = opt.int_list(cmd, "--select", "dpcn.select", [&] {
        std::vector<int> all(static_cast<std::size_t>(params.iterations));
        for (int i = 0; i < params.iterations; ++i) all[static_cast<std::size_t>(i)] = i + 1;
        return all;
    }());

    if (image_path.empty()) throw ConfigError("enhance: --image is required");
    scope.manifest.add_input(image_path);
    const GrayImage img = read_gray_auto(image_path);

    auto layer = make_enhancement_layer(gain);
    layer.offset_clamp = off_clamp;
    Tape tape;
    auto fires = dpcn_run(tape, gray_to_tensor(img), params, layer);

    for (int idx : select) {
        if (idx < 1 || idx > params.iterations)
            throw ConfigError("enhance: selected iteration out of range: " + std::to_string(idx));
        char name[32];
        std::snprintf(name, sizeof(name), "iter_%03d.png", idx);
        const auto out = out_dir / name;
        write_png_gray(out.string(), tensor_to_gray(*fires[static_cast<std::size_t>(idx) - 1]));
        scope.manifest.outputs.push_back(out.string());
    }

    if (!label_path.empty()) {
        scope.manifest.add_input(label_path);
        const Mask label = gray_to_mask(read_gray_auto(label_path));
        std::ofstream csv(out_dir / "contrast.csv", std::ios::trunc);
        csv << "iteration,contrast_gap\n";
        csv << "0," << fmt_double(contrast_gap(img, label)) << "\n";   // original image
        for (int n = 1; n <= params.iterations; ++n)
            csv << n << ","
                << fmt_double(contrast_gap(fires[static_cast<std::size_t>(n) - 1], label)) << "\n";
        scope.manifest.outputs.push_back((out_dir / "contrast.csv").string());
    }
    scope.manifest.config = opt.effective;
    scope.finish();
    return kExitOk;
}

int cmd_train(OptionSink& opt, CLI::App* cmd) {
    const fs::path data_dir = opt.text(cmd, "--data", "data", "");
    const auto out_dir = resolve_out_dir(opt.text(cmd, "--out", "out", "run"));
    ManifestScope scope("train", out_dir);

    M2NetConfig net_cfg;
    net_cfg.levels = static_cast<int>(opt.integer(cmd, "--levels", "net.levels", net_cfg.levels));
    net_cfg.base_channels = static_cast<std::size_t>(
        opt.integer(cmd, "--base-channels", "net.base_channels", static_cast<long long>(net_cfg.base_channels)));
    net_cfg.deep_supervision = opt.boolean(cmd, "--deep-supervision", "net.deep_supervision", true);
    DpcnParams dpcn_params = dpcn_from(opt, cmd);
    const double gain = opt.num(cmd, "--linking-gain", "dpcn.linking_gain", 250.0);
    const double off_clamp = opt.num(cmd, "--offset-clamp", "dpcn.offset_clamp", 2.0);
    auto select = opt.int_list(cmd, "--select", "dpcn.select", {5, 10, 15});

    LossConfig loss_cfg;
    loss_cfg.w0 = opt.num(cmd, "--w0", "loss.w0", loss_cfg.w0);
    loss_cfg.w1 = opt.num(cmd, "--w1", "loss.w1", loss_cfg.w1);
    loss_cfg.eps = opt.num(cmd, "--loss-eps", "loss.eps", loss_cfg.eps);
    loss_cfg.dice_product_form =
        opt.text(cmd, "--dice-form", "loss.dice_form", "product") != "difference";
    loss_cfg.validate();

    TrainConfig tc;
    tc.epochs = static_cast<int>(opt.integer(cmd, "--epochs", "train.epochs", 30));
    tc.batch_size = static_cast<std::size_t>(opt.integer(cmd, "--batch", "train.batch", 8));
    tc.lr = opt.num(cmd, "--lr", "train.lr", 1e-4);
    tc.seed = static_cast<std::uint64_t>(opt.integer(cmd, "--seed", "seed", 0));

    auto paired = pair_dataset(data_dir);
    if (paired.empty()) throw DataError("train: no image/label pairs in " + data_dir.string());

    struct Loaded {
        TensorPtr image;
        Mask label;
        std::optional<Mask> fov;
    };
    std::vector<Loaded> items;
    for (const auto& p : paired) {
        scope.manifest.add_input(p.image.string());
        scope.manifest.add_input(p.label.string());
        Loaded it;
        it.image = gray_to_tensor(read_gray_auto(p.image.string()));
        it.label = gray_to_mask(read_gray_auto(p.label.string()));
        if (!p.fov.empty()) {
            scope.manifest.add_input(p.fov.string());
            it.fov = gray_to_mask(read_gray_auto(p.fov.string()));
        }
        items.push_back(std::move(it));
    }

    SegPipeline pipe = build_pipeline(net_cfg, dpcn_params, select, tc.seed, gain);
    pipe.dpcn.offset_clamp = off_clamp;
    std::printf("train: %zu items, %zu parameters, %d epochs\n", items.size(),
                pipe.parameter_count(), tc.epochs);

    auto params = pipe.parameters();
    auto item_loss = [&](Tape& tape, std::size_t idx) {
        auto out = pipeline_forward(tape, pipe, items[idx].image);
        std::vector<TensorPtr> maps;
        if (pipe.net.cfg.deep_supervision) maps = out.side_probs;
        maps.push_back(out.final_prob);
        const std::vector<double> w(maps.size(), 1.0 / static_cast<double>(maps.size()));
        return combined_supervision_loss(tape, maps, items[idx].label, items[idx].fov, loss_cfg, w);
    };
    auto log = run_training(items.size(), item_loss, params, tc);

    const auto ckpt = out_dir / "checkpoint.mdfi";
    save_pipeline(ckpt.string(), pipe);
    scope.manifest.outputs.push_back(ckpt.string());
    std::ofstream csv(out_dir / "train_log.csv", std::ios::trunc);
    csv << "epoch,mean_loss,lr\n";
    for (const auto& e : log)
        csv << e.epoch << "," << fmt_double(e.mean_loss) << "," << fmt_double(e.lr) << "\n";
    scope.manifest.outputs.push_back((out_dir / "train_log.csv").string());
    scope.manifest.config = opt.effective;
    scope.finish();
    for (const auto& e : log)
        std::printf("epoch %d: mean_loss=%.6f\n", e.epoch, e.mean_loss);
    return kExitOk;
}

int cmd_predict(OptionSink& opt, CLI::App* cmd) {
    const std::string ckpt = opt.text(cmd, "--checkpoint", "checkpoint", "");
    const std::string image_path = opt.text(cmd, "--image", "image", "");
    const auto out_dir = resolve_out_dir(opt.text(cmd, "--out", "out", "predictions"));
    const double threshold = opt.num(cmd, "--threshold", "threshold", 0.5);
    ManifestScope scope("predict", out_dir);
    if (ckpt.empty() || image_path.empty())
        throw ConfigError("predict: --checkpoint and --image are required");
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ConfigError("predict: threshold must be in (0,1)");

    scope.manifest.add_input(ckpt);
    scope.manifest.add_input(image_path);
    SegPipeline pipe = load_pipeline(ckpt);
    const GrayImage img = read_gray_auto(image_path);

    Tape tape;
    auto out = pipeline_forward(tape, pipe, gray_to_tensor(img));
    const GrayImage prob = tensor_to_gray(*out.final_prob);

    // the mask is thresholded on the 8-bit quantized map, so recomputing
    // it offline from the written prob image gives the identical mask
    Mask mask(prob.width, prob.height);
    for (std::size_t i = 0; i < prob.size(); ++i)
        mask.v[i] = (to_byte(prob.pixels[i]) / 255.0) >= threshold ? 1 : 0;

    const std::string stem = fs::path(image_path).stem().string();
    const auto prob_path = out_dir / (stem + "_prob.png");
    const auto mask_path = out_dir / (stem + "_mask.png");
    write_png_gray(prob_path.string(), prob);
    write_png_gray(mask_path.string(), mask_to_gray(mask));
    scope.manifest.outputs.push_back(prob_path.string());
    scope.manifest.outputs.push_back(mask_path.string());
    scope.manifest.config = opt.effective;
    scope.finish();
    return kExitOk;
}

int cmd_evaluate(OptionSink& opt, CLI::App* cmd) {
    const fs::path pred_dir = opt.text(cmd, "--pred", "pred", "");
    const fs::path gt_dir = opt.text(cmd, "--gt", "gt", "");
    const std::string fov_dir = opt.text(cmd, "--fov", "fov", "");
    const auto out_dir = resolve_out_dir(opt.text(cmd, "--out", "out", "evaluation"));
    const double threshold = opt.num(cmd, "--threshold", "threshold", 0.5);
    const auto mode = parse_aggregate_mode(opt.text(cmd, "--mode", "mode", "pooled"));
    ManifestScope scope("evaluate", out_dir);

    std::vector<ImageEval> evals;
    for (const auto& p : list_images(pred_dir)) {
        std::string stem = p.stem().string();
        if (ends_with(stem, "_mask") || ends_with(stem, "_label") || ends_with(stem, "_fov"))
            continue;
        if (ends_with(stem, "_prob")) stem.resize(stem.size() - 5);
        const fs::path gt = find_variant(gt_dir, stem, "_label");
        if (gt.empty()) throw DataError("evaluate: no ground truth for " + stem);
        std::optional<Mask> fov;
        if (!fov_dir.empty()) {
            const fs::path fp = find_variant(fov_dir, stem, "_fov");
            if (fp.empty()) throw DataError("evaluate: no fov mask for " + stem);
            scope.manifest.add_input(fp.string());
            fov = gray_to_mask(read_gray_auto(fp.string()));
        }
        scope.manifest.add_input(p.string());
        scope.manifest.add_input(gt.string());
        const GrayImage prob = read_gray_auto(p.string());
        const Mask label = gray_to_mask(read_gray_auto(gt.string()));
        evals.push_back(evaluate_image(stem, prob, label, fov ? &*fov : nullptr, threshold));
    }
    if (evals.empty()) throw DataError("evaluate: no predictions found in " + pred_dir.string());

    std::sort(evals.begin(), evals.end(),
              [](const ImageEval& a, const ImageEval& b) { return a.name < b.name; });
    const MetricsReport pooled = aggregate(evals, mode);

    std::ofstream csv(out_dir / "metrics.csv", std::ios::trunc);
    csv << "image,tp,fp,tn,fn,acc,sen,spe,f1,auc\n";
    for (const auto& e : evals) {
        csv << e.name << "," << e.counts.tp << "," << e.counts.fp << "," << e.counts.tn << ","
            << e.counts.fn << "," << fmt_metric(e.report.acc) << "," << fmt_metric(e.report.sen)
            << "," << fmt_metric(e.report.spe) << "," << fmt_metric(e.report.f1) << ","
            << fmt_metric(e.report.auc) << "\n";
    }
    ConfusionCounts total;
    for (const auto& e : evals) total += e.counts;
    csv << (mode == AggregateMode::pooled ? "pooled" : "per-image-mean") << "," << total.tp << ","
        << total.fp << "," << total.tn << "," << total.fn << "," << fmt_metric(pooled.acc) << ","
        << fmt_metric(pooled.sen) << "," << fmt_metric(pooled.spe) << "," << fmt_metric(pooled.f1)
        << "," << fmt_metric(pooled.auc) << "\n";
    csv.close();
    scope.manifest.outputs.push_back((out_dir / "metrics.csv").string());
    scope.manifest.config = opt.effective;
    scope.finish();
    std::printf("evaluate: %zu images, %s acc=%s f1=%s auc=%s\n", evals.size(),
                mode == AggregateMode::pooled ? "pooled" : "mean",
                fmt_metric(pooled.acc).c_str(), fmt_metric(pooled.f1).c_str(),
                fmt_metric(pooled.auc).c_str());
    return kExitOk;
}

int cmd_gradcheck(OptionSink& opt, CLI::App* cmd) {
    const auto out_dir = resolve_out_dir(opt.text(cmd, "--out", "out", "gradcheck"));
    const double eps = opt.num(cmd, "--eps", "eps", 1e-5);
    const double tolerance = opt.num(cmd, "--tolerance", "tolerance", 1e-4);
    const int seeds = static_cast<int>(opt.integer(cmd, "--seeds", "seeds", 5));
    ManifestScope scope("gradcheck", out_dir);

    const auto report = run_gradcheck_suite(eps, seeds);
    bool ok = true;
    std::ofstream csv(out_dir / "gradcheck.csv", std::ios::trunc);
    csv << "op,max_rel_err,tolerance,pass\n";
    for (const auto& e : report) {
        const bool pass = e.max_rel_err < tolerance;
        ok = ok && pass;
        std::printf("%-22s max_rel_err=%.3e  %s\n", e.op.c_str(), e.max_rel_err,
                    pass ? "ok" : "FAIL");
        csv << e.op << "," << fmt_double(e.max_rel_err) << "," << fmt_double(tolerance) << ","
            << (pass ? "true" : "false") << "\n";
    }
    csv.close();
    scope.manifest.outputs.push_back((out_dir / "gradcheck.csv").string());
    scope.manifest.config = opt.effective;
    scope.finish();
    return ok ? kExitOk : kExitTolerance;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MDFI vessel-segmentation toolkit"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    std::map<std::string, std::string> config_files;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_files[cmd->get_name()], "key=value config file");
        cmd->add_option("--out", "output directory");
        cmd->add_option("--seed", "random seed");
    };

    auto* phantom = app.add_subcommand("phantom", "generate synthetic vessel samples");
    add_common(phantom);
    phantom->add_option("--count", "number of samples");
    phantom->add_option("--size", "square image size");
    phantom->add_option("--trees", "vessel trees per sample");
    phantom->add_option("--width-min", "minimum vessel width");
    phantom->add_option("--width-max", "maximum vessel width");
    phantom->add_option("--contrast", "vessel intensity offset");
    phantom->add_option("--noise", "noise sigma");
    phantom->add_option("--occluder", "bright disc occluder (true/false)");
    phantom->add_option("--fraction-min", "vessel fraction lower bound");
    phantom->add_option("--fraction-max", "vessel fraction upper bound");
    phantom->add_option("--split", "train fraction");

    auto* preprocess = app.add_subcommand("preprocess", "channel mix + CLAHE + gamma");
    add_common(preprocess);
    preprocess->add_option("--in", "input image directory");
    preprocess->add_option("--tiles-x", "CLAHE tile columns");
    preprocess->add_option("--tiles-y", "CLAHE tile rows");
    preprocess->add_option("--clip-limit", "CLAHE clip limit");
    preprocess->add_option("--bins", "CLAHE histogram bins");
    preprocess->add_option("--gamma", "gamma exponent");
    preprocess->add_option("--save-stages", "write per-stage images (true/false)");

    auto* enhance = app.add_subcommand("enhance", "DPCN iteration maps + contrast table");
    add_common(enhance);
    enhance->add_option("--image", "input grayscale image");
    enhance->add_option("--label", "vessel label for the contrast table");
    enhance->add_option("--select", "comma list of iterations to write");
    add_dpcn_flags(enhance);

    auto* train = app.add_subcommand("train", "train the segmentation pipeline");
    add_common(train);
    train->add_option("--data", "dataset directory (stem pairing)");
    train->add_option("--epochs", "training epochs");
    train->add_option("--batch", "batch size");
    train->add_option("--lr", "Adam learning rate");
    train->add_option("--levels", "network depth");
    train->add_option("--base-channels", "first-level channel width");
    train->add_option("--deep-supervision", "side-output supervision (true/false)");
    train->add_option("--select", "DPCN iterations fed to the network");
    train->add_option("--w0", "background class weight");
    train->add_option("--w1", "vessel class weight");
    train->add_option("--loss-eps", "probability clamp");
    train->add_option("--dice-form", "dice numerator: product|difference");
    add_dpcn_flags(train);

    auto* predict = app.add_subcommand("predict", "probability map + binary mask");
    add_common(predict);
    predict->add_option("--checkpoint", "trained checkpoint");
    predict->add_option("--image", "input image");
    predict->add_option("--threshold", "vessel threshold");

    auto* evaluate = app.add_subcommand("evaluate", "confusion metrics CSV");
    add_common(evaluate);
    evaluate->add_option("--pred", "probability map directory");
    evaluate->add_option("--gt", "ground-truth directory");
    evaluate->add_option("--fov", "fov mask directory");
    evaluate->add_option("--mode", "pooled|mean");
    evaluate->add_option("--threshold", "vessel threshold");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    add_common(gradcheck);
    gradcheck->add_option("--eps", "finite-difference step");
    gradcheck->add_option("--tolerance", "max relative error allowed");
    gradcheck->add_option("--seeds", "seeds per op");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    (void)env_threads();   // reserved for per-image parallel commands

    try {
        CLI::App* cmd = app.get_subcommands().front();
        OptionSink opt;
        if (auto it = config_files.find(cmd->get_name());
            it != config_files.end() && !it->second.empty())
            opt.load_file(it->second);
        if (cmd == phantom) return cmd_phantom(opt, cmd);
        if (cmd == preprocess) return cmd_preprocess(opt, cmd);
        if (cmd == enhance) return cmd_enhance(opt, cmd);
        if (cmd == train) return cmd_train(opt, cmd);
        if (cmd == predict) return cmd_predict(opt, cmd);
        if (cmd == evaluate) return cmd_evaluate(opt, cmd);
        if (cmd == gradcheck) return cmd_gradcheck(opt, cmd);
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitUsage;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const GenerationError& e) {
        std::fprintf(stderr, "generation error: %s\n", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    }
}
