#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "swinseg/checkpoint.hpp"
#include "swinseg/inference.hpp"
#include "swinseg/loss_metrics.hpp"
#include "swinseg/model.hpp"
#include "swinseg/ops.hpp"
#include "swinseg/trainer.hpp"
#include "swinseg/verify.hpp"
#include "swinseg/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace swinseg;

namespace {

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file: " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw std::invalid_argument("config file is not valid JSON: " + path);
    return j;
}

void echo_config(const std::string& command, const json& effective) {
    json out{{"command", command}, {"effective_config", effective}};
    std::cout << out.dump(2) << "\n";
}

Tensor volume_to_tensor(const data::Volume& v) {
    Tensor t = Tensor::zeros({v.channels, v.shape[0], v.shape[1], v.shape[2]});
    float* p = t.data<float>();
    std::copy(v.values.begin(), v.values.end(), p);
    return t;
}

struct CommonConfigs {
    nn::ModelConfig model;
    train::TrainConfig trainer;
};

CommonConfigs merge_configs(const json& file) {
    CommonConfigs c;
    if (file.contains("model")) c.model = nn::ModelConfig::from_json(file.at("model"));
    if (file.contains("train")) c.trainer = train::TrainConfig::from_json(file.at("train"));
    return c;
}

int cmd_summarize(const std::string& config_path, std::vector<int64_t> input_size) {
    CommonConfigs cfg = merge_configs(load_config_file(config_path));
    if (!input_size.empty()) {
        if (input_size.size() == 1)
            cfg.model.input_extents = {input_size[0], input_size[0], input_size[0]};
        else if (input_size.size() == 3)
            cfg.model.input_extents = {input_size[0], input_size[1], input_size[2]};
        else
            throw std::invalid_argument("--input-size takes 1 or 3 extents");
    }
    std::cout << nn::model_summary(cfg.model).dump(2) << "\n";
    return 0;
}

int cmd_train(const std::string& manifest_path, const std::string& config_path, int fold,
              int64_t seed, int64_t epochs, const std::string& out_dir,
              const std::string& resume, int cross_val_runs, bool seed_set, bool fold_set,
              bool epochs_set) {
    CommonConfigs cfg = merge_configs(load_config_file(config_path));
    if (fold_set) cfg.trainer.fold = fold;
    if (seed_set) cfg.trainer.seed = static_cast<uint64_t>(seed);
    if (epochs_set) cfg.trainer.epochs = epochs;
    cfg.model.input_extents = cfg.trainer.crop;

    data::DatasetManifest manifest = data::load_manifest(manifest_path);
    const std::string root = fs::path(manifest_path).parent_path().string();
    echo_config("train", json{{"model", cfg.model.to_json()},
                              {"train", cfg.trainer.to_json()},
                              {"manifest", manifest_path},
                              {"out_dir", out_dir},
                              {"cross_val_runs", cross_val_runs}});
    if (cross_val_runs > 0) {
        auto spec = train::run_cross_validation(manifest, root, cfg.model, cfg.trainer,
                                                cross_val_runs, out_dir);
        std::cout << spec.to_json().dump(2) << "\n";
        return 0;
    }
    auto res = train::train(manifest, root, cfg.model, cfg.trainer, out_dir,
                            resume.empty() ? std::nullopt : std::make_optional(resume));
    json summary{{"best", res.best_path},
                 {"last", res.last_path},
                 {"log", res.log_path},
                 {"best_val_dice", res.best_val_dice}};
    if (!res.log.empty()) summary["final_epoch"] = res.log.back().to_json();
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_infer(const std::string& input, const std::vector<std::string>& checkpoints,
              double overlap, std::vector<int64_t> roi_arg, const std::string& blend_name,
              double threshold, const std::string& out_dir, const std::string& name,
              bool save_probs) {
    if (checkpoints.empty()) throw std::invalid_argument("--checkpoints requires at least one path");
    const infer::Blend blend = infer::blend_from_name(blend_name);

    data::Volume vol = data::normalize_nonzero(data::load_volume(input));
    Tensor x = volume_to_tensor(vol);

    std::vector<infer::EnsembleMember> members;
    std::array<int64_t, 3> roi{};
    for (const auto& path : checkpoints) {
        train::Checkpoint ckpt = train::load_checkpoint(path);
        nn::ModelConfig mcfg = ckpt.model_config;
        if (!roi_arg.empty()) {
            if (roi_arg.size() == 1) mcfg.input_extents = {roi_arg[0], roi_arg[0], roi_arg[0]};
            else if (roi_arg.size() == 3)
                mcfg.input_extents = {roi_arg[0], roi_arg[1], roi_arg[2]};
            else
                throw std::invalid_argument("--roi takes 1 or 3 extents");
        }
        roi = mcfg.input_extents;
        auto model = std::make_shared<nn::SwinUnetr>(mcfg);
        model->load_parameter_values(ckpt.blobs_with_prefix("param/"));
        members.push_back({path, std::move(model)});
    }

    const std::string stem = name.empty() ? fs::path(input).stem().string() : name;
    fs::create_directories(out_dir);
    echo_config("infer", json{{"input", input},
                              {"checkpoints", checkpoints},
                              {"roi", roi},
                              {"overlap", overlap},
                              {"blend", blend_name},
                              {"threshold", threshold},
                              {"out_dir", out_dir},
                              {"name", stem}});

    Tensor probs = infer::ensemble_infer(x, members, roi, overlap, blend);
    data::SegmentationMask pred = infer::fuse_labels(probs, threshold, vol.spacing);
    const std::string mask_path = (fs::path(out_dir) / (stem + "_pred.svol")).string();
    data::save_mask(pred, mask_path);
    json manifest{{"input", input},
                  {"checkpoints", checkpoints},
                  {"ensemble_size", checkpoints.size()},
                  {"mode", checkpoints.size() > 1 ? "ensemble" : "single"},
                  {"roi", roi},
                  {"overlap", overlap},
                  {"overlap_interpretation", "step = max(1, floor(roi*(1-overlap)))"},
                  {"blend", blend_name},
                  {"threshold", threshold},
                  {"prediction", mask_path}};
    if (save_probs) {
        data::Volume pv;
        pv.channels = probs.shape()[0];
        pv.shape = {probs.shape()[1], probs.shape()[2], probs.shape()[3]};
        pv.spacing = vol.spacing;
        pv.channel_names = {"ET", "WT", "TC"};
        pv.values.assign(probs.data<float>(), probs.data<float>() + probs.numel());
        const std::string probs_path = (fs::path(out_dir) / (stem + "_probs.svol")).string();
        data::save_volume(pv, probs_path);
        manifest["probabilities"] = probs_path;
    }
    std::ofstream mout(fs::path(out_dir) / (stem + "_inference.json"));
    mout << manifest.dump(2) << "\n";
    return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_manifest, double hausdorff_pct,
             const std::string& out_dir) {
    data::DatasetManifest manifest = data::load_manifest(gt_manifest);
    const std::string root = fs::path(gt_manifest).parent_path().string();
    fs::create_directories(out_dir);
    echo_config("eval", json{{"pred_dir", pred_dir},
                             {"gt_manifest", gt_manifest},
                             {"hausdorff_percentile", hausdorff_pct},
                             {"out_dir", out_dir}});

    const char* class_names[3] = {"ET", "WT", "TC"};
    json cases = json::array();
    std::vector<std::string> missing;
    std::array<double, 3> dice_sum{};
    std::array<double, 3> hd_sum{};
    std::array<int64_t, 3> hd_count{};
    int64_t evaluated = 0;

    for (const auto& c : manifest.cases) {
        fs::path pred_path = fs::path(pred_dir) / (c.id + "_pred.svol");
        if (!fs::exists(pred_path)) pred_path = fs::path(pred_dir) / (c.id + ".svol");
        if (!fs::exists(pred_path)) {
            missing.push_back(c.id);
            continue;
        }
        data::SegmentationMask pred = data::load_mask(pred_path.string());
        data::SegmentationMask gt = data::load_mask(
            fs::path(c.mask).is_absolute() ? c.mask : (fs::path(root) / c.mask).string());
        data::SegmentationMask pred_ch =
            pred.channel_form ? pred : data::labels_to_channels(pred);
        data::SegmentationMask gt_ch = gt.channel_form ? gt : data::labels_to_channels(gt);
        if (pred_ch.shape != gt_ch.shape)
            throw std::runtime_error("prediction/ground-truth shape mismatch for case " + c.id);
        const int64_t n = gt_ch.voxels();
        json entry{{"id", c.id}};
        for (int k = 0; k < 3; ++k) {
            const double d = metrics::dice_score({pred_ch.channel(k), static_cast<size_t>(n)},
                                                 {gt_ch.channel(k), static_cast<size_t>(n)});
            dice_sum[k] += d;
            entry["dice"][class_names[k]] = d;
            auto hd = metrics::hausdorff_distance({pred_ch.channel(k), static_cast<size_t>(n)},
                                                  {gt_ch.channel(k), static_cast<size_t>(n)},
                                                  gt_ch.shape, gt_ch.spacing, hausdorff_pct);
            if (hd) {
                hd_sum[k] += *hd;
                ++hd_count[k];
                entry["hausdorff"][class_names[k]] = *hd;
            } else {
                entry["hausdorff"][class_names[k]] = nullptr;
            }
        }
        cases.push_back(entry);
        ++evaluated;
    }

    json aggregate;
    double dice_avg_sum = 0.0;
    for (int k = 0; k < 3; ++k) {
        const double mean_dice = evaluated ? dice_sum[k] / evaluated : 0.0;
        aggregate["dice"][class_names[k]] = mean_dice;
        dice_avg_sum += mean_dice;
        aggregate["hausdorff"][class_names[k]] =
            hd_count[k] ? json(hd_sum[k] / static_cast<double>(hd_count[k])) : json(nullptr);
        aggregate["hausdorff_undefined"][class_names[k]] = evaluated - hd_count[k];
    }
    aggregate["dice"]["Avg"] = dice_avg_sum / 3.0;

    json report{{"hausdorff_percentile", hausdorff_pct},
                {"cases", cases},
                {"aggregate", aggregate},
                {"missing", missing}};
    std::ofstream jout(fs::path(out_dir) / "report.json");
    jout << report.dump(2) << "\n";

    std::ofstream csv(fs::path(out_dir) / "report.csv");
    csv << "case,dice_ET,dice_WT,dice_TC,dice_Avg,hd_ET,hd_WT,hd_TC,hd_Avg\n";
    auto hd_cell = [](const json& v) { return v.is_null() ? std::string("nan") : v.dump(); };
    for (const auto& e : cases) {
        const double avg = (e["dice"]["ET"].get<double>() + e["dice"]["WT"].get<double>() +
                            e["dice"]["TC"].get<double>()) /
                           3.0;
        double hsum = 0.0;
        int hn = 0;
        for (const char* k : class_names)
            if (!e["hausdorff"][k].is_null()) {
                hsum += e["hausdorff"][k].get<double>();
                ++hn;
            }
        csv << e["id"].get<std::string>() << "," << e["dice"]["ET"] << "," << e["dice"]["WT"]
            << "," << e["dice"]["TC"] << "," << avg << "," << hd_cell(e["hausdorff"]["ET"]) << ","
            << hd_cell(e["hausdorff"]["WT"]) << "," << hd_cell(e["hausdorff"]["TC"]) << ","
            << (hn ? std::to_string(hsum / hn) : std::string("nan")) << "\n";
    }
    csv << "mean," << aggregate["dice"]["ET"] << "," << aggregate["dice"]["WT"] << ","
        << aggregate["dice"]["TC"] << "," << aggregate["dice"]["Avg"] << ","
        << hd_cell(aggregate["hausdorff"]["ET"]) << "," << hd_cell(aggregate["hausdorff"]["WT"])
        << "," << hd_cell(aggregate["hausdorff"]["TC"]) << ",\n";

    std::cout << json{{"evaluated", evaluated},
                      {"missing", missing},
                      {"aggregate", aggregate}}
                     .dump(2)
              << "\n";
    return missing.empty() ? 0 : 1;
}

int cmd_verify(const std::string& suite) {
    echo_config("verify", json{{"suite", suite}});
    auto results = verify::run_suites(suite);
    json failures = json::array();
    for (const auto& r : results) {
        std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
        if (!r.passed) failures.push_back({{"name", r.name}, {"detail", r.detail}});
    }
    std::cout << json{{"total", results.size()},
                      {"failed", failures.size()},
                      {"failures", failures}}
                     .dump(2)
              << "\n";
    return failures.empty() ? 0 : 2;
}

int cmd_convert(const std::string& input, const std::string& output,
                std::vector<int64_t> shape, const std::string& dtype,
                std::vector<double> spacing, std::vector<std::string> channel_names) {
    if (spacing.empty()) spacing = {1.0, 1.0, 1.0};
    if (spacing.size() != 3) throw std::invalid_argument("--spacing takes 3 values");
    std::ifstream in(input, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open input: " + input);
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    echo_config("convert", json{{"input", input},
                                {"output", output},
                                {"shape", shape},
                                {"dtype", dtype},
                                {"spacing", spacing}});
    if (dtype == "f32") {
        if (shape.size() != 4) throw std::invalid_argument("f32 volumes need --shape C,H,W,D");
        data::Volume v;
        v.channels = shape[0];
        v.shape = {shape[1], shape[2], shape[3]};
        v.spacing = {spacing[0], spacing[1], spacing[2]};
        v.channel_names = channel_names;
        const size_t expect = static_cast<size_t>(v.channels * v.voxels()) * sizeof(float);
        if (raw.size() != expect)
            throw std::invalid_argument("input has " + std::to_string(raw.size()) +
                                        " bytes, shape implies " + std::to_string(expect));
        v.values.resize(raw.size() / sizeof(float));
        std::memcpy(v.values.data(), raw.data(), raw.size());
        data::save_volume(v, output);
    } else if (dtype == "u8") {
        data::SegmentationMask m;
        if (shape.size() == 4 && shape[0] == 3) {
            m.channel_form = true;
            m.shape = {shape[1], shape[2], shape[3]};
        } else if (shape.size() == 3) {
            m.channel_form = false;
            m.shape = {shape[0], shape[1], shape[2]};
        } else {
            throw std::invalid_argument("u8 masks need --shape H,W,D or 3,H,W,D");
        }
        m.spacing = {spacing[0], spacing[1], spacing[2]};
        const size_t expect = static_cast<size_t>((m.channel_form ? 3 : 1) * m.voxels());
        if (raw.size() != expect)
            throw std::invalid_argument("input has " + std::to_string(raw.size()) +
                                        " bytes, shape implies " + std::to_string(expect));
        m.values.assign(raw.begin(), raw.end());
        data::save_mask(m, output);
    } else {
        throw std::invalid_argument("--dtype must be f32 or u8");
    }
    return 0;
}

int cmd_gen_toy(const std::string& out_dir, int64_t cases, int64_t size, int64_t seed,
                int folds) {
    train::ToyConfig cfg;
    cfg.cases = cases;
    cfg.size = size;
    cfg.seed = static_cast<uint64_t>(seed);
    cfg.folds = folds;
    echo_config("gen-toy", json{{"out_dir", out_dir},
                                {"cases", cases},
                                {"size", size},
                                {"seed", seed},
                                {"folds", folds}});
    train::generate_toy_dataset(cfg, out_dir);
    std::cout << "wrote " << cases << " cases to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Swin UNETR volumetric segmentation laboratory"};
    app.require_subcommand(1);

    std::string config_path, manifest_path, out_dir = "out", input, name, resume;
    std::string blend = "uniform", dtype = "f32", suite = "all", pred_dir, gt_manifest, output;
    std::vector<std::string> checkpoints, channel_names;
    std::vector<int64_t> input_size, roi, shape;
    std::vector<double> spacing;
    int fold = 0, cross_val = 0, folds = 2;
    int64_t seed = 0, epochs = 0, cases = 2, size = 32;
    double overlap = 0.7, threshold = 0.5, hausdorff_pct = 95.0;
    bool save_probs = false;

    auto* summarize = app.add_subcommand("summarize", "print config, shapes, parameters, FLOPs");
    summarize->add_option("--config", config_path, "JSON config file");
    summarize->add_option("--input-size", input_size, "input extents (1 or 3 values)")
        ->delimiter(',');

    auto* tr = app.add_subcommand("train", "train one fold (or a full cross-validation)");
    tr->add_option("--manifest", manifest_path, "dataset manifest JSON")->required();
    auto* tr_fold = tr->add_option("--fold", fold, "validation fold index");
    tr->add_option("--config", config_path, "JSON config file");
    tr->add_option("--out-dir", out_dir, "output directory");
    auto* tr_seed = tr->add_option("--seed", seed, "training seed");
    auto* tr_epochs = tr->add_option("--epochs", epochs, "epoch count override");
    tr->add_option("--resume", resume, "checkpoint to resume from");
    tr->add_option("--cross-val", cross_val, "train all folds for N runs and build an ensemble");

    auto* inf = app.add_subcommand("infer", "sliding-window (ensemble) inference");
    inf->add_option("--input", input, "input SVOL volume")->required();
    inf->add_option("--checkpoints", checkpoints, "one or more SCKPT files")->required();
    inf->add_option("--overlap", overlap, "tile overlap fraction");
    inf->add_option("--roi", roi, "tile extents (1 or 3 values)")->delimiter(',');
    inf->add_option("--blend", blend, "uniform | gaussian");
    inf->add_option("--threshold", threshold, "binarization threshold");
    inf->add_option("--out", out_dir, "output directory");
    inf->add_option("--name", name, "output name stem (default: input stem)");
    inf->add_flag("--save-probs", save_probs, "also write the probability volume");

    auto* ev = app.add_subcommand("eval", "Dice/Hausdorff report against a manifest");
    ev->add_option("--pred-dir", pred_dir, "directory with <id>_pred.svol files")->required();
    ev->add_option("--gt-manifest", gt_manifest, "ground-truth manifest")->required();
    ev->add_option("--hausdorff", hausdorff_pct, "percentile: 95 or 100");
    ev->add_option("--out", out_dir, "report directory");

    auto* ver = app.add_subcommand("verify", "run invariant suites");
    ver->add_option("--suite", suite, "gradcheck | oracles | roundtrip | all");

    auto* conv = app.add_subcommand("convert", "wrap a raw little-endian payload as SVOL");
    conv->add_option("--input", input, "raw payload file")->required();
    conv->add_option("--out", output, "output SVOL path")->required();
    conv->add_option("--shape", shape, "extents, e.g. 4,240,240,155")->delimiter(',')->required();
    conv->add_option("--dtype", dtype, "f32 | u8");
    conv->add_option("--spacing", spacing, "voxel spacing in mm")->delimiter(',');
    conv->add_option("--channel-names", channel_names, "channel names")->delimiter(',');

    auto* toy = app.add_subcommand("gen-toy", "generate the synthetic ellipsoid dataset");
    toy->add_option("--out-dir", out_dir, "output directory")->required();
    toy->add_option("--cases", cases, "number of cases");
    toy->add_option("--size", size, "cubic volume extent");
    toy->add_option("--seed", seed, "generator seed");
    toy->add_option("--folds", folds, "fold count for the manifest");

    try {
        app.parse(argc, argv);
        if (summarize->parsed()) return cmd_summarize(config_path, input_size);
        if (tr->parsed())
            return cmd_train(manifest_path, config_path, fold, seed, epochs, out_dir, resume,
                             cross_val, tr_seed->count() > 0, tr_fold->count() > 0,
                             tr_epochs->count() > 0);
        if (inf->parsed())
            return cmd_infer(input, checkpoints, overlap, roi, blend, threshold, out_dir, name,
                             save_probs);
        if (ev->parsed()) return cmd_eval(pred_dir, gt_manifest, hausdorff_pct, out_dir);
        if (ver->parsed()) return cmd_verify(suite);
        if (conv->parsed()) return cmd_convert(input, output, shape, dtype, spacing, channel_names);
        if (toy->parsed()) return cmd_gen_toy(out_dir, cases, size, seed, folds);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
