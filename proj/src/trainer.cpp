#include "swinseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "swinseg/inference.hpp"
#include "swinseg/loss_metrics.hpp"
#include "swinseg/ops.hpp"

namespace swinseg::train {

namespace fs = std::filesystem;
using nlohmann::json;

json TrainConfig::to_json() const {
    return json{{"lr_max", lr_max},
                {"epochs", epochs},
                {"warmup_fraction", warmup_fraction},
                {"batch_size", batch_size},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_eps", adam_eps},
                {"weight_decay", weight_decay},
                {"seed", seed},
                {"fold", fold},
                {"crop", crop},
                {"augment", augment},
                {"flip_prob", aug.flip_prob},
                {"intensity_shift", aug.intensity_shift},
                {"scale_low", aug.scale_low},
                {"scale_high", aug.scale_high},
                {"val_interval", val_interval},
                {"val_overlap", val_overlap}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.lr_max = j.value("lr_max", c.lr_max);
    c.epochs = j.value("epochs", c.epochs);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.fold = j.value("fold", c.fold);
    if (j.contains("crop")) c.crop = j.at("crop").get<std::array<int64_t, 3>>();
    c.augment = j.value("augment", c.augment);
    c.aug.flip_prob = j.value("flip_prob", c.aug.flip_prob);
    c.aug.intensity_shift = j.value("intensity_shift", c.aug.intensity_shift);
    c.aug.scale_low = j.value("scale_low", c.aug.scale_low);
    c.aug.scale_high = j.value("scale_high", c.aug.scale_high);
    c.val_interval = j.value("val_interval", c.val_interval);
    c.val_overlap = j.value("val_overlap", c.val_overlap);
    if (c.lr_max <= 0.0) throw std::invalid_argument("train config: lr_max must be positive");
    if (c.batch_size != 1) throw std::invalid_argument("train config: batch_size is fixed at 1");
    return c;
}

LrSchedule LrSchedule::make(const TrainConfig& cfg, int64_t total_steps) {
    LrSchedule s;
    s.lr_max = cfg.lr_max;
    s.total_steps = total_steps;
    s.warmup_steps = static_cast<int64_t>(cfg.warmup_fraction * static_cast<double>(total_steps));
    if (s.warmup_steps >= total_steps)
        throw std::invalid_argument("lr schedule: warmup must be shorter than training");
    return s;
}

double LrSchedule::at(int64_t step) const {
    if (step < 0 || step > total_steps)
        throw std::invalid_argument("lr schedule: step out of range");
    if (step < warmup_steps)
        return lr_max * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return lr_max * 0.5 * (1.0 + std::cos(M_PI * progress));
}

AdamW::AdamW(const TrainConfig& cfg, const std::vector<nn::Parameter>& params)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), weight_decay_(cfg.weight_decay) {
    for (const auto& p : params) {
        m_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
        v_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
        names_.push_back(p.name);
    }
}

void AdamW::step(std::vector<nn::Parameter>& params, double lr) {
    if (params.size() != m_.size())
        throw std::invalid_argument("optimizer state does not match parameter list");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& impl = *params[i].tensor.impl();
        dispatch(impl.dtype, [&](auto tag) {
            using T = decltype(tag);
            T* p = impl.values<T>();
            T* m = m_[i].data<T>();
            T* v = v_[i].data<T>();
            const T* g = impl.has_grad() ? impl.grad_values<T>() : nullptr;
            const int64_t n = impl.numel();
            for (int64_t k = 0; k < n; ++k) {
                const double grad = g ? static_cast<double>(g[k]) : 0.0;
                if (!std::isfinite(grad))
                    throw NumericError("non-finite gradient in parameter '" + names_[i] + "'");
                double pk = static_cast<double>(p[k]) * (1.0 - lr * weight_decay_);
                const double mk = beta1_ * static_cast<double>(m[k]) + (1.0 - beta1_) * grad;
                const double vk = beta2_ * static_cast<double>(v[k]) + (1.0 - beta2_) * grad * grad;
                pk -= lr * (mk / bc1) / (std::sqrt(vk / bc2) + eps_);
                p[k] = static_cast<T>(pk);
                m[k] = static_cast<T>(mk);
                v[k] = static_cast<T>(vk);
            }
        });
    }
}

std::vector<std::pair<std::string, Tensor>> AdamW::state_blobs() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < m_.size(); ++i) out.emplace_back("opt_m/" + names_[i], m_[i]);
    for (size_t i = 0; i < v_.size(); ++i) out.emplace_back("opt_v/" + names_[i], v_[i]);
    return out;
}

void AdamW::load_state(const std::vector<std::pair<std::string, Tensor>>& m_blobs,
                       const std::vector<std::pair<std::string, Tensor>>& v_blobs, int64_t t) {
    auto fill = [&](std::vector<Tensor>& dst,
                    const std::vector<std::pair<std::string, Tensor>>& src) {
        if (src.size() != dst.size())
            throw std::runtime_error("optimizer state blob count mismatch");
        for (size_t i = 0; i < dst.size(); ++i) {
            bool found = false;
            for (const auto& [name, tensor] : src) {
                if (name != names_[i]) continue;
                if (tensor.shape() != dst[i].shape())
                    throw std::runtime_error("optimizer state shape mismatch for " + name);
                dst[i].impl()->data = tensor.impl()->data;
                found = true;
                break;
            }
            if (!found) throw std::runtime_error("missing optimizer state for " + names_[i]);
        }
    };
    fill(m_, m_blobs);
    fill(v_, v_blobs);
    t_ = t;
}

json EpochLog::to_json() const {
    json j{{"epoch", epoch}, {"mean_train_loss", mean_train_loss}, {"lr", lr}};
    if (validated)
        j["val_dice"] = {{"ET", val_dice[0]}, {"WT", val_dice[1]}, {"TC", val_dice[2]}};
    return j;
}

namespace {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

Tensor volume_to_tensor(const data::Volume& v, DType dt) {
    Tensor t = Tensor::zeros({v.channels, v.shape[0], v.shape[1], v.shape[2]}, dt);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* p = t.data<T>();
        for (size_t i = 0; i < v.values.size(); ++i) p[i] = static_cast<T>(v.values[i]);
    });
    return t;
}

Tensor mask_to_tensor(const data::SegmentationMask& channels, DType dt) {
    Tensor t = Tensor::zeros({3, channels.shape[0], channels.shape[1], channels.shape[2]}, dt);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* p = t.data<T>();
        for (size_t i = 0; i < channels.values.size(); ++i)
            p[i] = static_cast<T>(channels.values[i]);
    });
    return t;
}

data::SegmentationMask as_channels(const data::SegmentationMask& m) {
    return m.channel_form ? m : data::labels_to_channels(m);
}

std::string resolve(const std::string& root, const std::string& path) {
    fs::path p(path);
    if (p.is_absolute() || root.empty()) return path;
    return (fs::path(root) / p).string();
}

void zero_grads(std::vector<nn::Parameter>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

void write_log_file(const std::string& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& entry : log) out << entry.to_json().dump() << "\n";
}

}  // namespace

TrainResult train(const data::DatasetManifest& manifest, const std::string& data_root,
                  const nn::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::string& out_dir, const std::optional<std::string>& resume_from) {
    if (mcfg.input_extents != tcfg.crop)
        throw std::invalid_argument("model input extents must equal the training crop");
    const auto train_ids = manifest.train_ids(tcfg.fold);
    const auto val_ids = manifest.val_ids(tcfg.fold);
    if (train_ids.empty()) throw std::invalid_argument("no training cases for fold");
    fs::create_directories(out_dir);

    auto model = std::make_shared<nn::SwinUnetr>(mcfg, tcfg.seed);
    AdamW opt(tcfg, model->parameters());
    const int64_t steps_per_epoch = static_cast<int64_t>(train_ids.size());
    const LrSchedule sched = LrSchedule::make(tcfg, tcfg.epochs * steps_per_epoch);

    TrainResult res;
    res.best_path = (fs::path(out_dir) / "best.ckpt").string();
    res.last_path = (fs::path(out_dir) / "last.ckpt").string();
    res.log_path = (fs::path(out_dir) / "metrics.jsonl").string();

    int64_t step = 0, start_epoch = 0;
    if (resume_from) {
        Checkpoint ckpt = load_checkpoint(*resume_from);
        if (ckpt.model_config.to_json() != mcfg.to_json())
            throw std::runtime_error("resume checkpoint model config does not match");
        model->load_parameter_values(ckpt.blobs_with_prefix("param/"));
        opt.load_state(ckpt.blobs_with_prefix("opt_m/"), ckpt.blobs_with_prefix("opt_v/"),
                       ckpt.step);
        step = ckpt.step;
        start_epoch = ckpt.extra.value("epoch", int64_t{-1}) + 1;
        res.best_val_dice = ckpt.extra.value("best_val_dice", -1.0);
        for (const auto& e : ckpt.extra.value("log", json::array())) {
            EpochLog el;
            el.epoch = e.at("epoch").get<int64_t>();
            el.mean_train_loss = e.at("mean_train_loss").get<double>();
            el.lr = e.at("lr").get<double>();
            if (e.contains("val_dice")) {
                el.validated = true;
                el.val_dice = {e["val_dice"]["ET"].get<double>(),
                               e["val_dice"]["WT"].get<double>(),
                               e["val_dice"]["TC"].get<double>()};
            }
            res.log.push_back(el);
        }
    }

    auto save = [&](const std::string& path, int64_t epoch) {
        Checkpoint ckpt;
        ckpt.model_config = mcfg;
        ckpt.train_config = tcfg.to_json();
        ckpt.step = step;
        ckpt.rng_state = "derived(seed=" + std::to_string(tcfg.seed) + ")";
        ckpt.extra = json{{"epoch", epoch},
                          {"fold", tcfg.fold},
                          {"seed", tcfg.seed},
                          {"best_val_dice", res.best_val_dice}};
        json jl = json::array();
        for (const auto& e : res.log) jl.push_back(e.to_json());
        ckpt.extra["log"] = jl;
        for (const auto& p : model->parameters())
            ckpt.blobs.emplace_back("param/" + p.name, p.tensor.detach());
        for (const auto& b : opt.state_blobs()) ckpt.blobs.push_back(b);
        save_checkpoint(ckpt, path);
    };

    auto load_case = [&](const std::string& id) {
        const auto& c = manifest.case_by_id(id);
        data::Volume v = data::normalize_nonzero(data::load_volume(resolve(data_root, c.image)));
        data::SegmentationMask m = as_channels(data::load_mask(resolve(data_root, c.mask)));
        return std::make_pair(std::move(v), std::move(m));
    };

    for (int64_t epoch = start_epoch; epoch < tcfg.epochs; ++epoch) {
        std::vector<std::string> order = train_ids;
        auto order_rng = derived_rng(tcfg.seed, {0x6f72646572, static_cast<uint64_t>(epoch)});
        std::shuffle(order.begin(), order.end(), order_rng);

        double loss_sum = 0.0;
        double last_lr = 0.0;
        for (const auto& id : order) {
            auto [vol, mask] = load_case(id);
            auto case_rng =
                derived_rng(tcfg.seed, {fnv1a(id), static_cast<uint64_t>(epoch), 0x61756731});
            auto [cv, cm] = data::random_crop(vol, mask, tcfg.crop, case_rng);
            if (tcfg.augment) {
                auto a = data::augment(cv, cm, tcfg.aug, case_rng);
                cv = std::move(a.first);
                cm = std::move(a.second);
            }
            Tensor x = volume_to_tensor(cv, mcfg.dtype);
            Tensor g = mask_to_tensor(cm, mcfg.dtype);

            Tape::active().reset();
            zero_grads(model->parameters());
            Tensor logits = model->forward(x);
            Tensor loss = metrics::soft_dice_loss(ops::sigmoid(logits), g);
            const double loss_value = loss.item();
            if (!std::isfinite(loss_value))
                throw NumericError("non-finite loss at case '" + id + "', step " +
                                   std::to_string(step));
            Tape::active().backward(loss);
            last_lr = sched.at(step);
            opt.step(model->parameters(), last_lr);
            Tape::active().reset();
            loss_sum += loss_value;
            ++step;
        }

        EpochLog el;
        el.epoch = epoch;
        el.mean_train_loss = loss_sum / static_cast<double>(order.size());
        el.lr = last_lr;

        const bool do_val = !val_ids.empty() && ((epoch + 1) % tcfg.val_interval == 0 ||
                                                 epoch + 1 == tcfg.epochs);
        if (do_val) {
            std::array<double, 3> dice_sum{};
            for (const auto& id : val_ids) {
                auto [vol, mask] = load_case(id);
                Tensor x = volume_to_tensor(vol, mcfg.dtype);
                Tensor probs = infer::sliding_window_infer(x, infer::model_tile_fn(model),
                                                           tcfg.crop, tcfg.val_overlap);
                data::SegmentationMask pred = infer::fuse_labels(probs);
                data::SegmentationMask pred_ch = data::labels_to_channels(pred);
                const int64_t n = mask.voxels();
                for (int c = 0; c < 3; ++c)
                    dice_sum[c] += metrics::dice_score(
                        {pred_ch.channel(c), static_cast<size_t>(n)},
                        {mask.channel(c), static_cast<size_t>(n)});
            }
            el.validated = true;
            for (int c = 0; c < 3; ++c)
                el.val_dice[c] = dice_sum[c] / static_cast<double>(val_ids.size());
            const double mean_dice = (el.val_dice[0] + el.val_dice[1] + el.val_dice[2]) / 3.0;
            if (mean_dice > res.best_val_dice) {
                res.best_val_dice = mean_dice;
                res.log.push_back(el);
                save(res.best_path, epoch);
                res.log.pop_back();
            }
        }
        res.log.push_back(el);
        save(res.last_path, epoch);
        write_log_file(res.log_path, res.log);
    }
    if (val_ids.empty() || res.best_val_dice < 0.0) {
        // no held-out cases: the last checkpoint doubles as best
        fs::copy_file(res.last_path, res.best_path, fs::copy_options::overwrite_existing);
    }
    return res;
}

json EnsembleSpec::to_json() const {
    json members_j = json::array();
    for (const auto& m : members)
        members_j.push_back({{"path", m.path},
                             {"fold", m.fold},
                             {"seed", m.seed},
                             {"best_val_dice", m.best_val_dice}});
    return json{{"members", members_j}};
}

EnsembleSpec EnsembleSpec::from_json(const json& j) {
    EnsembleSpec spec;
    for (const auto& m : j.at("members"))
        spec.members.push_back({m.at("path").get<std::string>(), m.value("fold", 0),
                                m.value("seed", uint64_t{0}), m.value("best_val_dice", -1.0)});
    return spec;
}

EnsembleSpec run_cross_validation(const data::DatasetManifest& manifest,
                                  const std::string& data_root, const nn::ModelConfig& mcfg,
                                  const TrainConfig& tcfg, int runs,
                                  const std::string& out_dir) {
    std::vector<int> folds;
    for (const auto& [id, f] : manifest.folds)
        if (std::find(folds.begin(), folds.end(), f) == folds.end()) folds.push_back(f);
    std::sort(folds.begin(), folds.end());
    if (folds.empty()) throw std::invalid_argument("manifest has no fold assignments");

    EnsembleSpec spec;
    for (int run = 0; run < runs; ++run) {
        for (int fold : folds) {
            TrainConfig cfg = tcfg;
            cfg.fold = fold;
            cfg.seed = mix_seed(tcfg.seed, {0x6376, static_cast<uint64_t>(fold),
                                            static_cast<uint64_t>(run)});
            const std::string sub =
                (fs::path(out_dir) / ("fold" + std::to_string(fold) + "_run" +
                                      std::to_string(run)))
                    .string();
            TrainResult r;
            try {
                r = train(manifest, data_root, mcfg, cfg, sub);
            } catch (const std::exception& e) {
                throw std::runtime_error("cross-validation member fold " + std::to_string(fold) +
                                         " run " + std::to_string(run) + " failed: " + e.what());
            }
            spec.members.push_back({r.best_path, fold, cfg.seed, r.best_val_dice});
        }
    }
    std::ofstream out(fs::path(out_dir) / "ensemble.json");
    out << spec.to_json().dump(2) << "\n";
    return spec;
}

std::pair<data::Volume, data::SegmentationMask> make_toy_case(int64_t size, uint64_t seed) {
    auto rng = derived_rng(seed, {0x746f79});
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const double s = static_cast<double>(size);
    std::array<double, 3> center;
    for (auto& c : center) c = s / 2.0 + (unit(rng) - 0.5) * s / 8.0;
    auto radii = [&](double base) {
        std::array<double, 3> r;
        for (auto& v : r) v = base * s * (0.9 + 0.2 * unit(rng));
        return r;
    };
    const auto brain = radii(0.42), wt = radii(0.28), tc = radii(0.18), et = radii(0.09);
    auto inside = [&](const std::array<double, 3>& r, int64_t i, int64_t j, int64_t k) {
        const double a = (static_cast<double>(i) - center[0]) / r[0];
        const double b = (static_cast<double>(j) - center[1]) / r[1];
        const double c = (static_cast<double>(k) - center[2]) / r[2];
        return a * a + b * b + c * c <= 1.0;
    };

    // channel-dependent contrasts, loosely mimicking T1/T1c/T2/FLAIR behaviour
    const double base[4] = {1.0, 0.9, 1.1, 0.8};
    const double wt_delta[4] = {0.2, -0.3, 0.9, 1.0};
    const double tc_delta[4] = {-0.4, 0.5, -0.6, 0.3};
    const double et_delta[4] = {0.3, 1.2, 0.4, -0.5};

    data::Volume v;
    v.channels = 4;
    v.shape = {size, size, size};
    v.spacing = {1.0, 1.0, 1.0};
    v.channel_names = {"T1", "T1c", "T2", "FLAIR"};
    v.values.assign(static_cast<size_t>(4 * size * size * size), 0.0f);
    data::SegmentationMask m;
    m.channel_form = false;
    m.shape = v.shape;
    m.spacing = v.spacing;
    m.values.assign(static_cast<size_t>(size * size * size), 0);

    std::normal_distribution<double> noise(0.0, 0.05);
    int64_t p = 0;
    for (int64_t i = 0; i < size; ++i)
        for (int64_t j = 0; j < size; ++j)
            for (int64_t k = 0; k < size; ++k, ++p) {
                if (!inside(brain, i, j, k)) continue;
                const bool in_wt = inside(wt, i, j, k);
                const bool in_tc = in_wt && inside(tc, i, j, k);
                const bool in_et = in_tc && inside(et, i, j, k);
                m.values[p] = in_et ? 4 : in_tc ? 1 : in_wt ? 2 : 0;
                for (int64_t c = 0; c < 4; ++c) {
                    double val = base[c] + noise(rng);
                    if (in_wt) val += wt_delta[c];
                    if (in_tc) val += tc_delta[c];
                    if (in_et) val += et_delta[c];
                    if (val == 0.0) val = 1e-3;
                    v.values[c * size * size * size + p] = static_cast<float>(val);
                }
            }
    return {std::move(v), std::move(m)};
}

data::DatasetManifest generate_toy_dataset(const ToyConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    data::DatasetManifest manifest;
    for (int64_t i = 0; i < cfg.cases; ++i) {
        auto [vol, mask] = make_toy_case(cfg.size, mix_seed(cfg.seed, {static_cast<uint64_t>(i)}));
        const std::string id = "toy" + std::to_string(i);
        const std::string img = id + "_img.svol", msk = id + "_mask.svol";
        data::save_volume(vol, (fs::path(out_dir) / img).string());
        data::save_mask(mask, (fs::path(out_dir) / msk).string());
        manifest.cases.push_back({id, img, msk});
    }
    data::split_folds(manifest, cfg.folds, cfg.seed);
    data::save_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
    return manifest;
}

nn::ModelConfig tiny_model_config(const std::array<int64_t, 3>& input_extents, DType dtype) {
    nn::ModelConfig cfg;
    cfg.embed_dim = 6;
    cfg.heads = {1, 2, 4, 8};
    cfg.window_size = 2;
    cfg.input_extents = input_extents;
    cfg.dtype = dtype;
    return cfg;
}

}  // namespace swinseg::train
