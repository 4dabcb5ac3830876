#pragma once

#include <json.hpp>

#include <optional>
#include <string>

#include "swinseg/checkpoint.hpp"
#include "swinseg/model.hpp"
#include "swinseg/volume.hpp"

namespace swinseg::train {

struct TrainConfig {
    double lr_max = 8e-4;
    int64_t epochs = 20;  // paper recipe: 800
    double warmup_fraction = 0.05;
    int64_t batch_size = 1;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 1e-5;
    uint64_t seed = 0;
    int fold = 0;
    std::array<int64_t, 3> crop{128, 128, 128};
    bool augment = true;
    data::AugmentationConfig aug;
    int64_t val_interval = 1;  // epochs between validation passes
    double val_overlap = 0.7;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Linear warmup to lr_max over warmup_steps, then cosine annealing to 0 at
/// total_steps.
struct LrSchedule {
    double lr_max = 0.0;
    int64_t total_steps = 0;
    int64_t warmup_steps = 0;

    static LrSchedule make(const TrainConfig& cfg, int64_t total_steps);
    double at(int64_t step) const;
};

/// Adaptive-moment optimizer with decoupled multiplicative weight decay.
class AdamW {
public:
    AdamW(const TrainConfig& cfg, const std::vector<nn::Parameter>& params);

    /// One update from the accumulated gradients; throws NumericError naming
    /// the parameter on a non-finite gradient.
    void step(std::vector<nn::Parameter>& params, double lr);
    int64_t step_count() const { return t_; }

    std::vector<std::pair<std::string, Tensor>> state_blobs() const;
    void load_state(const std::vector<std::pair<std::string, Tensor>>& m_blobs,
                    const std::vector<std::pair<std::string, Tensor>>& v_blobs, int64_t t);

private:
    double beta1_, beta2_, eps_, weight_decay_;
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
    std::vector<std::string> names_;
};

struct EpochLog {
    int64_t epoch = 0;
    double mean_train_loss = 0.0;
    std::array<double, 3> val_dice{};  // ET, WT, TC
    bool validated = false;
    double lr = 0.0;

    nlohmann::json to_json() const;
};

struct TrainResult {
    std::string best_path, last_path, log_path;
    double best_val_dice = -1.0;
    std::vector<EpochLog> log;
};

/// Full training run for one fold. Case paths in the manifest resolve
/// relative to data_root. Writes best.ckpt, last.ckpt and metrics.jsonl under
/// out_dir; resume_from restarts bit-exactly from a saved epoch boundary.
TrainResult train(const data::DatasetManifest& manifest, const std::string& data_root,
                  const nn::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::string& out_dir, const std::optional<std::string>& resume_from = {});

struct EnsembleSpec {
    struct Member {
        std::string path;
        int fold = 0;
        uint64_t seed = 0;
        double best_val_dice = -1.0;
    };
    std::vector<Member> members;

    nlohmann::json to_json() const;
    static EnsembleSpec from_json(const nlohmann::json& j);
};

/// Trains every fold present in the manifest for `runs` seeds and collects
/// the best checkpoints (5 folds x 2 runs = the paper's 10-member ensemble).
EnsembleSpec run_cross_validation(const data::DatasetManifest& manifest,
                                  const std::string& data_root, const nn::ModelConfig& mcfg,
                                  const TrainConfig& tcfg, int runs,
                                  const std::string& out_dir);

// Synthetic nested-ellipsoid dataset: three nested tumour regions with
// channel-dependent contrast inside a larger nonzero "brain" ellipsoid.
struct ToyConfig {
    int64_t cases = 2;
    int64_t size = 32;
    uint64_t seed = 7;
    int folds = 2;
};

std::pair<data::Volume, data::SegmentationMask> make_toy_case(int64_t size, uint64_t seed);
/// Writes SVOL volumes/masks plus manifest.json (with folds) under out_dir.
data::DatasetManifest generate_toy_dataset(const ToyConfig& cfg, const std::string& out_dir);

/// Desk-scale model: C=6, M=2, heads (1,2,4,8).
nn::ModelConfig tiny_model_config(const std::array<int64_t, 3>& input_extents,
                                  DType dtype = DType::f32);

}  // namespace swinseg::train
