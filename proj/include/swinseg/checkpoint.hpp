#pragma once

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

#include "swinseg/model.hpp"
#include "swinseg/tensor.hpp"

namespace swinseg::train {

/// SCKPT v1: u32-LE length prefix, JSON header (version, configs, step, rng,
/// blob directory with name/shape/dtype/offset), then concatenated
/// little-endian blobs. Bit-exact save/load roundtrip.
struct Checkpoint {
    nn::ModelConfig model_config;
    nlohmann::json train_config;
    int64_t step = 0;
    std::string rng_state;
    nlohmann::json extra;  // fold, seed, best_val_dice, ...
    std::vector<std::pair<std::string, Tensor>> blobs;  // "param/..", "opt_m/..", "opt_v/.."

    std::vector<std::pair<std::string, Tensor>> blobs_with_prefix(const std::string& prefix) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace swinseg::train
