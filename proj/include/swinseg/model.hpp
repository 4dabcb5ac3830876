#pragma once

#include <json.hpp>

#include <array>
#include <string>
#include <vector>

#include "swinseg/tensor.hpp"
#include "swinseg/windowing.hpp"

namespace swinseg::nn {

struct ModelConfig {
    int64_t in_channels = 4;
    int64_t out_channels = 3;
    int64_t patch_size = 2;
    int64_t embed_dim = 48;  // C
    std::array<int64_t, 4> depths{2, 2, 2, 2};
    std::array<int64_t, 4> heads{3, 6, 12, 24};
    int64_t window_size = 7;  // M
    int64_t mlp_ratio = 4;
    bool rel_pos_bias = true;
    std::array<int64_t, 3> input_extents{128, 128, 128};
    DType dtype = DType::f32;

    void validate() const;
    int64_t stage_width(int stage) const { return embed_dim << stage; }
    /// Input extents are padded up to a multiple of this before the encoder.
    int64_t grid_factor() const { return patch_size * 16; }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

struct Parameter {
    std::string name;
    Tensor tensor;
};

/// The six per-resolution feature maps the decoder consumes, channel-first
/// (1, C_i, h, w, d): raw input, embed level, three stage outputs, bottleneck.
struct StageOutputs {
    std::vector<Tensor> levels;
    std::array<int64_t, 3> original{};  // pre-padding input extents
};

struct LinearP {
    Tensor w, b;
};
struct NormP {
    Tensor gamma, beta;
};

struct SwinBlockP {
    NormP ln1, ln2;
    LinearP qkv, proj, fc1, fc2;
    Tensor bias_table;  // ((2m-1)^3, heads), undefined when bias disabled
    std::vector<int64_t> rel_index;
    Tensor mask;  // (nW, 1, T, T), defined only for shifted blocks
    int64_t heads = 0;
    int64_t m = 0;      // effective (possibly clamped) window size
    int64_t shift = 0;  // 0 for W-MSA and for clamped stages
    win::Extents grid{};
};

struct ResBlockP {
    Tensor conv1, conv2;
    NormP in1, in2;
    Tensor skip;  // 1x1x1 projection, defined iff in/out widths differ
    NormP in3;
};

struct UpBlockP {
    Tensor deconv;
    ResBlockP res;
};

// Block-level forwards; usable on a standalone SwinBlockP.
Tensor window_attention(const win::WindowSet& ws, const SwinBlockP& blk);
/// LN1 + pad/shift/partition/attention/reverse/unshift/crop (no residual,
/// no MLP).
Tensor attention_pipeline(const Tensor& tokens, const SwinBlockP& blk);
/// Full pre-norm block: z = x + attn(LN(x)); z + MLP(LN(z)).
Tensor swin_block_forward(const Tensor& tokens, const SwinBlockP& blk);

class SwinUnetr {
public:
    explicit SwinUnetr(const ModelConfig& cfg, uint64_t seed = 0);

    /// volume (S, H, W, D) -> logits (out_channels, H, W, D). Sigmoid is the
    /// caller's job (loss / inference).
    Tensor forward(const Tensor& volume) const;
    StageOutputs encoder_forward(const Tensor& volume) const;
    Tensor decoder_forward(const StageOutputs& stages) const;

    const ModelConfig& config() const { return cfg_; }
    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    const Tensor& param(const std::string& name) const;
    int64_t parameter_count() const;
    void load_parameter_values(const std::vector<std::pair<std::string, Tensor>>& blobs);

    // building blocks, exposed for targeted tests
    Tensor patch_embed(const Tensor& volume) const;
    Tensor patch_merge(const Tensor& tokens, int stage) const;
    Tensor residual_block(const ResBlockP& p, const Tensor& x) const;

    const SwinBlockP& block(int stage, int index) const { return stages_[stage].blocks[index]; }

private:
    struct StageP {
        std::vector<SwinBlockP> blocks;
        NormP merge_norm;
        Tensor merge_w;
        win::Extents grid{};  // token grid the blocks run on
    };

    Tensor add_param(const std::string& name, Tensor t);
    ResBlockP make_res_block(const std::string& name, int64_t in_ch, int64_t out_ch,
                             std::mt19937_64& rng);
    Tensor up_block(const UpBlockP& p, const Tensor& x, const Tensor& skip) const;

    ModelConfig cfg_;
    LinearP embed_;
    std::array<StageP, 4> stages_;
    ResBlockP enc0_, enc1_, enc2_, enc3_, bottleneck_;
    UpBlockP up4_, up3_, up2_, up1_, up0_;
    Tensor head_w_, head_b_;
    std::vector<Parameter> params_;
};

/// Exact parameter count for a config (sum over parameter extents).
int64_t count_parameters(const ModelConfig& cfg);
/// Analytic FLOP count for one forward pass at the given input extents.
/// Convention: one multiply-add = 2 FLOPs; counts convolutions, linear
/// layers and the attention matrix products; norms and elementwise ops are
/// not counted.
int64_t count_flops(const ModelConfig& cfg, const std::array<int64_t, 3>& input_extents);
/// Config echo, per-level shapes, parameter and FLOP counts as JSON.
nlohmann::json model_summary(const ModelConfig& cfg);

}  // namespace swinseg::nn
