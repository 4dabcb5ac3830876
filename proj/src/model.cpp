#include "swinseg/model.hpp"

#include <cmath>

#include "swinseg/ops.hpp"

namespace swinseg::nn {

using nlohmann::json;

void ModelConfig::validate() const {
    if (in_channels < 1 || out_channels < 1 || embed_dim < 1 || patch_size < 1 ||
        window_size < 1 || mlp_ratio < 1)
        throw std::invalid_argument("model config: extents must be positive");
    for (int s = 0; s < 4; ++s) {
        if (depths[s] < 0 || depths[s] % 2 != 0)
            throw std::invalid_argument("model config: stage depths must be even (W-MSA/SW-MSA "
                                        "pairs), got " + std::to_string(depths[s]));
        if (depths[s] > 0 && stage_width(s) % heads[s] != 0)
            throw std::invalid_argument("model config: heads must divide the stage width " +
                                        std::to_string(stage_width(s)));
    }
    for (int64_t e : input_extents)
        if (e < 1) throw std::invalid_argument("model config: input extents must be positive");
}

json ModelConfig::to_json() const {
    return json{{"in_channels", in_channels},
                {"out_channels", out_channels},
                {"patch_size", patch_size},
                {"embed_dim", embed_dim},
                {"depths", depths},
                {"heads", heads},
                {"window_size", window_size},
                {"mlp_ratio", mlp_ratio},
                {"rel_pos_bias", rel_pos_bias},
                {"input_extents", input_extents},
                {"dtype", dtype_name(dtype)}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    c.out_channels = j.value("out_channels", c.out_channels);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    if (j.contains("depths")) c.depths = j.at("depths").get<std::array<int64_t, 4>>();
    if (j.contains("heads")) c.heads = j.at("heads").get<std::array<int64_t, 4>>();
    c.window_size = j.value("window_size", c.window_size);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.rel_pos_bias = j.value("rel_pos_bias", c.rel_pos_bias);
    if (j.contains("input_extents"))
        c.input_extents = j.at("input_extents").get<std::array<int64_t, 3>>();
    if (j.contains("dtype")) c.dtype = dtype_from_name(j.at("dtype").get<std::string>());
    c.validate();
    return c;
}

namespace {

int64_t round_up(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

win::Extents padded_input(const ModelConfig& cfg) {
    const int64_t f = cfg.grid_factor();
    return {round_up(cfg.input_extents[0], f), round_up(cfg.input_extents[1], f),
            round_up(cfg.input_extents[2], f)};
}

// Token grid the blocks of a stage run on (stage 0 runs at the embed level).
win::Extents stage_grid(const ModelConfig& cfg, int stage) {
    const win::Extents p = padded_input(cfg);
    const int64_t div = cfg.patch_size << stage;
    return {p[0] / div, p[1] / div, p[2] / div};
}

// Window clamped to the grid; shifting is disabled when clamping kicks in.
int64_t effective_window(const ModelConfig& cfg, const win::Extents& grid) {
    return std::min(cfg.window_size, std::min({grid[0], grid[1], grid[2]}));
}

std::vector<int64_t> relative_index_map(int64_t m) {
    const int64_t t = m * m * m, span = 2 * m - 1;
    std::vector<int64_t> coords(static_cast<size_t>(3 * t));
    int64_t p = 0;
    for (int64_t a = 0; a < m; ++a)
        for (int64_t b = 0; b < m; ++b)
            for (int64_t c = 0; c < m; ++c, ++p) {
                coords[3 * p] = a;
                coords[3 * p + 1] = b;
                coords[3 * p + 2] = c;
            }
    std::vector<int64_t> idx(static_cast<size_t>(t * t));
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < t; ++j) {
            const int64_t dh = coords[3 * i] - coords[3 * j] + m - 1;
            const int64_t dw = coords[3 * i + 1] - coords[3 * j + 1] + m - 1;
            const int64_t dd = coords[3 * i + 2] - coords[3 * j + 2] + m - 1;
            idx[i * t + j] = (dh * span + dw) * span + dd;
        }
    return idx;
}

Tensor trunc_normal(std::vector<int64_t> shape, double stddev, std::mt19937_64& rng, DType dt) {
    Tensor t(std::move(shape), dt);
    std::normal_distribution<double> dist(0.0, stddev);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* p = t.data<T>();
        for (int64_t i = 0; i < t.numel(); ++i) {
            double v = dist(rng);
            while (std::abs(v) > 2.0 * stddev) v = dist(rng);
            p[i] = static_cast<T>(v);
        }
    });
    return t;
}

Tensor kaiming_conv(std::vector<int64_t> shape, int64_t fan_in, std::mt19937_64& rng, DType dt) {
    Tensor t(std::move(shape), dt);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* p = t.data<T>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(dist(rng));
    });
    return t;
}

Tensor to_channel_first(const Tensor& tokens) {
    Tensor t = ops::permute(tokens, {3, 0, 1, 2});
    auto s = t.shape();
    return ops::reshape(t, {1, s[0], s[1], s[2], s[3]});
}

}  // namespace

Tensor SwinUnetr::add_param(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    params_.push_back({name, t});
    return t;
}

ResBlockP SwinUnetr::make_res_block(const std::string& name, int64_t in_ch, int64_t out_ch,
                                    std::mt19937_64& rng) {
    const DType dt = cfg_.dtype;
    ResBlockP p;
    p.conv1 = add_param(name + ".conv1.weight",
                        kaiming_conv({out_ch, in_ch, 3, 3, 3}, in_ch * 27, rng, dt));
    p.in1.gamma = add_param(name + ".norm1.gamma", Tensor::ones({out_ch}, dt));
    p.in1.beta = add_param(name + ".norm1.beta", Tensor::zeros({out_ch}, dt));
    p.conv2 = add_param(name + ".conv2.weight",
                        kaiming_conv({out_ch, out_ch, 3, 3, 3}, out_ch * 27, rng, dt));
    p.in2.gamma = add_param(name + ".norm2.gamma", Tensor::ones({out_ch}, dt));
    p.in2.beta = add_param(name + ".norm2.beta", Tensor::zeros({out_ch}, dt));
    if (in_ch != out_ch) {
        p.skip = add_param(name + ".skip.weight",
                           kaiming_conv({out_ch, in_ch, 1, 1, 1}, in_ch, rng, dt));
        p.in3.gamma = add_param(name + ".norm3.gamma", Tensor::ones({out_ch}, dt));
        p.in3.beta = add_param(name + ".norm3.beta", Tensor::zeros({out_ch}, dt));
    }
    return p;
}

SwinUnetr::SwinUnetr(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const DType dt = cfg_.dtype;
    std::mt19937_64 rng(mix_seed(seed, {0x6d6f64656c}));

    const int64_t patch_in = cfg_.in_channels * cfg_.patch_size * cfg_.patch_size * cfg_.patch_size;
    embed_.w = add_param("encoder.patch_embed.weight",
                         trunc_normal({cfg_.embed_dim, patch_in}, 0.02, rng, dt));
    embed_.b = add_param("encoder.patch_embed.bias", Tensor::zeros({cfg_.embed_dim}, dt));

    for (int s = 0; s < 4; ++s) {
        StageP& stage = stages_[s];
        stage.grid = stage_grid(cfg_, s);
        const int64_t width = cfg_.stage_width(s);
        const int64_t m = effective_window(cfg_, stage.grid);
        const int64_t base_shift = m < cfg_.window_size ? 0 : cfg_.window_size / 2;
        const win::Extents padded{round_up(stage.grid[0], m), round_up(stage.grid[1], m),
                                  round_up(stage.grid[2], m)};
        const auto rel_index = relative_index_map(m);
        const std::string sname = "encoder.stage" + std::to_string(s);
        for (int64_t b = 0; b < cfg_.depths[s]; ++b) {
            SwinBlockP blk;
            blk.heads = cfg_.heads[s];
            blk.m = m;
            blk.shift = (b % 2 == 1) ? base_shift : 0;
            blk.grid = stage.grid;
            blk.rel_index = rel_index;
            const std::string bname = sname + ".block" + std::to_string(b);
            blk.ln1.gamma = add_param(bname + ".ln1.gamma", Tensor::ones({width}, dt));
            blk.ln1.beta = add_param(bname + ".ln1.beta", Tensor::zeros({width}, dt));
            blk.qkv.w = add_param(bname + ".attn.qkv.weight",
                                  trunc_normal({3 * width, width}, 0.02, rng, dt));
            blk.qkv.b = add_param(bname + ".attn.qkv.bias", Tensor::zeros({3 * width}, dt));
            if (cfg_.rel_pos_bias) {
                const int64_t span = 2 * m - 1;
                blk.bias_table =
                    add_param(bname + ".attn.rel_bias_table",
                              trunc_normal({span * span * span, blk.heads}, 0.02, rng, dt));
            }
            blk.proj.w = add_param(bname + ".attn.proj.weight",
                                   trunc_normal({width, width}, 0.02, rng, dt));
            blk.proj.b = add_param(bname + ".attn.proj.bias", Tensor::zeros({width}, dt));
            blk.ln2.gamma = add_param(bname + ".ln2.gamma", Tensor::ones({width}, dt));
            blk.ln2.beta = add_param(bname + ".ln2.beta", Tensor::zeros({width}, dt));
            const int64_t hidden = cfg_.mlp_ratio * width;
            blk.fc1.w = add_param(bname + ".mlp.fc1.weight",
                                  trunc_normal({hidden, width}, 0.02, rng, dt));
            blk.fc1.b = add_param(bname + ".mlp.fc1.bias", Tensor::zeros({hidden}, dt));
            blk.fc2.w = add_param(bname + ".mlp.fc2.weight",
                                  trunc_normal({width, hidden}, 0.02, rng, dt));
            blk.fc2.b = add_param(bname + ".mlp.fc2.bias", Tensor::zeros({width}, dt));
            if (blk.shift > 0)
                blk.mask = win::compute_shift_mask(padded, m, blk.shift, stage.grid, dt);
            stage.blocks.push_back(std::move(blk));
        }
        stage.merge_norm.gamma = add_param(sname + ".merge.norm.gamma",
                                           Tensor::ones({8 * width}, dt));
        stage.merge_norm.beta = add_param(sname + ".merge.norm.beta",
                                          Tensor::zeros({8 * width}, dt));
        stage.merge_w = add_param(sname + ".merge.reduction.weight",
                                  trunc_normal({2 * width, 8 * width}, 0.02, rng, dt));
    }

    const int64_t c = cfg_.embed_dim;
    enc0_ = make_res_block("decoder.enc0", cfg_.in_channels, c, rng);
    enc1_ = make_res_block("decoder.enc1", c, c, rng);
    enc2_ = make_res_block("decoder.enc2", 2 * c, 2 * c, rng);
    enc3_ = make_res_block("decoder.enc3", 4 * c, 4 * c, rng);
    bottleneck_ = make_res_block("decoder.bottleneck", 16 * c, 16 * c, rng);

    auto make_up = [&](const std::string& name, int64_t in_ch, int64_t out_ch) {
        UpBlockP up;
        up.deconv = add_param(name + ".deconv.weight",
                              kaiming_conv({in_ch, out_ch, 2, 2, 2}, in_ch * 8, rng, cfg_.dtype));
        up.res = make_res_block(name + ".res", 2 * out_ch, out_ch, rng);
        return up;
    };
    up4_ = make_up("decoder.up4", 16 * c, 8 * c);
    up3_ = make_up("decoder.up3", 8 * c, 4 * c);
    up2_ = make_up("decoder.up2", 4 * c, 2 * c);
    up1_ = make_up("decoder.up1", 2 * c, c);
    up0_ = make_up("decoder.up0", c, c);

    head_w_ = add_param("decoder.head.weight",
                        kaiming_conv({cfg_.out_channels, c, 1, 1, 1}, c, rng, dt));
    head_b_ = add_param("decoder.head.bias", Tensor::zeros({cfg_.out_channels}, dt));
}

const Tensor& SwinUnetr::param(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p.tensor;
    throw std::invalid_argument("no parameter named '" + name + "'");
}

int64_t SwinUnetr::parameter_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

void SwinUnetr::load_parameter_values(
    const std::vector<std::pair<std::string, Tensor>>& blobs) {
    for (const auto& [name, value] : blobs) {
        bool found = false;
        for (auto& p : params_) {
            if (p.name != name) continue;
            if (p.tensor.shape() != value.shape())
                throw std::runtime_error("parameter '" + name + "' shape mismatch: model " +
                                         shape_str(p.tensor.shape()) + " vs checkpoint " +
                                         shape_str(value.shape()));
            Tensor v = value.dtype() == p.tensor.dtype() ? value : value.astype(p.tensor.dtype());
            p.tensor.impl()->data = v.impl()->data;
            found = true;
            break;
        }
        if (!found) throw std::runtime_error("checkpoint has unknown parameter '" + name + "'");
    }
}

Tensor SwinUnetr::patch_embed(const Tensor& volume) const {
    const int64_t p = cfg_.patch_size;
    const auto& s = volume.shape();
    Tensor t = ops::reshape(volume, {s[0], s[1] / p, p, s[2] / p, p, s[3] / p, p});
    t = ops::permute(t, {1, 3, 5, 0, 2, 4, 6});
    t = ops::reshape(t, {s[1] / p, s[2] / p, s[3] / p, s[0] * p * p * p});
    return ops::linear(t, embed_.w, embed_.b);
}

Tensor window_attention(const win::WindowSet& ws, const SwinBlockP& blk) {
    const int64_t nw = ws.windows.shape()[0];
    const int64_t t = ws.windows.shape()[1];
    const int64_t c = ws.windows.shape()[2];
    const int64_t h = blk.heads;
    const int64_t dh = c / h;

    Tensor qkv = ops::linear(ws.windows, blk.qkv.w, blk.qkv.b);
    qkv = ops::reshape(qkv, {nw, t, 3, h, dh});
    qkv = ops::permute(qkv, {2, 0, 3, 1, 4});  // (3, nW, h, T, dh)
    auto take = [&](int64_t i) {
        Tensor part = ops::slice(qkv, {i, 0, 0, 0, 0}, {i + 1, nw, h, t, dh});
        return ops::reshape(part, {nw, h, t, dh});
    };
    Tensor q = ops::scale(take(0), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor k = take(1);
    Tensor v = take(2);

    Tensor scores = ops::matmul(q, ops::permute(k, {0, 1, 3, 2}));  // (nW, h, T, T)
    if (blk.bias_table.defined()) {
        Tensor bias = ops::embedding_rows(blk.bias_table, blk.rel_index);  // (T*T, h)
        bias = ops::permute(bias, {1, 0});
        bias = ops::reshape(bias, {1, h, t, t});
        scores = ops::add(scores, bias);
    }
    if (blk.mask.defined()) scores = ops::add(scores, blk.mask);
    Tensor probs = ops::softmax(scores, -1);
    Tensor ctx = ops::matmul(probs, v);            // (nW, h, T, dh)
    ctx = ops::permute(ctx, {0, 2, 1, 3});
    ctx = ops::reshape(ctx, {nw, t, c});
    return ops::linear(ctx, blk.proj.w, blk.proj.b);
}

Tensor attention_pipeline(const Tensor& tokens, const SwinBlockP& blk) {
    Tensor t = ops::layer_norm(tokens, blk.ln1.gamma, blk.ln1.beta);
    win::PadRecord pr;
    t = win::pad_to_window_multiple(t, blk.m, pr);
    if (blk.shift > 0) t = win::cyclic_shift(t, blk.shift);
    win::WindowSet ws = win::window_partition(t, blk.m);
    ws.windows = window_attention(ws, blk);
    t = win::window_reverse(ws);
    if (blk.shift > 0) t = win::cyclic_shift(t, blk.shift, /*inverse=*/true);
    return win::crop_from_pad(t, pr);
}

Tensor swin_block_forward(const Tensor& tokens, const SwinBlockP& blk) {
    Tensor z = ops::add(tokens, attention_pipeline(tokens, blk));
    Tensor u = ops::layer_norm(z, blk.ln2.gamma, blk.ln2.beta);
    u = ops::linear(u, blk.fc1.w, blk.fc1.b);
    u = ops::gelu(u);
    u = ops::linear(u, blk.fc2.w, blk.fc2.b);
    return ops::add(z, u);
}

Tensor SwinUnetr::patch_merge(const Tensor& tokens, int stage) const {
    const StageP& st = stages_[stage];
    win::PadRecord pr;
    Tensor t = win::pad_to_window_multiple(tokens, 2, pr);
    const auto& s = t.shape();
    t = ops::reshape(t, {s[0] / 2, 2, s[1] / 2, 2, s[2] / 2, 2, s[3]});
    t = ops::permute(t, {0, 2, 4, 1, 3, 5, 6});
    t = ops::reshape(t, {s[0] / 2, s[1] / 2, s[2] / 2, 8 * s[3]});
    t = ops::layer_norm(t, st.merge_norm.gamma, st.merge_norm.beta);
    return ops::linear(t, st.merge_w);
}

StageOutputs SwinUnetr::encoder_forward(const Tensor& volume) const {
    if (volume.rank() != 4 || volume.shape()[0] != cfg_.in_channels)
        throw std::invalid_argument("encoder input must be (" + std::to_string(cfg_.in_channels) +
                                    ", H, W, D), got " + shape_str(volume.shape()));
    for (int a = 0; a < 3; ++a)
        if (volume.shape()[a + 1] != cfg_.input_extents[a])
            throw std::invalid_argument("encoder input extents " + shape_str(volume.shape()) +
                                        " do not match configured input " +
                                        shape_str({cfg_.input_extents[0], cfg_.input_extents[1],
                                                   cfg_.input_extents[2]}));
    if (volume.dtype() != cfg_.dtype)
        throw std::invalid_argument("encoder input dtype does not match model dtype");

    const win::Extents padded = padded_input(cfg_);
    Tensor x = volume;
    if (padded != win::Extents{cfg_.input_extents[0], cfg_.input_extents[1],
                               cfg_.input_extents[2]}) {
        x = ops::pad(x, {0, 0, 0, 0},
                     {0, padded[0] - cfg_.input_extents[0], padded[1] - cfg_.input_extents[1],
                      padded[2] - cfg_.input_extents[2]});
    }

    StageOutputs out;
    out.original = cfg_.input_extents;
    out.levels.push_back(ops::reshape(x, {1, cfg_.in_channels, padded[0], padded[1], padded[2]}));
    Tensor tokens = patch_embed(x);
    out.levels.push_back(to_channel_first(tokens));
    for (int s = 0; s < 4; ++s) {
        for (const SwinBlockP& blk : stages_[s].blocks) tokens = swin_block_forward(tokens, blk);
        tokens = patch_merge(tokens, s);
        out.levels.push_back(to_channel_first(tokens));
    }
    return out;
}

Tensor SwinUnetr::residual_block(const ResBlockP& p, const Tensor& x) const {
    Tensor t = ops::conv3d(x, p.conv1, Tensor(), 1, 1);
    t = ops::instance_norm(t, p.in1.gamma, p.in1.beta);
    t = ops::leaky_relu(t);
    t = ops::conv3d(t, p.conv2, Tensor(), 1, 1);
    t = ops::instance_norm(t, p.in2.gamma, p.in2.beta);
    t = ops::leaky_relu(t);
    Tensor skip = x;
    if (p.skip.defined()) {
        skip = ops::conv3d(x, p.skip, Tensor(), 1, 0);
        skip = ops::instance_norm(skip, p.in3.gamma, p.in3.beta);
    }
    return ops::add(t, skip);
}

Tensor SwinUnetr::up_block(const UpBlockP& p, const Tensor& x, const Tensor& skip) const {
    Tensor u = ops::conv_transpose3d(x, p.deconv, Tensor(), 2, 0);
    for (int a = 2; a < 5; ++a)
        if (u.shape()[a] != skip.shape()[a])
            throw std::invalid_argument("decoder resolution mismatch: upsampled " +
                                        shape_str(u.shape()) + " vs skip " +
                                        shape_str(skip.shape()));
    Tensor cat = ops::concat({u, skip}, 1);
    return residual_block(p.res, cat);
}

Tensor SwinUnetr::decoder_forward(const StageOutputs& stages) const {
    if (stages.levels.size() != 6)
        throw std::invalid_argument("decoder expects 6 encoder levels, got " +
                                    std::to_string(stages.levels.size()));
    Tensor e0 = residual_block(enc0_, stages.levels[0]);
    Tensor e1 = residual_block(enc1_, stages.levels[1]);
    Tensor e2 = residual_block(enc2_, stages.levels[2]);
    Tensor e3 = residual_block(enc3_, stages.levels[3]);
    Tensor d = residual_block(bottleneck_, stages.levels[5]);
    d = up_block(up4_, d, stages.levels[4]);
    d = up_block(up3_, d, e3);
    d = up_block(up2_, d, e2);
    d = up_block(up1_, d, e1);
    d = up_block(up0_, d, e0);
    return ops::conv3d(d, head_w_, head_b_, 1, 0);
}

Tensor SwinUnetr::forward(const Tensor& volume) const {
    StageOutputs so = encoder_forward(volume);
    Tensor logits = decoder_forward(so);  // (1, out, Hp, Wp, Dp)
    const auto& s = logits.shape();
    logits = ops::reshape(logits, {s[1], s[2], s[3], s[4]});
    if (s[2] != so.original[0] || s[3] != so.original[1] || s[4] != so.original[2])
        logits = ops::slice(logits, {0, 0, 0, 0},
                            {cfg_.out_channels, so.original[0], so.original[1], so.original[2]});
    return logits;
}

int64_t count_parameters(const ModelConfig& cfg) {
    // analytic sum, mirroring the constructor's registrations
    cfg.validate();
    const int64_t c = cfg.embed_dim;
    const int64_t patch_in = cfg.in_channels * cfg.patch_size * cfg.patch_size * cfg.patch_size;
    int64_t n = cfg.embed_dim * patch_in + cfg.embed_dim;
    for (int s = 0; s < 4; ++s) {
        const int64_t w = cfg.stage_width(s);
        const win::Extents grid = stage_grid(cfg, s);
        const int64_t m = effective_window(cfg, grid);
        const int64_t span = 2 * m - 1;
        int64_t per_block = 2 * w                     // ln1
                            + 3 * w * w + 3 * w       // qkv
                            + w * w + w               // proj
                            + 2 * w                   // ln2
                            + cfg.mlp_ratio * w * w + cfg.mlp_ratio * w  // fc1
                            + cfg.mlp_ratio * w * w + w;                 // fc2
        if (cfg.rel_pos_bias) per_block += span * span * span * cfg.heads[s];
        n += cfg.depths[s] * per_block;
        n += 16 * w            // merge norm
             + 16 * w * w;     // merge reduction
    }
    auto res_block = [](int64_t in, int64_t out) {
        int64_t r = out * in * 27 + 2 * out + out * out * 27 + 2 * out;
        if (in != out) r += out * in + 2 * out;
        return r;
    };
    n += res_block(cfg.in_channels, c) + res_block(c, c) + res_block(2 * c, 2 * c) +
         res_block(4 * c, 4 * c) + res_block(16 * c, 16 * c);
    auto up_block = [&](int64_t in, int64_t out) {
        return in * out * 8 + res_block(2 * out, out);
    };
    n += up_block(16 * c, 8 * c) + up_block(8 * c, 4 * c) + up_block(4 * c, 2 * c) +
         up_block(2 * c, c) + up_block(c, c);
    n += cfg.out_channels * c + cfg.out_channels;  // head
    return n;
}

int64_t count_flops(const ModelConfig& cfg, const std::array<int64_t, 3>& input_extents) {
    ModelConfig c = cfg;
    c.input_extents = input_extents;
    c.validate();
    const win::Extents p = padded_input(c);
    auto vol = [](const win::Extents& e) { return e[0] * e[1] * e[2]; };

    int64_t macs = 0;
    const win::Extents embed_grid{p[0] / c.patch_size, p[1] / c.patch_size, p[2] / c.patch_size};
    const int64_t patch_in = c.in_channels * c.patch_size * c.patch_size * c.patch_size;
    macs += vol(embed_grid) * patch_in * c.embed_dim;

    for (int s = 0; s < 4; ++s) {
        const win::Extents grid = stage_grid(c, s);
        const int64_t w = c.stage_width(s);
        const int64_t m = effective_window(c, grid);
        const win::Extents padded{round_up(grid[0], m), round_up(grid[1], m),
                                  round_up(grid[2], m)};
        const int64_t tokens = vol(padded);
        const int64_t t = m * m * m;
        const int64_t nw = tokens / t;
        const int64_t per_block = tokens * w * 3 * w          // qkv
                                  + 2 * nw * c.heads[s] * t * t * (w / c.heads[s])  // qk^T, pv
                                  + tokens * w * w            // proj
                                  + 2 * tokens * w * c.mlp_ratio * w;  // mlp
        macs += c.depths[s] * per_block;
        const win::Extents even{round_up(grid[0], 2), round_up(grid[1], 2), round_up(grid[2], 2)};
        macs += vol(even) / 8 * (8 * w) * (2 * w);  // merge reduction
    }

    auto res_macs = [](int64_t in, int64_t out, int64_t spatial) {
        int64_t r = spatial * out * in * 27 + spatial * out * out * 27;
        if (in != out) r += spatial * out * in;
        return r;
    };
    const win::Extents l0 = p;
    auto level = [&](int i) {
        return win::Extents{p[0] >> i, p[1] >> i, p[2] >> i};
    };
    const int64_t cc = c.embed_dim;
    macs += res_macs(c.in_channels, cc, vol(l0));
    macs += res_macs(cc, cc, vol(level(1)));
    macs += res_macs(2 * cc, 2 * cc, vol(level(2)));
    macs += res_macs(4 * cc, 4 * cc, vol(level(3)));
    macs += res_macs(16 * cc, 16 * cc, vol(level(5)));
    auto up_macs = [&](int64_t in, int64_t out, int lvl_in) {
        // deconv from level lvl_in, then residual block at level lvl_in - 1
        return vol(level(lvl_in)) * in * out * 8 + res_macs(2 * out, out, vol(level(lvl_in - 1)));
    };
    macs += up_macs(16 * cc, 8 * cc, 5) + up_macs(8 * cc, 4 * cc, 4) + up_macs(4 * cc, 2 * cc, 3) +
            up_macs(2 * cc, cc, 2) + up_macs(cc, cc, 1);
    macs += vol(l0) * cc * c.out_channels;  // head
    return 2 * macs;
}

nlohmann::json model_summary(const ModelConfig& cfg) {
    cfg.validate();
    const win::Extents p = padded_input(cfg);
    json levels = json::array();
    levels.push_back({{"level", 0},
                      {"channels", cfg.in_channels},
                      {"extents", {p[0], p[1], p[2]}}});
    for (int i = 1; i <= 5; ++i) {
        const int64_t ch = i == 1 ? cfg.embed_dim : cfg.stage_width(i - 1) * 2;
        levels.push_back({{"level", i},
                          {"channels", ch},
                          {"extents", {p[0] >> i, p[1] >> i, p[2] >> i}}});
    }
    return json{{"config", cfg.to_json()},
                {"levels", levels},
                {"parameters", count_parameters(cfg)},
                {"flops", count_flops(cfg, cfg.input_extents)},
                {"flop_convention", "multiply-add = 2 FLOPs; convolutions, linear layers and "
                                    "attention matrix products only"}};
}

}  // namespace swinseg::nn
