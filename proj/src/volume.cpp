#include "swinseg/volume.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

static_assert(std::endian::native == std::endian::little,
              "SVOL/SCKPT writers assume a little-endian host");

namespace swinseg::data {

using nlohmann::json;

namespace {

void write_header(std::ofstream& out, const json& header) {
    const std::string text = header.dump();
    const uint32_t len = static_cast<uint32_t>(text.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

json read_header(std::ifstream& in, const std::string& path) {
    uint32_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)))
        throw std::runtime_error(path + ": truncated header length");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len)))
        throw std::runtime_error(path + ": truncated header");
    json header = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (header.is_discarded()) throw std::runtime_error(path + ": corrupt header JSON");
    if (header.value("magic", "") != "SVOL" || header.value("version", 0) != 1)
        throw std::runtime_error(path + ": not an SVOL v1 file");
    return header;
}

template <class T>
void read_payload(std::ifstream& in, const std::string& path, std::vector<T>& out,
                  size_t expected) {
    out.resize(expected);
    in.read(reinterpret_cast<char*>(out.data()),
            static_cast<std::streamsize>(expected * sizeof(T)));
    if (static_cast<size_t>(in.gcount()) != expected * sizeof(T))
        throw std::runtime_error(path + ": corrupt payload, expected " + std::to_string(expected) +
                                 " elements");
    // trailing bytes mean the header lied about the shape
    in.peek();
    if (!in.eof()) throw std::runtime_error(path + ": corrupt payload, trailing bytes");
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    return in;
}

}  // namespace

void save_volume(const Volume& v, const std::string& path) {
    if (static_cast<int64_t>(v.values.size()) != v.channels * v.voxels())
        throw std::invalid_argument("save_volume: value count does not match shape");
    json header{{"magic", "SVOL"},
                {"version", 1},
                {"shape", {v.channels, v.shape[0], v.shape[1], v.shape[2]}},
                {"spacing", {v.spacing[0], v.spacing[1], v.spacing[2]}},
                {"dtype", "f32"},
                {"channel_names", v.channel_names}};
    auto out = open_out(path);
    write_header(out, header);
    out.write(reinterpret_cast<const char*>(v.values.data()),
              static_cast<std::streamsize>(v.values.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

Volume load_volume(const std::string& path) {
    auto in = open_in(path);
    json header = read_header(in, path);
    if (header.value("dtype", "") != "f32")
        throw std::runtime_error(path + ": expected f32 volume, got dtype '" +
                                 header.value("dtype", "") + "'");
    auto shape = header.at("shape").get<std::vector<int64_t>>();
    if (shape.size() != 4 || shape[0] < 1 || shape[1] < 1 || shape[2] < 1 || shape[3] < 1)
        throw std::runtime_error(path + ": volume shape must be [C,H,W,D]");
    Volume v;
    v.channels = shape[0];
    v.shape = {shape[1], shape[2], shape[3]};
    auto spacing = header.at("spacing").get<std::vector<double>>();
    if (spacing.size() != 3 || spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0)
        throw std::runtime_error(path + ": spacing must be 3 positive values");
    v.spacing = {spacing[0], spacing[1], spacing[2]};
    v.channel_names = header.value("channel_names", std::vector<std::string>{});
    read_payload(in, path, v.values, static_cast<size_t>(v.channels * v.voxels()));
    return v;
}

void save_mask(const SegmentationMask& m, const std::string& path) {
    json shape = m.channel_form ? json{3, m.shape[0], m.shape[1], m.shape[2]}
                                : json{m.shape[0], m.shape[1], m.shape[2]};
    json header{{"magic", "SVOL"},
                {"version", 1},
                {"shape", shape},
                {"spacing", {m.spacing[0], m.spacing[1], m.spacing[2]}},
                {"dtype", "u8"}};
    auto out = open_out(path);
    write_header(out, header);
    out.write(reinterpret_cast<const char*>(m.values.data()),
              static_cast<std::streamsize>(m.values.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

SegmentationMask load_mask(const std::string& path) {
    auto in = open_in(path);
    json header = read_header(in, path);
    if (header.value("dtype", "") != "u8")
        throw std::runtime_error(path + ": expected u8 mask, got dtype '" +
                                 header.value("dtype", "") + "'");
    auto shape = header.at("shape").get<std::vector<int64_t>>();
    SegmentationMask m;
    if (shape.size() == 4) {
        if (shape[0] != 3) throw std::runtime_error(path + ": channel masks must have 3 channels");
        m.channel_form = true;
        m.shape = {shape[1], shape[2], shape[3]};
    } else if (shape.size() == 3) {
        m.channel_form = false;
        m.shape = {shape[0], shape[1], shape[2]};
    } else {
        throw std::runtime_error(path + ": mask shape must be [H,W,D] or [3,H,W,D]");
    }
    auto spacing = header.value("spacing", std::vector<double>{1, 1, 1});
    m.spacing = {spacing[0], spacing[1], spacing[2]};
    read_payload(in, path, m.values,
                 static_cast<size_t>((m.channel_form ? 3 : 1) * m.voxels()));
    return m;
}

std::vector<std::string> DatasetManifest::train_ids(int fold) const {
    std::vector<std::string> out;
    for (const auto& c : cases)
        if (folds.at(c.id) != fold) out.push_back(c.id);
    return out;
}

std::vector<std::string> DatasetManifest::val_ids(int fold) const {
    std::vector<std::string> out;
    for (const auto& c : cases)
        if (folds.at(c.id) == fold) out.push_back(c.id);
    return out;
}

const ManifestCase& DatasetManifest::case_by_id(const std::string& id) const {
    for (const auto& c : cases)
        if (c.id == id) return c;
    throw std::runtime_error("manifest has no case '" + id + "'");
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error(path + ": corrupt manifest JSON");
    DatasetManifest m;
    for (const auto& c : j.at("cases")) {
        ManifestCase mc{c.at("id").get<std::string>(), c.at("image").get<std::string>(),
                        c.at("mask").get<std::string>()};
        for (const auto& prev : m.cases)
            if (prev.id == mc.id)
                throw std::runtime_error(path + ": duplicate case id '" + mc.id + "'");
        m.cases.push_back(std::move(mc));
    }
    if (j.contains("folds"))
        for (auto& [id, f] : j.at("folds").items()) m.folds[id] = f.get<int>();
    return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    json cases = json::array();
    for (const auto& c : m.cases)
        cases.push_back({{"id", c.id}, {"image", c.image}, {"mask", c.mask}});
    json folds = json::object();
    for (const auto& [id, f] : m.folds) folds[id] = f;
    json j{{"cases", cases}, {"folds", folds}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

void split_folds(DatasetManifest& manifest, int k, uint64_t seed) {
    const int64_t n = static_cast<int64_t>(manifest.cases.size());
    if (n < k)
        throw std::invalid_argument("split_folds: " + std::to_string(n) + " cases < " +
                                    std::to_string(k) + " folds");
    std::vector<std::string> ids;
    for (const auto& c : manifest.cases) ids.push_back(c.id);
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    const int64_t base = n / k, rem = n % k;
    int64_t pos = 0;
    manifest.folds.clear();
    for (int f = 0; f < k; ++f) {
        const int64_t size = base + (f < rem ? 1 : 0);
        for (int64_t i = 0; i < size; ++i) manifest.folds[ids[pos++]] = f;
    }
}

Volume normalize_nonzero(const Volume& v) {
    Volume out = v;
    const int64_t n = v.voxels();
    for (int64_t c = 0; c < v.channels; ++c) {
        const float* src = v.channel(c);
        float* dst = out.channel(c);
        double s = 0.0;
        int64_t count = 0;
        for (int64_t i = 0; i < n; ++i)
            if (src[i] != 0.0f) {
                s += src[i];
                ++count;
            }
        if (count == 0) continue;
        const double mean = s / static_cast<double>(count);
        double sq = 0.0;
        for (int64_t i = 0; i < n; ++i)
            if (src[i] != 0.0f) {
                const double d = src[i] - mean;
                sq += d * d;
            }
        const double stddev = std::sqrt(sq / static_cast<double>(count));
        if (stddev == 0.0)
            throw std::runtime_error("normalize_nonzero: degenerate channel " + std::to_string(c) +
                                     " (zero variance over non-zero voxels)");
        for (int64_t i = 0; i < n; ++i)
            if (src[i] != 0.0f) dst[i] = static_cast<float>((src[i] - mean) / stddev);
    }
    return out;
}

namespace {

// centered zero padding of one channel-major array up to target extents
template <class T>
std::vector<T> pad_centered(const T* src, int64_t channels, const Extents& from,
                            const Extents& to) {
    std::vector<T> out(static_cast<size_t>(channels * to[0] * to[1] * to[2]), T(0));
    const Extents lo{(to[0] - from[0]) / 2, (to[1] - from[1]) / 2, (to[2] - from[2]) / 2};
    for (int64_t c = 0; c < channels; ++c)
        for (int64_t i = 0; i < from[0]; ++i)
            for (int64_t j = 0; j < from[1]; ++j) {
                const T* s = src + ((c * from[0] + i) * from[1] + j) * from[2];
                T* d = out.data() +
                       ((c * to[0] + i + lo[0]) * to[1] + j + lo[1]) * to[2] + lo[2];
                std::copy(s, s + from[2], d);
            }
    return out;
}

template <class T>
void crop_into(const T* src, int64_t channels, const Extents& from, const Extents& off,
               const Extents& size, T* dst) {
    for (int64_t c = 0; c < channels; ++c)
        for (int64_t i = 0; i < size[0]; ++i)
            for (int64_t j = 0; j < size[1]; ++j) {
                const T* s = src +
                             ((c * from[0] + i + off[0]) * from[1] + j + off[1]) * from[2] +
                             off[2];
                T* d = dst + ((c * size[0] + i) * size[1] + j) * size[2];
                std::copy(s, s + size[2], d);
            }
}

template <class T>
void flip_axis(T* data, int64_t channels, const Extents& shape, int axis) {
    const int64_t h = shape[0], w = shape[1], d = shape[2];
    for (int64_t c = 0; c < channels; ++c) {
        T* base = data + c * h * w * d;
        if (axis == 0) {
            for (int64_t i = 0; i < h / 2; ++i)
                for (int64_t j = 0; j < w * d; ++j)
                    std::swap(base[i * w * d + j], base[(h - 1 - i) * w * d + j]);
        } else if (axis == 1) {
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w / 2; ++j)
                    for (int64_t k = 0; k < d; ++k)
                        std::swap(base[(i * w + j) * d + k], base[(i * w + (w - 1 - j)) * d + k]);
        } else {
            for (int64_t ij = 0; ij < h * w; ++ij)
                for (int64_t k = 0; k < d / 2; ++k)
                    std::swap(base[ij * d + k], base[ij * d + (d - 1 - k)]);
        }
    }
}

}  // namespace

std::pair<Volume, SegmentationMask> random_crop(const Volume& v, const SegmentationMask& m,
                                                const Extents& crop, std::mt19937_64& rng) {
    if (v.shape != m.shape) throw std::invalid_argument("random_crop: image/mask shape mismatch");
    Extents padded{std::max(v.shape[0], crop[0]), std::max(v.shape[1], crop[1]),
                   std::max(v.shape[2], crop[2])};
    const int64_t mask_ch = m.channel_form ? 3 : 1;
    std::vector<float> vol_data;
    std::vector<uint8_t> mask_data;
    const float* vp = v.values.data();
    const uint8_t* mp = m.values.data();
    if (padded != v.shape) {
        vol_data = pad_centered(v.values.data(), v.channels, v.shape, padded);
        mask_data = pad_centered(m.values.data(), mask_ch, m.shape, padded);
        vp = vol_data.data();
        mp = mask_data.data();
    }
    Extents off{};
    for (int a = 0; a < 3; ++a) {
        std::uniform_int_distribution<int64_t> dist(0, padded[a] - crop[a]);
        off[a] = dist(rng);
    }
    Volume vout;
    vout.channels = v.channels;
    vout.shape = crop;
    vout.spacing = v.spacing;
    vout.channel_names = v.channel_names;
    vout.values.resize(static_cast<size_t>(v.channels * crop[0] * crop[1] * crop[2]));
    crop_into(vp, v.channels, padded, off, crop, vout.values.data());
    SegmentationMask mout;
    mout.channel_form = m.channel_form;
    mout.shape = crop;
    mout.spacing = m.spacing;
    mout.values.resize(static_cast<size_t>(mask_ch * crop[0] * crop[1] * crop[2]));
    crop_into(mp, mask_ch, padded, off, crop, mout.values.data());
    return {std::move(vout), std::move(mout)};
}

std::pair<Volume, SegmentationMask> augment(const Volume& v, const SegmentationMask& m,
                                            const AugmentationConfig& cfg, std::mt19937_64& rng) {
    Volume vout = v;
    SegmentationMask mout = m;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int axis = 0; axis < 3; ++axis) {
        if (unit(rng) < cfg.flip_prob) {
            flip_axis(vout.values.data(), vout.channels, vout.shape, axis);
            flip_axis(mout.values.data(), mout.channel_form ? 3 : 1, mout.shape, axis);
        }
    }
    const int64_t n = vout.voxels();
    std::uniform_real_distribution<double> shift_dist(-cfg.intensity_shift, cfg.intensity_shift);
    for (int64_t c = 0; c < vout.channels; ++c) {
        const float delta = static_cast<float>(shift_dist(rng));
        float* p = vout.channel(c);
        for (int64_t i = 0; i < n; ++i) p[i] += delta;
    }
    std::uniform_real_distribution<double> scale_dist(cfg.scale_low, cfg.scale_high);
    for (int64_t c = 0; c < vout.channels; ++c) {
        const float gamma = static_cast<float>(scale_dist(rng));
        float* p = vout.channel(c);
        for (int64_t i = 0; i < n; ++i) p[i] *= gamma;
    }
    return {std::move(vout), std::move(mout)};
}

SegmentationMask labels_to_channels(const SegmentationMask& discrete) {
    if (discrete.channel_form)
        throw std::invalid_argument("labels_to_channels: input already in channel form");
    SegmentationMask out;
    out.channel_form = true;
    out.shape = discrete.shape;
    out.spacing = discrete.spacing;
    const int64_t n = discrete.voxels();
    out.values.assign(static_cast<size_t>(3 * n), 0);
    uint8_t* et = out.channel(0);
    uint8_t* wt = out.channel(1);
    uint8_t* tc = out.channel(2);
    for (int64_t i = 0; i < n; ++i) {
        const uint8_t label = discrete.values[i];
        switch (label) {
            case 0: break;
            case 1: wt[i] = 1; tc[i] = 1; break;
            case 2: wt[i] = 1; break;
            case 4: et[i] = 1; wt[i] = 1; tc[i] = 1; break;
            default:
                throw std::invalid_argument("labels_to_channels: invalid label " +
                                            std::to_string(label) + " (expected 0, 1, 2 or 4)");
        }
    }
    return out;
}

ChannelizeResult channels_to_labels(const SegmentationMask& channels) {
    if (!channels.channel_form)
        throw std::invalid_argument("channels_to_labels: input not in channel form");
    ChannelizeResult res;
    res.mask.channel_form = false;
    res.mask.shape = channels.shape;
    res.mask.spacing = channels.spacing;
    const int64_t n = channels.voxels();
    res.mask.values.resize(static_cast<size_t>(n));
    const uint8_t* et = channels.channel(0);
    const uint8_t* wt = channels.channel(1);
    const uint8_t* tc = channels.channel(2);
    for (int64_t i = 0; i < n; ++i) {
        // precedence ET > TC > WT resolves any nesting violation
        uint8_t label = 0;
        if (et[i]) label = 4;
        else if (tc[i]) label = 1;
        else if (wt[i]) label = 2;
        res.mask.values[i] = label;
        if ((et[i] && (!wt[i] || !tc[i])) || (tc[i] && !wt[i])) ++res.nesting_violations;
    }
    return res;
}

}  // namespace swinseg::data
