#include "swinseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace swinseg::train {

using nlohmann::json;

std::vector<std::pair<std::string, Tensor>> Checkpoint::blobs_with_prefix(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : blobs)
        if (name.rfind(prefix, 0) == 0) out.emplace_back(name.substr(prefix.size()), t);
    return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    json dir = json::array();
    int64_t offset = 0;
    for (const auto& [name, t] : ckpt.blobs) {
        const int64_t nbytes = t.numel() * static_cast<int64_t>(dtype_size(t.dtype()));
        dir.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"dtype", dtype_name(t.dtype())},
                       {"offset", offset},
                       {"nbytes", nbytes}});
        offset += nbytes;
    }
    json header{{"magic", "SCKPT"},
                {"version", 1},
                {"model_config", ckpt.model_config.to_json()},
                {"train_config", ckpt.train_config},
                {"step", ckpt.step},
                {"rng", ckpt.rng_state},
                {"extra", ckpt.extra},
                {"blobs", dir}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    const std::string text = header.dump();
    const uint32_t len = static_cast<uint32_t>(text.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ckpt.blobs)
        out.write(reinterpret_cast<const char*>(t.impl()->data.data()),
                  static_cast<std::streamsize>(t.impl()->data.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    uint32_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)))
        throw std::runtime_error(path + ": truncated header length");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len)))
        throw std::runtime_error(path + ": truncated header");
    json header = json::parse(text, nullptr, false);
    if (header.is_discarded()) throw std::runtime_error(path + ": corrupt header JSON");
    if (header.value("magic", "") != "SCKPT" || header.value("version", 0) != 1)
        throw std::runtime_error(path + ": not an SCKPT v1 file");

    Checkpoint ckpt;
    ckpt.model_config = nn::ModelConfig::from_json(header.at("model_config"));
    ckpt.train_config = header.value("train_config", json::object());
    ckpt.step = header.value("step", int64_t{0});
    ckpt.rng_state = header.value("rng", "");
    ckpt.extra = header.value("extra", json::object());
    for (const auto& entry : header.at("blobs")) {
        const auto shape = entry.at("shape").get<std::vector<int64_t>>();
        const DType dt = dtype_from_name(entry.at("dtype").get<std::string>());
        Tensor t(shape, dt);
        const auto nbytes = entry.at("nbytes").get<int64_t>();
        if (nbytes != static_cast<int64_t>(t.impl()->data.size()))
            throw std::runtime_error(path + ": blob size mismatch for '" +
                                     entry.at("name").get<std::string>() + "'");
        if (!in.read(reinterpret_cast<char*>(t.impl()->data.data()),
                     static_cast<std::streamsize>(nbytes)))
            throw std::runtime_error(path + ": truncated blob payload");
        ckpt.blobs.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
    return ckpt;
}

}  // namespace swinseg::train
