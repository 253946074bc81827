#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditguide/common.hpp"
#include "ditguide/model.hpp"

// Checkpoint layout: a directory with manifest.json (config, tokenizer
// tables, parameter names and shapes) plus one raw little-endian
// float32 row-major blob per named parameter.

namespace ditguide {

namespace detail_ckpt {

inline void write_f32_le(std::ofstream& os, const std::vector<float>& data) {
    std::vector<uint8_t> buf(data.size() * 4);
    for (size_t i = 0; i < data.size(); ++i) {
        const uint32_t bits = std::bit_cast<uint32_t>(data[i]);
        buf[4 * i + 0] = static_cast<uint8_t>(bits & 0xff);
        buf[4 * i + 1] = static_cast<uint8_t>((bits >> 8) & 0xff);
        buf[4 * i + 2] = static_cast<uint8_t>((bits >> 16) & 0xff);
        buf[4 * i + 3] = static_cast<uint8_t>((bits >> 24) & 0xff);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<float> read_f32_le(std::ifstream& is, size_t count) {
    std::vector<uint8_t> buf(count * 4);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<size_t>(is.gcount()) != buf.size()) {
        throw Error("checkpoint: blob truncated");
    }
    std::vector<float> out(count);
    for (size_t i = 0; i < count; ++i) {
        const uint32_t bits = static_cast<uint32_t>(buf[4 * i]) |
                              (static_cast<uint32_t>(buf[4 * i + 1]) << 8) |
                              (static_cast<uint32_t>(buf[4 * i + 2]) << 16) |
                              (static_cast<uint32_t>(buf[4 * i + 3]) << 24);
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

}  // namespace detail_ckpt

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"num_blocks", c.num_blocks},
                          {"heads", c.heads},
                          {"width", c.width},
                          {"image_side", c.image_side},
                          {"channels", c.channels},
                          {"patch_size", c.patch_size},
                          {"mlp_ratio", c.mlp_ratio},
                          {"time_features", c.time_features},
                          {"max_tokens_a", c.max_tokens_a},
                          {"max_tokens_b", c.max_tokens_b},
                          {"vocab_a", c.vocab_a},
                          {"vocab_b", c.vocab_b},
                          {"learning_rate", c.learning_rate},
                          {"lr_warmup_steps", c.lr_warmup_steps},
                          {"lr_final_fraction", c.lr_final_fraction},
                          {"train_steps", c.train_steps},
                          {"batch_size", c.batch_size},
                          {"uncond_drop_prob", c.uncond_drop_prob}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_blocks = j.at("num_blocks").get<int>();
    c.heads = j.at("heads").get<int>();
    c.width = j.at("width").get<int>();
    c.image_side = j.at("image_side").get<int>();
    c.channels = j.at("channels").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.time_features = j.at("time_features").get<int>();
    c.max_tokens_a = j.at("max_tokens_a").get<int>();
    c.max_tokens_b = j.at("max_tokens_b").get<int>();
    c.vocab_a = j.at("vocab_a").get<int>();
    c.vocab_b = j.at("vocab_b").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.lr_warmup_steps = j.at("lr_warmup_steps").get<int>();
    c.lr_final_fraction = j.at("lr_final_fraction").get<double>();
    c.train_steps = j.at("train_steps").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.uncond_drop_prob = j.at("uncond_drop_prob").get<double>();
    return c;
}

template <typename T>
void save_checkpoint(ToyMMDiT<T>& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "ditguide-checkpoint";
    manifest["version"] = 1;
    manifest["model"] = model_config_to_json(model.config());
    manifest["tokenizer"] = {{"vocab_a", model.tables().vocab_a},
                             {"vocab_b", model.tables().vocab_b}};
    nlohmann::json params = nlohmann::json::array();
    for (auto& [name, tensor] : model.named_params()) {
        params.push_back({{"name", name}, {"shape", tensor->shape()}});
        std::vector<float> f32(tensor->values().size());
        for (size_t i = 0; i < f32.size(); ++i) f32[i] = static_cast<float>(tensor->values()[i]);
        std::ofstream os(dir / (name + ".f32"), std::ios::binary);
        if (!os) throw Error("checkpoint: cannot write blob for parameter '" + name + "'");
        detail_ckpt::write_f32_le(os, f32);
    }
    manifest["params"] = params;
    std::ofstream os(dir / "manifest.json");
    if (!os) throw Error("checkpoint: cannot write manifest");
    os << manifest.dump(2) << "\n";
}

// Validates the complete manifest against the directory contents
// (names, shapes, blob sizes) before reading any weight data.
template <typename T>
ToyMMDiT<T> load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw Error("checkpoint: missing manifest.json in " + dir.string());
    nlohmann::json manifest = nlohmann::json::parse(is, nullptr, /*allow_exceptions=*/true);
    if (manifest.value("format", "") != "ditguide-checkpoint") {
        throw Error("checkpoint: unrecognized format field");
    }
    ModelConfig cfg = model_config_from_json(manifest.at("model"));
    TokenizerTables tables;
    tables.vocab_a = manifest.at("tokenizer").at("vocab_a").get<std::vector<std::string>>();
    tables.vocab_b = manifest.at("tokenizer").at("vocab_b").get<std::vector<std::string>>();
    for (size_t i = 0; i < tables.vocab_a.size(); ++i) tables.index_a[tables.vocab_a[i]] = (int)i;
    for (size_t i = 0; i < tables.vocab_b.size(); ++i) tables.index_b[tables.vocab_b[i]] = (int)i;

    ToyMMDiT<T> model(cfg, tables);
    auto params = model.named_params();
    std::map<std::string, Tensor<T>*> by_name;
    for (auto& [name, tensor] : params) by_name[name] = tensor;

    // validation pass: every manifest entry must match the model and a
    // correctly sized blob must exist
    const auto& jparams = manifest.at("params");
    if (jparams.size() != params.size()) {
        throw Error("checkpoint: manifest lists " + std::to_string(jparams.size()) +
                    " parameters, model has " + std::to_string(params.size()));
    }
    for (const auto& jp : jparams) {
        const std::string name = jp.at("name").get<std::string>();
        auto it = by_name.find(name);
        if (it == by_name.end()) throw Error("checkpoint: unknown parameter '" + name + "'");
        const Shape shape = jp.at("shape").get<Shape>();
        if (shape != it->second->shape()) {
            throw Error("checkpoint: shape mismatch for parameter '" + name + "'");
        }
        const auto blob = dir / (name + ".f32");
        std::error_code ec;
        const auto size = std::filesystem::file_size(blob, ec);
        if (ec) throw Error("checkpoint: missing blob for parameter '" + name + "'");
        if (size != static_cast<uintmax_t>(shape_numel(shape)) * 4) {
            throw Error("checkpoint: blob size mismatch for parameter '" + name + "'");
        }
    }

    for (const auto& jp : jparams) {
        const std::string name = jp.at("name").get<std::string>();
        Tensor<T>* tensor = by_name[name];
        std::ifstream bs(dir / (name + ".f32"), std::ios::binary);
        const std::vector<float> f32 = detail_ckpt::read_f32_le(bs, tensor->values().size());
        auto& vals = tensor->mutable_values();
        for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<T>(f32[i]);
    }
    model.set_trainable(false);
    return model;
}

}  // namespace ditguide
