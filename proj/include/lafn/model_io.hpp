#pragma once

// Model container:
//
//   bytes 0..3   "LAFN"
//   u16          format version (1)
//   u32          metadata length L
//   L bytes      UTF-8 JSON {"config", "tokenizer": [...], "tensors": [{name, shape, dtype, offset}]}
//   ...          tensor data, little-endian f32, offsets relative to the end of the metadata
//
// All integers are little-endian. Loading never returns a partial model.

#include <algorithm>
#include <map>
#include <set>
#include <string>

#include <json.hpp>

#include "lafn/binio.hpp"
#include "lafn/data.hpp"
#include "lafn/model.hpp"

namespace lafn {

inline constexpr char kModelMagic[4] = {'L', 'A', 'F', 'N'};
inline constexpr std::uint16_t kModelVersion = 1;

template <typename T>
std::string serialize_model(const TransformerModel<T>& model) {
    nlohmann::json tensors = nlohmann::json::array();
    ByteWriter data;
    for (const auto& [name, t] : model.named_parameters()) {
        tensors.push_back({{"name", name}, {"shape", t->shape()}, {"dtype", "f32"}, {"offset", data.bytes().size()}});
        for (T v : t->values()) data.f32(static_cast<float>(v));
    }
    nlohmann::json meta{{"config", model.config}, {"tokenizer", model.tokenizer.vocabulary()}, {"tensors", tensors}};
    const std::string m = meta.dump();
    ByteWriter out;
    out.raw(std::string_view(kModelMagic, 4));
    out.uint<std::uint16_t>(kModelVersion);
    out.uint<std::uint32_t>(static_cast<std::uint32_t>(m.size()));
    out.raw(m);
    out.raw(data.bytes());
    return out.take();
}

template <typename T>
TransformerModel<T> deserialize_model(std::string_view bytes, const std::string& what = "model") {
    ByteReader in(bytes, what);
    const auto magic = in.raw(4, "magic");
    if (magic != std::string_view(kModelMagic, 4)) {
        fail(ErrorKind::format, what + ": bad magic (expected \"LAFN\", found \"" + std::string(magic) + "\")");
    }
    const auto version = in.uint<std::uint16_t>("version");
    if (version != kModelVersion) {
        fail(ErrorKind::format, what + ": unsupported version (expected " + std::to_string(kModelVersion) + ", found " +
                                    std::to_string(version) + ")");
    }
    const auto meta_len = in.uint<std::uint32_t>("metadata length");
    const auto meta_text = in.raw(meta_len, "metadata");
    const std::string_view data = bytes.substr(in.position());

    TransformerModel<T> model;
    nlohmann::json meta;
    std::vector<std::string> vocab;
    try {
        meta = nlohmann::json::parse(meta_text);
        model.config = meta.at("config").get<ModelConfig>();
        vocab = meta.at("tokenizer").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, what + ": invalid metadata: " + e.what());
    } catch (const Error& e) {
        fail(ErrorKind::format, what + ": invalid metadata: " + e.what());
    }
    try {
        model.config.validate();
    } catch (const Error& e) {
        fail(ErrorKind::format, what + ": " + e.what());
    }
    try {
        model.tokenizer = Tokenizer::from_vocabulary(std::move(vocab));
    } catch (const Error& e) {
        fail(ErrorKind::format, what + ": " + e.what());
    }
    if (model.tokenizer.size() != model.config.vocab_size) {
        fail(ErrorKind::format, what + ": tokenizer size " + std::to_string(model.tokenizer.size()) + " != vocab_size " +
                                    std::to_string(model.config.vocab_size));
    }
    model.layers.resize(model.config.n_layers);

    std::map<std::string, Tensor<T>*> slots;
    for (auto& [name, t] : model.named_parameters()) slots.emplace(name, t);
    const auto& cfg = model.config;
    const std::size_t d = cfg.d_model, f = cfg.d_ffn;
    auto expected_shape = [&](const std::string& name) -> Shape {
        if (name == "tok_emb") return {cfg.vocab_size, d};
        if (name == "pos_emb") return {cfg.max_seq, d};
        if (name == "final_norm") return {d};
        if (name == "head") return {d, cfg.vocab_size};
        const std::string leaf = name.substr(name.find('.', 7) + 1);  // "layers.<l>.<leaf>"
        if (leaf == "attn_norm" || leaf == "ffn_norm") return {d};
        if (leaf == "ffn.w1") return {d, f};
        if (leaf == "ffn.w2") return cfg.ffn_variant == FfnVariant::gated ? Shape{d, f} : Shape{f, d};
        if (leaf == "ffn.w3") return {f, d};
        return {d, d};
    };

    const auto manifest = meta.find("tensors");
    if (manifest == meta.end() || !manifest->is_array()) fail(ErrorKind::format, what + ": metadata lacks a tensor manifest");
    std::set<std::string> seen;
    std::vector<std::string> unknown;
    std::size_t data_end = 0;
    for (const auto& entry : *manifest) {
        std::string name;
        Shape shape;
        std::string dtype;
        std::size_t offset = 0;
        try {
            name = entry.at("name").get<std::string>();
            shape = entry.at("shape").get<Shape>();
            dtype = entry.at("dtype").get<std::string>();
            offset = entry.at("offset").get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::format, what + ": malformed manifest entry: " + e.what());
        }
        auto slot = slots.find(name);
        if (slot == slots.end()) {
            unknown.push_back(name);
            continue;
        }
        if (!seen.insert(name).second) fail(ErrorKind::format, what + ": duplicate tensor '" + name + "'");
        if (dtype != "f32") fail(ErrorKind::format, what + ": tensor '" + name + "' has unsupported dtype '" + dtype + "'");
        const Shape want = expected_shape(name);
        if (shape != want) {
            fail(ErrorKind::format, what + ": tensor '" + name + "' has shape " + shape_str(shape) + ", expected " + shape_str(want));
        }
        const std::size_t n = shape_numel(shape);
        if (offset > data.size() || n * 4 > data.size() - offset) {
            fail(ErrorKind::format, what + ": tensor '" + name + "' extends past end of file (truncated?)");
        }
        data_end = std::max(data_end, offset + n * 4);
        ByteReader r(data.substr(offset, n * 4), what);
        std::vector<T> values(n);
        for (auto& v : values) v = static_cast<T>(r.f32("tensor data"));
        *slot->second = Tensor<T>(shape, std::move(values));
    }
    if (!unknown.empty()) {
        std::string list;
        for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
        fail(ErrorKind::format, what + ": unknown tensor name(s): " + list);
    }
    for (const auto& [name, t] : slots)
        if (!seen.count(name)) fail(ErrorKind::format, what + ": missing tensor '" + name + "'");
    if (data_end != data.size()) {
        fail(ErrorKind::format, what + ": " + std::to_string(data.size() - data_end) + " trailing bytes after the last tensor");
    }
    return model;
}

template <typename T>
void save_model(const TransformerModel<T>& model, const std::string& path) {
    write_text_file(path, serialize_model(model));
}

template <typename T = float>
TransformerModel<T> load_model(const std::string& path) {
    return deserialize_model<T>(read_text_file(path), "model '" + path + "'");
}

}  // namespace lafn
