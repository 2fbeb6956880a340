#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfr/common.hpp"
#include "pfr/denoiser.hpp"
#include "pfr/digest.hpp"
#include "pfr/nn.hpp"
#include "pfr/tensor.hpp"

namespace pfr {

// Named-parameter archive: little-endian, "PFRTNSR1" magic, a JSON metadata
// block, then per tensor: name, shape, row-major float32 data. Parameter
// names are the layer paths used in the code (for example "enc1.attn.wq.w",
// "pb0.gamma", "star"); reference latents ride in personalization archives
// under "ref.<k>".

namespace detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

inline uint32_t get_u32(const uint8_t*& p, const uint8_t* end) {
    if (p + 4 > end) throw IoError("archive truncated");
    uint32_t v = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                 (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
    p += 4;
    return v;
}

template <typename S>
void put_tensor(std::vector<uint8_t>& out, const std::string& name,
                const TensorT<S>& t) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(out, static_cast<uint32_t>(t.dim(i)));
    const size_t data_off = out.size();
    out.resize(out.size() + t.size() * 4);
    for (size_t i = 0; i < t.size(); ++i) {
        const float f = static_cast<float>(t[i]);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        out[data_off + 4 * i + 0] = static_cast<uint8_t>(bits & 0xff);
        out[data_off + 4 * i + 1] = static_cast<uint8_t>((bits >> 8) & 0xff);
        out[data_off + 4 * i + 2] = static_cast<uint8_t>((bits >> 16) & 0xff);
        out[data_off + 4 * i + 3] = static_cast<uint8_t>((bits >> 24) & 0xff);
    }
}

template <typename S>
std::pair<std::string, TensorT<S>> get_tensor(const uint8_t*& p, const uint8_t* end) {
    const uint32_t name_len = get_u32(p, end);
    if (p + name_len > end) throw IoError("archive truncated");
    std::string name(reinterpret_cast<const char*>(p), name_len);
    p += name_len;
    const uint32_t rank = get_u32(p, end);
    std::vector<int> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(get_u32(p, end));
    TensorT<S> t(shape);
    if (p + t.size() * 4 > end) throw IoError("archive truncated");
    for (size_t i = 0; i < t.size(); ++i) {
        uint32_t bits = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                        (static_cast<uint32_t>(p[2]) << 16) |
                        (static_cast<uint32_t>(p[3]) << 24);
        p += 4;
        float f;
        std::memcpy(&f, &bits, 4);
        t[i] = static_cast<S>(f);
    }
    return {std::move(name), std::move(t)};
}

}  // namespace detail

inline constexpr char kArchiveMagic[8] = {'P', 'F', 'R', 'T', 'N', 'S', 'R', '1'};

template <typename S>
std::vector<uint8_t> serialize_archive(
    const nlohmann::json& meta,
    const std::vector<std::pair<std::string, const TensorT<S>*>>& tensors) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kArchiveMagic, kArchiveMagic + 8);
    const std::string meta_str = meta.dump();
    detail::put_u32(out, static_cast<uint32_t>(meta_str.size()));
    out.insert(out.end(), meta_str.begin(), meta_str.end());
    detail::put_u32(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_tensor(out, name, *t);
    }
    return out;
}

template <typename S>
std::pair<nlohmann::json, std::vector<std::pair<std::string, TensorT<S>>>>
deserialize_archive(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kArchiveMagic, 8) != 0) {
        throw IoError("not a parameter archive");
    }
    const uint8_t* p = bytes.data() + 8;
    const uint8_t* end = bytes.data() + bytes.size();
    const uint32_t meta_len = detail::get_u32(p, end);
    if (p + meta_len > end) throw IoError("archive truncated");
    nlohmann::json meta = nlohmann::json::parse(std::string(
        reinterpret_cast<const char*>(p), meta_len));
    p += meta_len;
    const uint32_t count = detail::get_u32(p, end);
    std::vector<std::pair<std::string, TensorT<S>>> tensors;
    tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        tensors.push_back(detail::get_tensor<S>(p, end));
    }
    return {std::move(meta), std::move(tensors)};
}

inline void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<uint8_t> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// Config and model archives
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const DenoiserConfig& cfg) {
    return {{"levels", cfg.levels},
            {"channels", {cfg.channels[0], cfg.channels[1], cfg.channels[2]}},
            {"latent_channels", cfg.latent_channels},
            {"vocab", cfg.vocab},
            {"d_tok", cfg.d_tok},
            {"d_k", cfg.d_k},
            {"temb_dim", cfg.temb_dim},
            {"groups", cfg.groups},
            {"image_size", cfg.image_size}};
}

inline DenoiserConfig config_from_json(const nlohmann::json& j) {
    DenoiserConfig cfg;
    cfg.levels = j.at("levels").get<int>();
    for (int i = 0; i < 3; ++i) cfg.channels[static_cast<size_t>(i)] = j.at("channels")[i];
    cfg.latent_channels = j.at("latent_channels").get<int>();
    cfg.vocab = j.at("vocab").get<int>();
    cfg.d_tok = j.at("d_tok").get<int>();
    cfg.d_k = j.at("d_k").get<int>();
    cfg.temb_dim = j.at("temb_dim").get<int>();
    cfg.groups = j.at("groups").get<int>();
    cfg.image_size = j.at("image_size").get<int>();
    return cfg;
}

template <typename S>
std::vector<uint8_t> serialize_params(const ParamSet<S>& ps, const nlohmann::json& meta) {
    std::vector<std::pair<std::string, const TensorT<S>*>> tensors;
    ps.for_each([&](const Param<S>& p) { tensors.emplace_back(p.name, &p.value); });
    return serialize_archive<S>(meta, tensors);
}

template <typename S>
void load_params(ParamSet<S>& ps,
                 const std::vector<std::pair<std::string, TensorT<S>>>& tensors) {
    size_t applied = 0;
    for (const auto& [name, t] : tensors) {
        if (!ps.contains(name)) continue;
        Param<S>& p = ps.at(name);
        check(p.value.shape() == t.shape(), "shape mismatch loading " + name);
        p.value = t;
        applied++;
    }
    check(applied == ps.count(), "archive is missing parameters");
}

template <typename S>
void save_base_checkpoint(const std::string& path, const Denoiser<S>& model) {
    nlohmann::json meta;
    meta["kind"] = "base";
    meta["config"] = config_to_json(model.cfg);
    write_bytes(path, serialize_params(model.base, meta));
}

template <typename S>
Denoiser<S> load_base_checkpoint(const std::string& path) {
    auto [meta, tensors] = deserialize_archive<S>(read_bytes(path));
    check(meta.value("kind", "") == "base", "not a base checkpoint: " + path);
    Denoiser<S> model(config_from_json(meta.at("config")), /*init_seed=*/0);
    load_params(model.base, tensors);
    return model;
}

template <typename S>
void save_personalization(const std::string& path, const PersonalizationState<S>& state) {
    nlohmann::json meta;
    meta["kind"] = "personalization";
    meta["n_ref"] = state.ref_latents.size();
    std::vector<std::pair<std::string, const TensorT<S>*>> tensors;
    state.params.for_each(
        [&](const Param<S>& p) { tensors.emplace_back(p.name, &p.value); });
    for (size_t i = 0; i < state.ref_latents.size(); ++i) {
        tensors.emplace_back("ref." + std::to_string(i), &state.ref_latents[i]);
    }
    write_bytes(path, serialize_archive<S>(meta, tensors));
}

template <typename S>
PersonalizationState<S> load_personalization(const std::string& path,
                                             const Denoiser<S>& model) {
    auto [meta, tensors] = deserialize_archive<S>(read_bytes(path));
    check(meta.value("kind", "") == "personalization",
          "not a personalization state: " + path);
    PersonalizationState<S> state = model.init_personalization(0);
    std::vector<std::pair<std::string, TensorT<S>>> params;
    const size_t n_ref = meta.at("n_ref").template get<size_t>();
    state.ref_latents.resize(n_ref);
    for (auto& [name, t] : tensors) {
        if (name.rfind("ref.", 0) == 0) {
            const size_t idx = std::stoul(name.substr(4));
            check(idx < n_ref, "bad reference index in archive");
            state.ref_latents[idx] = std::move(t);
        } else {
            params.emplace_back(name, std::move(t));
        }
    }
    load_params(state.params, params);
    return state;
}

// Identity fingerprint of the frozen base weights.
template <typename S>
std::string base_weights_sha256(const Denoiser<S>& model) {
    nlohmann::json meta;
    meta["kind"] = "base";
    meta["config"] = config_to_json(model.cfg);
    return sha256_hex(serialize_params(model.base, meta));
}

}  // namespace pfr
