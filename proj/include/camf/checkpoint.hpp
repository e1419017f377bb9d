#pragma once

#include <cstdint>
#include <fstream>
#include <map>

#include "camf/harness.hpp"

namespace camf {

// Binary checkpoint: "CAMF" magic, format version, RunConfig snapshot, rng
// state, then a named tensor table with raw 32-bit values. load(save(m))
// reproduces every tensor bit-exactly.

constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

template <class V>
void put(std::ofstream& out, V v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V take(std::ifstream& in) {
    V v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!in) throw std::runtime_error("checkpoint truncated");
    return v;
}

inline void put_string(std::ofstream& out, const std::string& s) {
    put<std::uint32_t>(out, std::uint32_t(s.size()));
    out.write(s.data(), std::streamsize(s.size()));
}

inline std::string take_string(std::ifstream& in) {
    auto len = take<std::uint32_t>(in);
    std::string s(len, '\0');
    in.read(s.data(), std::streamsize(len));
    if (!in) throw std::runtime_error("checkpoint truncated");
    return s;
}

}  // namespace ckpt_detail

template <class T>
void save_checkpoint(ModelParams<T>& model, const RunConfig& cfg, std::uint64_t rng_state,
                     const std::string& path) {
    namespace cd = ckpt_detail;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot create checkpoint '" + path + "'");
    out.write("CAMF", 4);
    cd::put<std::uint32_t>(out, kCheckpointVersion);
    cd::put<std::uint64_t>(out, rng_state);
    cd::put_string(out, config_text(cfg));

    auto table = model.named_params();
    cd::put<std::uint64_t>(out, table.size());
    for (auto& [name, tensor] : table) {
        cd::put_string(out, name);
        cd::put<std::uint32_t>(out, std::uint32_t(tensor->rank()));
        for (auto e : tensor->shape) cd::put<std::uint64_t>(out, e);
        for (std::size_t i = 0; i < tensor->numel(); ++i) cd::put<float>(out, float(tensor->data()[i]));
    }
    if (!out) throw std::runtime_error("short write to checkpoint '" + path + "'");
}

template <class T>
struct LoadedCheckpoint {
    ModelParams<T> model;
    RunConfig config;
    std::uint64_t rng_state = 0;
};

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    namespace cd = ckpt_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "CAMF", 4) != 0)
        throw std::runtime_error("'" + path + "' is not a camf checkpoint (bad magic)");
    auto version = cd::take<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint version " + std::to_string(version) + " unsupported; this build reads " +
                                 std::to_string(kCheckpointVersion));

    LoadedCheckpoint<T> loaded;
    loaded.rng_state = cd::take<std::uint64_t>(in);
    loaded.config = config_from_text(cd::take_string(in));
    loaded.model = ModelParams<T>::make(loaded.config.seed);

    std::map<std::string, Tensor<T>*> by_name;
    for (auto& [name, tensor] : loaded.model.named_params()) by_name[name] = tensor;

    auto count = cd::take<std::uint64_t>(in);
    std::size_t filled = 0;
    for (std::uint64_t t = 0; t < count; ++t) {
        auto name = cd::take_string(in);
        auto rank = cd::take<std::uint32_t>(in);
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(std::size_t(cd::take<std::uint64_t>(in)));
        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint tensor '" + name + "' unknown to this model");
        if (it->second->shape != shape)
            throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                                     ", model expects " + shape_str(it->second->shape));
        for (std::size_t i = 0; i < it->second->numel(); ++i) it->second->data()[i] = T(cd::take<float>(in));
        ++filled;
    }
    if (filled != by_name.size())
        throw std::runtime_error("checkpoint covers " + std::to_string(filled) + " of " +
                                 std::to_string(by_name.size()) + " model tensors");
    return loaded;
}

}  // namespace camf
