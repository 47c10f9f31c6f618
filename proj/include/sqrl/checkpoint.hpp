#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sqrl/optim.hpp"
#include "sqrl/tensor.hpp"

namespace sqrl {

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return true;
}

inline bool get_u64(std::istream& is, std::uint64_t& v) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
    v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return true;
}

inline bool get_f64(std::istream& is, double& v) {
    std::uint64_t u;
    if (!get_u64(is, u)) return false;
    v = std::bit_cast<double>(u);
    return true;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'S', 'Q', 'R', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Writes named tensors: magic, version, then per record
// u32 name length, name bytes, u32 rank, rank u64 dims, f64 payload (LE).
inline void save_records(const std::string& path, const std::map<std::string, Tensor>& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for write: " + path);
    os.write(kCheckpointMagic, 4);
    detail::put_u32(os, kCheckpointVersion);
    for (const auto& [name, t] : records) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape) detail::put_u64(os, d);
        for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64(os, (*t.data)[i]);
    }
    if (!os) throw DataError("write failed: " + path);
}

inline std::map<std::string, Tensor> load_records(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kCheckpointMagic, 4))
        throw DataError("bad checkpoint magic in " + path);
    std::uint32_t version;
    if (!detail::get_u32(is, version)) throw DataError("truncated checkpoint: " + path);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    std::map<std::string, Tensor> out;
    for (;;) {
        std::uint32_t name_len;
        if (!detail::get_u32(is, name_len)) break;  // clean EOF
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw DataError("truncated checkpoint: " + path);
        std::uint32_t rank;
        if (!detail::get_u32(is, rank)) throw DataError("truncated checkpoint: " + path);
        Shape shape(rank);
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint64_t d;
            if (!detail::get_u64(is, d)) throw DataError("truncated checkpoint: " + path);
            shape[i] = static_cast<std::size_t>(d);
        }
        Tensor t = Tensor::zeros(shape);
        for (std::size_t i = 0; i < t.size(); ++i)
            if (!detail::get_f64(is, (*t.data)[i])) throw DataError("truncated checkpoint: " + path);
        if (!out.emplace(std::move(name), std::move(t)).second)
            throw DataError("duplicate record name in " + path);
    }
    return out;
}

// A full training snapshot: model weights plus optional optimizer moments and
// scalar metadata, all packed into one record stream under reserved prefixes.
struct TrainCheckpoint {
    ModelParams params;
    AdamState opt;
    bool has_opt = false;
    std::map<std::string, double> meta;
};

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const AdamState* opt = nullptr,
                            const std::map<std::string, double>& meta = {}) {
    std::map<std::string, Tensor> recs;
    for (const auto& [name, t] : params) recs.emplace(name, t);
    if (opt) {
        for (const auto& [name, m] : opt->m)
            recs.emplace("opt.m." + name, Tensor::from({m.size()}, m));
        for (const auto& [name, v] : opt->v)
            recs.emplace("opt.v." + name, Tensor::from({v.size()}, v));
        recs.emplace("opt.step", Tensor::from({}, {static_cast<double>(opt->step)}));
    }
    for (const auto& [name, v] : meta) recs.emplace("meta." + name, Tensor::from({}, {v}));
    save_records(path, recs);
}

inline TrainCheckpoint load_checkpoint(const std::string& path) {
    TrainCheckpoint ck;
    for (auto& [name, t] : load_records(path)) {
        if (name.rfind("opt.m.", 0) == 0) {
            ck.opt.m[name.substr(6)] = *t.data;
            ck.has_opt = true;
        } else if (name.rfind("opt.v.", 0) == 0) {
            ck.opt.v[name.substr(6)] = *t.data;
            ck.has_opt = true;
        } else if (name == "opt.step") {
            ck.opt.step = static_cast<long long>(t.value());
            ck.has_opt = true;
        } else if (name.rfind("meta.", 0) == 0) {
            ck.meta[name.substr(5)] = t.value();
        } else {
            t.requires_grad = true;
            ck.params.emplace(name, std::move(t));
        }
    }
    return ck;
}

}  // namespace sqrl
