// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <fstream>

#include "rfx/transformer.hpp"

namespace rfx {

// Flat binary tensor container:
//   magic "RFXW" | version u32 | tensor count u32
//   per tensor: name length u32 | UTF-8 name | rank u32 | dims u64[rank] | f64 data
// All integers and floats little-endian. Round-trips byte-exactly.

inline constexpr uint32_t kWeightsVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

inline uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& is) {
    const uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

inline void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_tensors: cannot open " + path);
    os.write("RFXW", 4);
    detail::put_u32(os, kWeightsVersion);
    detail::put_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& nt : tensors) {
        detail::put_u32(os, static_cast<uint32_t>(nt.name.size()));
        os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        detail::put_u32(os, static_cast<uint32_t>(nt.tensor.rank()));
        for (int64_t d : nt.tensor.shape) detail::put_u64(os, static_cast<uint64_t>(d));
        for (double v : nt.tensor.data) detail::put_f64(os, v);
    }
    if (!os) throw std::runtime_error("save_tensors: write failed on " + path);
}

inline std::vector<NamedTensor> load_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_tensors: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RFXW", 4) != 0)
        throw std::runtime_error("load_tensors: bad magic in " + path);
    const uint32_t version = detail::get_u32(is);
    if (version != kWeightsVersion)
        throw std::runtime_error("load_tensors: unsupported version " + std::to_string(version) +
                                 " in " + path);
    const uint32_t count = detail::get_u32(is);
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (uint32_t t = 0; t < count; ++t) {
        const uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const uint32_t rank = detail::get_u32(is);
        std::vector<int64_t> dims(rank);
        for (uint32_t i = 0; i < rank; ++i) dims[i] = static_cast<int64_t>(detail::get_u64(is));
        Tensor tensor(dims);
        for (double& v : tensor.data) v = detail::get_f64(is);
        if (!is) throw std::runtime_error("load_tensors: truncated file " + path);
        out.push_back({std::move(name), std::move(tensor)});
    }
    return out;
}

inline void save_model(const std::string& path, const Model& model) {
    std::vector<NamedTensor> tensors;
    model.visit([&](const std::string& name, const Tensor& t) { tensors.push_back({name, t}); });
    save_tensors(path, tensors);
}

// Loads by name into an already-constructed model; every tensor must match in
// name and shape.
inline void load_model(const std::string& path, Model& model) {
    std::vector<NamedTensor> tensors = load_tensors(path);
    size_t cursor = 0;
    model.visit([&](const std::string& name, Tensor& t) {
        if (cursor >= tensors.size())
            throw std::runtime_error("load_model: missing tensor " + name + " in " + path);
        NamedTensor& nt = tensors[cursor++];
        if (nt.name != name)
            throw std::runtime_error("load_model: expected tensor " + name + ", found " +
                                     nt.name + " in " + path);
        if (nt.tensor.shape != t.shape)
            throw std::runtime_error("load_model: shape mismatch for " + name + ": " +
                                     shape_str(nt.tensor) + " vs " + shape_str(t));
        t = std::move(nt.tensor);
    });
    if (cursor != tensors.size())
        throw std::runtime_error("load_model: file " + path + " carries extra tensors");
}

}  // namespace rfx
