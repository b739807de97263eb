#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "garmentgen/errors.hpp"
#include "garmentgen/tensor.hpp"

namespace ggen {

// MCKP1 checkpoint format, little-endian throughout:
//   magic "MCKP1"
//   per parameter, in store order:
//     u32 name length, UTF-8 name bytes,
//     u32 rank, u32 dims[rank],
//     float32 values (row-major)
// Round-trips bit-exactly.

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
    return true;
}

inline void put_f32(std::ostream& os, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

inline bool get_f32(std::istream& is, float& f) {
    uint32_t v;
    if (!get_u32(is, v)) return false;
    std::memcpy(&f, &v, 4);
    return true;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[5] = {'M', 'C', 'K', 'P', '1'};

inline void save_checkpoint(const ParameterStore<float>& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 5);
    for (const auto& name : store.names()) {
        const Tensor& p = store.param(name);
        detail::put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<uint32_t>(p.shape.size()));
        for (int d : p.shape) detail::put_u32(os, static_cast<uint32_t>(d));
        for (float v : *p.data) detail::put_f32(os, v);
    }
    if (!os) throw FormatError("write failure on checkpoint: " + path);
}

inline ParameterStore<float> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint: " + path);
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, kCheckpointMagic, 5) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    ParameterStore<float> store;
    for (;;) {
        uint32_t name_len;
        if (!detail::get_u32(is, name_len)) break;  // clean EOF
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw FormatError("truncated name in " + path);
        uint32_t rank;
        if (!detail::get_u32(is, rank)) throw FormatError("truncated rank in " + path);
        std::vector<int> shape(rank);
        long long numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint32_t d;
            if (!detail::get_u32(is, d)) throw FormatError("truncated dims in " + path);
            shape[i] = static_cast<int>(d);
            numel *= d;
        }
        Tensor t = Tensor::zeros(shape);
        for (long long i = 0; i < numel; ++i)
            if (!detail::get_f32(is, (*t.data)[static_cast<size_t>(i)]))
                throw FormatError("truncated values for " + name + " in " + path);
        store.add(name, std::move(t));
    }
    return store;
}

}  // namespace ggen
