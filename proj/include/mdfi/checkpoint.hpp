#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mdfi/errors.hpp"
#include "mdfi/tensor.hpp"

namespace mdfi {

// Parameter checkpoint container.
//
//   magic   "MDFI1" (5 bytes)
//   record* until EOF, each:
//     u32  name length (LE)
//     u8[] name bytes
//     u32  rank (LE)
//     u32  dims[rank] (LE)
//     f64  values[prod(dims)] (LE, IEEE-754)
//
// Values are written verbatim from the in-memory doubles, so a
// save/load round trip is bit-exact.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

inline void put_f64(std::ostream& os, double d) {
    std::uint64_t u;
    std::memcpy(&u, &d, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline bool get_f64(std::istream& is, double& d) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    std::memcpy(&d, &u, 8);
    return true;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const NamedParams& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write("MDFI1", 5);
    for (const auto& [name, t] : params) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t->shape.size()));
        for (std::size_t d : t->shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
        for (double v : t->data) detail::put_f64(os, v);
    }
    if (!os) throw DataError("write failure on checkpoint: " + path);
}

struct CheckpointEntry {
    Shape shape;
    std::vector<double> data;
};

inline std::map<std::string, CheckpointEntry> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, "MDFI1", 5) != 0)
        throw DataError("bad checkpoint magic in " + path);
    std::map<std::string, CheckpointEntry> out;
    std::uint32_t name_len;
    while (detail::get_u32(is, name_len)) {
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw DataError("truncated checkpoint: " + path);
        std::uint32_t rank;
        if (!detail::get_u32(is, rank)) throw DataError("truncated checkpoint: " + path);
        CheckpointEntry e;
        std::size_t n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t d;
            if (!detail::get_u32(is, d)) throw DataError("truncated checkpoint: " + path);
            e.shape.push_back(d);
            n *= d;
        }
        e.data.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            if (!detail::get_f64(is, e.data[i])) throw DataError("truncated checkpoint: " + path);
        out.emplace(std::move(name), std::move(e));
    }
    return out;
}

// Copies checkpoint values into an existing parameter list, matching by name.
inline void apply_checkpoint(const std::map<std::string, CheckpointEntry>& ckpt,
                             const NamedParams& params) {
    for (const auto& [name, t] : params) {
        auto it = ckpt.find(name);
        if (it == ckpt.end()) throw DataError("checkpoint is missing parameter: " + name);
        if (it->second.shape != t->shape)
            throw DimensionError("checkpoint shape mismatch for " + name + ": " +
                                 shape_str(it->second.shape) + " vs " + shape_str(t->shape));
        t->data = it->second.data;
    }
}

} // namespace mdfi
