#pragma once

// PSV1 tensor files: "PSV1", u32 rank, u32 dims[rank], then little-endian f64 values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "bnsieve/error.hpp"
#include "bnsieve/tensor.hpp"

namespace bnsieve {

static_assert(std::endian::native == std::endian::little, "PSV1 I/O assumes a little-endian host");

inline constexpr char kPsvMagic[4] = {'P', 'S', 'V', '1'};

inline std::vector<char> encode_tensor(const Tensor& t) {
    std::vector<char> out(4 + 4 + 4 * t.rank() + 8 * t.size());
    char* p = out.data();
    std::memcpy(p, kPsvMagic, 4);
    p += 4;
    const auto rank = static_cast<std::uint32_t>(t.rank());
    std::memcpy(p, &rank, 4);
    p += 4;
    for (auto d : t.shape()) {
        const auto d32 = static_cast<std::uint32_t>(d);
        std::memcpy(p, &d32, 4);
        p += 4;
    }
    if (t.size()) std::memcpy(p, t.ptr(), 8 * t.size());
    return out;
}

inline Tensor decode_tensor(const std::vector<char>& bytes) {
    std::size_t off = 0;
    auto need = [&](std::size_t n, const char* what) {
        if (bytes.size() < off + n) throw FormatError(std::string("PSV1: truncated ") + what, bytes.size());
    };
    need(4, "magic");
    if (std::memcmp(bytes.data(), kPsvMagic, 4) != 0) throw FormatError("PSV1: bad magic", 0);
    off = 4;
    need(4, "rank");
    std::uint32_t rank = 0;
    std::memcpy(&rank, bytes.data() + off, 4);
    off += 4;
    need(4 * static_cast<std::size_t>(rank), "dims");
    Shape shape(rank);
    for (auto& d : shape) {
        std::uint32_t d32 = 0;
        std::memcpy(&d32, bytes.data() + off, 4);
        if (d32 == 0) throw FormatError("PSV1: zero dimension", off);
        d = d32;
        off += 4;
    }
    const std::size_t n = shape_numel(shape);
    need(8 * n, "payload");
    if (bytes.size() != off + 8 * n) throw FormatError("PSV1: trailing bytes after payload", off + 8 * n);
    std::vector<double> data(n);
    if (n) std::memcpy(data.data(), bytes.data() + off, 8 * n);
    return Tensor(std::move(shape), std::move(data));
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) { write_file_bytes(path, encode_tensor(t)); }

inline Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file_bytes(path)); }

}  // namespace bnsieve
