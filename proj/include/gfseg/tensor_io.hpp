#pragma once

// GFST binary tensor files: magic "GFST", u32 version=1, u8 dtype
// (0 = f32, 1 = f64), u8 rank, rank x u64 dims, then the row-major payload,
// all little-endian. Every CLI artifact that holds numbers uses this format.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "gfseg/tensor.hpp"

namespace gfseg {

static_assert(std::endian::native == std::endian::little, "GFST i/o assumes a little-endian host");

namespace detail {

inline constexpr char kGfstMagic[4] = {'G', 'F', 'S', 'T'};
inline constexpr std::uint32_t kGfstVersion = 1;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const std::filesystem::path& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("truncated GFST file: " + path.string());
    return v;
}

} // namespace detail

template <typename Scalar>
void write_gfst(const std::filesystem::path& path, const Tensor<Scalar>& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os.write(detail::kGfstMagic, 4);
    detail::write_raw(os, detail::kGfstVersion);
    detail::write_raw(os, static_cast<std::uint8_t>(std::is_same_v<Scalar, double> ? 1 : 0));
    detail::write_raw(os, static_cast<std::uint8_t>(t.rank()));
    for (Index d : t.dims()) detail::write_raw(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
    if (!os) throw DataError("short write: " + path.string());
}

// Reads a GFST file, converting the stored dtype to Scalar if they differ.
template <typename Scalar>
Tensor<Scalar> read_gfst(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open GFST file: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, detail::kGfstMagic, 4) != 0)
        throw DataError("bad GFST magic in " + path.string());
    const auto version = detail::read_raw<std::uint32_t>(is, path);
    if (version != detail::kGfstVersion)
        throw DataError("unsupported GFST version " + std::to_string(version) + " in " + path.string());
    const auto dtype = detail::read_raw<std::uint8_t>(is, path);
    if (dtype > 1) throw DataError("unknown GFST dtype in " + path.string());
    const auto rank = detail::read_raw<std::uint8_t>(is, path);
    std::vector<Index> dims(rank);
    std::size_t n = 1;
    for (auto& d : dims) {
        d = static_cast<Index>(detail::read_raw<std::uint64_t>(is, path));
        n *= static_cast<std::size_t>(d);
    }
    std::vector<Scalar> data(n);
    if (dtype == (std::is_same_v<Scalar, double> ? 1 : 0)) {
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(Scalar)));
        if (!is) throw DataError("truncated GFST payload in " + path.string());
    } else if (dtype == 0) {
        std::vector<float> tmp(n);
        is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (!is) throw DataError("truncated GFST payload in " + path.string());
        for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<Scalar>(tmp[i]);
    } else {
        std::vector<double> tmp(n);
        is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!is) throw DataError("truncated GFST payload in " + path.string());
        for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<Scalar>(tmp[i]);
    }
    return Tensor<Scalar>(std::move(dims), std::move(data));
}

} // namespace gfseg
