#ifndef IBIT_BINIO_HPP_
#define IBIT_BINIO_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "ibit/errors.hpp"

// Fixed-endianness scalar I/O for the binary file formats.
namespace ibit::binio {

inline void write_u32_le(std::ostream &os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char *>(b), 4);
}

inline void write_f64_le(std::ostream &os, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i)
        b[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char *>(b), 8);
}

inline void write_u32_be(std::ostream &os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char *>(b), 4);
}

inline void read_exact(std::istream &is, void *dst, std::size_t n, const std::string &what) {
    const auto offset = static_cast<long long>(is.tellg());
    is.read(static_cast<char *>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw FormatError(what + ": truncated at offset " + std::to_string(offset));
}

inline std::uint32_t read_u32_le(std::istream &is, const std::string &what) {
    unsigned char b[4];
    read_exact(is, b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint32_t read_u32_be(std::istream &is, const std::string &what) {
    unsigned char b[4];
    read_exact(is, b, 4, what);
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

inline double read_f64_le(std::istream &is, const std::string &what) {
    unsigned char b[8];
    read_exact(is, b, 8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

} // namespace ibit::binio

#endif // IBIT_BINIO_HPP_
