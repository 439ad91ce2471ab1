#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "sandwich/core/errors.hpp"

namespace sandwich {

// FNV-1a 64-bit, used as the blob/content checksum throughout the on-disk formats.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline std::string fnv1a64_hex(const void* data, std::size_t n) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = fnv1a64(data, n);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

namespace le {

// Little-endian scalar append/read. The host is assumed little-endian for the
// fast path; the byte-wise fallback keeps the format well-defined regardless.
template <typename T>
inline void append(std::vector<std::uint8_t>& buf, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.insert(buf.end(), tmp, tmp + sizeof(T));
}

template <typename T>
inline T read(const std::uint8_t* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

}  // namespace le

inline void write_file_bytes(const std::filesystem::path& path, const void* data, std::size_t n) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!f) throw IoError("write failed: " + path.string());
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& data) {
    write_file_bytes(path, data.data(), data.size());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw MissingBlobError("cannot open: " + path.string());
    const auto n = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<std::uint8_t> buf(n);
    if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (!f) throw IoError("read failed: " + path.string());
    return buf;
}

inline void write_file_text(const std::filesystem::path& path, const std::string& text) {
    write_file_bytes(path, text.data(), text.size());
}

inline std::string read_file_text(const std::filesystem::path& path) {
    auto b = read_file_bytes(path);
    return std::string(b.begin(), b.end());
}

}  // namespace sandwich
