#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "error.hpp"

// Little-endian fixed-width binary I/O used by every on-disk format.
// All formats are written field by field, no struct padding on disk.

namespace farsight::binio {

static_assert(std::endian::native == std::endian::little,
              "trace/model/map formats assume a little-endian host");

template <typename T>
void put(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
    static_assert(std::is_trivially_copyable_v<T>);
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is)
        raise(Errc::format, std::string("truncated file while reading ") + what);
    return value;
}

inline void put_bytes(std::ostream& os, const void* data, size_t n) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& is, void* data, size_t n, const char* what) {
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!is)
        raise(Errc::format, std::string("truncated file while reading ") + what);
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        raise(Errc::io, "cannot open for writing: " + path);
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        raise(Errc::io, "cannot open for reading: " + path);
    return is;
}

inline void check_magic(std::istream& is, const char expect[4], const char* format_name) {
    char magic[4];
    get_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, expect, 4) != 0)
        raise(Errc::format, std::string("bad magic, not a ") + format_name + " file");
}

} // namespace farsight::binio
