#pragma once

// Little-endian scalar I/O on std streams.

#include "nsf/core.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace nsf::binary {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <class T>
void put(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is) throw FormatError("unexpected end of stream");
    return value;
}

inline void put_doubles(std::ostream& os, const double* data, std::size_t n) {
    os.write(reinterpret_cast<const char*>(data), std::streamsize(n * sizeof(double)));
}

inline void get_doubles(std::istream& is, double* data, std::size_t n) {
    is.read(reinterpret_cast<char*>(data), std::streamsize(n * sizeof(double)));
    if (!is) throw FormatError("unexpected end of stream");
}

inline void put_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
    std::array<char, 4> m{};
    is.read(m.data(), 4);
    if (!is || std::memcmp(m.data(), magic, 4) != 0) throw FormatError(std::string(what) + ": bad magic bytes");
}

}  // namespace nsf::binary
