// SPDX-License-Identifier: Apache-2.0
#include "himar/format.hpp"

#include <array>
#include <charconv>

#include "himar/errors.hpp"

namespace himar {

std::string format_double(double v) {
    std::array<char, 64> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

double parse_double(const std::string& s) {
    double out = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError("not a number: '" + s + "'");
    return out;
}

namespace le {

namespace {

template <class U>
void write_uint(std::ostream& os, U v) {
    std::array<char, sizeof(U)> b{};
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b.data(), b.size());
}

template <class U>
U read_uint(std::istream& is) {
    std::array<unsigned char, sizeof(U)> b{};
    is.read(reinterpret_cast<char*>(b.data()), b.size());
    if (!is) throw FormatError("unexpected end of file");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void write_u16(std::ostream& os, std::uint16_t v) { write_uint(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_uint(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_uint(os, v); }
void write_f64(std::ostream& os, double v) { write_uint(os, std::bit_cast<std::uint64_t>(v)); }

void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint16_t read_u16(std::istream& is) { return read_uint<std::uint16_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_uint<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_uint<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(read_uint<std::uint64_t>(is)); }

std::string read_string(std::istream& is, std::size_t max_len) {
    const std::uint64_t n = read_u64(is);
    if (n > max_len) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw FormatError("unexpected end of file");
    return s;
}

}  // namespace le

}  // namespace himar
