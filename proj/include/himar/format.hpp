// SPDX-License-Identifier: Apache-2.0
//
// Text and binary encoding helpers shared by the file formats.
#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

namespace himar {

/// Shortest decimal string that parses back to exactly `v`.
std::string format_double(double v);
/// Parses the whole string as a double; throws FormatError otherwise.
double parse_double(const std::string& s);

namespace le {

void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);

std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is, std::size_t max_len = 1u << 24);

}  // namespace le

}  // namespace himar
