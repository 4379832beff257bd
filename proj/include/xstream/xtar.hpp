#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xstream/numcore.hpp"

namespace xstream {

// XTAR tensor archive:
//   "XTAR" | version u8 | count u32 LE |
//   per entry: name_len u16 LE | UTF-8 name | rank u8 | dims u32 LE... | f32 LE payload
inline constexpr std::uint8_t kXtarVersion = 1;

struct XtarEntry {
  std::string name;
  Tensor tensor;
};

std::string encode_xtar(std::span<const XtarEntry> entries);
std::vector<XtarEntry> decode_xtar(std::string_view bytes);

void write_xtar(const std::string& path, std::span<const XtarEntry> entries);
std::vector<XtarEntry> read_xtar(const std::string& path);

// Linear lookup; throws StateError when missing.
const Tensor& find_entry(std::span<const XtarEntry> entries, std::string_view name);

}  // namespace xstream
