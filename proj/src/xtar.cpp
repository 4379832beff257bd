#include "xstream/xtar.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "xstream/bytes.hpp"

namespace xstream {

std::string encode_xtar(std::span<const XtarEntry> entries) {
  if (entries.size() > std::numeric_limits<std::uint32_t>::max()) throw IoError("xtar: too many entries");
  ByteWriter w;
  w.raw("XTAR");
  w.u8(kXtarVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) throw IoError("xtar: entry name too long");
    if (e.tensor.rank() > std::numeric_limits<std::uint8_t>::max()) throw IoError("xtar: rank too large");
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.raw(e.name);
    w.u8(static_cast<std::uint8_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float f : e.tensor.data()) w.f32(f);
  }
  return w.take();
}

std::vector<XtarEntry> decode_xtar(std::string_view bytes) {
  ByteReader r(bytes);
  try {
    if (r.raw(4) != "XTAR") throw IoError("xtar: bad magic");
    const auto version = r.u8();
    if (version != kXtarVersion) throw IoError("xtar: unsupported version " + std::to_string(version));
    const auto count = r.u32();
    std::vector<XtarEntry> out;
    out.reserve(std::min<std::uint32_t>(count, 4096));
    for (std::uint32_t i = 0; i < count; ++i) {
      XtarEntry e;
      const auto name_len = r.u16();
      e.name = std::string(r.raw(name_len));
      const auto rank = r.u8();
      Shape shape(rank);
      for (auto& d : shape) d = r.u32();
      const std::size_t n = shape_size(shape);
      if (n > r.remaining() / 4) throw IoError("xtar: truncated payload for '" + e.name + "'");
      std::vector<float> data(n);
      for (auto& f : data) f = r.f32();
      e.tensor = Tensor(std::move(shape), std::move(data));
      out.push_back(std::move(e));
    }
    if (r.remaining() != 0) throw IoError("xtar: trailing bytes after last entry");
    return out;
  } catch (const DimensionError& e) {
    throw IoError(std::string("xtar: invalid entry shape: ") + e.what());
  } catch (const ProtocolError& e) {
    throw IoError(std::string("xtar: truncated archive: ") + e.what());
  }
}

void write_xtar(const std::string& path, std::span<const XtarEntry> entries) {
  const std::string bytes = encode_xtar(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

std::vector<XtarEntry> read_xtar(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_xtar(bytes);
}

const Tensor& find_entry(std::span<const XtarEntry> entries, std::string_view name) {
  for (const auto& e : entries)
    if (e.name == name) return e.tensor;
  throw StateError("archive has no entry '" + std::string(name) + "'");
}

}  // namespace xstream
