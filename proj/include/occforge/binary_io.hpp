#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

namespace occ::io {

/// Little-endian primitive writer independent of host byte order.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(&out) {}

  void bytes(const void* data, std::size_t n);
  void magic(std::string_view tag) { bytes(tag.data(), tag.size()); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);

 private:
  std::ostream* out_;
};

/// Reader counterpart; short reads raise FormatError(Truncated).
class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(&in) {}

  void bytes(void* data, std::size_t n);
  /// Reads a tag and raises FormatError(BadMagic) on mismatch.
  void expect_magic(std::string_view tag);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  bool at_end();

 private:
  std::istream* in_;
};

}  // namespace occ::io
