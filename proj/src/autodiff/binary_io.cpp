#include "occforge/binary_io.hpp"

#include <bit>
#include <string>

#include "occforge/errors.hpp"

namespace occ::io {

void BinaryWriter::bytes(const void* data, std::size_t n) {
  out_->write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!*out_) throw FormatError(FormatErrorKind::Io, "write failed");
}

void BinaryWriter::u32(std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  bytes(b, 4);
}

void BinaryWriter::u64(std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  bytes(b, 8);
}

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryReader::bytes(void* data, std::size_t n) {
  in_->read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_->gcount()) != n) {
    throw FormatError(FormatErrorKind::Truncated, "expected " + std::to_string(n) + " more bytes");
  }
}

void BinaryReader::expect_magic(std::string_view tag) {
  std::string got(tag.size(), '\0');
  bytes(got.data(), got.size());
  if (got != tag) throw FormatError(FormatErrorKind::BadMagic, "expected '" + std::string(tag) + "'");
}

std::uint8_t BinaryReader::u8() {
  std::uint8_t v;
  bytes(&v, 1);
  return v;
}

std::uint32_t BinaryReader::u32() {
  unsigned char b[4];
  bytes(b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t BinaryReader::u64() {
  unsigned char b[8];
  bytes(b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

bool BinaryReader::at_end() { return in_->peek() == std::char_traits<char>::eof(); }

}  // namespace occ::io
