#include "occforge/checkpoint.hpp"

#include <fstream>

#include "occforge/binary_io.hpp"
#include "occforge/errors.hpp"

namespace occ::ad {

void write_checkpoint(std::ostream& out, const ParameterStore& store) {
  io::BinaryWriter w(out);
  w.magic(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  for (const auto& [path, t] : store.entries()) {
    w.u32(static_cast<std::uint32_t>(path.size()));
    w.bytes(path.data(), path.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u64(e);
    for (double v : t.values()) w.f64(v);
  }
}

ParameterStore read_checkpoint(std::istream& in) {
  io::BinaryReader r(in);
  r.expect_magic(kCheckpointMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::BadVersion, "checkpoint version " + std::to_string(version));
  }
  ParameterStore store;
  while (!r.at_end()) {
    const std::uint32_t len = r.u32();
    if (len > (1u << 16)) throw FormatError(FormatErrorKind::Corrupt, "implausible path length");
    std::string path(len, '\0');
    r.bytes(path.data(), len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError(FormatErrorKind::Corrupt, "implausible rank for '" + path + "'");
    Shape shape(rank);
    for (auto& e : shape) e = r.u64();
    if (shape_numel(shape) > (std::size_t{1} << 32)) throw FormatError(FormatErrorKind::Corrupt, "implausible size");
    Tensor t(shape);
    for (double& v : t.values()) v = r.f64();
    if (store.contains(path)) throw FormatError(FormatErrorKind::Corrupt, "duplicate path '" + path + "'");
    store.set(path, std::move(t));
  }
  return store;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_checkpoint(out, store);
}

ParameterStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace occ::ad
