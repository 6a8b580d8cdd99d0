#include "occforge/grid_io.hpp"

#include <fstream>
#include <string>

#include "occforge/binary_io.hpp"
#include "occforge/errors.hpp"

namespace occ::geo {

void write_grid(std::ostream& out, const LabelGrid& grid) {
  io::BinaryWriter w(out);
  const auto& s = grid.spec;
  w.magic(kGridMagic);
  w.u32(kGridVersion);
  for (std::size_t d : s.dims) w.u32(static_cast<std::uint32_t>(d));
  w.f64(s.resolution);
  for (double o : s.origin) w.f64(o);
  std::vector<std::uint8_t> payload(s.voxel_count());
  std::size_t k = 0;
  for (std::size_t z = 0; z < s.dims[2]; ++z)
    for (std::size_t y = 0; y < s.dims[1]; ++y)
      for (std::size_t x = 0; x < s.dims[0]; ++x) payload[k++] = grid.at({x, y, z});
  w.bytes(payload.data(), payload.size());
}

LabelGrid read_grid(std::istream& in) {
  io::BinaryReader r(in);
  r.expect_magic(kGridMagic);
  const std::uint32_t version = r.u32();
  if (version != kGridVersion) throw FormatError(FormatErrorKind::BadVersion, "grid version " + std::to_string(version));
  std::array<std::size_t, 3> dims{};
  for (auto& d : dims) d = r.u32();
  const double res = r.f64();
  Vec3 origin;
  for (double& o : origin) o = r.f64();
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0 || !(res > 0.0) ||
      dims[0] * dims[1] * dims[2] > (std::size_t{1} << 31)) {
    throw FormatError(FormatErrorKind::Corrupt, "invalid grid header");
  }
  LabelGrid grid(VoxelGridSpec(origin, res, dims), 0);
  std::vector<std::uint8_t> payload(grid.spec.voxel_count());
  r.bytes(payload.data(), payload.size());
  std::size_t k = 0;
  for (std::size_t z = 0; z < dims[2]; ++z)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t x = 0; x < dims[0]; ++x) grid.at({x, y, z}) = payload[k++];
  return grid;
}

void save_grid(const std::filesystem::path& path, const LabelGrid& grid) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_grid(out, grid);
}

LabelGrid load_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string());
  return read_grid(in);
}

}  // namespace occ::geo
