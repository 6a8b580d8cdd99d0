#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "occforge/geometry.hpp"

namespace occ::geo {

inline constexpr char kGridMagic[] = "SVOX";
inline constexpr std::uint32_t kGridVersion = 1;

// Layout (little-endian): "SVOX", u32 version, u32 dims[3], f64 resolution,
// f64 origin[3], then dims[0]*dims[1]*dims[2] u8 labels with x varying fastest
// (255 = unlabeled).
void write_grid(std::ostream& out, const LabelGrid& grid);
LabelGrid read_grid(std::istream& in);

void save_grid(const std::filesystem::path& path, const LabelGrid& grid);
LabelGrid load_grid(const std::filesystem::path& path);

}  // namespace occ::geo
