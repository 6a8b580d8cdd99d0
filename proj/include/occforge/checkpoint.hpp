#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "occforge/params.hpp"

namespace occ::ad {

inline constexpr char kCheckpointMagic[] = "OCFG";
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian): "OCFG", u32 version, then until EOF one record per
// parameter in path order: u32 path length, UTF-8 path, u32 rank,
// u64 extents[rank], f64 payload.
void write_checkpoint(std::ostream& out, const ParameterStore& store);
ParameterStore read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store);
ParameterStore load_checkpoint(const std::filesystem::path& path);

}  // namespace occ::ad
