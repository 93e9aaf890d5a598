#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "propih/common.hpp"

namespace propih {

// Named-tensor weight file. Layout, all little-endian:
//   magic "PTW1"
//   u32 entry count
//   per entry: u16 name length, name bytes (UTF-8), u8 rank,
//              rank x u32 dims, product(dims) x f32 values
struct PtwEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void write_ptw(const std::string& path, const std::vector<PtwEntry>& entries);

// Parses the whole file before returning; a truncated or malformed file
// throws ValidationError naming the offending entry and leaves no state.
std::vector<PtwEntry> read_ptw(const std::string& path);

}  // namespace propih
