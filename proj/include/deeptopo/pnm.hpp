#pragma once

#include <string>
#include <vector>

#include "deeptopo/common.hpp"

namespace deeptopo {

// Binary PPM (P6) / PGM (P5) with maxval 255. Parse errors are DataError
// and always name the offending file.

struct PnmImage {
  i64 width = 0, height = 0;
  i64 channels = 1;               // 1 = PGM, 3 = PPM
  std::vector<std::uint8_t> data;  // row-major, interleaved for PPM
};

void write_pnm(const std::string& path, const PnmImage& img);
PnmImage read_pnm(const std::string& path);

}  // namespace deeptopo
