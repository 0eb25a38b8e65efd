#pragma once

// Density files: JSON {"nx", "ny", "density": [row-major, row 0 at the
// bottom]} and 8-bit grayscale PNG export (0 black void, 1 white material).

#include "topo/fea.hpp"

#include <filesystem>
#include <stdexcept>

namespace topo::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_density(const fea::DensityField& d, const std::filesystem::path& path);
fea::DensityField read_density(const std::filesystem::path& path);

/// Image row 0 is the top, so grid row ny-1 is written first.
void write_png(const fea::DensityField& d, const std::filesystem::path& path);

/// Pixel rows top to bottom, for tests and tooling.
std::vector<std::uint8_t> read_png_gray(const std::filesystem::path& path, int& width, int& height);

}  // namespace topo::io
