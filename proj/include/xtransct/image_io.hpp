#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xtransct {

// 16-bit binary PGM (P5, maxval 65535); pixels in [0,1], row-major.
void write_pgm16(const std::string& path, std::size_t width, std::size_t height,
                 const std::vector<double>& pixels01);

// Reads binary P5 with maxval 255 or 65535 back to [0,1].
std::vector<double> read_pgm(const std::string& path, std::size_t& width,
                             std::size_t& height);

// Minimal 8-bit grayscale PNG writer (zlib-deflated, filter 0).
void write_png_gray8(const std::string& path, std::size_t width,
                     std::size_t height, const std::vector<std::uint8_t>& pixels);

}  // namespace xtransct
