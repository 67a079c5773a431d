#pragma once

#include <string>

#include "retseg/image.hpp"

namespace retseg {

// Reads an 8-bit PNG, PPM (P6), or PGM (P5) file by extension. RGB files
// yield c == 3, grayscale c == 1; values are scaled to [0,1].
Image read_image(const std::string& path);

// Writes an image as 8-bit PNG/PPM/PGM depending on the file extension.
// Values are clamped to [0,1] and quantized to 255 levels.
void write_image(const std::string& path, const Image& img);

// Reads a grayscale file and binarizes it: pixel value > 127 -> 1.
Mask read_mask(const std::string& path);

}  // namespace retseg
