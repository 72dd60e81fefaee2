#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dseg {

// Interleaved 8-bit pixel buffer (row-major, `channels` samples per pixel).
struct ImageU8 {
  int h = 0, w = 0, channels = 0;
  std::vector<uint8_t> pixels;
};

ImageU8 read_png_rgb(const std::string& path);
ImageU8 read_png_gray(const std::string& path);
void write_png_rgb(const std::string& path, int h, int w, const uint8_t* rgb);
void write_png_gray(const std::string& path, int h, int w, const uint8_t* gray);

}  // namespace dseg
