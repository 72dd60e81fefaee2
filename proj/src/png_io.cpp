#include "dseg/png_io.hpp"

#include <png.h>

#include "dseg/errors.hpp"

namespace dseg {

namespace {

ImageU8 read_png(const std::string& path, uint32_t format, int channels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot decode PNG: " + path + " (" + img.message + ")");
  img.format = format;
  ImageU8 out;
  out.h = int(img.height);
  out.w = int(img.width);
  out.channels = channels;
  out.pixels.resize(size_t(out.h) * out.w * channels);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG: " + path + " (" + msg + ")");
  }
  return out;
}

void write_png(const std::string& path, int h, int w, uint32_t format,
               const uint8_t* data) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(w);
  img.height = png_uint_32(h);
  img.format = format;
  if (!png_image_write_to_file(&img, path.c_str(), 0, data, 0, nullptr))
    throw IoError("cannot write PNG: " + path + " (" + img.message + ")");
}

}  // namespace

ImageU8 read_png_rgb(const std::string& path) {
  return read_png(path, PNG_FORMAT_RGB, 3);
}

ImageU8 read_png_gray(const std::string& path) {
  return read_png(path, PNG_FORMAT_GRAY, 1);
}

void write_png_rgb(const std::string& path, int h, int w, const uint8_t* rgb) {
  write_png(path, h, w, PNG_FORMAT_RGB, rgb);
}

void write_png_gray(const std::string& path, int h, int w, const uint8_t* gray) {
  write_png(path, h, w, PNG_FORMAT_GRAY, gray);
}

}  // namespace dseg
