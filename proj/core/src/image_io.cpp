#include "retseg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

#include "retseg/errors.hpp"

namespace retseg {

namespace {

std::string lower_ext(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return "";
  std::string ext = path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext;
}

int read_pnm_token(std::istream& in) {
  // skips whitespace and '#' comments
  while (true) {
    int ch = in.peek();
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  int value = -1;
  in >> value;
  return value;
}

Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[2];
  in.read(magic, 2);
  int channels;
  if (magic[0] == 'P' && magic[1] == '6')
    channels = 3;
  else if (magic[0] == 'P' && magic[1] == '5')
    channels = 1;
  else
    throw IoError(path + ": unsupported PNM magic (want P5 or P6)");
  const int w = read_pnm_token(in);
  const int h = read_pnm_token(in);
  const int maxval = read_pnm_token(in);
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError(path + ": malformed PNM header");
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError(path + ": truncated PNM payload");
  Image img(h, w, channels);
  for (std::size_t i = 0; i < raw.size(); ++i) img.v[i] = static_cast<float>(raw[i]) / 255.0f;
  return img;
}

void write_pnm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (img.c == 3 ? "P6" : "P5") << "\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> raw(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.v[i], 0.0f, 1.0f) * 255.0f));
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

Image read_png(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path + ": libpng failed to decode");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path + ": unsupported PNG channel count");
  }
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 r = 0; r < h; ++r)
    rows[r] = raw.data() + static_cast<std::size_t>(r) * w * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  Image img(static_cast<int>(h), static_cast<int>(w), channels);
  for (std::size_t i = 0; i < raw.size(); ++i) img.v[i] = static_cast<float>(raw[i]) / 255.0f;
  return img;
}

void write_png(const std::string& path, const Image& img) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path + ": libpng failed to encode");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
               img.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> raw(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.v[i], 0.0f, 1.0f) * 255.0f));
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.h));
  for (int r = 0; r < img.h; ++r)
    rows[static_cast<std::size_t>(r)] = raw.data() + static_cast<std::size_t>(r) * img.w * img.c;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Image read_image(const std::string& path) {
  const std::string ext = lower_ext(path);
  if (ext == "png") return read_png(path);
  if (ext == "ppm" || ext == "pgm" || ext == "pnm") return read_pnm(path);
  throw IoError(path + ": unsupported image format ." + ext + " (PNG, PPM, PGM supported)");
}

void write_image(const std::string& path, const Image& img) {
  const std::string ext = lower_ext(path);
  if (ext == "png")
    write_png(path, img);
  else if (ext == "ppm" || ext == "pgm" || ext == "pnm")
    write_pnm(path, img);
  else
    throw IoError(path + ": unsupported image format ." + ext + " (PNG, PPM, PGM supported)");
}

Mask read_mask(const std::string& path) {
  Image img = read_image(path);
  Mask m(img.h, img.w, 1);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float lum = img.c == 1 ? img.at(y, x, 0)
                             : (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0f;
      m.at(y, x, 0) = lum * 255.0f > 127.5f ? 1.0f : 0.0f;
    }
  return m;
}

}  // namespace retseg
