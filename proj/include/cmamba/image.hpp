#ifndef CMAMBA_IMAGE_HPP
#define CMAMBA_IMAGE_HPP

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cmamba/errors.hpp"
#include "cmamba/tensor.hpp"

namespace cmamba {

// Images are [3,H,W] tensors with values in [0,1].

namespace detail {

struct FileCloser {
  std::FILE* fp;
  ~FileCloser() {
    if (fp) std::fclose(fp);
  }
};

}  // namespace detail

inline Tensor load_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open " + path);
  detail::FileCloser closer{fp};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    throw IoError("png read failed: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png channel layout unsupported: " + path);
  }
  std::vector<uint8_t> raw(static_cast<size_t>(3) * w * h);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = raw.data() + static_cast<size_t>(3) * w * y;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  Tensor out({3, h, w});
  const int64_t hw = static_cast<int64_t>(h) * w;
  for (int64_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) out[c * hw + p] = raw[static_cast<size_t>(3 * p + c)] / 255.0;
  return out;
}

inline void save_png(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("save_png: expected [3,H,W]");
  const int h = img.dim(1), w = img.dim(2);
  const int64_t hw = static_cast<int64_t>(h) * w;
  std::vector<uint8_t> raw(static_cast<size_t>(3) * hw);
  for (int64_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(img[c * hw + p], 0.0, 1.0) * 255.0;
      raw[static_cast<size_t>(3 * p + c)] = static_cast<uint8_t>(iround_away(v));
    }
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot write " + path);
  detail::FileCloser closer{fp};
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = raw.data() + static_cast<size_t>(3) * w * y;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Tensor load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  auto next_token = [&]() -> std::string {
    std::string tok;
    int ch;
    while ((ch = f.get()) != EOF) {
      if (ch == '#') {
        while ((ch = f.get()) != EOF && ch != '\n') {
        }
      } else if (!std::isspace(ch)) {
        tok.push_back(static_cast<char>(ch));
        while ((ch = f.peek()) != EOF && !std::isspace(ch)) tok.push_back(static_cast<char>(f.get()));
        return tok;
      }
    }
    throw IoError("ppm header truncated: " + path);
  };
  if (next_token() != "P6") throw IoError("not a P6 ppm: " + path);
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (w < 1 || h < 1 || maxval != 255) throw IoError("unsupported ppm geometry: " + path);
  f.get();  // single whitespace before raster
  std::vector<uint8_t> raw(static_cast<size_t>(3) * w * h);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (f.gcount() != static_cast<std::streamsize>(raw.size()))
    throw IoError("ppm raster truncated: " + path);
  Tensor out({3, h, w});
  const int64_t hw = static_cast<int64_t>(h) * w;
  for (int64_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) out[c * hw + p] = raw[static_cast<size_t>(3 * p + c)] / 255.0;
  return out;
}

inline void save_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("save_ppm: expected [3,H,W]");
  const int h = img.dim(1), w = img.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  const int64_t hw = static_cast<int64_t>(h) * w;
  for (int64_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c)
      f.put(static_cast<char>(iround_away(std::clamp(img[c * hw + p], 0.0, 1.0) * 255.0)));
  if (!f) throw IoError("ppm write failed: " + path);
}

// Sniff content: PNG signature or P6, independent of extension.
inline Tensor load_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char head[2] = {0, 0};
  f.read(head, 2);
  f.close();
  if (head[0] == '\x89' && head[1] == 'P') return load_png(path);
  if (head[0] == 'P' && head[1] == '6') return load_ppm(path);
  throw IoError("unrecognized image format: " + path);
}

// Edge-replication padding on the bottom/right up to multiples of `multiple`.
inline Tensor pad_to_multiple(const Tensor& img, int multiple) {
  if (img.rank() != 3) throw std::invalid_argument("pad_to_multiple: expected [C,H,W]");
  if (multiple < 1) throw std::invalid_argument("pad_to_multiple: bad multiple");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const int hp = ((h + multiple - 1) / multiple) * multiple;
  const int wp = ((w + multiple - 1) / multiple) * multiple;
  if (hp == h && wp == w) return img;
  Tensor out({c, hp, wp});
  for (int i = 0; i < c; ++i)
    for (int y = 0; y < hp; ++y)
      for (int x = 0; x < wp; ++x)
        out[(static_cast<int64_t>(i) * hp + y) * wp + x] =
            img[(static_cast<int64_t>(i) * h + std::min(y, h - 1)) * w + std::min(x, w - 1)];
  return out;
}

inline Tensor crop_top_left(const Tensor& img, int h, int w) {
  if (img.rank() != 3 || h < 1 || w < 1 || h > img.dim(1) || w > img.dim(2))
    throw std::invalid_argument("crop_top_left: bad crop");
  const int c = img.dim(0), hs = img.dim(1), ws = img.dim(2);
  if (h == hs && w == ws) return img;
  Tensor out({c, h, w});
  for (int i = 0; i < c; ++i)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(static_cast<int64_t>(i) * h + y) * w + x] =
            img[(static_cast<int64_t>(i) * hs + y) * ws + x];
  return out;
}

}  // namespace cmamba

#endif  // CMAMBA_IMAGE_HPP
