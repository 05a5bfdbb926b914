#include "irfusion/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace irfusion::img {

GrayImage::GrayImage(int w, int h, float fill) : width(w), height(h) {
  if (w < 1 || h < 1) throw std::invalid_argument("GrayImage: dimensions must be >= 1");
  px.assign(static_cast<size_t>(w) * h, fill);
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

GrayImage load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("load_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("load_png: init failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("load_png: init failure");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("load_png: failed reading " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);

  // Normalize every input to 8-bit gray.
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_strip_16(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  png_read_update_info(png, info);

  GrayImage out(static_cast<int>(w), static_cast<int>(h));
  std::vector<png_bytep> rows(h);
  std::vector<std::vector<uint8_t>> data(h, std::vector<uint8_t>(w));
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = data[y].data();
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x) {
      out.at(static_cast<int>(x), static_cast<int>(y)) = data[y][x] / 255.0f;
    }
  }
  return out;
}

void save_png(const std::string& path, const GrayImage& img) {
  if (img.width < 1 || img.height < 1) throw std::invalid_argument("save_png: empty image");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("save_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("save_png: init failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("save_png: init failure");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("save_png: failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<uint8_t> row(img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const float v = img.at(x, y);
      const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
      row[x] = static_cast<uint8_t>(std::lround(c * 255.0f));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

double bilinear_sample(const GrayImage& img, double x, double y, double fill) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  auto tap = [&](int xi, int yi) -> double {
    return img.in_bounds(xi, yi) ? img.at(xi, yi) : fill;
  };
  const double top = tap(x0, y0) * (1.0 - fx) + tap(x0 + 1, y0) * fx;
  const double bot = tap(x0, y0 + 1) * (1.0 - fx) + tap(x0 + 1, y0 + 1) * fx;
  return top * (1.0 - fy) + bot * fy;
}

bool sample_fully_inside(const GrayImage& img, double x, double y) {
  return x >= 0.0 && y >= 0.0 && x <= img.width - 1.0 && y <= img.height - 1.0;
}

GrayImage warp_image(const GrayImage& img, const geom::Homography& h, int out_w, int out_h,
                     float fill) {
  const geom::Homography hinv = h.inverse();
  GrayImage out(out_w, out_h, fill);
  const auto& m = hinv.h;
  for (int v = 0; v < out_h; ++v) {
    for (int u = 0; u < out_w; ++u) {
      const double w = m[6] * u + m[7] * v + m[8];
      if (std::abs(w) < 1e-12) continue;
      const double sx = (m[0] * u + m[1] * v + m[2]) / w;
      const double sy = (m[3] * u + m[4] * v + m[5]) / w;
      out.at(u, v) = static_cast<float>(bilinear_sample(img, sx, sy, fill));
    }
  }
  return out;
}

std::vector<uint8_t> warp_valid_mask(const geom::Homography& h, int src_w, int src_h,
                                     int out_w, int out_h) {
  const geom::Homography hinv = h.inverse();
  std::vector<uint8_t> mask(static_cast<size_t>(out_w) * out_h, 0);
  const auto& m = hinv.h;
  for (int v = 0; v < out_h; ++v) {
    for (int u = 0; u < out_w; ++u) {
      const double w = m[6] * u + m[7] * v + m[8];
      if (std::abs(w) < 1e-12) continue;
      const double sx = (m[0] * u + m[1] * v + m[2]) / w;
      const double sy = (m[3] * u + m[4] * v + m[5]) / w;
      if (sx >= 0.0 && sy >= 0.0 && sx <= src_w - 1.0 && sy <= src_h - 1.0) {
        mask[static_cast<size_t>(v) * out_w + u] = 1;
      }
    }
  }
  return mask;
}

GrayImage undistort_image(const GrayImage& img, const geom::Intrinsics& k,
                          const geom::Distortion& d) {
  if (k.fx <= 0.0 || k.fy <= 0.0) throw std::invalid_argument("undistort_image: invalid intrinsics");
  GrayImage out(img.width, img.height, 0.0f);
  for (int v = 0; v < img.height; ++v) {
    for (int u = 0; u < img.width; ++u) {
      const geom::NormalizedPoint n = geom::to_normalized({double(u), double(v)}, k);
      const geom::PixelPoint src = geom::to_pixel(geom::distort(n, d), k);
      out.at(u, v) = static_cast<float>(bilinear_sample(img, src.u, src.v, 0.0));
    }
  }
  return out;
}

GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h) {
  GrayImage out(out_w, out_h);
  const double sx = static_cast<double>(img.width) / out_w;
  const double sy = static_cast<double>(img.height) / out_h;
  for (int v = 0; v < out_h; ++v) {
    for (int u = 0; u < out_w; ++u) {
      // Align pixel-area centers so that identity size is an exact copy.
      const double x = (u + 0.5) * sx - 0.5;
      const double y = (v + 0.5) * sy - 0.5;
      const double cx = std::min(std::max(x, 0.0), img.width - 1.0);
      const double cy = std::min(std::max(y, 0.0), img.height - 1.0);
      out.at(u, v) = static_cast<float>(bilinear_sample(img, cx, cy, 0.0));
    }
  }
  return out;
}

}  // namespace irfusion::img
