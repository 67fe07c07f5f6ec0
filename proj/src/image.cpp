#include "deidforge/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <string>

#include "deidforge/errors.hpp"

namespace deidforge {

Image::Image(int w, int h, int c, float fill) : width(w), height(h), channels(c) {
  if (w <= 0 || h <= 0 || c <= 0) throw InvalidInputError("image dimensions must be positive");
  pixels.assign(static_cast<std::size_t>(w) * h * c, fill);
}

Image crop(const Image& img, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || w <= 0 || h <= 0 || x + w > img.width || y + h > img.height)
    throw InvalidInputError("crop rectangle outside image");
  Image out(w, h, img.channels);
  for (int r = 0; r < h; ++r)
    std::copy_n(img.pixels.begin() + img.index(x, y + r), static_cast<std::size_t>(w) * img.channels,
                out.pixels.begin() + out.index(0, r));
  return out;
}

Image to_luma(const Image& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw InvalidInputError("luma needs a 1- or 3-channel image");
  Image out(img.width, img.height, 1);
  for (std::size_t i = 0, n = out.pixels.size(); i < n; ++i) {
    const float* p = &img.pixels[i * 3];
    out.pixels[i] = static_cast<float>(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
  }
  return out;
}

Image resize_area(const Image& img, int w, int h) {
  if (w <= 0 || h <= 0 || w > img.width || h > img.height)
    throw InvalidInputError("resize_area only shrinks");
  Image out(w, h, img.channels);
  const double sx = static_cast<double>(img.width) / w, sy = static_cast<double>(img.height) / h;
  std::vector<double> acc(img.channels);
  for (int oy = 0; oy < h; ++oy) {
    const double y0 = oy * sy, y1 = y0 + sy;
    for (int ox = 0; ox < w; ++ox) {
      const double x0 = ox * sx, x1 = x0 + sx;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int y = static_cast<int>(y0); y < std::min<double>(std::ceil(y1), img.height); ++y) {
        const double wy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        if (wy <= 0) continue;
        for (int x = static_cast<int>(x0); x < std::min<double>(std::ceil(x1), img.width); ++x) {
          const double wx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          if (wx <= 0) continue;
          for (int c = 0; c < img.channels; ++c) acc[c] += wx * wy * img.at(x, y, c);
        }
      }
      for (int c = 0; c < img.channels; ++c) out.at(ox, oy, c) = static_cast<float>(acc[c] / (sx * sy));
    }
  }
  return out;
}

void clamp01(Image& img) {
  for (float& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

double psnr(const Image& a, const Image& b, std::span<const std::uint8_t> region) {
  if (!a.same_shape(b)) throw InvalidInputError("psnr needs images of the same shape");
  const std::size_t npix = static_cast<std::size_t>(a.width) * a.height;
  if (!region.empty() && region.size() != npix) throw InvalidInputError("psnr region size mismatch");
  double se = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < npix; ++i) {
    if (!region.empty() && !region[i]) continue;
    for (int c = 0; c < a.channels; ++c) {
      const double d = a.pixels[i * a.channels + c] - b.pixels[i * a.channels + c];
      se += d * d;
    }
    n += a.channels;
  }
  if (n == 0) throw InvalidInputError("psnr over an empty region");
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(n) / se);
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw IoError(std::string("png: ") + msg); }
void png_warn(png_structp, png_const_charp) {}

}  // namespace

void write_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) throw InvalidInputError("png needs 1 or 3 channels");
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * img.channels);
  try {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, img.width, img.height, 8,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
      const float* src = &img.pixels[img.index(0, y)];
      for (std::size_t i = 0; i < row.size(); ++i)
        row[i] = static_cast<png_byte>(std::lround(std::clamp(src[i], 0.0f, 1.0f) * 255.0f));
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw IoError("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  Image img;
  try {
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int c = png_get_channels(png, info);
    if (c != 1 && c != 3) throw IoError("unsupported PNG channel layout: " + path.string());
    img = Image(w, h, c);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    for (int y = 0; y < h; ++y) {
      png_read_row(png, row.data(), nullptr);
      float* dst = &img.pixels[img.index(0, y)];
      for (int i = 0; i < w * c; ++i) dst[i] = row[i] / 255.0f;
    }
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace deidforge
