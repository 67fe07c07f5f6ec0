#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace deidforge {

/// Interleaved float image, row-major HWC, values nominally in [0, 1].
/// Pixel (x, y) has its center at integer coordinates.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f);

  bool empty() const { return pixels.empty(); }
  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  float& at(int x, int y, int c = 0) { return pixels[index(x, y, c)]; }
  float at(int x, int y, int c = 0) const { return pixels[index(x, y, c)]; }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  bool operator==(const Image&) const = default;
};

/// Rectangle [x, x+w) x [y, y+h) cut out of img. Throws InvalidInputError if
/// it does not fit.
Image crop(const Image& img, int x, int y, int w, int h);

/// ITU-R 601 luma for RGB input; single-channel input is copied.
Image to_luma(const Image& img);

/// Box-filter downsample by area averaging to an arbitrary smaller size.
Image resize_area(const Image& img, int w, int h);

void clamp01(Image& img);

/// Peak signal-to-noise ratio in dB for unit range, over pixels where
/// `region` is nonzero (all pixels if region is empty). Infinite when equal.
double psnr(const Image& a, const Image& b, std::span<const std::uint8_t> region = {});

/// 8-bit PNG; values are clamped and rounded to the nearest level on write.
/// read_png returns 1 (gray) or 3 (RGB) channels; alpha is dropped.
void write_png(const Image& img, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

}  // namespace deidforge
