#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "deidforge/image.hpp"

namespace deidforge::facegeom {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

inline constexpr int kLandmarkCount = 68;

/// 68 points in iBUG order: 0-16 jaw, 17-26 brows, 27-35 nose, 36-47 eyes,
/// 48-67 mouth. Always exactly 68 finite points.
class LandmarkSet {
 public:
  LandmarkSet() : points_(kLandmarkCount) {}
  /// Throws InvalidInputError unless there are 68 finite points.
  explicit LandmarkSet(std::vector<Point> points);

  const std::vector<Point>& points() const { return points_; }
  const Point& operator[](int i) const { return points_[i]; }
  int size() const { return kLandmarkCount; }

  /// Reflection about the vertical line x = axis_x, with left/right indices
  /// swapped so the result is again in iBUG order.
  LandmarkSet mirrored(double axis_x) const;

  bool operator==(const LandmarkSet&) const = default;

 private:
  std::vector<Point> points_;
};

/// Index of the left/right counterpart of each landmark (self for midline points).
const std::array<int, kLandmarkCount>& mirror_index();

/// [a b tx; c d ty], row-major.
struct AffineTransform {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(double tx, double ty) { return {{1, 0, tx, 0, 1, ty}}; }

  Point apply(Point p) const { return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]}; }
  double determinant() const { return m[0] * m[4] - m[1] * m[3]; }
  /// Throws DegenerateTransformError for a singular or non-finite map.
  AffineTransform inverse() const;
  /// this after other: x -> this(other(x)).
  AffineTransform after(const AffineTransform& other) const;

  bool operator==(const AffineTransform&) const = default;
};

/// Least-squares affine map taking src onto dst. Throws
/// DegenerateLandmarksError when the normal matrix condition number
/// exceeds 1e12 (collinear or coincident points).
AffineTransform estimate_affine(std::span<const Point> src, std::span<const Point> dst);
AffineTransform estimate_affine(const LandmarkSet& src, const LandmarkSet& dst);

/// Bilinear sample with edge replication outside the image.
float sample_bilinear(const Image& img, double x, double y, int channel);

/// Output pixel q takes the input at transform^-1(q); transform maps input
/// coordinates to output coordinates.
Image warp_image(const Image& img, const AffineTransform& transform, int out_w, int out_h);

inline constexpr int kCanonicalSize = 80;
inline constexpr int kCropSize = 64;
inline constexpr int kCropOffset = (kCanonicalSize - kCropSize) / 2;
inline constexpr int kTemplateVersion = 1;

/// Frontal reference landmarks in the 80x80 canonical frame, symmetric about
/// x = 39.5.
const LandmarkSet& canonical_template();

struct Alignment {
  Image face;                 // 80x80
  AffineTransform transform;  // original image -> canonical frame
  double rms = 0.0;           // landmark residual against the template, px
};

Alignment align_face(const Image& img, const LandmarkSet& landmarks);

/// RMS distance between transform(landmarks) and the template.
double alignment_rms(const LandmarkSet& landmarks, const AffineTransform& transform);

/// Center 64x64 of an aligned 80x80 face.
Image center_crop(const Image& face80);

struct Unwarped {
  Image image;                       // orig_w x orig_h, zero where invalid
  std::vector<std::uint8_t> valid;   // 1 inside the warped 64x64 quad
};

/// Maps a 64x64 face (the center crop of the canonical frame) back into the
/// original image geometry using the inverse of the alignment transform.
Unwarped unwarp_face(const Image& face64, const AffineTransform& transform, int orig_w, int orig_h);

}  // namespace deidforge::facegeom
