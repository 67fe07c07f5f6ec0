#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "deidforge/facegeom.hpp"
#include "deidforge/image.hpp"

namespace deidforge::maskblend {

using facegeom::LandmarkSet;
using facegeom::Point;

/// Mask geometry lives on a grid of 1/256 px so that hull and fill tests are
/// exact integer arithmetic.
inline constexpr std::int64_t kSubpixel = 256;

std::int64_t to_grid(double v);

/// The four points between p0 and p5:
///   x_i = x_{i-1} + i/15 (x5 - x0),   y_i = y0 + i/5 (y5 - y0).
/// Endpoints are snapped to the 1/256 px grid, the recurrence runs exactly in
/// integers, and each result is rounded once to double.
std::array<Point, 4> interpolate_side(Point p0, Point p5);

/// Brows (17-26), the mouth corners and lower lip (48, 54-59), and four
/// interpolated points on each side (17 -> 48 and 26 -> 54).
std::vector<Point> hull_points(const LandmarkSet& landmarks);

/// Convex hull in counter-clockwise order (image coordinates, y down), on
/// the 1/256 px grid. Throws DegenerateMaskError when the points are
/// collinear.
std::vector<Point> mask_hull(const LandmarkSet& landmarks);

/// Binary single-channel alpha: 1 where the pixel center lies inside the hull
/// (half-open on the right and bottom edges), clipped to the image.
Image build_mask(const LandmarkSet& landmarks, int img_w, int img_h);

/// Distance from a point to a convex polygon (0 inside).
double distance_to_polygon(const std::vector<Point>& polygon, Point p);

inline constexpr double kFeatherScale = 0.02;

/// sigma = max(1, scale * face_width_px).
double feather_sigma(double face_width_px, double scale = kFeatherScale);

/// Distance between the two outer jaw landmarks (0 and 16).
double face_width(const LandmarkSet& landmarks);

/// Separable Gaussian blur with radius floor(3 sigma), zero outside the image.
/// Pixels farther than 3 sigma (Euclidean) from every nonzero input pixel
/// are set to exactly 0, so the square kernel footprint never leaks past a
/// round 3 sigma band.
Image feather(const Image& mask, double face_width_px, double scale = kFeatherScale);
Image feather_sigma_px(const Image& mask, double sigma);

/// Squared Euclidean distance from every pixel to the nearest pixel with a
/// nonzero value (infinity when there is none).
std::vector<double> squared_distance_to_support(const Image& mask);

/// out = alpha * synthesized + (1 - alpha) * original. Throws ShapeError on a
/// resolution mismatch.
Image splice(const Image& original, const Image& synthesized, const Image& alpha);

}  // namespace deidforge::maskblend
