#include "deidforge/facegeom.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>

#include "deidforge/errors.hpp"

namespace deidforge::facegeom {

LandmarkSet::LandmarkSet(std::vector<Point> points) : points_(std::move(points)) {
  if (points_.size() != kLandmarkCount)
    throw InvalidInputError("landmark set needs 68 points, got " + std::to_string(points_.size()));
  for (const Point& p : points_)
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw InvalidInputError("landmark coordinates must be finite");
}

const std::array<int, kLandmarkCount>& mirror_index() {
  static const std::array<int, kLandmarkCount> table = [] {
    std::array<int, kLandmarkCount> t{};
    for (int i = 0; i < kLandmarkCount; ++i) t[i] = i;
    auto pair = [&t](int a, int b) {
      t[a] = b;
      t[b] = a;
    };
    for (int j = 0; j < 8; ++j) pair(j, 16 - j);
    for (int j = 0; j < 5; ++j) pair(17 + j, 26 - j);
    pair(31, 35);
    pair(32, 34);
    pair(36, 45);
    pair(37, 44);
    pair(38, 43);
    pair(39, 42);
    pair(40, 47);
    pair(41, 46);
    pair(48, 54);
    pair(49, 53);
    pair(50, 52);
    pair(55, 59);
    pair(56, 58);
    pair(60, 64);
    pair(61, 63);
    pair(65, 67);
    return t;
  }();
  return table;
}

LandmarkSet LandmarkSet::mirrored(double axis_x) const {
  std::vector<Point> out(kLandmarkCount);
  const auto& mi = mirror_index();
  for (int i = 0; i < kLandmarkCount; ++i) out[mi[i]] = {2.0 * axis_x - points_[i].x, points_[i].y};
  return LandmarkSet(std::move(out));
}

AffineTransform AffineTransform::inverse() const {
  const double det = determinant();
  if (!std::isfinite(det) || std::fabs(det) < 1e-12)
    throw DegenerateTransformError("affine transform is not invertible");
  const double a = m[4] / det, b = -m[1] / det, c = -m[3] / det, d = m[0] / det;
  return {{a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])}};
}

AffineTransform AffineTransform::after(const AffineTransform& o) const {
  return {{m[0] * o.m[0] + m[1] * o.m[3], m[0] * o.m[1] + m[1] * o.m[4], m[0] * o.m[2] + m[1] * o.m[5] + m[2],
           m[3] * o.m[0] + m[4] * o.m[3], m[3] * o.m[1] + m[4] * o.m[4], m[3] * o.m[2] + m[4] * o.m[5] + m[5]}};
}

AffineTransform estimate_affine(std::span<const Point> src, std::span<const Point> dst) {
  if (src.size() != dst.size()) throw InvalidInputError("estimate_affine needs matched point lists");
  if (src.size() < 3) throw DegenerateLandmarksError("estimate_affine needs at least 3 points");

  // The six normal equations split into two 3x3 systems sharing one matrix:
  // sum [x y 1]^T [x y 1] times (a b tx) and (c d ty).
  Eigen::Matrix3d n = Eigen::Matrix3d::Zero();
  Eigen::Vector3d rx = Eigen::Vector3d::Zero(), ry = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Eigen::Vector3d v(src[i].x, src[i].y, 1.0);
    n.noalias() += v * v.transpose();
    rx += v * dst[i].x;
    ry += v * dst[i].y;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(n, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues()(0), hi = eig.eigenvalues()(2);
  if (!(lo > 0.0) || hi / lo > 1e12)
    throw DegenerateLandmarksError("landmarks are collinear or coincident");

  const auto ldlt = n.ldlt();
  const Eigen::Vector3d px = ldlt.solve(rx), py = ldlt.solve(ry);
  return {{px(0), px(1), px(2), py(0), py(1), py(2)}};
}

AffineTransform estimate_affine(const LandmarkSet& src, const LandmarkSet& dst) {
  return estimate_affine(src.points(), dst.points());
}

float sample_bilinear(const Image& img, double x, double y, int channel) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
  const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const float fx = static_cast<float>(x - x0), fy = static_cast<float>(y - y0);
  // a + t (b - a) keeps integer positions and flat regions exact.
  const float v00 = img.at(x0, y0, channel), v10 = img.at(x1, y0, channel);
  const float v01 = img.at(x0, y1, channel), v11 = img.at(x1, y1, channel);
  const float top = v00 + fx * (v10 - v00);
  const float bottom = v01 + fx * (v11 - v01);
  return top + fy * (bottom - top);
}

Image warp_image(const Image& img, const AffineTransform& transform, int out_w, int out_h) {
  const AffineTransform inv = transform.inverse();
  Image out(out_w, out_h, img.channels);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const Point s = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = sample_bilinear(img, s.x, s.y, c);
    }
  return out;
}

double alignment_rms(const LandmarkSet& landmarks, const AffineTransform& transform) {
  const LandmarkSet& tpl = canonical_template();
  double se = 0.0;
  for (int i = 0; i < kLandmarkCount; ++i) {
    const Point p = transform.apply(landmarks[i]);
    se += (p.x - tpl[i].x) * (p.x - tpl[i].x) + (p.y - tpl[i].y) * (p.y - tpl[i].y);
  }
  return std::sqrt(se / kLandmarkCount);
}

Alignment align_face(const Image& img, const LandmarkSet& landmarks) {
  Alignment a;
  a.transform = estimate_affine(landmarks, canonical_template());
  a.face = warp_image(img, a.transform, kCanonicalSize, kCanonicalSize);
  a.rms = alignment_rms(landmarks, a.transform);
  return a;
}

Image center_crop(const Image& face80) {
  if (face80.width != kCanonicalSize || face80.height != kCanonicalSize)
    throw InvalidInputError("center_crop expects an 80x80 aligned face");
  return crop(face80, kCropOffset, kCropOffset, kCropSize, kCropSize);
}

Unwarped unwarp_face(const Image& face64, const AffineTransform& transform, int orig_w, int orig_h) {
  if (face64.width != kCropSize || face64.height != kCropSize)
    throw InvalidInputError("unwarp_face expects a 64x64 face");
  // Original pixel p lands at transform(p) in the canonical frame, which is
  // transform(p) - offset in crop coordinates. Only the inverse direction is
  // needed, but an invertible transform is still required.
  (void)transform.inverse();
  const AffineTransform to_crop =
      AffineTransform::translation(-kCropOffset, -kCropOffset).after(transform);
  Unwarped u{Image(orig_w, orig_h, face64.channels),
             std::vector<std::uint8_t>(static_cast<std::size_t>(orig_w) * orig_h, 0)};
  const double hi = kCropSize - 1;
  for (int y = 0; y < orig_h; ++y)
    for (int x = 0; x < orig_w; ++x) {
      const Point s = to_crop.apply({static_cast<double>(x), static_cast<double>(y)});
      if (s.x < 0.0 || s.y < 0.0 || s.x > hi || s.y > hi) continue;
      u.valid[static_cast<std::size_t>(y) * orig_w + x] = 1;
      for (int c = 0; c < face64.channels; ++c) u.image.at(x, y, c) = sample_bilinear(face64, s.x, s.y, c);
    }
  return u;
}

}  // namespace deidforge::facegeom
