#include "deidforge/toyfaces.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "deidforge/errors.hpp"

namespace deidforge::toyfaces {

using facegeom::AffineTransform;
using facegeom::LandmarkSet;
using facegeom::Point;

namespace {

void check(const char* name, const Range& r, double v) {
  if (!std::isfinite(v) || !r.contains(v))
    throw InvalidParameterError(std::string(name) + " = " + std::to_string(v) + " outside [" +
                                std::to_string(r.lo) + ", " + std::to_string(r.hi) + "]");
}

// Vertical layout in face-local units (y down, half-height 1).
constexpr double kBrowY = -0.42;
constexpr double kBrowArch = 0.06;
constexpr double kEyeY = -0.22;
constexpr double kEyeHalfWidth = 0.15;  // of face half-width
constexpr double kEyeHalfHeight = 0.06;
constexpr double kNoseTop = -0.20;
constexpr double kMouthY = 0.48;
constexpr double kMouthHalfWidth = 0.36;  // of face half-width
constexpr double kUpperLip = 0.06;
constexpr double kLowerLip = 0.09;
constexpr double kSmile = 0.03;

}  // namespace

void IdentityParams::validate() const {
  check("skin_r", kSkinRange, skin_r);
  check("skin_g", kSkinRange, skin_g);
  check("skin_b", kSkinRange, skin_b);
  check("aspect", kAspectRange, aspect);
  check("eye_spacing", kEyeSpacingRange, eye_spacing);
  check("brow_thickness", kBrowThicknessRange, brow_thickness);
  check("nose_length", kNoseLengthRange, nose_length);
}

std::array<double, 7> IdentityParams::normalized() const {
  auto n = [](const Range& r, double v) { return (v - r.lo) / r.span(); };
  return {n(kSkinRange, skin_r),         n(kSkinRange, skin_g),
          n(kSkinRange, skin_b),         n(kAspectRange, aspect),
          n(kEyeSpacingRange, eye_spacing), n(kBrowThicknessRange, brow_thickness),
          n(kNoseLengthRange, nose_length)};
}

IdentityParams IdentityParams::middle() {
  return {kSkinRange.at(0.5),          kSkinRange.at(0.5),       kSkinRange.at(0.5),
          kAspectRange.at(0.5),        kEyeSpacingRange.at(0.5), kBrowThicknessRange.at(0.5),
          kNoseLengthRange.at(0.5)};
}

IdentityParams IdentityParams::random(SplitMix64& rng) {
  IdentityParams p;
  p.skin_r = kSkinRange.at(rng.uniform());
  p.skin_g = kSkinRange.at(rng.uniform());
  p.skin_b = kSkinRange.at(rng.uniform());
  p.aspect = kAspectRange.at(rng.uniform());
  p.eye_spacing = kEyeSpacingRange.at(rng.uniform());
  p.brow_thickness = kBrowThicknessRange.at(rng.uniform());
  p.nose_length = kNoseLengthRange.at(rng.uniform());
  return p;
}

bool separable(const IdentityParams& a, const IdentityParams& b) {
  const auto na = a.normalized(), nb = b.normalized();
  int far = 0;
  for (std::size_t i = 0; i < na.size(); ++i)
    if (std::fabs(na[i] - nb[i]) >= 0.2) ++far;
  return far >= 2;
}

void AttributeParams::validate() const {
  check("mouth_curvature", kMouthCurvatureRange, mouth_curvature);
  check("rotation_deg", kRotationRange, rotation_deg);
  check("illumination", kIlluminationRange, illumination);
  check("jitter_x", kJitterRange, jitter_x);
  check("jitter_y", kJitterRange, jitter_y);
}

AttributeParams AttributeParams::random(SplitMix64& rng) {
  AttributeParams a;
  a.mouth_curvature = kMouthCurvatureRange.at(rng.uniform());
  a.rotation_deg = kRotationRange.at(rng.uniform());
  a.illumination = kIlluminationRange.at(rng.uniform());
  a.jitter_x = kJitterRange.at(rng.uniform());
  a.jitter_y = kJitterRange.at(rng.uniform());
  return a;
}

LandmarkSet local_landmarks(const IdentityParams& id, double curvature) {
  const double w = id.aspect;
  std::vector<Point> p(facegeom::kLandmarkCount);
  // Only the image-left half is computed; the right half is its mirror, so
  // frontal renders are symmetric up to rounding of the placement.
  auto set_pair = [&](int left, int right, Point q) {
    p[left] = q;
    p[right] = {-q.x, q.y};
  };

  // Jaw: lower half of the head ellipse, from ear level round the chin.
  for (int j = 0; j < 8; ++j) {
    const double phi = std::numbers::pi * (1.0 - j / 16.0);
    set_pair(j, 16 - j, {w * std::cos(phi), std::sin(phi)});
  }
  p[8] = {0.0, 1.0};

  const double eye_x = -id.eye_spacing * w;
  const double brow_half = 0.25 * w;
  for (int k = 0; k < 5; ++k) {
    const double t = -1.0 + k / 2.0;  // outer to inner
    set_pair(17 + k, 26 - k, {eye_x + t * brow_half, kBrowY - kBrowArch * (1.0 - t * t)});
  }

  const double tip = kNoseTop + id.nose_length;
  for (int k = 0; k < 4; ++k) p[27 + k] = {0.0, kNoseTop + id.nose_length * k / 3.0};
  const double nose_half = 0.12 * w;
  auto nostril = [&](double u) {
    return Point{u, tip + 0.04 + 0.02 * (1.0 - (u / nose_half) * (u / nose_half))};
  };
  set_pair(31, 35, nostril(-nose_half));
  set_pair(32, 34, nostril(-0.5 * nose_half));
  p[33] = nostril(0.0);

  const double ew = kEyeHalfWidth * w, eh = kEyeHalfHeight;
  set_pair(36, 45, {eye_x - ew, kEyeY});
  set_pair(37, 44, {eye_x - ew / 3.0, kEyeY - eh});
  set_pair(38, 43, {eye_x + ew / 3.0, kEyeY - eh});
  set_pair(39, 42, {eye_x + ew, kEyeY});
  set_pair(40, 47, {eye_x + ew / 3.0, kEyeY + eh});
  set_pair(41, 46, {eye_x - ew / 3.0, kEyeY + eh});

  const double mw = kMouthHalfWidth * w;
  auto lip = [&](double u, double height) {
    const double r = u / mw;
    return Point{u, kMouthY + height * (1.0 - r * r) - curvature * kSmile * r * r};
  };
  set_pair(48, 54, lip(-mw, 0.0));
  set_pair(49, 53, lip(-0.6 * mw, -kUpperLip));
  set_pair(50, 52, lip(-0.25 * mw, -kUpperLip));
  p[51] = lip(0.0, -kUpperLip);
  set_pair(59, 55, lip(-0.6 * mw, kLowerLip));
  set_pair(58, 56, lip(-0.3 * mw, kLowerLip));
  p[57] = lip(0.0, kLowerLip);

  const double iw = 0.8 * mw;
  set_pair(60, 64, lip(-iw, 0.0));
  set_pair(61, 63, lip(-0.45 * iw, -0.015));
  p[62] = lip(0.0, -0.015);
  set_pair(67, 65, lip(-0.45 * iw, 0.02));
  p[66] = lip(0.0, 0.02);
  return LandmarkSet(std::move(p));
}

AffineTransform placement(const AttributeParams& attr, int size) {
  const double s = kFaceScale * size;
  const double cx = (size - 1) / 2.0 + attr.jitter_x * kMaxJitter * size;
  const double cy = (size - 1) / 2.0 + attr.jitter_y * kMaxJitter * size;
  const double th = attr.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), sn = std::sin(th);
  return {{s * c, -s * sn, cx, s * sn, s * c, cy}};
}

namespace {

struct Rgb {
  double r, g, b;
};

bool inside_polygon(const std::vector<Point>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

double segment_distance(Point a, Point b, double x, double y) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((x - a.x) * dx + (y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - x, ey = a.y + t * dy - y;
  return std::sqrt(ex * ex + ey * ey);
}

double polyline_distance(const std::vector<Point>& line, double x, double y) {
  double d = 1e30;
  for (std::size_t i = 0; i + 1 < line.size(); ++i) d = std::min(d, segment_distance(line[i], line[i + 1], x, y));
  return d;
}

std::vector<Point> pick(const LandmarkSet& l, int from, int to) {
  std::vector<Point> out;
  for (int i = from; i <= to; ++i) out.push_back(l[i]);
  return out;
}

// Everything needed to shade one face-local sample point.
struct Scene {
  IdentityParams id;
  LandmarkSet lm;
  std::vector<Point> brows[2];
  std::vector<Point> eyes[2];
  Point eye_center[2];
  std::vector<Point> nose_bridge, nose_base, mouth, mouth_line;

  Rgb shade(double u, double v) const {
    const Rgb background{0.55, 0.62, 0.70};
    const double w = id.aspect;
    if ((u / w) * (u / w) + v * v > 1.0) return background;
    const Rgb skin{id.skin_r, id.skin_g, id.skin_b};

    const double half = id.brow_thickness / 2.0;
    for (const auto& b : brows)
      if (v < kBrowY + 0.1 && polyline_distance(b, u, v) <= half) return {0.16, 0.11, 0.08};

    for (int e = 0; e < 2; ++e) {
      if (std::fabs(v - kEyeY) > kEyeHalfHeight + 0.01) break;
      if (!inside_polygon(eyes[e], u, v)) continue;
      const double du = u - eye_center[e].x, dv = v - eye_center[e].y;
      const double r2 = du * du + dv * dv;
      if (r2 <= 0.02 * 0.02) return {0.05, 0.05, 0.05};
      if (r2 <= 0.045 * 0.045) return {0.22, 0.32, 0.50};
      return {0.95, 0.95, 0.93};
    }

    if (std::fabs(u) < 0.2 * w && v > kNoseTop - 0.02 && v < kMouthY - 0.08) {
      if (polyline_distance(nose_bridge, u, v) <= 0.0125 || polyline_distance(nose_base, u, v) <= 0.0125)
        return {skin.r * 0.7, skin.g * 0.7, skin.b * 0.7};
    }

    if (v > kMouthY - 0.2 && inside_polygon(mouth, u, v)) {
      if (polyline_distance(mouth_line, u, v) <= 0.008) return {0.30, 0.08, 0.08};
      return {0.78, 0.32, 0.32};
    }
    return skin;
  }
};

}  // namespace

Render render_face(const IdentityParams& id, const AttributeParams& attr, int size) {
  id.validate();
  attr.validate();
  if (size < 16) throw InvalidParameterError("render size must be at least 16");

  Scene sc{id, local_landmarks(id, attr.mouth_curvature), {}, {}, {}, {}, {}, {}, {}};
  sc.brows[0] = pick(sc.lm, 17, 21);
  sc.brows[1] = pick(sc.lm, 22, 26);
  sc.eyes[0] = pick(sc.lm, 36, 41);
  sc.eyes[1] = pick(sc.lm, 42, 47);
  sc.eye_center[0] = {(sc.lm[36].x + sc.lm[39].x) / 2.0, kEyeY};
  sc.eye_center[1] = {(sc.lm[42].x + sc.lm[45].x) / 2.0, kEyeY};
  sc.nose_bridge = pick(sc.lm, 27, 30);
  sc.nose_base = pick(sc.lm, 31, 35);
  sc.mouth = pick(sc.lm, 48, 59);
  sc.mouth_line = pick(sc.lm, 60, 64);

  const AffineTransform place = placement(attr, size);
  const AffineTransform to_local = place.inverse();

  Render out{Image(size, size, 3), LandmarkSet()};
  constexpr int kSuper = 4;
  const double gain = attr.illumination;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double r = 0, g = 0, b = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const Point q = to_local.apply({x + (sx + 0.5) / kSuper - 0.5, y + (sy + 0.5) / kSuper - 0.5});
          const Rgb c = sc.shade(q.x, q.y);
          r += c.r;
          g += c.g;
          b += c.b;
        }
      constexpr double inv = 1.0 / (kSuper * kSuper);
      out.image.at(x, y, 0) = static_cast<float>(std::min(1.0, r * inv * gain));
      out.image.at(x, y, 1) = static_cast<float>(std::min(1.0, g * inv * gain));
      out.image.at(x, y, 2) = static_cast<float>(std::min(1.0, b * inv * gain));
    }

  std::vector<Point> pts(facegeom::kLandmarkCount);
  for (int i = 0; i < facegeom::kLandmarkCount; ++i) pts[i] = place.apply(sc.lm[i]);
  out.landmarks = LandmarkSet(std::move(pts));
  return out;
}

Render render_sample(const IdentityParams& id, std::uint64_t seed, int index, int size) {
  SplitMix64 rng = SplitMix64::derive(seed, {static_cast<std::uint64_t>(index)});
  return render_face(id, AttributeParams::random(rng), size);
}

AttributeParams sequence_attributes(int k) {
  const double t = 2.0 * std::numbers::pi * k;
  AttributeParams a;
  a.rotation_deg = 8.0 * std::sin(t / 50.0);
  a.mouth_curvature = std::sin(t / 30.0);
  a.illumination = 1.0 + 0.2 * std::sin(t / 70.0);
  a.jitter_x = 0.5 * std::sin(t / 40.0);
  a.jitter_y = 0.5 * std::cos(t / 40.0);
  return a;
}

FaceSet generate_face_set(const std::string& subject_id, const IdentityParams& id, int n,
                          std::uint64_t seed, int render_size) {
  if (n < 1) throw InvalidParameterError("face set size must be at least 1");
  id.validate();
  FaceSet set;
  set.subject_id = subject_id;
  set.faces.reserve(n);
  set.source_landmarks.reserve(n);
  for (int i = 0; i < n; ++i) {
    const Render r = render_sample(id, seed, i, render_size);
    set.faces.push_back(facegeom::align_face(r.image, r.landmarks).face);
    set.source_landmarks.push_back(r.landmarks);
  }
  return set;
}

}  // namespace deidforge::toyfaces
