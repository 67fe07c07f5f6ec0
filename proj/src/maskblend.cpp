#include "deidforge/maskblend.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "deidforge/errors.hpp"

namespace deidforge::maskblend {

namespace {

using i64 = std::int64_t;

struct GridPoint {
  i64 x, y;
  bool operator<(const GridPoint& o) const { return x < o.x || (x == o.x && y < o.y); }
  bool operator==(const GridPoint&) const = default;
};

i64 cross(const GridPoint& o, const GridPoint& a, const GridPoint& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

i64 floor_div(i64 a, i64 b) {
  i64 q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

i64 ceil_div(i64 a, i64 b) { return -floor_div(-a, b); }

GridPoint snap(Point p) { return {to_grid(p.x), to_grid(p.y)}; }

Point from_grid(GridPoint g) {
  return {static_cast<double>(g.x) / kSubpixel, static_cast<double>(g.y) / kSubpixel};
}

// Andrew's monotone chain. Collinear points are dropped.
std::vector<GridPoint> convex_hull(std::vector<GridPoint> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<GridPoint> h(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], p) <= 0) --k;
    h[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  return h;
}

std::vector<GridPoint> grid_hull(const LandmarkSet& landmarks) {
  std::vector<GridPoint> pts;
  for (const Point& p : hull_points(landmarks)) pts.push_back(snap(p));
  auto hull = convex_hull(std::move(pts));
  if (hull.size() < 3) throw DegenerateMaskError("mask hull points are collinear");
  return hull;
}

}  // namespace

std::int64_t to_grid(double v) {
  if (!std::isfinite(v) || std::fabs(v) > 1e12) throw InvalidInputError("mask coordinate out of range");
  return static_cast<i64>(std::llround(v * kSubpixel));
}

std::array<Point, 4> interpolate_side(Point p0, Point p5) {
  // In units of 1/(15*256) px for x and 1/(5*256) px for y every step is an
  // exact integer.
  const i64 x0 = to_grid(p0.x), x5 = to_grid(p5.x), y0 = to_grid(p0.y), y5 = to_grid(p5.y);
  const i64 dx = x5 - x0, dy = y5 - y0;
  std::array<Point, 4> out;
  i64 x = 15 * x0;
  for (int i = 1; i <= 4; ++i) {
    x += i * dx;
    const i64 y = 5 * y0 + i * dy;
    out[i - 1] = {static_cast<double>(x) / (15.0 * kSubpixel), static_cast<double>(y) / (5.0 * kSubpixel)};
  }
  return out;
}

std::vector<Point> hull_points(const LandmarkSet& l) {
  std::vector<Point> pts;
  for (int i = 17; i <= 26; ++i) pts.push_back(l[i]);
  pts.push_back(l[48]);
  for (int i = 54; i <= 59; ++i) pts.push_back(l[i]);
  for (const Point& p : interpolate_side(l[17], l[48])) pts.push_back(p);
  for (const Point& p : interpolate_side(l[26], l[54])) pts.push_back(p);
  return pts;
}

std::vector<Point> mask_hull(const LandmarkSet& landmarks) {
  std::vector<Point> out;
  for (const GridPoint& g : grid_hull(landmarks)) out.push_back(from_grid(g));
  return out;
}

Image build_mask(const LandmarkSet& landmarks, int img_w, int img_h) {
  const std::vector<GridPoint> hull = grid_hull(landmarks);
  Image mask(img_w, img_h, 1, 0.0f);
  const std::size_t n = hull.size();
  i64 ymin = hull[0].y, ymax = hull[0].y;
  for (const auto& p : hull) {
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  // Row y is sampled at Y = y * 256. An edge covers rows with
  // min(ya, yb) <= Y < max(ya, yb); pixel columns X with left <= X*256 < right
  // are filled.
  const int row_lo = static_cast<int>(std::max<i64>(0, ceil_div(ymin, kSubpixel)));
  const int row_hi = static_cast<int>(std::min<i64>(img_h - 1, ceil_div(ymax, kSubpixel) - 1));
  for (int y = row_lo; y <= row_hi; ++y) {
    const i64 Y = static_cast<i64>(y) * kSubpixel;
    // Crossings as exact rationals num/den with den > 0.
    i64 lnum = 0, lden = 0, rnum = 0, rden = 0;
    bool have = false;
    for (std::size_t i = 0; i < n; ++i) {
      GridPoint a = hull[i], b = hull[(i + 1) % n];
      if (a.y == b.y) continue;
      if (a.y > b.y) std::swap(a, b);
      if (Y < a.y || Y >= b.y) continue;
      const i64 den = b.y - a.y;
      const i64 num = a.x * den + (Y - a.y) * (b.x - a.x);
      if (!have) {
        lnum = rnum = num;
        lden = rden = den;
        have = true;
        continue;
      }
      if (static_cast<__int128>(num) * lden < static_cast<__int128>(lnum) * den) {
        lnum = num;
        lden = den;
      }
      if (static_cast<__int128>(num) * rden > static_cast<__int128>(rnum) * den) {
        rnum = num;
        rden = den;
      }
    }
    if (!have) continue;
    // X*256 >= lnum/lden  <=>  X >= ceil(lnum / (lden*256)); X*256 < rnum/rden.
    const i64 x_lo = std::max<i64>(0, ceil_div(lnum, lden * kSubpixel));
    const i64 x_hi = std::min<i64>(img_w - 1, ceil_div(rnum, rden * kSubpixel) - 1);
    for (i64 x = x_lo; x <= x_hi; ++x) mask.at(static_cast<int>(x), y) = 1.0f;
  }
  return mask;
}

double distance_to_polygon(const std::vector<Point>& poly, Point p) {
  bool inside = true;
  double best = std::numeric_limits<double>::infinity();
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = poly[i], b = poly[(i + 1) % n];
    const double ex = b.x - a.x, ey = b.y - a.y;
    // Counter-clockwise in a y-down frame means interior on the left of
    // (ex, ey) in the usual y-up sense, i.e. cross >= 0.
    if (ex * (p.y - a.y) - ey * (p.x - a.x) < 0) inside = false;
    const double len2 = ex * ex + ey * ey;
    double t = len2 > 0 ? ((p.x - a.x) * ex + (p.y - a.y) * ey) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    best = std::min(best, std::hypot(a.x + t * ex - p.x, a.y + t * ey - p.y));
  }
  return inside ? 0.0 : best;
}

double feather_sigma(double face_width_px, double scale) {
  return std::max(1.0, scale * face_width_px);
}

double face_width(const LandmarkSet& l) { return std::hypot(l[16].x - l[0].x, l[16].y - l[0].y); }

namespace {

// Felzenszwalb-Huttenlocher lower envelope of parabolas, in place on f.
// "No support" is kFar rather than infinity so the intersection formula
// stays finite.
constexpr double kFar = 1e20;

void edt_1d(std::vector<double>& f) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(n), z(n + 1);
  std::vector<int> v(n);
  auto meet = [&](int q, int r) {
    return ((f[q] + static_cast<double>(q) * q) - (f[r] + static_cast<double>(r) * r)) / (2.0 * (q - r));
  };
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    double s = meet(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  for (int q = 0, j = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double dq = q - v[j];
    d[q] = dq * dq + f[v[j]];
  }
  f = std::move(d);
}

}  // namespace

std::vector<double> squared_distance_to_support(const Image& mask) {
  const int w = mask.width, h = mask.height;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < dist.size(); ++i) dist[i] = mask.pixels[i * mask.channels] != 0.0f ? 0.0 : kFar;
  std::vector<double> line(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) line[y] = dist[static_cast<std::size_t>(y) * w + x];
    edt_1d(line);
    for (int y = 0; y < h; ++y) dist[static_cast<std::size_t>(y) * w + x] = line[y];
  }
  std::vector<double> row(w);
  for (int y = 0; y < h; ++y) {
    std::copy_n(dist.begin() + static_cast<std::size_t>(y) * w, w, row.begin());
    edt_1d(row);
    std::copy(row.begin(), row.end(), dist.begin() + static_cast<std::size_t>(y) * w);
  }
  for (double& d : dist)
    if (d >= kFar / 2) d = inf;
  return dist;
}

Image feather_sigma_px(const Image& mask, double sigma) {
  if (mask.channels != 1) throw InvalidInputError("feather expects a single-channel mask");
  if (!(sigma > 0.0)) throw InvalidParameterError("feather sigma must be positive");
  const int w = mask.width, h = mask.height;
  const int r = static_cast<int>(std::floor(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double total = 0.0;
  for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= total;

  std::vector<double> tmp(static_cast<std::size_t>(w) * h, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = std::max(-r, -x); i <= std::min(r, w - 1 - x); ++i) s += k[i + r] * mask.at(x + i, y);
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  const std::vector<double> d2 = squared_distance_to_support(mask);
  const double limit = 9.0 * sigma * sigma;
  Image out(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * w + x;
      if (d2[idx] > limit) continue;
      double s = 0.0;
      for (int i = std::max(-r, -y); i <= std::min(r, h - 1 - y); ++i)
        s += k[i + r] * tmp[static_cast<std::size_t>(y + i) * w + x];
      out.pixels[idx] = static_cast<float>(std::clamp(s, 0.0, 1.0));
    }
  return out;
}

Image feather(const Image& mask, double face_width_px, double scale) {
  return feather_sigma_px(mask, feather_sigma(face_width_px, scale));
}

Image splice(const Image& original, const Image& synthesized, const Image& alpha) {
  if (!original.same_shape(synthesized) || alpha.width != original.width || alpha.height != original.height ||
      alpha.channels != 1)
    throw ShapeError("splice needs equal resolutions and a single-channel alpha");
  Image out = original;
  const int c = original.channels;
  for (std::size_t i = 0, n = alpha.pixels.size(); i < n; ++i) {
    const float a = alpha.pixels[i];
    if (a == 0.0f) continue;
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t j = i * c + ch;
      out.pixels[j] = a * synthesized.pixels[j] + (1.0f - a) * original.pixels[j];
    }
  }
  return out;
}

}  // namespace deidforge::maskblend
