#pragma once

// Finite-difference gradient checks. Every op has a float64 reference
// forward written here independently of the library; the library's float32
// backward is compared against central differences of that reference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deidforge/rng.hpp"
#include "deidforge/tensor.hpp"

namespace gradcheck {

using deidforge::SplitMix64;
using deidforge::tensor::Shape;
using deidforge::tensor::Tape;
using deidforge::tensor::Tensor;
namespace T = deidforge::tensor;

using Vec = std::vector<double>;

inline Vec to_double(const Tensor& t) {
  return Vec(t.data().begin(), t.data().end());
}

inline Tensor random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0,
                            double keep_away = 0.0) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) {
    double x;
    do x = rng.uniform(lo, hi);
    while (std::fabs(x) < keep_away);
    v = static_cast<float>(x);
  }
  return t;
}

// ---- float64 reference forwards ------------------------------------------

// in: [N,H,W,Cin] (N may be 1), kern: [k,k,Cin,Cout]
inline Vec ref_conv(const Vec& in, const Vec& kern, const Vec& bias, int n, int h, int w, int cin,
                    int k, int cout, int stride, int pad) {
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  Vec out(static_cast<std::size_t>(n) * ho * wo * cout);
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        for (int co = 0; co < cout; ++co) {
          double s = bias[co];
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              for (int ci = 0; ci < cin; ++ci)
                s += in[((static_cast<std::size_t>(b) * h + iy) * w + ix) * cin + ci] *
                     kern[((static_cast<std::size_t>(ky) * k + kx) * cin + ci) * cout + co];
            }
          out[((static_cast<std::size_t>(b) * ho + oy) * wo + ox) * cout + co] = s;
        }
  return out;
}

inline Vec ref_fc(const Vec& x, const Vec& wts, const Vec& b, int rows, int n, int m) {
  Vec y(static_cast<std::size_t>(rows) * m);
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < m; ++j) {
      double s = b[j];
      for (int i = 0; i < n; ++i) s += x[r * n + i] * wts[i * m + j];
      y[r * m + j] = s;
    }
  return y;
}

// [N,H,W,4C] -> [N,2H,2W,C]
inline Vec ref_shuffle(const Vec& x, int n, int h, int w, int c) {
  Vec y(x.size());
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int ch = 0; ch < c; ++ch)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              y[((static_cast<std::size_t>(b) * 2 * h + 2 * i + dy) * 2 * w + 2 * j + dx) * c + ch] =
                  x[((static_cast<std::size_t>(b) * h + i) * w + j) * 4 * c + ch * 4 + dy * 2 + dx];
  return y;
}

// [N,2H,2W,C] -> [N,H,W,4C]
inline Vec ref_unshuffle(const Vec& x, int n, int h2, int w2, int c) {
  Vec y(x.size());
  const int h = h2 / 2, w = w2 / 2;
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int ch = 0; ch < c; ++ch)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              y[((static_cast<std::size_t>(b) * h + i) * w + j) * 4 * c + ch * 4 + dy * 2 + dx] =
                  x[((static_cast<std::size_t>(b) * 2 * h + 2 * i + dy) * 2 * w + 2 * j + dx) * c + ch];
  return y;
}

// ---- checking --------------------------------------------------------------

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Scalarizes an op output with fixed random weights r: L = sum r_i y_i.
// On the library side this is y -> [1, n] -> fully_connected with W = r.
inline Tensor project(const Tensor& y, const Tensor& r, Tape& tape) {
  const int n = static_cast<int>(y.size());
  Tensor flat = T::reshape(y, {1, n}, &tape);
  Tensor w = T::reshape(r, {n, 1});
  Tensor out = T::fully_connected(flat, w, Tensor({1}, 0.0f), &tape);
  return T::reshape(out, {}, &tape);
}

// Max over all checked inputs of max|analytic - numeric| / max|numeric|.
// `library` builds the op on the tape from the given inputs and returns its
// output; `reference` evaluates it in float64.
inline double check(std::vector<Tensor> inputs, const std::vector<bool>& differentiable,
                    const std::function<Tensor(const std::vector<Tensor>&, Tape*)>& library,
                    const std::function<Vec(const std::vector<Vec>&)>& reference,
                    SplitMix64& rng, double h = 1e-3) {
  for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i].set_requires_grad(differentiable[i]);
  Tape tape;
  Tensor y = library(inputs, &tape);
  Tensor r = random_tensor(y.shape(), rng);
  Tensor loss = project(y, r, tape);
  T::backward(tape, loss);

  std::vector<Vec> xs;
  for (const Tensor& t : inputs) xs.push_back(to_double(t));
  const Vec rv = to_double(r);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!differentiable[i]) continue;
    Vec numeric(xs[i].size());
    for (std::size_t j = 0; j < xs[i].size(); ++j) {
      const double keep = xs[i][j];
      xs[i][j] = keep + h;
      const double up = dot(reference(xs), rv);
      xs[i][j] = keep - h;
      const double down = dot(reference(xs), rv);
      xs[i][j] = keep;
      numeric[j] = (up - down) / (2.0 * h);
    }
    auto analytic = inputs[i].grad();
    double diff = 0.0, scale = 0.0;
    for (std::size_t j = 0; j < numeric.size(); ++j) {
      diff = std::max(diff, std::fabs(analytic[j] - numeric[j]));
      scale = std::max(scale, std::fabs(numeric[j]));
    }
    worst = std::max(worst, diff / std::max(scale, 1e-12));
  }
  return worst;
}

struct OpResult {
  std::string op;
  double max_rel_error = 0.0;
};

// One case per op; `seed` varies shapes and values.
inline std::vector<OpResult> check_all_ops(std::uint64_t seed) {
  std::vector<OpResult> results;
  auto rng = SplitMix64::derive(seed, {0x67726164});

  auto conv_case = [&](const std::string& name, int n, int h, int w, int cin, int k, int cout,
                       int stride, int pad) {
    Shape in_shape = n == 0 ? Shape{h, w, cin} : Shape{n, h, w, cin};
    const int nn = std::max(n, 1);
    std::vector<Tensor> in{random_tensor(in_shape, rng), random_tensor({k, k, cin, cout}, rng),
                           random_tensor({cout}, rng)};
    double e = check(
        in, {true, true, true},
        [&](const std::vector<Tensor>& t, Tape* tape) {
          return T::conv2d(t[0], t[1], t[2], stride, pad, tape);
        },
        [&](const std::vector<Vec>& x) {
          return ref_conv(x[0], x[1], x[2], nn, h, w, cin, k, cout, stride, pad);
        },
        rng);
    results.push_back({name, e});
  };
  // Cover both the stride-2 GEMM path and the stride-1 few-output path.
  conv_case("conv2d/stride2", 2, 6 + static_cast<int>(rng.below(3)), 7, 3, 5, 6, 2, 2);
  conv_case("conv2d/3x3", 0, 5, 4 + static_cast<int>(rng.below(3)), 4, 3, 8, 1, 1);
  conv_case("conv2d/narrow-out", 2, 6, 5 + static_cast<int>(rng.below(3)), 5, 5, 3, 1, 2);
  conv_case("conv2d/nopad", 0, 5, 5, 2, 3, 2, 1, 0);

  {
    std::vector<Tensor> in{random_tensor({3, 4, 5}, rng, -2.0, 2.0, 0.05)};
    double e = check(
        in, {true},
        [](const std::vector<Tensor>& t, Tape* tape) { return T::leaky_relu(t[0], tape); },
        [](const std::vector<Vec>& x) {
          Vec y(x[0]);
          for (double& v : y) v = std::max(0.1 * v, v);
          return y;
        },
        rng);
    results.push_back({"leaky_relu", e});
  }
  {
    std::vector<Tensor> in{random_tensor({2, 3, 4}, rng, -4.0, 4.0)};
    double e = check(
        in, {true},
        [](const std::vector<Tensor>& t, Tape* tape) { return T::sigmoid(t[0], tape); },
        [](const std::vector<Vec>& x) {
          Vec y(x[0]);
          for (double& v : y) v = 1.0 / (1.0 + std::exp(-v));
          return y;
        },
        rng);
    results.push_back({"sigmoid", e});
  }
  for (int rows : {0, 3}) {
    const int n = 5 + static_cast<int>(rng.below(4)), m = 4;
    Shape xs = rows == 0 ? Shape{n} : Shape{rows, n};
    std::vector<Tensor> in{random_tensor(xs, rng), random_tensor({n, m}, rng),
                           random_tensor({m}, rng)};
    double e = check(
        in, {true, true, true},
        [](const std::vector<Tensor>& t, Tape* tape) {
          return T::fully_connected(t[0], t[1], t[2], tape);
        },
        [&](const std::vector<Vec>& x) { return ref_fc(x[0], x[1], x[2], std::max(rows, 1), n, m); },
        rng);
    results.push_back({rows == 0 ? "fully_connected" : "fully_connected/batched", e});
  }
  {
    std::vector<Tensor> in{random_tensor({2, 2, 3, 8}, rng)};
    double e = check(
        in, {true},
        [](const std::vector<Tensor>& t, Tape* tape) { return T::pixel_shuffle(t[0], tape); },
        [](const std::vector<Vec>& x) { return ref_shuffle(x[0], 2, 2, 3, 2); }, rng);
    results.push_back({"pixel_shuffle", e});
  }
  {
    std::vector<Tensor> in{random_tensor({4, 6, 3}, rng)};
    double e = check(
        in, {true},
        [](const std::vector<Tensor>& t, Tape* tape) { return T::pixel_unshuffle(t[0], tape); },
        [](const std::vector<Vec>& x) { return ref_unshuffle(x[0], 1, 4, 6, 3); }, rng);
    results.push_back({"pixel_unshuffle", e});
  }
  {
    std::vector<Tensor> in{random_tensor({2, 3, 4}, rng)};
    double e = check(
        in, {true},
        [](const std::vector<Tensor>& t, Tape* tape) { return T::reshape(t[0], {4, 6}, tape); },
        [](const std::vector<Vec>& x) { return x[0]; }, rng);
    results.push_back({"reshape", e});
  }
  {
    // Targets sit at least 0.05 from predictions so no difference crosses the kink.
    Tensor pred = random_tensor({3, 5}, rng);
    Tensor target(pred.shape());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      float off = static_cast<float>(rng.uniform(0.05, 0.5));
      target.data()[i] = pred.data()[i] + (rng.bernoulli(0.5) ? off : -off);
    }
    std::vector<Tensor> in{pred, target};
    double e = check(
        in, {true, true},
        [](const std::vector<Tensor>& t, Tape* tape) { return T::l1_loss(t[0], t[1], tape); },
        [](const std::vector<Vec>& x) {
          double s = 0.0;
          for (std::size_t i = 0; i < x[0].size(); ++i) s += std::fabs(x[0][i] - x[1][i]);
          return Vec{s / static_cast<double>(x[0].size())};
        },
        rng);
    results.push_back({"l1_loss", e});
  }
  {
    std::vector<Tensor> in{random_tensor({4, 3}, rng)};
    double e = check(
        in, {true}, [](const std::vector<Tensor>& t, Tape* tape) { return T::sum(t[0], tape); },
        [](const std::vector<Vec>& x) {
          double s = 0.0;
          for (double v : x[0]) s += v;
          return Vec{s};
        },
        rng);
    results.push_back({"sum", e});
  }
  {
    // conv -> leaky -> pixel_shuffle -> sigmoid -> l1 against a fixed target.
    // Inputs are redrawn until every pre-activation is clear of the leaky
    // kink by more than any h-sized perturbation can move it; targets of 0 or
    // 1 keep the l1 kink out of reach of a sigmoid output.
    std::vector<Tensor> in;
    for (bool clear = false; !clear;) {
      in = {random_tensor({1, 4, 4, 2}, rng), random_tensor({3, 3, 2, 4}, rng),
            random_tensor({4}, rng, -0.1, 0.1)};
      Vec z = ref_conv(to_double(in[0]), to_double(in[1]), to_double(in[2]), 1, 4, 4, 2, 3, 4, 1, 1);
      clear = std::all_of(z.begin(), z.end(), [](double v) { return std::fabs(v) > 0.05; });
    }
    Tensor target({1, 8, 8, 1});
    for (float& v : target.data()) v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
    double e = check(
        in, {true, true, true},
        [&](const std::vector<Tensor>& t, Tape* tape) {
          Tensor y = T::conv2d(t[0], t[1], t[2], 1, 1, tape);
          y = T::leaky_relu(y, tape);
          y = T::pixel_shuffle(y, tape);
          y = T::sigmoid(y, tape);
          return T::l1_loss(y, target, tape);
        },
        [&](const std::vector<Vec>& x) {
          Vec y = ref_conv(x[0], x[1], x[2], 1, 4, 4, 2, 3, 4, 1, 1);
          for (double& v : y) v = std::max(0.1 * v, v);
          y = ref_shuffle(y, 1, 4, 4, 1);
          double s = 0.0;
          for (std::size_t i = 0; i < y.size(); ++i)
            s += std::fabs(1.0 / (1.0 + std::exp(-y[i])) - target.data()[i]);
          return Vec{s / static_cast<double>(y.size())};
        },
        rng);
    results.push_back({"composed", e});
  }
  return results;
}

}  // namespace gradcheck
