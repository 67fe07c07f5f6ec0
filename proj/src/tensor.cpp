#include "deidforge/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <utility>

#include "deidforge/errors.hpp"

namespace deidforge::tensor {

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;
  bool has_grad = false;
  bool requires_grad = false;
};

}  // namespace detail

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Eigen::RowVectorXf>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXf>;

// im2col chunks are capped at this many floats.
constexpr std::size_t kColumnBudget = std::size_t{1} << 23;

void check_shape(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

bool should_record(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  return tape != nullptr && any_requires_grad(inputs);
}

void require_defined(const Tensor& t, const char* what) {
  if (!t.defined()) throw ShapeError(std::string(what) + ": undefined tensor");
}

// Geometry of one conv2d call, batch folded into n.
struct ConvGeometry {
  int n, h, w, cin, k, cout, stride, pad, ho, wo;

  std::size_t rows() const { return static_cast<std::size_t>(n) * ho * wo; }
  std::size_t patch() const { return static_cast<std::size_t>(k) * k * cin; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                           int stride, int pad) {
  require_defined(input, "conv2d input");
  require_defined(kernels, "conv2d kernels");
  require_defined(bias, "conv2d bias");
  if (input.rank() != 3 && input.rank() != 4)
    throw ShapeError("conv2d expects HWC or NHWC input, got " + to_string(input.shape()));
  if (kernels.rank() != 4 || kernels.dim(0) != kernels.dim(1))
    throw ShapeError("conv2d kernels must be [k,k,Cin,Cout], got " + to_string(kernels.shape()));
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d padding must be >= 0");

  const bool batched = input.rank() == 4;
  ConvGeometry g{};
  g.n = batched ? input.dim(0) : 1;
  g.h = input.dim(batched ? 1 : 0);
  g.w = input.dim(batched ? 2 : 1);
  g.cin = input.dim(batched ? 3 : 2);
  g.k = kernels.dim(0);
  g.cout = kernels.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (kernels.dim(2) != g.cin)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(g.cin) +
                     " channels, kernels expect " + std::to_string(kernels.dim(2)));
  if (bias.size() != static_cast<std::size_t>(g.cout))
    throw ShapeError("conv2d bias must have " + std::to_string(g.cout) + " entries");
  if (g.k > g.h + 2 * pad || g.k > g.w + 2 * pad)
    throw ShapeError("conv2d kernel larger than padded input");
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  return g;
}

// Walks output rows [row_begin, row_end) and, for every kernel row ky, hands
// fn the contiguous run of kx taps that land inside the input:
// fn(row offset in patch buffer, ky, first valid kx, one-past-last valid kx,
//    flat input pixel index of the first valid tap).
template <typename Fn>
void for_each_patch_run(const ConvGeometry& g, std::size_t row_begin, std::size_t row_end, Fn fn) {
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  int n = static_cast<int>(row_begin / plane);
  int oy = static_cast<int>((row_begin % plane) / g.wo);
  int ox = static_cast<int>(row_begin % g.wo);
  for (std::size_t r = row_begin; r < row_end; ++r) {
    const int x0 = ox * g.stride - g.pad;
    const int kx_lo = std::max(0, -x0);
    const int kx_hi = std::min(g.k, g.w - x0);
    for (int ky = 0; ky < g.k; ++ky) {
      const int iy = oy * g.stride - g.pad + ky;
      const bool row_ok = iy >= 0 && iy < g.h && kx_lo < kx_hi;
      const std::size_t pixel =
          row_ok ? ((static_cast<std::size_t>(n) * g.h + iy) * g.w + (x0 + kx_lo)) : 0;
      fn(r - row_begin, ky, row_ok ? kx_lo : 0, row_ok ? kx_hi : 0, pixel);
    }
    if (++ox == g.wo) {
      ox = 0;
      if (++oy == g.ho) {
        oy = 0;
        ++n;
      }
    }
  }
}

void im2col(const ConvGeometry& g, const float* in, std::size_t row_begin, std::size_t row_end,
            float* cols) {
  const std::size_t patch = g.patch();
  const std::size_t krow = static_cast<std::size_t>(g.k) * g.cin;
  for_each_patch_run(g, row_begin, row_end,
                     [&](std::size_t row, int ky, int kx_lo, int kx_hi, std::size_t pixel) {
                       float* dst = cols + row * patch + static_cast<std::size_t>(ky) * krow;
                       const std::size_t lo = static_cast<std::size_t>(kx_lo) * g.cin;
                       const std::size_t hi = static_cast<std::size_t>(kx_hi) * g.cin;
                       std::fill(dst, dst + lo, 0.0f);
                       if (hi > lo) std::memcpy(dst + lo, in + pixel * g.cin, (hi - lo) * sizeof(float));
                       std::fill(dst + std::max(hi, lo), dst + krow, 0.0f);
                     });
}

void col2im_add(const ConvGeometry& g, const float* cols, std::size_t row_begin,
                std::size_t row_end, float* din) {
  const std::size_t patch = g.patch();
  const std::size_t krow = static_cast<std::size_t>(g.k) * g.cin;
  for_each_patch_run(g, row_begin, row_end,
                     [&](std::size_t row, int ky, int kx_lo, int kx_hi, std::size_t pixel) {
                       if (kx_hi <= kx_lo) return;
                       const std::size_t lo = static_cast<std::size_t>(kx_lo) * g.cin;
                       const std::size_t len = static_cast<std::size_t>(kx_hi - kx_lo) * g.cin;
                       const float* src = cols + row * patch + static_cast<std::size_t>(ky) * krow + lo;
                       float* dst = din + pixel * g.cin;
                       for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                     });
}

std::size_t chunk_rows(const ConvGeometry& g) {
  return std::max<std::size_t>(1, kColumnBudget / g.patch());
}

// Narrow stride-1 convolutions (the 3-channel output layer) starve the GEMM
// path, so they run as direct planar correlations vectorized along x.
constexpr int kPlanarMaxOut = 4;

bool use_planar(const ConvGeometry& g) { return g.stride == 1 && g.cout <= kPlanarMaxOut; }

struct PlanarImage {
  int channels, h, w;
  std::vector<float> v;
  float* row(int c, int y) { return v.data() + (static_cast<std::size_t>(c) * h + y) * w; }
};

// Padded planar copy of image n of an HWC/NHWC buffer.
PlanarImage to_planar(const ConvGeometry& g, const float* in, int n) {
  PlanarImage p{g.cin, g.h + 2 * g.pad, g.w + 2 * g.pad, {}};
  p.v.assign(static_cast<std::size_t>(p.channels) * p.h * p.w, 0.0f);
  const float* src = in + static_cast<std::size_t>(n) * g.h * g.w * g.cin;
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x)
      for (int c = 0; c < g.cin; ++c)
        p.row(c, y + g.pad)[x + g.pad] = src[(static_cast<std::size_t>(y) * g.w + x) * g.cin + c];
  return p;
}

// out[c] += sum over rows of m[r, c] for a row-major matrix. Eigen's
// vectorized reductions peel differently depending on the buffer's
// alignment, which made repeated runs differ in the last bits; a fixed order
// keeps training bit-reproducible.
void add_column_sums(const float* m, std::size_t rows, int cols, float* out) {
  std::vector<double> acc(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) acc[c] += m[r * cols + c];
  for (int c = 0; c < cols; ++c) out[c] += static_cast<float>(acc[c]);
}

// out (+)= correlation of `in` with kernels [k,k,cin,cout]; bias may be null.
void planar_forward(const ConvGeometry& g, const float* in, const float* kernels, const float* bias,
                    float* out, bool accumulate = false) {
  // Four independent 16-wide accumulators hide FMA latency.
  constexpr int kTile = 16;
  constexpr int kGroup = 4 * kTile;
  using Tile = Eigen::Array<float, kTile, 1>;
  const int taps = g.cin * g.k * g.k;
  std::vector<float> wt(static_cast<std::size_t>(g.cout) * taps);
  for (int co = 0; co < g.cout; ++co)
    for (int ci = 0; ci < g.cin; ++ci)
      for (int t = 0; t < g.k * g.k; ++t)
        wt[(static_cast<std::size_t>(co) * g.cin + ci) * g.k * g.k + t] =
            kernels[(static_cast<std::size_t>(t) * g.cin + ci) * g.cout + co];
  std::vector<float> row(static_cast<std::size_t>(g.wo));
  for (int n = 0; n < g.n; ++n) {
    PlanarImage p = to_planar(g, in, n);
    float* dst = out + static_cast<std::size_t>(n) * g.ho * g.wo * g.cout;
    for (int co = 0; co < g.cout; ++co) {
      const float* wco = wt.data() + static_cast<std::size_t>(co) * taps;
      for (int y = 0; y < g.ho; ++y) {
        int x0 = 0;
        for (; x0 + kGroup <= g.wo; x0 += kGroup) {
          Tile a0 = Tile::Constant(bias ? bias[co] : 0.0f), a1 = a0, a2 = a0, a3 = a0;
          const float* w = wco;
          for (int ci = 0; ci < g.cin; ++ci)
            for (int ky = 0; ky < g.k; ++ky) {
              const float* src = p.row(ci, y + ky) + x0;
              for (int kx = 0; kx < g.k; ++kx, ++w) {
                const float wv = *w;
                a0 += wv * Eigen::Map<const Tile>(src + kx);
                a1 += wv * Eigen::Map<const Tile>(src + kx + kTile);
                a2 += wv * Eigen::Map<const Tile>(src + kx + 2 * kTile);
                a3 += wv * Eigen::Map<const Tile>(src + kx + 3 * kTile);
              }
            }
          Eigen::Map<Tile>(row.data() + x0) = a0;
          Eigen::Map<Tile>(row.data() + x0 + kTile) = a1;
          Eigen::Map<Tile>(row.data() + x0 + 2 * kTile) = a2;
          Eigen::Map<Tile>(row.data() + x0 + 3 * kTile) = a3;
        }
        for (int x = x0; x < g.wo; ++x) {
          float acc = bias ? bias[co] : 0.0f;
          const float* w = wco;
          for (int ci = 0; ci < g.cin; ++ci)
            for (int ky = 0; ky < g.k; ++ky) {
              const float* src = p.row(ci, y + ky) + x;
              for (int kx = 0; kx < g.k; ++kx, ++w) acc += *w * src[kx];
            }
          row[x] = acc;
        }
        float* d = dst + static_cast<std::size_t>(y) * g.wo * g.cout + co;
        if (accumulate) {
          for (int x = 0; x < g.wo; ++x) d[static_cast<std::size_t>(x) * g.cout] += row[x];
        } else {
          for (int x = 0; x < g.wo; ++x) d[static_cast<std::size_t>(x) * g.cout] = row[x];
        }
      }
    }
  }
}

void planar_backward(const ConvGeometry& g, const float* in, const float* kernels,
                     const float* dout, float* dinput, float* dkernels, float* dbias) {
  constexpr int kTile = 16;
  constexpr int kGroup = 4 * kTile;
  using Tile = Eigen::Array<float, kTile, 1>;
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;

  if (dbias || dkernels) {
    std::vector<float> dplanar(static_cast<std::size_t>(g.cout) * plane);
    for (int n = 0; n < g.n; ++n) {
      const float* src = dout + static_cast<std::size_t>(n) * plane * g.cout;
      for (std::size_t i = 0; i < plane; ++i)
        for (int co = 0; co < g.cout; ++co) dplanar[co * plane + i] = src[i * g.cout + co];
      if (dbias) {
        for (int co = 0; co < g.cout; ++co) {
          double s = 0.0;
          for (std::size_t i = 0; i < plane; ++i) s += dplanar[co * plane + i];
          dbias[co] += static_cast<float>(s);
        }
      }
      if (!dkernels) continue;
      PlanarImage p = to_planar(g, in, n);
      for (int co = 0; co < g.cout; ++co)
        for (int ci = 0; ci < g.cin; ++ci)
          for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
              Tile a0 = Tile::Zero(), a1 = a0, a2 = a0, a3 = a0;
              double tail = 0.0;
              for (int y = 0; y < g.ho; ++y) {
                const float* a = p.row(ci, y + ky) + kx;
                const float* d = dplanar.data() + co * plane + static_cast<std::size_t>(y) * g.wo;
                int x0 = 0;
                for (; x0 + kGroup <= g.wo; x0 += kGroup) {
                  a0 += Eigen::Map<const Tile>(a + x0) * Eigen::Map<const Tile>(d + x0);
                  a1 += Eigen::Map<const Tile>(a + x0 + kTile) * Eigen::Map<const Tile>(d + x0 + kTile);
                  a2 += Eigen::Map<const Tile>(a + x0 + 2 * kTile) *
                        Eigen::Map<const Tile>(d + x0 + 2 * kTile);
                  a3 += Eigen::Map<const Tile>(a + x0 + 3 * kTile) *
                        Eigen::Map<const Tile>(d + x0 + 3 * kTile);
                }
                for (int x = x0; x < g.wo; ++x) tail += static_cast<double>(a[x]) * d[x];
              }
              const double total = static_cast<double>((a0 + a1 + a2 + a3).sum()) + tail;
              dkernels[((static_cast<std::size_t>(ky) * g.k + kx) * g.cin + ci) * g.cout + co] +=
                  static_cast<float>(total);
            }
    }
  }

  if (dinput) {
    // Input gradient is the full correlation of dout with the flipped,
    // channel-transposed kernels.
    std::vector<float> flipped(static_cast<std::size_t>(g.k) * g.k * g.cin * g.cout);
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx)
        for (int ci = 0; ci < g.cin; ++ci)
          for (int co = 0; co < g.cout; ++co)
            flipped[((static_cast<std::size_t>(g.k - 1 - ky) * g.k + (g.k - 1 - kx)) * g.cout + co) *
                        g.cin +
                    ci] = kernels[((static_cast<std::size_t>(ky) * g.k + kx) * g.cin + ci) * g.cout + co];
    ConvGeometry t = g;
    t.h = g.ho;
    t.w = g.wo;
    t.cin = g.cout;
    t.cout = g.cin;
    t.pad = g.k - 1 - g.pad;
    t.ho = g.h;
    t.wo = g.w;
    planar_forward(t, dout, flipped.data(), nullptr, dinput, true);
  }
}

template <typename Fn>
Tensor unary_elementwise(const Tensor& x, Fn fn) {
  require_defined(x, "elementwise op");
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = fn(src[i]);
  return out;
}

// Shared index mapping for pixel_shuffle / pixel_unshuffle. Calls
// fn(low_res_index, high_res_index) for every element.
template <typename Fn>
void for_each_shuffle_pair(int n, int h, int w, int c, Fn fn) {
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t lo =
                  ((static_cast<std::size_t>(b) * h + y) * w + x) * (4 * c) + ch * 4 + dy * 2 + dx;
              const std::size_t hi =
                  ((static_cast<std::size_t>(b) * 2 * h + 2 * y + dy) * (2 * w) + 2 * x + dx) * c +
                  ch;
              fn(lo, hi);
            }
}

}  // namespace

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, float fill) : impl_(std::make_shared<detail::TensorData>()) {
  check_shape(shape);
  impl_->values.assign(element_count(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : impl_(std::make_shared<detail::TensorData>()) {
  check_shape(shape);
  if (values.size() != element_count(shape))
    throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                     std::to_string(element_count(shape)) + " values, got " +
                     std::to_string(values.size()));
  impl_->values = std::move(values);
  impl_->shape = std::move(shape);
}

Tensor Tensor::scalar(float value) { return Tensor(Shape{}, std::vector<float>{value}); }

const Shape& Tensor::shape() const {
  static const Shape empty;
  return impl_ ? impl_->shape : empty;
}

int Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("axis out of range for shape " + to_string(s));
  return s[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::size() const { return impl_ ? impl_->values.size() : 0; }

std::span<float> Tensor::data() {
  if (!impl_) return {};
  return impl_->values;
}

std::span<const float> Tensor::data() const {
  if (!impl_) return {};
  return impl_->values;
}

float Tensor::item() const {
  if (size() != 1) throw ShapeError("item() needs a single-element tensor");
  return impl_->values[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw ShapeError("set_requires_grad on undefined tensor");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->has_grad; }

std::span<float> Tensor::grad() {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_) return;
  impl_->grad.assign(impl_->values.size(), 0.0f);
  impl_->has_grad = true;
}

void Tensor::clear_grad() {
  if (!impl_) return;
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
  impl_->has_grad = false;
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->values);
}

std::span<float> grad_buffer(const Tensor& t) {
  auto& impl = *t.impl_;
  if (!impl.has_grad) {
    impl.grad.assign(impl.values.size(), 0.0f);
    impl.has_grad = true;
  }
  return impl.grad;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  output.set_requires_grad(true);
  nodes_.push_back(Node{std::string(op), std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  if (nodes_.empty()) throw ContractError("backward() on an empty tape");
  auto seed = grad_buffer(loss);
  seed[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n.op);
  return names;
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

// ---------------------------------------------------------------------------
// Ops

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride, int pad,
              Tape* tape) {
  const ConvGeometry g = conv_geometry(input, kernels, bias, stride, pad);
  Shape out_shape = input.rank() == 4 ? Shape{g.n, g.ho, g.wo, g.cout} : Shape{g.ho, g.wo, g.cout};
  Tensor out(out_shape);

  const std::size_t rows = g.rows();
  const std::size_t patch = g.patch();
  const std::size_t step = chunk_rows(g);
  const bool planar = use_planar(g);
  std::vector<float> cols(planar ? 0 : std::min(rows, step) * patch);
  ConstMatMap kmat(kernels.data().data(), static_cast<Eigen::Index>(patch), g.cout);
  ConstVecMap bvec(bias.data().data(), g.cout);

  if (planar)
    planar_forward(g, input.data().data(), kernels.data().data(), bias.data().data(),
                   out.data().data());
  for (std::size_t r0 = 0; !planar && r0 < rows; r0 += step) {
    const std::size_t r1 = std::min(rows, r0 + step);
    const auto nr = static_cast<Eigen::Index>(r1 - r0);
    im2col(g, input.data().data(), r0, r1, cols.data());
    ConstMatMap cmat(cols.data(), nr, static_cast<Eigen::Index>(patch));
    MatMap omat(out.data().data() + r0 * g.cout, nr, g.cout);
    omat.noalias() = cmat * kmat;
    omat.rowwise() += bvec;
  }

  if (should_record(tape, {&input, &kernels, &bias})) {
    tape->record("conv2d", {input, kernels, bias}, out, [input, kernels, bias, out, g]() {
      const std::size_t rows = g.rows();
      const std::size_t patch = g.patch();
      const std::size_t step = chunk_rows(g);
      const float* dout = out.grad().data();
      if (use_planar(g)) {
        planar_backward(g, input.data().data(), kernels.data().data(), dout,
                        input.requires_grad() ? grad_buffer(input).data() : nullptr,
                        kernels.requires_grad() ? grad_buffer(kernels).data() : nullptr,
                        bias.requires_grad() ? grad_buffer(bias).data() : nullptr);
        return;
      }
      std::vector<float> cols(std::min(rows, step) * patch);
      ConstMatMap kmat(kernels.data().data(), static_cast<Eigen::Index>(patch), g.cout);

      if (bias.requires_grad()) add_column_sums(dout, rows, g.cout, grad_buffer(bias).data());
      for (std::size_t r0 = 0; r0 < rows; r0 += step) {
        const std::size_t r1 = std::min(rows, r0 + step);
        const auto nr = static_cast<Eigen::Index>(r1 - r0);
        ConstMatMap dmat(dout + r0 * g.cout, nr, g.cout);
        if (kernels.requires_grad()) {
          im2col(g, input.data().data(), r0, r1, cols.data());
          ConstMatMap cmat(cols.data(), nr, static_cast<Eigen::Index>(patch));
          MatMap dk(grad_buffer(kernels).data(), static_cast<Eigen::Index>(patch), g.cout);
          dk.noalias() += cmat.transpose() * dmat;
        }
        if (input.requires_grad()) {
          MatMap dcols(cols.data(), nr, static_cast<Eigen::Index>(patch));
          dcols.noalias() = dmat * kmat.transpose();
          col2im_add(g, cols.data(), r0, r1, grad_buffer(input).data());
        }
      }
    });
  }
  return out;
}

Tensor leaky_relu(const Tensor& x, Tape* tape) {
  Tensor out = unary_elementwise(x, [](float v) { return v > 0.0f ? v : kLeakySlope * v; });
  if (should_record(tape, {&x})) {
    tape->record("leaky_relu", {x}, out, [x, out]() {
      auto src = x.data();
      auto dout = out.grad();
      auto dx = grad_buffer(x);
      for (std::size_t i = 0; i < src.size(); ++i)
        dx[i] += src[i] > 0.0f ? dout[i] : kLeakySlope * dout[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x, Tape* tape) {
  Tensor out = unary_elementwise(x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); });
  if (should_record(tape, {&x})) {
    tape->record("sigmoid", {x}, out, [x, out]() {
      auto y = out.data();
      auto dout = out.grad();
      auto dx = grad_buffer(x);
      for (std::size_t i = 0; i < y.size(); ++i) dx[i] += dout[i] * y[i] * (1.0f - y[i]);
    });
  }
  return out;
}

Tensor fully_connected(const Tensor& x, const Tensor& weights, const Tensor& bias, Tape* tape) {
  require_defined(x, "fully_connected input");
  require_defined(weights, "fully_connected weights");
  require_defined(bias, "fully_connected bias");
  if (weights.rank() != 2) throw ShapeError("fully_connected weights must be [n, m]");
  if (x.rank() != 1 && x.rank() != 2)
    throw ShapeError("fully_connected input must be [n] or [N, n], got " + to_string(x.shape()));
  const int n_in = weights.dim(0);
  const int n_out = weights.dim(1);
  const int batch = x.rank() == 2 ? x.dim(0) : 1;
  if (x.dim(-1) != n_in)
    throw ShapeError("fully_connected dimension mismatch: input " + to_string(x.shape()) +
                     ", weights " + to_string(weights.shape()));
  if (bias.size() != static_cast<std::size_t>(n_out))
    throw ShapeError("fully_connected bias must have " + std::to_string(n_out) + " entries");

  Tensor out(x.rank() == 2 ? Shape{batch, n_out} : Shape{n_out});
  ConstMatMap xm(x.data().data(), batch, n_in);
  ConstMatMap wm(weights.data().data(), n_in, n_out);
  MatMap om(out.data().data(), batch, n_out);
  om.noalias() = xm * wm;
  om.rowwise() += ConstVecMap(bias.data().data(), n_out);

  if (should_record(tape, {&x, &weights, &bias})) {
    tape->record("fully_connected", {x, weights, bias}, out,
                 [x, weights, bias, out, batch, n_in, n_out]() {
                   ConstMatMap dout(out.grad().data(), batch, n_out);
                   if (weights.requires_grad()) {
                     ConstMatMap xm(x.data().data(), batch, n_in);
                     MatMap dw(grad_buffer(weights).data(), n_in, n_out);
                     dw.noalias() += xm.transpose() * dout;
                   }
                   if (bias.requires_grad()) {
                     add_column_sums(out.grad().data(), static_cast<std::size_t>(batch), n_out,
                                     grad_buffer(bias).data());
                   }
                   if (x.requires_grad()) {
                     ConstMatMap wm(weights.data().data(), n_in, n_out);
                     MatMap dx(grad_buffer(x).data(), batch, n_in);
                     dx.noalias() += dout * wm.transpose();
                   }
                 });
  }
  return out;
}

Tensor pixel_shuffle(const Tensor& x, Tape* tape) {
  require_defined(x, "pixel_shuffle input");
  if (x.rank() != 3 && x.rank() != 4)
    throw ShapeError("pixel_shuffle expects HWC or NHWC input, got " + to_string(x.shape()));
  const bool batched = x.rank() == 4;
  const int n = batched ? x.dim(0) : 1;
  const int h = x.dim(-3), w = x.dim(-2), c4 = x.dim(-1);
  if (c4 % 4 != 0)
    throw ShapeError("pixel_shuffle needs channels divisible by 4, got " + std::to_string(c4));
  const int c = c4 / 4;
  Tensor out(batched ? Shape{n, 2 * h, 2 * w, c} : Shape{2 * h, 2 * w, c});
  auto src = x.data();
  auto dst = out.data();
  for_each_shuffle_pair(n, h, w, c, [&](std::size_t lo, std::size_t hi) { dst[hi] = src[lo]; });

  if (should_record(tape, {&x})) {
    tape->record("pixel_shuffle", {x}, out, [x, out, n, h, w, c]() {
      auto dout = out.grad();
      auto dx = grad_buffer(x);
      for_each_shuffle_pair(n, h, w, c, [&](std::size_t lo, std::size_t hi) { dx[lo] += dout[hi]; });
    });
  }
  return out;
}

Tensor pixel_unshuffle(const Tensor& x, Tape* tape) {
  require_defined(x, "pixel_unshuffle input");
  if (x.rank() != 3 && x.rank() != 4)
    throw ShapeError("pixel_unshuffle expects HWC or NHWC input, got " + to_string(x.shape()));
  const bool batched = x.rank() == 4;
  const int n = batched ? x.dim(0) : 1;
  const int h2 = x.dim(-3), w2 = x.dim(-2), c = x.dim(-1);
  if (h2 % 2 != 0 || w2 % 2 != 0)
    throw ShapeError("pixel_unshuffle needs even spatial dims, got " + to_string(x.shape()));
  const int h = h2 / 2, w = w2 / 2;
  Tensor out(batched ? Shape{n, h, w, 4 * c} : Shape{h, w, 4 * c});
  auto src = x.data();
  auto dst = out.data();
  for_each_shuffle_pair(n, h, w, c, [&](std::size_t lo, std::size_t hi) { dst[lo] = src[hi]; });

  if (should_record(tape, {&x})) {
    tape->record("pixel_unshuffle", {x}, out, [x, out, n, h, w, c]() {
      auto dout = out.grad();
      auto dx = grad_buffer(x);
      for_each_shuffle_pair(n, h, w, c, [&](std::size_t lo, std::size_t hi) { dx[hi] += dout[lo]; });
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape, Tape* tape) {
  require_defined(x, "reshape input");
  check_shape(shape);
  if (element_count(shape) != x.size())
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  Tensor out(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
  if (should_record(tape, {&x})) {
    tape->record("reshape", {x}, out, [x, out]() {
      auto dout = out.grad();
      auto dx = grad_buffer(x);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[i];
    });
  }
  return out;
}

Tensor l1_loss(const Tensor& pred, const Tensor& target, Tape* tape) {
  require_defined(pred, "l1_loss pred");
  require_defined(target, "l1_loss target");
  if (pred.shape() != target.shape())
    throw ShapeError("l1_loss shape mismatch: " + to_string(pred.shape()) + " vs " +
                     to_string(target.shape()));
  auto p = pred.data();
  auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::fabs(static_cast<double>(p[i]) - t[i]);
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(p.size())));

  if (should_record(tape, {&pred, &target})) {
    tape->record("l1_loss", {pred, target}, out, [pred, target, out]() {
      auto p = pred.data();
      auto t = target.data();
      const float scale = out.grad()[0] / static_cast<float>(p.size());
      auto sign = [](float d) { return d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f); };
      if (pred.requires_grad()) {
        auto dp = grad_buffer(pred);
        for (std::size_t i = 0; i < p.size(); ++i) dp[i] += scale * sign(p[i] - t[i]);
      }
      if (target.requires_grad()) {
        auto dt = grad_buffer(target);
        for (std::size_t i = 0; i < p.size(); ++i) dt[i] -= scale * sign(p[i] - t[i]);
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x, Tape* tape) {
  require_defined(x, "sum input");
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (should_record(tape, {&x})) {
    tape->record("sum", {x}, out, [x, out]() {
      const float g = out.grad()[0];
      for (float& d : grad_buffer(x)) d += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// ADAM

void adam_step(std::span<Tensor> params, AdamState& state) {
  if (!(state.config.learning_rate > 0.0f))
    throw ContractError("adam learning rate must be positive");
  for (const Tensor& p : params) {
    if (!p.has_grad()) throw ContractError("adam_step: parameter without gradient");
  }
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0f);
      state.v[i].assign(params[i].size(), 0.0f);
    }
  }
  if (state.m.size() != params.size())
    throw ContractError("adam_step: parameter list does not match optimizer state");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size() || state.v[i].size() != params[i].size())
      throw ContractError("adam_step: moment buffer shape does not match parameter");
  }

  state.step += 1;
  const auto& cfg = state.config;
  const double t = static_cast<double>(state.step);
  const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta1), t));
  const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta2), t));

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i].data();
    auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0f - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0f - cfg.beta2) * g[j] * g[j];
      const float m_hat = m[j] / bc1;
      const float v_hat = v[j] / bc2;
      value[j] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
    std::fill(g.begin(), g.end(), 0.0f);
  }
}

}  // namespace deidforge::tensor
