#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace deidforge::tensor {

using Shape = std::vector<int>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct TensorData;
}

/// Dense row-major float32 array with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// lets a Tape route gradients back to parameters. Use clone() for a deep
/// copy. Images and activations are laid out HWC, or NHWC when batched.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  std::size_t size() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  bool has_grad() const;
  std::span<float> grad();
  std::span<const float> grad() const;
  // Allocates the gradient buffer if needed and fills it with zeros.
  void zero_grad();
  void clear_grad();

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> impl) : impl_(std::move(impl)) {}
  friend std::span<float> grad_buffer(const Tensor& t);

  std::shared_ptr<detail::TensorData> impl_;
};

// Returns the gradient buffer of `t`, allocating zeros on first use. Backward
// rules write through this even though the handle is const.
std::span<float> grad_buffer(const Tensor& t);

/// Ordered record of differentiable operations.
///
/// Operations append themselves in execution order, so the list is already
/// topologically sorted. backward() walks it once in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor that
  /// requires grad. Gradients accumulate, so repeated uses of one tensor sum.
  void backward(const Tensor& loss);

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  std::vector<std::string> op_names() const;

 private:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

inline constexpr float kLeakySlope = 0.1f;

// Every op accepts an optional tape. Nothing is recorded when the tape is null
// or no input requires grad, which is the inference path.

/// 2-D convolution over HWC (or NHWC) input with zero padding.
/// kernels: [k, k, Cin, Cout], bias: [Cout].
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, int stride, int pad,
              Tape* tape = nullptr);

/// max(0.1 x, x). The backward slope at exactly 0 is 0.1.
Tensor leaky_relu(const Tensor& x, Tape* tape = nullptr);

Tensor sigmoid(const Tensor& x, Tape* tape = nullptr);

/// y = x W + b with x: [n] or [N, n], W: [n, m], b: [m].
Tensor fully_connected(const Tensor& x, const Tensor& weights, const Tensor& bias,
                       Tape* tape = nullptr);

/// Depth-to-space by 2: [H, W, 4C] -> [2H, 2W, C]. Input channel c*4 + dy*2 + dx
/// lands at output (2h+dy, 2w+dx, c).
Tensor pixel_shuffle(const Tensor& x, Tape* tape = nullptr);

/// Inverse of pixel_shuffle: [2H, 2W, C] -> [H, W, 4C].
Tensor pixel_unshuffle(const Tensor& x, Tape* tape = nullptr);

Tensor reshape(const Tensor& x, Shape shape, Tape* tape = nullptr);

/// Mean absolute difference; returns a scalar tensor.
Tensor l1_loss(const Tensor& pred, const Tensor& target, Tape* tape = nullptr);

Tensor sum(const Tensor& x, Tape* tape = nullptr);

void backward(Tape& tape, const Tensor& loss);

struct AdamConfig {
  float learning_rate = 5e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

/// First/second moment buffers for one parameter list. Buffers are sized on
/// the first step; later steps must pass parameters of the same shapes.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;

  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : config(cfg) {}
};

/// One bias-corrected ADAM update. Increments state.step and zeroes the
/// parameters' gradients afterwards. Throws ContractError if any parameter
/// has no gradient.
void adam_step(std::span<Tensor> params, AdamState& state);

}  // namespace deidforge::tensor
