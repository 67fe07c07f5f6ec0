#include <cmath>
#include <cstring>

#include "doctest.h"
#include "deidforge/errors.hpp"
#include "deidforge/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace deidforge;
using namespace deidforge::tensor;

namespace {

Tensor ones(Shape s) { return Tensor(std::move(s), 1.0f); }

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("conv2d shape of the first encoder layer") {
  Tensor x({64, 64, 3}, 0.5f);
  Tensor k({5, 5, 3, 128}, 0.01f);
  Tensor y = conv2d(x, k, Tensor({128}), 2, 2);
  CHECK(y.shape() == Shape{32, 32, 128});
}

TEST_CASE("conv2d with a 1x1 identity kernel returns the input") {
  auto rng = SplitMix64(3);
  for (int cout : {1, 3, 7}) {
    Tensor x = gradcheck::random_tensor({5, 6, cout}, rng);
    Tensor k({1, 1, cout, cout});
    for (int c = 0; c < cout; ++c) k.data()[c * cout + c] = 1.0f;
    CHECK(bit_equal(conv2d(x, k, Tensor({cout}), 1, 0), x));
  }
}

TEST_CASE("conv2d of ones with a 3x3 ones kernel is 9") {
  Tensor y = conv2d(ones({3, 3, 1}), ones({3, 3, 1, 1}), Tensor({1}), 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1});
  CHECK(y.data()[0] == 9.0f);
}

TEST_CASE("conv2d matches direct summation on both code paths") {
  auto rng = SplitMix64(11);
  struct Case { int n, h, w, cin, k, cout, stride, pad; };
  for (Case c : {Case{2, 9, 7, 3, 5, 6, 2, 2}, Case{1, 8, 8, 5, 3, 12, 1, 1},
                 Case{3, 10, 11, 6, 5, 3, 1, 2}, Case{1, 7, 6, 2, 3, 1, 1, 0},
                 Case{2, 70, 67, 2, 5, 2, 1, 2}}) {
    Tensor x = gradcheck::random_tensor({c.n, c.h, c.w, c.cin}, rng);
    Tensor k = gradcheck::random_tensor({c.k, c.k, c.cin, c.cout}, rng);
    Tensor b = gradcheck::random_tensor({c.cout}, rng);
    Tensor y = conv2d(x, k, b, c.stride, c.pad);
    auto ref = gradcheck::ref_conv(gradcheck::to_double(x), gradcheck::to_double(k),
                                   gradcheck::to_double(b), c.n, c.h, c.w, c.cin, c.k, c.cout,
                                   c.stride, c.pad);
    REQUIRE(y.size() == ref.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::fabs(y.data()[i] - ref[i]));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("conv2d rejects mismatched channels") {
  CHECK_THROWS_AS(conv2d(ones({4, 4, 3}), ones({3, 3, 2, 1}), Tensor({1}), 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(ones({2, 2, 1}), ones({5, 5, 1, 1}), Tensor({1}), 1, 0), ShapeError);
}

TEST_CASE("leaky_relu values and the slope at zero") {
  Tensor x({3}, std::vector<float>{2.0f, -1.0f, 0.0f});
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = leaky_relu(x, &tape);
  CHECK(y.data()[0] == 2.0f);
  CHECK(y.data()[1] == doctest::Approx(-0.1f));
  CHECK(y.data()[2] == 0.0f);
  backward(tape, sum(y, &tape));
  CHECK(x.grad()[0] == 1.0f);
  CHECK(x.grad()[1] == 0.1f);
  CHECK(x.grad()[2] == 0.1f);
}

TEST_CASE("fully_connected examples") {
  Tensor x({3}, std::vector<float>{4, 5, 6});
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0f;
  CHECK(bit_equal(fully_connected(x, eye, Tensor({3})), x));

  // x = [1,2] mapped through a 2x3 matrix with columns e1, e2, e1+e2.
  Tensor w({2, 3}, std::vector<float>{1, 0, 1, 0, 1, 1});
  Tensor y = fully_connected(Tensor({2}, std::vector<float>{1, 2}), w, Tensor({3}));
  CHECK(y.data()[0] == 1.0f);
  CHECK(y.data()[1] == 2.0f);
  CHECK(y.data()[2] == 3.0f);

  Tensor fc1 = fully_connected(Tensor({16384}, 0.01f), Tensor({16384, 1024}, 0.001f), Tensor({1024}));
  CHECK(fc1.shape() == Shape{1024});
  CHECK_THROWS_AS(fully_connected(Tensor({4}), w, Tensor({3})), ShapeError);
}

TEST_CASE("pixel_shuffle permutation") {
  Tensor x({1, 1, 4}, std::vector<float>{1, 2, 3, 4});
  Tensor y = pixel_shuffle(x);
  CHECK(y.shape() == Shape{2, 2, 1});
  CHECK(y.data()[0] == 1.0f);
  CHECK(y.data()[1] == 2.0f);
  CHECK(y.data()[2] == 3.0f);
  CHECK(y.data()[3] == 4.0f);

  CHECK(pixel_shuffle(Tensor({4, 4, 1024})).shape() == Shape{8, 8, 256});
  CHECK_THROWS_AS(pixel_shuffle(Tensor({2, 2, 6})), ShapeError);

  auto rng = SplitMix64(5);
  Tensor r = gradcheck::random_tensor({2, 3, 5, 8}, rng);
  Tensor s = pixel_shuffle(r);
  auto total = [](const Tensor& t) {
    double acc = 0.0;
    for (float v : t.data()) acc += v;
    return acc;
  };
  CHECK(total(s) == doctest::Approx(total(r)).epsilon(1e-12));
  CHECK(bit_equal(pixel_unshuffle(s), r));
  Tensor u = gradcheck::random_tensor({4, 6, 3}, rng);
  CHECK(bit_equal(pixel_shuffle(pixel_unshuffle(u)), u));
}

TEST_CASE("l1_loss is a mean") {
  CHECK(l1_loss(Tensor({2}, std::vector<float>{1, 1}), Tensor({2}, std::vector<float>{0, 2})).item() ==
        1.0f);
  Tensor a({3, 2}, 0.25f);
  CHECK(l1_loss(a, a).item() == 0.0f);
  CHECK_THROWS_AS(l1_loss(Tensor({2}), Tensor({3})), ShapeError);
}

TEST_CASE("backward contracts") {
  Tensor x({2, 3}, 0.5f);
  x.set_requires_grad(true);
  Tensor unused({4}, 1.0f);
  unused.set_requires_grad(true);
  unused.zero_grad();
  Tape tape;
  Tensor s = sum(x, &tape);
  backward(tape, s);
  for (float g : x.grad()) CHECK(g == 1.0f);
  for (float g : unused.grad()) CHECK(g == 0.0f);

  Tape t2;
  Tensor y = leaky_relu(x, &t2);
  CHECK_THROWS_AS(backward(t2, y), ContractError);
  Tape empty;
  CHECK_THROWS_AS(backward(empty, Tensor::scalar(1.0f)), ContractError);
}

TEST_CASE("gradients accumulate over repeated uses") {
  // x feeds both operands of a dot product, so d(x.x)/dx = 2x.
  Tensor x({3}, std::vector<float>{1, -2, 3});
  x.set_requires_grad(true);
  Tape tape;
  Tensor row = reshape(x, {1, 3}, &tape);
  Tensor col = reshape(x, {3, 1}, &tape);
  Tensor dot = reshape(fully_connected(row, col, Tensor({1}), &tape), {}, &tape);
  CHECK(dot.item() == 14.0f);
  backward(tape, dot);
  CHECK(x.grad()[0] == 2.0f);
  CHECK(x.grad()[1] == -4.0f);
  CHECK(x.grad()[2] == 6.0f);

  // A second backward pass adds on top.
  Tape again;
  backward(again, sum(x, &again));
  CHECK(x.grad()[0] == 3.0f);
}

TEST_CASE("finite-difference gradients for every op") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& r : gradcheck::check_all_ops(seed)) {
      INFO("op " << r.op << " seed " << seed);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("forward ops are deterministic") {
  auto rng = SplitMix64(9);
  Tensor x = gradcheck::random_tensor({2, 8, 8, 4}, rng);
  Tensor k = gradcheck::random_tensor({3, 3, 4, 8}, rng);
  Tensor b = gradcheck::random_tensor({8}, rng);
  auto run = [&] { return sigmoid(pixel_shuffle(leaky_relu(conv2d(x, k, b, 1, 1)))); };
  CHECK(bit_equal(run(), run()));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Tensor p({3}, std::vector<float>{1, -2, 0.5f});
  Tensor before = p.clone();
  p.zero_grad();
  AdamState st;
  std::vector<Tensor> ps{p};
  adam_step(ps, st);
  CHECK(st.step == 1);
  CHECK(bit_equal(p, before));
}

TEST_CASE("adam: first step moves by the learning rate") {
  Tensor p({1}, 0.0f);
  p.zero_grad();
  p.grad()[0] = 1.0f;
  AdamState st;
  std::vector<Tensor> ps{p};
  adam_step(ps, st);
  // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
  CHECK(p.data()[0] == doctest::Approx(-5e-5).epsilon(1e-6));
  CHECK(p.grad()[0] == 0.0f);
}

TEST_CASE("adam: constant gradient drives the parameter monotonically") {
  for (float g : {0.3f, -2.0f}) {
    Tensor p({1}, 1.0f);
    AdamState st(AdamConfig{0.01f});
    std::vector<Tensor> ps{p};
    float prev = p.data()[0];
    for (int i = 0; i < 200; ++i) {
      p.zero_grad();
      p.grad()[0] = g;
      adam_step(ps, st);
      float now = p.data()[0];
      if (g > 0) CHECK(now < prev);
      else CHECK(now > prev);
      prev = now;
    }
    CHECK(st.step == 200);
  }
}

TEST_CASE("adam: missing gradient is a contract violation") {
  Tensor p({2}, 1.0f);
  AdamState st;
  std::vector<Tensor> ps{p};
  CHECK_THROWS_AS(adam_step(ps, st), ContractError);
}
