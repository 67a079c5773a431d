#include <cmath>
#include <vector>

#include "doctest.h"
#include "retseg/gradcheck.hpp"
#include "retseg/nn.hpp"
#include "retseg/tensor.hpp"

using namespace retseg;

TEST_SUITE("tensor") {

TEST_CASE("construction and shape bookkeeping") {
  Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.rank() == 3);
  CHECK(t.size() == 24);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(2) == 4);
  for (float v : t.data()) CHECK(v == 0.0f);

  Tensor s = Tensor::scalar(3.5f);
  CHECK(s.rank() == 0);
  CHECK(s.size() == 1);
  CHECK(s.item() == 3.5f);

  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0f, 2.0f, 3.0f}), ShapeError);
}

TEST_CASE("clone is a deep copy, assignment shares storage") {
  Tensor a = Tensor::full({4}, 2.0f);
  Tensor alias = a;
  Tensor copy = a.clone();
  a.data()[0] = 7.0f;
  CHECK(alias.data()[0] == 7.0f);
  CHECK(copy.data()[0] == 2.0f);
  CHECK(a.same_storage(alias));
  CHECK(!a.same_storage(copy));
}

TEST_CASE("backward on elementwise chain") {
  // loss = mean((a + b) * a), d/da = (2a + b)/n, d/db = a/n
  Tensor a = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f});
  Tensor b = Tensor::from_data({3}, {3.0f, 1.0f, -1.0f});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  FloatTape tape;
  Tensor loss = mean(&tape, mul(&tape, add(&tape, a, b), a));
  backward(loss);
  for (int i = 0; i < 3; ++i) {
    CHECK(a.grad()[i] ==
          doctest::Approx((2.0f * a.data()[i] + b.data()[i]) / 3.0f).epsilon(1e-6));
    CHECK(b.grad()[i] == doctest::Approx(a.data()[i] / 3.0f).epsilon(1e-6));
  }
}

TEST_CASE("gradients accumulate across uses of the same tensor") {
  Tensor a = Tensor::full({2}, 1.5f);
  a.set_requires_grad(true);
  FloatTape tape;
  Tensor loss = sum(&tape, add(&tape, a, a));
  backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(2.0f));
  CHECK(a.grad()[1] == doctest::Approx(2.0f));
}

TEST_CASE("detached tensors receive no gradient") {
  Tensor a = Tensor::full({2}, 1.0f);
  a.set_requires_grad(true);
  Tensor d = a.detached();
  FloatTape tape;
  Tensor loss = sum(&tape, mul(&tape, d, d));
  backward(loss);
  CHECK(!d.has_grad());
  CHECK(!a.has_grad());
}

TEST_CASE("shape mismatch raises") {
  Tensor a = Tensor::zeros({2, 2});
  Tensor b = Tensor::zeros({4});
  FloatTape tape;
  CHECK_THROWS_AS(add(&tape, a, b), ShapeError);
  CHECK_THROWS_AS(mul(&tape, a, b), ShapeError);
}

TEST_CASE("elementwise op gradients match finite differences over many seeds") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    RngStream rng = RngStream::keyed(seed, {0x7E57u});
    Tensor a = he_init({2, 5}, 5, rng);
    Tensor b = he_init({2, 5}, 5, rng);
    const double err = grad_check(
        {a, b},
        [&](FloatTape* tape) {
          Tensor s = sub(&*tape, mul(tape, a, a), scale(tape, b, 0.7f));
          return mean(tape, mul(tape, s, add(tape, a, b)));
        },
        [&](const std::vector<TensorT<double>>& in) {
          Tape<double> tape;
          TensorT<double> ad = in[0], bd = in[1];
          TensorT<double> s =
              sub(&tape, mul<double>(&tape, ad, ad), scale(&tape, bd, 0.7));
          return mean(&tape, mul(&tape, s, add(&tape, ad, bd))).item();
        });
    CHECK(err < 1e-3);
  }
}

TEST_CASE("concat_channels splits gradient correctly") {
  RngStream rng(3);
  Tensor a = he_init({1, 2, 2, 2}, 4, rng);
  Tensor b = he_init({1, 3, 2, 2}, 4, rng);
  Tensor w = he_init({1, 5, 2, 2}, 4, rng);
  const double err = grad_check(
      {a, b},
      [&](FloatTape* tape) { return sum(tape, mul(tape, concat_channels(tape, a, b), w)); },
      [&](const std::vector<TensorT<double>>& in) {
        Tape<double> tape;
        TensorT<double> c = concat_channels(&tape, in[0], in[1]);
        return sum(&tape, mul(&tape, c, to_double(w))).item();
      });
  CHECK(err < 1e-4);
}

}  // TEST_SUITE
