#include <cmath>
#include <stdexcept>

#include "convcut/error.hpp"
#include "convcut/ops.hpp"
#include "convcut/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace convcut;

TEST_SUITE("tensor") {

TEST_CASE("shape basics") {
  Shape s{2, 3, 4};
  CHECK(s.rank() == 3);
  CHECK(s.numel() == 24);
  CHECK(s.back() == 4);
  CHECK_THROWS_AS(Shape({2, 0}), DimensionError);
  CHECK_THROWS_AS(Shape({1, 1, 1, 1, 1}), DimensionError);
}

TEST_CASE("tensor data length must match shape") {
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1.f, 2.f, 3.f}), DimensionError);
  Tensor t = Tensor::full(Shape{2, 2}, 3.f);
  CHECK(t.numel() == 4);
  CHECK(t[3] == 3.f);
  CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("copies share storage, clone does not") {
  Tensor a = Tensor::zeros(Shape{3});
  Tensor b = a;
  Tensor c = a.clone();
  CHECK(b.same(a));
  CHECK_FALSE(c.same(a));
  a.mutable_data()[0] = 5.f;
  CHECK(b[0] == 5.f);
  CHECK(c[0] == 0.f);
}

TEST_CASE("backward of sum is all ones") {
  Rng rng(3);
  Tensor x = oracle::random(Shape{2, 3}, rng).clone(true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(x);
  }
  GradMap g = backward(loss, tape);
  const Tensor* gx = g.find(x);
  REQUIRE(gx != nullptr);
  CHECK(gx->shape() == x.shape());
  for (std::size_t i = 0; i < gx->numel(); ++i) CHECK((*gx)[i] == 1.f);
}

TEST_CASE("backward of sum(x*x) at [1,2] is [2,4]") {
  Tensor x(Shape{2}, {1.f, 2.f}, true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::mul(x, x));
  }
  GradMap g = backward(loss, tape);
  const Tensor* gx = g.find(x);
  REQUIRE(gx != nullptr);
  CHECK((*gx)[0] == doctest::Approx(2.0));
  CHECK((*gx)[1] == doctest::Approx(4.0));
  CHECK(g.size() == 1);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x(Shape{2}, {1.f, 2.f}, true);
  GradTape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = ops::scale(x, 2.f);
  }
  CHECK_THROWS_AS(backward(y, tape), ContractError);
}

TEST_CASE("detached loss yields an empty map") {
  Tensor x(Shape{2}, {1.f, 2.f}, true);
  GradTape tape;
  Tensor loss = ops::sum(x);  // no tape active
  CHECK(tape.size() == 0);
  CHECK(backward(loss, tape).empty());

  Tensor constant(Shape{2}, {1.f, 2.f});
  {
    TapeScope scope(tape);
    loss = ops::sum(constant);
  }
  CHECK(backward(loss, tape).empty());
}

TEST_CASE("tape is topologically ordered") {
  Tensor x(Shape{3}, {1.f, -2.f, 0.5f}, true);
  GradTape tape;
  {
    TapeScope scope(tape);
    Tensor y = ops::gelu(ops::mul(x, x));
    (void)ops::sum(ops::add(y, x));
  }
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const Tensor& in : nodes[i].inputs) {
      if (!in.tracked() || in.requires_grad()) continue;
      bool seen = false;
      for (std::size_t j = 0; j < i; ++j) seen = seen || nodes[j].output.same(in);
      CHECK(seen);
    }
  }
}

TEST_CASE("every reachable leaf gets a gradient of its own shape") {
  Rng rng(5);
  Tensor a = oracle::random(Shape{3, 4}, rng).clone(true);
  Tensor b = oracle::random(Shape{4, 2}, rng).clone(true);
  Tensor unused = oracle::random(Shape{2}, rng).clone(true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::softmax(ops::matmul(a, b)));
  }
  GradMap g = backward(loss, tape);
  REQUIRE(g.find(a));
  REQUIRE(g.find(b));
  CHECK(g.find(a)->shape() == a.shape());
  CHECK(g.find(b)->shape() == b.shape());
  CHECK(g.find(unused) == nullptr);
}

TEST_CASE("gradients accumulate over repeated use") {
  Tensor x(Shape{1}, {3.f}, true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::add(ops::add(x, x), ops::scale(x, 2.f)));
  }
  CHECK((*backward(loss, tape).find(x))[0] == doctest::Approx(4.0));
}

TEST_CASE("tape scopes nest and restore") {
  GradTape outer, inner;
  CHECK(current_tape() == nullptr);
  {
    TapeScope a(outer);
    CHECK(current_tape() == &outer);
    {
      TapeScope b(inner);
      CHECK(current_tape() == &inner);
    }
    CHECK(current_tape() == &outer);
  }
  CHECK(current_tape() == nullptr);
}

}  // TEST_SUITE
