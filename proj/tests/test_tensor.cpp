#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lightseg/ops.hpp"
#include "lightseg/tensor.hpp"

using namespace lightseg;

TEST_CASE("tensor shape and data agree") {
  Tensor<float> t({2, 3, 4, 5}, std::vector<float>(120, 1.0f));
  CHECK(t.numel() == 120);
  CHECK_THROWS_AS(Tensor<float>({2, 3, 4, 5}, std::vector<float>(119)),
                  std::invalid_argument);
}

TEST_CASE("backward fills grads of requires_grad leaves") {
  Tape<float> tape;
  Tensor<float> x({1, 1, 1, 3}, {1.0f, 2.0f, 3.0f}, true);
  Tensor<float> loss = reduce_sum(tape, x);
  CHECK(loss.data()[0] == doctest::Approx(6.0f));
  tape.backward(loss);
  REQUIRE(x.has_grad());
  for (const auto g : x.grad()) CHECK(g == doctest::Approx(1.0f));
}

TEST_CASE("loss = sum(relu(x)) masks negative inputs") {
  Tape<float> tape;
  Tensor<float> x({1, 1, 1, 2}, {-1.0f, 2.0f}, true);
  Tensor<float> loss = reduce_sum(tape, relu(tape, x));
  tape.backward(loss);
  CHECK(x.grad()[0] == 0.0f);
  CHECK(x.grad()[1] == 1.0f);
}

TEST_CASE("fan-out accumulates: x + x matches 2x") {
  Tensor<float> x1({1, 1, 1, 3}, {0.5f, -1.5f, 2.0f}, true);
  Tensor<float> x2({1, 1, 1, 3}, {0.5f, -1.5f, 2.0f}, true);

  Tape<float> t1;
  Tensor<float> y1 = add(t1, x1, x1);
  t1.backward(reduce_sum(t1, y1));
  Tape<float> t2;
  Tensor<float> y2 = scale(t2, x2, 2.0f);
  t2.backward(reduce_sum(t2, y2));

  for (int i = 0; i < 3; ++i) {
    CHECK(y1.data()[i] == y2.data()[i]);
    CHECK(x1.grad()[i] == x2.grad()[i]);
    CHECK(x1.grad()[i] == 2.0f);
  }
}

TEST_CASE("backward rejects non-scalar loss and double invocation") {
  Tape<float> tape;
  Tensor<float> x({1, 1, 1, 2}, {1.0f, 2.0f}, true);
  Tensor<float> y = relu(tape, x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);

  Tensor<float> loss = reduce_sum(tape, y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
}

TEST_CASE("backward rejects a loss from a different tape") {
  Tape<float> t1, t2;
  Tensor<float> x({1, 1, 1, 1}, {1.0f}, true);
  Tensor<float> loss = reduce_sum(t1, x);
  CHECK_THROWS_AS(t2.backward(loss), std::invalid_argument);
}

TEST_CASE("same graph twice gives bit-identical results") {
  std::vector<float> data(64);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<float>(i) * 0.37f - 3.0f;
  }
  auto run = [&]() {
    Tape<float> tape;
    Tensor<float> x({1, 4, 4, 4}, data, true);
    Tensor<float> y = relu(tape, scale(tape, x, 1.7f));
    Tensor<float> loss = reduce_sum(tape, y);
    tape.backward(loss);
    return std::pair(loss.data()[0], std::vector<float>(x.grad().begin(),
                                                        x.grad().end()));
  };
  const auto [l1, g1] = run();
  const auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("disconnected requires_grad leaf gets zero grads") {
  Tape<float> tape;
  Tensor<float> x({1, 1, 1, 2}, {1.0f, 2.0f}, true);
  Tensor<float> unused({1, 1, 1, 2}, {5.0f, 6.0f}, true);
  Tensor<float> sum = add(tape, x, unused);
  (void)sum;
  Tensor<float> loss = reduce_sum(tape, relu(tape, x));
  tape.backward(loss);
  REQUIRE(unused.has_grad());
  CHECK(unused.grad()[0] == 0.0f);
  CHECK(unused.grad()[1] == 0.0f);
}
