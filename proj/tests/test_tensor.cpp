#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <sstream>

#include "cram/ops.hpp"
#include "cram/tape.hpp"
#include "cram/tensor.hpp"

using namespace cram;

TEST_CASE("tensor shape must match data length", "[tensor]") {
  CHECK_THROWS_AS(Tensor<float>({2, 3}, {1.f, 2.f}), ShapeError);
  Tensor<float> t({2, 2}, {1.f, 2.f, 3.f, 4.f});
  CHECK(t.size() == 4);
  CHECK(t.node() == -1);
  CHECK_FALSE(t.requires_grad());
}

TEST_CASE("tns round-trip is bit-exact", "[tensor]") {
  Rng rng(7);
  auto t = Tensor<float>::uniform({3, 4, 2}, rng, -5.f, 5.f);
  auto back = tns_roundtrip(t);
  REQUIRE(back.shape() == t.shape());
  REQUIRE(std::memcmp(back.data(), t.data(), t.size() * sizeof(float)) == 0);

  // awkward values survive exactly
  Tensor<double> d({4}, {-0.0, 1e-308, -3.5, 7.25e17});
  auto dback = tns_roundtrip(d);
  REQUIRE(std::memcmp(dback.data(), d.data(), d.size() * sizeof(double)) == 0);
}

TEST_CASE("tns rejects malformed streams", "[tensor]") {
  std::stringstream good(std::ios::in | std::ios::out | std::ios::binary);
  write_tns(good, Tensor<float>({2}, {1.f, 2.f}));
  const std::string bytes = good.str();

  SECTION("bad magic") {
    std::stringstream ss("XXXX" + bytes.substr(4),
                         std::ios::in | std::ios::binary);
    CHECK_THROWS_AS(read_tns<float>(ss), FormatError);
  }
  SECTION("truncation") {
    std::stringstream ss(bytes.substr(0, bytes.size() - 3),
                         std::ios::in | std::ios::binary);
    CHECK_THROWS_AS(read_tns<float>(ss), FormatError);
  }
  SECTION("dtype mismatch") {
    std::stringstream ss(bytes, std::ios::in | std::ios::binary);
    CHECK_THROWS_AS(read_tns<double>(ss), FormatError);
  }
}

TEST_CASE("backward of sum is all ones", "[tensor]") {
  Tape<double> tape;
  Tensor<double> x = tape.leaf(Tensor<double>({2, 3}, {1, -2, 3, 4, -5, 6}));
  Tensor<double> loss = sum(tape, x);
  tape.backward(loss);
  const auto* g = tape.grad(x);
  REQUIRE(g);
  for (double v : *g) CHECK(v == 1.0);
}

TEST_CASE("backward of half sum of squares returns x", "[tensor]") {
  Tape<double> tape;
  Tensor<double> x0({4}, {0.5, -1.5, 2.0, 0.0});
  Tensor<double> x = tape.leaf(x0);
  Tensor<double> loss = scale(tape, sum(tape, mul(tape, x, x)), 0.5);
  tape.backward(loss);
  const auto* g = tape.grad(x);
  REQUIRE(g);
  for (std::size_t i = 0; i < x0.size(); ++i)
    CHECK((*g)[i] == Catch::Approx(x0[i]).margin(1e-12));
}

TEST_CASE("backward requires scalar tracked loss", "[tensor]") {
  Tape<double> tape;
  Tensor<double> x = tape.leaf(Tensor<double>({2}, {1, 2}));
  CHECK_THROWS_AS(tape.backward(x), UsageError);
  CHECK_THROWS_AS(tape.backward(Tensor<double>::scalar(1.0)), UsageError);
}

TEST_CASE("repeated backward accumulates parameter gradients", "[tensor]") {
  Parameter<double> p("p", Tensor<double>({3}, {1, 2, 3}));
  Tape<double> tape;
  Tensor<double> loss = sum(tape, tape.use(p));
  tape.backward(loss);
  tape.backward(loss);
  for (double v : p.grad) CHECK(v == 2.0);
  p.zero_grad();
  tape.backward(loss);
  for (double v : p.grad) CHECK(v == 1.0);
}

TEST_CASE("backward is linear in the loss", "[tensor]") {
  Rng rng(3);
  Tensor<double> x0 = Tensor<double>::uniform({5}, rng, -2, 2);
  const double a = 1.7, b = -0.6;

  Tape<double> tape;
  Tensor<double> x = tape.leaf(x0);
  Tensor<double> l1 = sum(tape, mul(tape, x, x));
  Tensor<double> l2 = mean(tape, sigmoid(tape, x));
  Tensor<double> combined =
      add(tape, scale(tape, l1, a), scale(tape, l2, b));

  tape.backward(l1);
  std::vector<double> g1 = *tape.grad(x);
  tape.backward(l2);
  std::vector<double> g2 = *tape.grad(x);
  tape.backward(combined);
  const auto& gc = *tape.grad(x);
  for (std::size_t i = 0; i < g1.size(); ++i)
    CHECK(gc[i] == Catch::Approx(a * g1[i] + b * g2[i]).margin(1e-6));
}

TEST_CASE("operations do not mutate inputs", "[tensor]") {
  Rng rng(11);
  Tensor<double> a0 = Tensor<double>::uniform({3, 3}, rng, -2, 2);
  Tensor<double> b0 = Tensor<double>::uniform({3, 3}, rng, -2, 2);
  const std::vector<double> a_copy = a0.vec(), b_copy = b0.vec();

  Tape<double> tape;
  Tensor<double> a = tape.leaf(a0), b = tape.leaf(b0);
  Tensor<double> out = matmul(tape, elu(tape, a), sigmoid(tape, b));
  tape.backward(sum(tape, out));

  CHECK(a0.vec() == a_copy);
  CHECK(b0.vec() == b_copy);
}

TEST_CASE("forward and gradients replay bit-identically", "[tensor]") {
  auto run = [](std::vector<double>& grad_out) {
    Rng rng(99);
    Tape<double> tape;
    Tensor<double> x = tape.leaf(Tensor<double>::uniform({4, 4}, rng, -1, 1));
    Tensor<double> y = matmul(tape, x, tanh(tape, x));
    Tensor<double> loss = mean(tape, mul(tape, y, y));
    tape.backward(loss);
    grad_out = *tape.grad(x);
    return loss.item();
  };
  std::vector<double> g1, g2;
  const double l1 = run(g1), l2 = run(g2);
  CHECK(std::memcmp(&l1, &l2, sizeof(double)) == 0);
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}
