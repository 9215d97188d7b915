#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cram/ops.hpp"

using namespace cram;

TEST_CASE("matmul identity and projector", "[ops]") {
  Tape<double> t;
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> m({2, 2}, {1, 2, 3, 4});
  auto r = matmul(t, eye, m);
  CHECK(r.vec() == std::vector<double>{1, 2, 3, 4});

  Tensor<double> proj({2, 2}, {1, 0, 0, 0});
  Tensor<double> n({2, 2}, {5, 6, 7, 8});
  auto r2 = matmul(t, proj, n);
  CHECK(r2.vec() == std::vector<double>{5, 6, 0, 0});
}

TEST_CASE("matmul rejects mismatched shapes naming both", "[ops]") {
  Tape<double> t;
  Tensor<double> a = Tensor<double>::zeros({2, 3});
  Tensor<double> b = Tensor<double>::zeros({2, 2});
  try {
    matmul(t, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum equals broadcast column sums", "[ops]") {
  // oracle: d(sum(A B))/dA[i,k] = sum_j B[k,j], computed directly
  Rng rng(5);
  Tensor<double> a0 = Tensor<double>::uniform({3, 4}, rng, -2, 2);
  Tensor<double> b0 = Tensor<double>::uniform({4, 2}, rng, -2, 2);
  std::vector<double> col_sums(4, 0.0);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t j = 0; j < 2; ++j) col_sums[k] += b0[k * 2 + j];

  Tape<double> t;
  Tensor<double> a = t.leaf(a0);
  t.backward(sum(t, matmul(t, a, b0)));
  const auto& g = *t.grad(a);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k)
      CHECK(g[i * 4 + k] == Catch::Approx(col_sums[k]).epsilon(1e-6));
}

TEST_CASE("elu closed forms", "[ops]") {
  Tape<double> t;
  Tensor<double> x({3}, {0.0, 3.0, -1.0});
  auto y = elu(t, x);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 3.0);
  CHECK(y[2] == Catch::Approx(std::exp(-1.0) - 1.0).margin(1e-12));
}

TEST_CASE("sigmoid and tanh centers", "[ops]") {
  Tape<double> t;
  CHECK(sigmoid(t, Tensor<double>::scalar(0.0)).item() == 0.5);
  CHECK(tanh(t, Tensor<double>::scalar(0.0)).item() == 0.0);
}

TEST_CASE("sigmoid saturates without overflow", "[ops]") {
  Tape<double> t;
  auto hi = sigmoid(t, Tensor<double>::scalar(40.0)).item();
  auto lo = sigmoid(t, Tensor<double>::scalar(-40.0)).item();
  CHECK(std::fabs(hi - 1.0) <= 1e-12);
  CHECK(std::fabs(lo - 0.0) <= 1e-12);
  CHECK(std::isfinite(hi));
  CHECK(std::isfinite(lo));
  // agrees with the naive formulation where that one is representable
  CHECK(hi == Catch::Approx(1.0 / (1.0 + std::exp(-40.0))).margin(1e-15));
  CHECK(lo == Catch::Approx(1.0 / (1.0 + std::exp(40.0))).margin(1e-15));
}

TEST_CASE("softmax cross entropy closed forms", "[ops]") {
  Tape<double> t;
  SECTION("uniform logits give ln K") {
    Tensor<double> logits = Tensor<double>::zeros({2, 4});
    auto l = softmax_cross_entropy(t, logits, {0, 3});
    CHECK(l.item() == Catch::Approx(std::log(4.0)).margin(1e-12));
  }
  SECTION("confident correct logit saturates to zero loss") {
    Tensor<double> logits({1, 3}, {50.0, 0.0, 0.0});
    auto l = softmax_cross_entropy(t, logits, {0});
    CHECK(l.item() <= 1e-9);
    CHECK(l.item() >= 0.0);
  }
  SECTION("label out of range is a data error") {
    Tensor<double> logits = Tensor<double>::zeros({1, 3});
    CHECK_THROWS_AS(softmax_cross_entropy(t, logits, {3}), ValueError);
  }
}

TEST_CASE("softmax cross entropy matches brute-force formula", "[ops]") {
  // oracle: direct definition without max-subtraction, double precision
  Rng rng(17);
  Tensor<double> logits = Tensor<double>::uniform({3, 5}, rng, -2, 2);
  std::vector<int> labels = {4, 0, 2};
  double expected = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    double denom = 0;
    for (std::size_t j = 0; j < 5; ++j) denom += std::exp(logits[b * 5 + j]);
    expected -= std::log(
        std::exp(logits[b * 5 + static_cast<std::size_t>(labels[b])]) / denom);
  }
  expected /= 3.0;
  Tape<double> t;
  auto l = softmax_cross_entropy(t, logits, labels);
  CHECK(l.item() == Catch::Approx(expected).margin(1e-10));
}

TEST_CASE("concat and slice are inverses along an axis", "[ops]") {
  Rng rng(2);
  Tape<double> t;
  Tensor<double> a = Tensor<double>::uniform({2, 3}, rng, -1, 1);
  Tensor<double> b = Tensor<double>::uniform({2, 2}, rng, -1, 1);
  auto cat = concat(t, {a, b}, 1);
  REQUIRE(cat.shape() == Shape{2, 5});
  CHECK(slice(t, cat, 1, 0, 3).vec() == a.vec());
  CHECK(slice(t, cat, 1, 3, 2).vec() == b.vec());
}

TEST_CASE("log_clamped floors its argument", "[ops]") {
  Tape<double> t;
  Tensor<double> x({2}, {0.0, 1.0});
  auto y = log_clamped(t, x, 1e-8);
  CHECK(y[0] == Catch::Approx(std::log(1e-8)).margin(1e-12));
  CHECK(y[1] == 0.0);
}
