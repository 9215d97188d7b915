#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cram/gradcheck.hpp"
#include "cram/nn.hpp"

using namespace cram;

TEST_CASE("conv2d identity kernel passes input through", "[nn]") {
  Tape<double> t;
  Tensor<double> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<double> k({1, 1, 1, 1}, {1.0});
  auto y = conv2d(t, x, k, 1, Padding::Same);
  CHECK(y.shape() == x.shape());
  CHECK(y.vec() == x.vec());
}

TEST_CASE("conv2d all-ones valid counts overlap", "[nn]") {
  Tape<double> t;
  Tensor<double> x = Tensor<double>::full({1, 1, 4, 4}, 1.0);
  Tensor<double> k = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(t, x, k, 1, Padding::Valid);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  for (double v : y.vec()) CHECK(v == 9.0);
}

TEST_CASE("conv2d same geometry is ceil(in/stride)", "[nn]") {
  Tape<double> t;
  Tensor<double> x = Tensor<double>::zeros({1, 1, 32, 32});
  Tensor<double> k = Tensor<double>::zeros({2, 1, 5, 5});
  auto y = conv2d(t, x, k, 2, Padding::Same);
  CHECK(y.shape() == Shape{1, 2, 16, 16});
  CHECK_THROWS_AS(conv2d(t, x, k, 0, Padding::Same), ConfigError);
}

TEST_CASE("maxpool2d basic window and tie-break", "[nn]") {
  Tape<double> t;
  SECTION("2x2 window picks the max") {
    Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = maxpool2d(t, x, 2, 2, Padding::Valid);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == 4.0);
  }
  SECTION("constant input routes gradient to first window element") {
    Tensor<double> x0 = Tensor<double>::full({1, 1, 4, 4}, 1.0);
    Tensor<double> x = t.leaf(x0);
    auto y = maxpool2d(t, x, 2, 2, Padding::Valid);
    t.backward(sum(t, y));
    const auto& g = *t.grad(x);
    // top-left corner of each of the four windows
    const std::vector<double> expect = {1, 0, 1, 0, 0, 0, 0, 0,
                                        1, 0, 1, 0, 0, 0, 0, 0};
    CHECK(g == expect);
  }
  SECTION("same padding produces ceil(in/stride) output") {
    Rng rng(9);
    Tensor<double> x = Tensor<double>::uniform({1, 1, 7, 7}, rng, -2, 2);
    auto y = maxpool2d(t, x, 3, 2, Padding::Same);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
  }
}

TEST_CASE("batchnorm normalizes per channel", "[nn]") {
  SECTION("already standardized input is preserved") {
    // column with exact zero mean and unit (biased) variance
    Tensor<double> x({4, 1}, {1, -1, 1, -1});
    Tensor<double> gamma = Tensor<double>::full({1}, 1.0);
    Tensor<double> beta = Tensor<double>::zeros({1});
    std::vector<double> rm(1, 0), rv(1, 1);
    Tape<double> t;
    auto y = batchnorm(t, x, gamma, beta, rm, rv, Mode::Train);
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(std::fabs(y[i] - x[i]) <= 1e-5);
  }
  SECTION("zero gamma collapses to beta") {
    Rng rng(3);
    Tensor<double> x = Tensor<double>::uniform({5, 3}, rng, -4, 4);
    Tensor<double> gamma = Tensor<double>::zeros({3});
    Tensor<double> beta({3}, {0.5, -1.0, 2.0});
    std::vector<double> rm(3, 0), rv(3, 1);
    Tape<double> t;
    auto y = batchnorm(t, x, gamma, beta, rm, rv, Mode::Train);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 3; ++c) CHECK(y[i * 3 + c] == beta[c]);
  }
  SECTION("train-mode output statistics") {
    Rng rng(21);
    Tensor<double> x = Tensor<double>::uniform({8, 4}, rng, -2, 2);
    Tensor<double> gamma = Tensor<double>::full({4}, 1.0);
    Tensor<double> beta = Tensor<double>::zeros({4});
    std::vector<double> rm(4, 0), rv(4, 1);
    Tape<double> t;
    auto y = batchnorm(t, x, gamma, beta, rm, rv, Mode::Train);
    for (std::size_t c = 0; c < 4; ++c) {
      double mu = 0, var = 0;
      for (std::size_t b = 0; b < 8; ++b) mu += y[b * 4 + c];
      mu /= 8;
      for (std::size_t b = 0; b < 8; ++b) {
        const double d = y[b * 4 + c] - mu;
        var += d * d;
      }
      var /= 8;
      CHECK(std::fabs(mu) <= 1e-6);
      CHECK(std::fabs(var - 1.0) <= 1e-4);
    }
  }
  SECTION("batch of one in train mode is a configuration error") {
    Tensor<double> x = Tensor<double>::zeros({1, 3});
    Tensor<double> gamma = Tensor<double>::full({3}, 1.0);
    Tensor<double> beta = Tensor<double>::zeros({3});
    std::vector<double> rm(3, 0), rv(3, 1);
    Tape<double> t;
    CHECK_THROWS_AS(batchnorm(t, x, gamma, beta, rm, rv, Mode::Train),
                    ConfigError);
    // infer mode accepts single rows
    CHECK_NOTHROW(batchnorm(t, x, gamma, beta, rm, rv, Mode::Infer));
  }
  SECTION("running statistics blend with momentum 0.9") {
    Tensor<double> x({2, 1}, {1.0, 3.0});  // batch mean 2, biased var 1
    Tensor<double> gamma = Tensor<double>::full({1}, 1.0);
    Tensor<double> beta = Tensor<double>::zeros({1});
    std::vector<double> rm(1, 0.0), rv(1, 1.0);
    Tape<double> t;
    batchnorm(t, x, gamma, beta, rm, rv, Mode::Train);
    CHECK(rm[0] == Catch::Approx(0.9 * 0.0 + 0.1 * 2.0).margin(1e-12));
    CHECK(rv[0] == Catch::Approx(0.9 * 1.0 + 0.1 * 1.0).margin(1e-12));
  }
}

TEST_CASE("lstm cell closed forms", "[nn]") {
  Rng rng(1);
  SECTION("zero weights and zero state give zero output") {
    LstmCell<double> cell("t.lstm", 3, 4, rng);
    for (auto* p : std::vector<Parameter<double>*>{&cell.w_x, &cell.w_h,
                                                   &cell.bias})
      p->assign(Tensor<double>::zeros(p->value.shape()));
    Tape<double> t;
    Tensor<double> x({2, 3}, {5, -1, 2, 0.5, 3, -2});
    auto next = cell.forward(t, x, LstmState<double>::zeros(2, 4));
    for (double v : next.h.vec()) CHECK(v == 0.0);
  }
  SECTION("saturated gates carry the cell through") {
    LstmCell<double> cell("t.lstm", 3, 4, rng);
    cell.w_x.assign(Tensor<double>::zeros({3, 16}));
    cell.w_h.assign(Tensor<double>::zeros({4, 16}));
    std::vector<double> b(16, 0.0);
    for (std::size_t j = 0; j < 4; ++j) b[j] = -10.0;      // input gate shut
    for (std::size_t j = 4; j < 8; ++j) b[j] = 10.0;       // forget gate open
    cell.bias.assign(Tensor<double>({16}, std::move(b)));
    Tape<double> t;
    Tensor<double> x = Tensor<double>::zeros({1, 3});
    Tensor<double> c0({1, 4}, {0.3, -0.7, 1.0, -0.2});
    auto next = cell.forward(t, x, {c0, Tensor<double>::zeros({1, 4})});
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(std::fabs(next.c[i] - c0[i]) <= 1e-3);
  }
  SECTION("dimension mismatch is a shape error") {
    LstmCell<double> cell("t.lstm", 3, 4, rng);
    Tape<double> t;
    CHECK_THROWS_AS(
        cell.forward(t, Tensor<double>::zeros({1, 5}),
                     LstmState<double>::zeros(1, 4)),
        ShapeError);
  }
}

TEST_CASE("finite differences confirm analytic gradients", "[nn][gradcheck]") {
  for (const auto& c : gradcheck_registry()) {
    double worst = 0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed)
      worst = std::max(worst, c.run(seed).max_rel_err);
    INFO(c.name);
    CHECK(worst <= c.tol);
  }
}

TEST_CASE("gradcheck registry covers every differentiable op", "[nn]") {
  const auto& reg = gradcheck_registry();
  CHECK(reg.size() == 16);
  auto has = [&](const char* n) {
    for (const auto& c : reg)
      if (c.name == n) return true;
    return false;
  };
  for (const char* n :
       {"matmul", "conv2d", "maxpool2d", "batchnorm", "elu", "sigmoid", "tanh",
        "lstm_cell", "softmax_cross_entropy", "bilinear_sample",
        "encoder_unroll_n2"})
    CHECK(has(n));
}

TEST_CASE("a broken backward is detected and named", "[nn]") {
  // fixture op with a deliberately wrong gradient
  auto broken = [](std::uint64_t seed) {
    Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
    FdProblem p;
    p.inputs = {Tensor<double>::uniform({4}, rng, -2, 2)};
    p.loss = [](Tape<double>& t, const std::vector<Tensor<double>>& xs) {
      Tensor<double> y = mul(t, xs[0], xs[0]);
      const int xi = xs[0].node();
      // wrong by a factor of 3
      if (xi >= 0) {
        const Tensor<double> x = xs[0];
        const int id = t.add_node(
            "broken", {xi}, 1,
            [xi, x](Tape<double>& tp, const std::vector<double>& g) {
              auto& gx = tp.acc(xi);
              for (std::size_t i = 0; i < gx.size(); ++i)
                gx[i] += 3.0 * g[0];
            });
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y[i];
        return Tensor<double>::scalar(s).with_node(id);
      }
      return sum(t, y);
    };
    return fd_compare(p, pick);
  };
  GradCheckCase c{"broken_fixture", 1e-4, broken};
  CHECK(c.run(1).max_rel_err > 1e-4);
}
