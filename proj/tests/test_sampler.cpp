#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cram/gradcheck.hpp"
#include "cram/sampler.hpp"

using namespace cram;

namespace {

// repeated 3x3 box blur, normalized by the in-bounds tap count
Tensor<double> box_blur(const Tensor<double>& img, int passes) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::vector<double> cur(img.vec());
  for (int p = 0; p < passes; ++p) {
    std::vector<double> next(cur.size(), 0.0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0;
        int taps = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
            if (yy >= 0 && yy < static_cast<std::ptrdiff_t>(h) && xx >= 0 &&
                xx < static_cast<std::ptrdiff_t>(w)) {
              acc += cur[static_cast<std::size_t>(yy) * w +
                         static_cast<std::size_t>(xx)];
              ++taps;
            }
          }
        next[y * w + x] = acc / taps;
      }
    cur = std::move(next);
  }
  return Tensor<double>({1, h, w}, std::move(cur));
}

double patch_variance(const Tensor<double>& patch) {
  double mu = 0;
  for (std::size_t i = 0; i < patch.size(); ++i) mu += patch[i];
  mu /= static_cast<double>(patch.size());
  double var = 0;
  for (std::size_t i = 0; i < patch.size(); ++i) {
    const double d = patch[i] - mu;
    var += d * d;
  }
  return var / static_cast<double>(patch.size());
}

}  // namespace

TEST_CASE("make_grid identity equals target coordinates", "[sampler]") {
  Tape<double> t;
  auto grid = make_grid(t, Tensor<double>({3}, {1.0, 0.0, 0.0}), 3, 3);
  REQUIRE(grid.shape() == Shape{3, 3, 2});
  const double expect[] = {-1, 0, 1};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(grid[(i * 3 + j) * 2 + 0] == expect[j]);
      CHECK(grid[(i * 3 + j) * 2 + 1] == expect[i]);
    }
}

TEST_CASE("make_grid matches closed-form substitution", "[sampler]") {
  Tape<double> t;
  SECTION("half zoom maps the corner inward") {
    auto grid = make_grid(t, Tensor<double>({3}, {0.5, 0.0, 0.0}), 3, 3);
    CHECK(grid[0] == -0.5);
    CHECK(grid[1] == -0.5);
  }
  SECTION("translation moves the center") {
    auto grid = make_grid(t, Tensor<double>({3}, {0.5, 0.5, -0.5}), 3, 3);
    // center cell of a 3x3 grid is the middle entry
    CHECK(grid[(1 * 3 + 1) * 2 + 0] == 0.5);
    CHECK(grid[(1 * 3 + 1) * 2 + 1] == -0.5);
  }
}

TEST_CASE("identity grid reproduces the image", "[sampler]") {
  SECTION("double precision") {
    Rng rng(4);
    Tensor<double> img = Tensor<double>::uniform({2, 9, 7}, rng, -1, 1);
    Tape<double> t;
    auto grid = make_grid(t, Tensor<double>({3}, {1.0, 0.0, 0.0}), 9, 7);
    auto out = bilinear_sample(t, img, grid);
    double worst = 0;
    for (std::size_t i = 0; i < img.size(); ++i)
      worst = std::max(worst, std::fabs(out[i] - img[i]));
    CHECK(worst <= 1e-6);
  }
  SECTION("single precision snaps onto pixel centers") {
    Rng rng(4);
    Tensor<float> img = Tensor<float>::uniform({1, 32, 32}, rng, -1, 1);
    Tape<float> t;
    auto grid = make_grid(t, Tensor<float>({3}, {1.f, 0.f, 0.f}), 32, 32);
    auto out = bilinear_sample(t, img, grid);
    float worst = 0;
    for (std::size_t i = 0; i < img.size(); ++i)
      worst = std::max(worst, std::fabs(out[i] - img[i]));
    CHECK(worst <= 1e-6f);
  }
}

TEST_CASE("center sample of a 2x2 image averages the corners", "[sampler]") {
  Tape<double> t;
  Tensor<double> img({1, 2, 2}, {0, 1, 2, 3});
  auto grid = make_grid(t, Tensor<double>({3}, {0.7, 0.0, 0.0}), 1, 1);
  auto out = bilinear_sample(t, img, grid);
  CHECK(out.item() == Catch::Approx(1.5).margin(1e-12));
}

TEST_CASE("out-of-bounds coordinates sample as zero", "[sampler]") {
  Tape<double> t;
  Tensor<double> img = Tensor<double>::full({1, 4, 4}, 5.0);
  Tensor<double> grid({1, 1, 2}, {3.0, 3.0});  // far outside
  auto out = bilinear_sample(t, img, grid);
  CHECK(out.item() == 0.0);
}

TEST_CASE("extract_glimpse identity returns the image", "[sampler]") {
  Rng rng(12);
  Tensor<double> img = Tensor<double>::uniform({1, 8, 8}, rng, -1, 1);
  Tape<double> t;
  auto patch = extract_glimpse(t, img, Tensor<double>({3}, {1.0, 0.0, 0.0}),
                               8, 8, 1);
  CHECK(patch.step_index == 1);
  CHECK(patch.tau.s == 1.0);
  double worst = 0;
  for (std::size_t i = 0; i < img.size(); ++i)
    worst = std::max(worst, std::fabs(patch.pixels[i] - img[i]));
  CHECK(worst <= 1e-6);
}

TEST_CASE("half-zoom glimpse corner matches direct bilinear lookup",
          "[sampler]") {
  Rng rng(13);
  Tensor<double> img = Tensor<double>::uniform({1, 8, 8}, rng, -1, 1);
  Tape<double> t;
  auto patch = extract_glimpse(t, img, Tensor<double>({3}, {0.5, 0.0, 0.0}),
                               4, 4, 2);
  Tensor<double> corner_grid({1, 1, 2}, {-0.5, -0.5});
  auto corner = bilinear_sample(t, img, corner_grid);
  CHECK(patch.pixels[0] == Catch::Approx(corner.item()).margin(1e-12));
}

TEST_CASE("glimpse fully inside a clue region has mean coverage one",
          "[sampler]") {
  std::vector<double> clue(16 * 16, 0.0);
  for (std::size_t y = 4; y < 12; ++y)
    for (std::size_t x = 4; x < 12; ++x) clue[y * 16 + x] = 1.0;
  Tensor<double> clue_img({1, 16, 16}, std::move(clue));
  Tape<double> t;
  // s = 0.2 keeps the patch well inside [4,12)^2
  auto patch = extract_glimpse(t, clue_img,
                               Tensor<double>({3}, {0.2, 0.0, 0.0}), 5, 5, 1);
  double mu = 0;
  for (std::size_t i = 0; i < patch.pixels.size(); ++i) mu += patch.pixels[i];
  CHECK(mu / patch.pixels.size() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("translation equivariance for integer pixel shifts", "[sampler]") {
  Rng rng(8);
  const std::size_t w = 16, h = 16;
  Tensor<double> img = Tensor<double>::uniform({1, h, w}, rng, -1, 1);
  const int delta = 2;
  // content shifted right by delta, zero fill on the left
  std::vector<double> shifted(h * w, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = delta; x < w; ++x)
      shifted[y * w + x] = img[y * w + x - delta];
  Tensor<double> img_shift({1, h, w}, std::move(shifted));

  Tape<double> t;
  const double s = 0.4;
  const double tx_adj = -2.0 * delta / static_cast<double>(w - 1);
  auto a = bilinear_sample(
      t, img_shift, make_grid(t, Tensor<double>({3}, {s, 0.0, 0.0}), 6, 6));
  auto b = bilinear_sample(
      t, img, make_grid(t, Tensor<double>({3}, {s, tx_adj, 0.0}), 6, 6));
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(std::fabs(a[i] - b[i]) <= 1e-5);
}

TEST_CASE("zooming in on smooth images does not increase variance",
          "[sampler]") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor<double> img =
        box_blur(Tensor<double>::uniform({1, 16, 16}, rng, -1, 1), 40);
    Tape<double> t;
    double prev = std::numeric_limits<double>::infinity();
    for (double s : {1.0, 0.8, 0.6, 0.4, 0.2}) {
      auto patch = bilinear_sample(
          t, img, make_grid(t, Tensor<double>({3}, {s, 0.0, 0.0}), 8, 8));
      const double var = patch_variance(patch);
      INFO("seed " << seed << " s " << s);
      CHECK(var <= prev + 1e-9);
      prev = var;
    }
  }
}

TEST_CASE("gradients reach all three tau components", "[sampler]") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    Tensor<double> img = Tensor<double>::uniform({1, 8, 8}, rng, -1, 1);
    Tape<double> t;
    Tensor<double> tau = t.leaf(Tensor<double>(
        {3}, {rng.uniform(0.3, 0.8), rng.uniform(-0.3, 0.3),
              rng.uniform(-0.3, 0.3)}));
    auto patch = bilinear_sample(t, img, make_grid(t, tau, 5, 5));
    t.backward(sum(t, patch));
    const auto& g = *t.grad(tau);
    CHECK(g[0] != 0.0);
    CHECK(g[1] != 0.0);
    CHECK(g[2] != 0.0);
  }
}

TEST_CASE("tau gradients match finite differences over 10 taus", "[sampler]") {
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto rep = gradcheck_cases::run_bilinear_sample(seed);
    worst = std::max(worst, rep.max_rel_err);
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("squash keeps tau inside its legal box", "[sampler]") {
  Rng rng(31);
  Tape<double> t;
  Tensor<double> raw = Tensor<double>::uniform({16, 3}, rng, -50, 50);
  auto tau = squash_tau(t, raw, 0.05);
  for (std::size_t b = 0; b < 16; ++b) {
    const double s = tau[b * 3 + 0], tx = tau[b * 3 + 1], ty = tau[b * 3 + 2];
    CHECK(s > 0.0);
    CHECK(s <= 1.0);
    CHECK(s >= 0.05);
    CHECK(tx >= -1.0);
    CHECK(tx <= 1.0);
    CHECK(ty >= -1.0);
    CHECK(ty <= 1.0);
  }
}
