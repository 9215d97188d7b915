#pragma once
// Spatial transformer kernel: isotropic-affine grid generation and
// differentiable bilinear sampling. The transform maps target (glimpse)
// coordinates to source (image) coordinates,
//     (xs, ys) = (s * xt + tx, s * yt + ty),
// with both frames normalized so the image spans [-1, 1]^2.

#include <cmath>
#include <vector>

#include "cram/ops.hpp"
#include "cram/tape.hpp"

namespace cram {

// Scale + translation triple in normalized coordinates.
template <typename S>
struct AffineParams {
  S s, tx, ty;

  static AffineParams from_tensor(const Tensor<S>& t) {
    if (t.size() != 3) throw ShapeError("AffineParams needs 3 elements");
    return {t[0], t[1], t[2]};
  }
  Tensor<S> to_tensor() const { return Tensor<S>({3}, {s, tx, ty}); }
};

template <typename S>
struct GlimpsePatch {
  Tensor<S> pixels;  // [C x Hg x Wg]
  int step_index = 0;
  AffineParams<S> tau{};
};

namespace detail {

// Normalized target coordinate of cell j on an n-point uniform grid over
// [-1, 1]; a single-cell grid samples the center.
template <typename S>
inline S grid_coord(std::size_t j, std::size_t n) {
  if (n <= 1) return S(0);
  return S(-1) + S(2) * static_cast<S>(j) / static_cast<S>(n - 1);
}

}  // namespace detail

// Source-coordinate grid [out_h x out_w x 2], last axis (xs, ys).
// Differentiable w.r.t. the (s, tx, ty) tensor.
template <typename S>
Tensor<S> make_grid(Tape<S>& t, const Tensor<S>& tau, std::size_t out_h,
                    std::size_t out_w) {
  if (tau.size() != 3) throw ShapeError("make_grid expects a 3-element tau");
  if (out_h < 1 || out_w < 1) throw ConfigError("make_grid size must be >= 1");
  const S s = tau[0], tx = tau[1], ty = tau[2];
  std::vector<S> out(out_h * out_w * 2);
  for (std::size_t i = 0; i < out_h; ++i) {
    const S yt = detail::grid_coord<S>(i, out_h);
    for (std::size_t j = 0; j < out_w; ++j) {
      const S xt = detail::grid_coord<S>(j, out_w);
      out[(i * out_w + j) * 2 + 0] = s * xt + tx;
      out[(i * out_w + j) * 2 + 1] = s * yt + ty;
    }
  }
  Tensor<S> r({out_h, out_w, 2}, std::move(out));
  if (!tracked(tau)) return r;
  const int ti = tau.node();
  const int id = t.add_node(
      "make_grid", {ti}, r.size(),
      [ti, out_h, out_w](Tape<S>& tp, const std::vector<S>& g) {
        auto& gt = tp.acc(ti);
        for (std::size_t i = 0; i < out_h; ++i) {
          const S yt = detail::grid_coord<S>(i, out_h);
          for (std::size_t j = 0; j < out_w; ++j) {
            const S xt = detail::grid_coord<S>(j, out_w);
            const S gx = g[(i * out_w + j) * 2 + 0];
            const S gy = g[(i * out_w + j) * 2 + 1];
            gt[0] += gx * xt + gy * yt;
            gt[1] += gx;
            gt[2] += gy;
          }
        }
      });
  return r.with_node(id);
}

// Bilinear interpolation of image [C x H x W] at grid [h x w x 2].
// Coordinates outside the image sample as zero. Pixel coordinates within
// 1e-4 of an integer snap onto it, so an identity grid reproduces the
// image exactly despite rounding in the grid values.
template <typename S>
Tensor<S> bilinear_sample(Tape<S>& t, const Tensor<S>& image,
                          const Tensor<S>& grid) {
  if (image.rank() != 3) throw ShapeError("bilinear_sample image is [CxHxW]");
  if (grid.rank() != 3 || grid.dim(2) != 2)
    throw ShapeError("bilinear_sample grid is [hxwx2]");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t gh = grid.dim(0), gw = grid.dim(1);
  const S half_w = static_cast<S>(w - 1) / S(2);
  const S half_h = static_cast<S>(h - 1) / S(2);

  struct Corner {
    std::ptrdiff_t x0, y0;
    S wx, wy;
  };
  std::vector<Corner> corners(gh * gw);
  for (std::size_t p = 0; p < gh * gw; ++p) {
    S xp = (grid[p * 2 + 0] + S(1)) * half_w;
    S yp = (grid[p * 2 + 1] + S(1)) * half_h;
    if (std::fabs(xp - std::nearbyint(xp)) <= S(1e-4)) xp = std::nearbyint(xp);
    if (std::fabs(yp - std::nearbyint(yp)) <= S(1e-4)) yp = std::nearbyint(yp);
    const S fx = std::floor(xp), fy = std::floor(yp);
    corners[p] = {static_cast<std::ptrdiff_t>(fx),
                  static_cast<std::ptrdiff_t>(fy), xp - fx, yp - fy};
  }

  auto pixel = [&](std::size_t ci, std::ptrdiff_t y, std::ptrdiff_t x) -> S {
    if (y < 0 || y >= static_cast<std::ptrdiff_t>(h) || x < 0 ||
        x >= static_cast<std::ptrdiff_t>(w))
      return S(0);
    return image[(ci * h + static_cast<std::size_t>(y)) * w +
                 static_cast<std::size_t>(x)];
  };

  std::vector<S> out(c * gh * gw);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t p = 0; p < gh * gw; ++p) {
      const Corner& cr = corners[p];
      const S v00 = pixel(ci, cr.y0, cr.x0);
      const S v01 = pixel(ci, cr.y0, cr.x0 + 1);
      const S v10 = pixel(ci, cr.y0 + 1, cr.x0);
      const S v11 = pixel(ci, cr.y0 + 1, cr.x0 + 1);
      out[ci * gh * gw + p] = (S(1) - cr.wy) * ((S(1) - cr.wx) * v00 +
                                                cr.wx * v01) +
                              cr.wy * ((S(1) - cr.wx) * v10 + cr.wx * v11);
    }
  Tensor<S> r({c, gh, gw}, std::move(out));
  if (!tracked(image, grid)) return r;
  const int ii = image.node(), gi = grid.node();
  const int id = t.add_node(
      "bilinear_sample", {ii, gi}, r.size(),
      [ii, gi, image, corners = std::move(corners), c, h, w, gh, gw, half_w,
       half_h](Tape<S>& tp, const std::vector<S>& g) {
        auto in_range = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
          return y >= 0 && y < static_cast<std::ptrdiff_t>(h) && x >= 0 &&
                 x < static_cast<std::ptrdiff_t>(w);
        };
        auto pixel = [&](std::size_t ci, std::ptrdiff_t y,
                         std::ptrdiff_t x) -> S {
          return in_range(y, x)
                     ? image[(ci * h + static_cast<std::size_t>(y)) * w +
                             static_cast<std::size_t>(x)]
                     : S(0);
        };
        std::vector<S>* gimg = ii >= 0 ? &tp.acc(ii) : nullptr;
        std::vector<S>* ggrid = gi >= 0 ? &tp.acc(gi) : nullptr;
        for (std::size_t p = 0; p < gh * gw; ++p) {
          const auto& cr = corners[p];
          S dxp = 0, dyp = 0;
          for (std::size_t ci = 0; ci < c; ++ci) {
            const S go = g[ci * gh * gw + p];
            if (go == S(0)) continue;
            const S v00 = pixel(ci, cr.y0, cr.x0);
            const S v01 = pixel(ci, cr.y0, cr.x0 + 1);
            const S v10 = pixel(ci, cr.y0 + 1, cr.x0);
            const S v11 = pixel(ci, cr.y0 + 1, cr.x0 + 1);
            if (gimg) {
              auto scatter = [&](std::ptrdiff_t y, std::ptrdiff_t x, S wgt) {
                if (in_range(y, x))
                  (*gimg)[(ci * h + static_cast<std::size_t>(y)) * w +
                          static_cast<std::size_t>(x)] += go * wgt;
              };
              scatter(cr.y0, cr.x0, (S(1) - cr.wy) * (S(1) - cr.wx));
              scatter(cr.y0, cr.x0 + 1, (S(1) - cr.wy) * cr.wx);
              scatter(cr.y0 + 1, cr.x0, cr.wy * (S(1) - cr.wx));
              scatter(cr.y0 + 1, cr.x0 + 1, cr.wy * cr.wx);
            }
            dxp += go * ((S(1) - cr.wy) * (v01 - v00) + cr.wy * (v11 - v10));
            dyp += go * ((S(1) - cr.wx) * (v10 - v00) + cr.wx * (v11 - v01));
          }
          if (ggrid) {
            (*ggrid)[p * 2 + 0] += dxp * half_w;
            (*ggrid)[p * 2 + 1] += dyp * half_h;
          }
        }
      });
  return r.with_node(id);
}

// Squashes raw localization outputs [B x 3] into valid tau rows:
// s = sigmoid(a) * (1 - s_min) + s_min, tx = tanh(b), ty = tanh(c).
template <typename S>
Tensor<S> squash_tau(Tape<S>& t, const Tensor<S>& raw, S s_min = S(0.05)) {
  if (raw.rank() != 2 || raw.dim(1) != 3)
    throw ShapeError("squash_tau expects [B x 3]");
  Tensor<S> s = add_scalar(
      t, scale(t, sigmoid(t, slice(t, raw, 1, 0, 1)), S(1) - s_min), s_min);
  Tensor<S> tx = tanh(t, slice(t, raw, 1, 1, 1));
  Tensor<S> ty = tanh(t, slice(t, raw, 1, 2, 1));
  return concat(t, {s, tx, ty}, 1);
}

// One glimpse: grid from tau, bilinear sample, bookkeeping.
template <typename S>
GlimpsePatch<S> extract_glimpse(Tape<S>& t, const Tensor<S>& image,
                                const Tensor<S>& tau, std::size_t glimpse_h,
                                std::size_t glimpse_w, int step_index = 1) {
  if (step_index < 1) throw UsageError("glimpse step index starts at 1");
  Tensor<S> grid = make_grid(t, tau, glimpse_h, glimpse_w);
  GlimpsePatch<S> patch;
  patch.pixels = bilinear_sample(t, image, grid);
  patch.step_index = step_index;
  patch.tau = AffineParams<S>::from_tensor(tau);
  return patch;
}

}  // namespace cram
