#pragma once
// Neural-network primitives on the tape: convolutions (im2col + GEMM),
// fractionally-strided convolution, pooling, batch normalization, linear
// and LSTM modules. Spatial tensors are [B x C x H x W], row-major.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cram/ops.hpp"
#include "cram/rng.hpp"
#include "cram/tape.hpp"

namespace cram {

enum class Padding { Same, Valid };
enum class Mode { Train, Infer };

namespace detail {

struct ConvGeom {
  std::size_t out_h, out_w;
  std::ptrdiff_t pad_top, pad_left;
};

// "Same" keeps out = ceil(in / stride) with the surplus padding placed at
// the bottom/right; "valid" uses no padding.
inline ConvGeom conv_geometry(std::size_t h, std::size_t w, std::size_t k,
                              std::size_t stride, Padding pad) {
  if (stride < 1) throw ConfigError("stride must be >= 1");
  ConvGeom g{};
  if (pad == Padding::Same) {
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    const std::ptrdiff_t ph = std::max<std::ptrdiff_t>(
        0, static_cast<std::ptrdiff_t>((g.out_h - 1) * stride + k) -
               static_cast<std::ptrdiff_t>(h));
    const std::ptrdiff_t pw = std::max<std::ptrdiff_t>(
        0, static_cast<std::ptrdiff_t>((g.out_w - 1) * stride + k) -
               static_cast<std::ptrdiff_t>(w));
    g.pad_top = ph / 2;
    g.pad_left = pw / 2;
  } else {
    if (k > h || k > w)
      throw ShapeError(strformat("valid conv: kernel %zu exceeds input %zux%zu",
                                 k, h, w));
    g.out_h = (h - k) / stride + 1;
    g.out_w = (w - k) / stride + 1;
    g.pad_top = 0;
    g.pad_left = 0;
  }
  return g;
}

// Gathers conv patches of one batch element into cols [C*k*k x outH*outW].
template <typename S>
void im2col(const S* img, std::size_t c, std::size_t h, std::size_t w,
            std::size_t k, std::size_t stride, const ConvGeom& g, S* cols) {
  const std::size_t out_hw = g.out_h * g.out_w;
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx, ++row) {
        S* dst = cols + row * out_hw;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - g.pad_top;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - g.pad_left;
            dst[oy * g.out_w + ox] =
                (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                 ix < static_cast<std::ptrdiff_t>(w))
                    ? img[(ci * h + static_cast<std::size_t>(iy)) * w +
                          static_cast<std::size_t>(ix)]
                    : S(0);
          }
        }
      }
}

// Scatter-add of cols back onto the image (transpose of im2col).
template <typename S>
void col2im(const S* cols, std::size_t c, std::size_t h, std::size_t w,
            std::size_t k, std::size_t stride, const ConvGeom& g, S* img) {
  const std::size_t out_hw = g.out_h * g.out_w;
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx, ++row) {
        const S* src = cols + row * out_hw;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - g.pad_top;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - g.pad_left;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            img[(ci * h + static_cast<std::size_t>(iy)) * w +
                static_cast<std::size_t>(ix)] += src[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: input [B x C x H x W], kernel [F x C x k x k], optional bias [F]

template <typename S>
Tensor<S> conv2d(Tape<S>& t, const Tensor<S>& x, const Tensor<S>& w,
                 const Tensor<S>* bias, std::size_t stride, Padding pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d expects [BxCxHxW] input and [FxCxkxk] kernel");
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d kernel must be square");
  if (x.dim(1) != w.dim(1))
    throw ShapeError(strformat("conv2d: input channels %zu vs kernel %zu",
                               x.dim(1), w.dim(1)));
  if (bias && (bias->rank() != 1 || bias->dim(0) != w.dim(0)))
    throw ShapeError("conv2d bias must be [F]");
  const std::size_t bsz = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t f = w.dim(0), k = w.dim(2);
  const auto g = detail::conv_geometry(h, wd, k, stride, pad);
  const std::size_t ckk = c * k * k, out_hw = g.out_h * g.out_w;

  std::vector<S> out(bsz * f * out_hw);
  std::vector<S> cols(ckk * out_hw);
  for (std::size_t b = 0; b < bsz; ++b) {
    detail::im2col(x.data() + b * c * h * wd, c, h, wd, k, stride, g,
                   cols.data());
    detail::ECMap<S> mw(w.data(), f, ckk), mc(cols.data(), ckk, out_hw);
    detail::EMap<S> mo(out.data() + b * f * out_hw, f, out_hw);
    mo.noalias() = mw * mc;
  }
  if (bias) {
    for (std::size_t b = 0; b < bsz; ++b)
      for (std::size_t fi = 0; fi < f; ++fi) {
        S* dst = out.data() + (b * f + fi) * out_hw;
        const S bv = (*bias)[fi];
        for (std::size_t p = 0; p < out_hw; ++p) dst[p] += bv;
      }
  }
  Tensor<S> r({bsz, f, g.out_h, g.out_w}, std::move(out));
  const int xi = x.node(), wi = w.node(),
            bi = bias ? bias->node() : -1;
  if (xi < 0 && wi < 0 && bi < 0) return r;
  const int id = t.add_node(
      "conv2d", {xi, wi, bi}, r.size(),
      [xi, wi, bi, x, w, bsz, c, h, wd, f, k, stride, g, ckk,
       out_hw](Tape<S>& tp, const std::vector<S>& gr) {
        std::vector<S> cols(ckk * out_hw);
        std::vector<S> dcols(ckk * out_hw);
        for (std::size_t b = 0; b < bsz; ++b) {
          detail::ECMap<S> mg(gr.data() + b * f * out_hw, f, out_hw);
          if (wi >= 0) {
            detail::im2col(x.data() + b * c * h * wd, c, h, wd, k, stride, g,
                           cols.data());
            detail::ECMap<S> mc(cols.data(), ckk, out_hw);
            detail::EMap<S> gw(tp.acc(wi).data(), f, ckk);
            gw.noalias() += mg * mc.transpose();
          }
          if (xi >= 0) {
            detail::ECMap<S> mw(w.data(), f, ckk);
            detail::EMap<S> mdc(dcols.data(), ckk, out_hw);
            mdc.noalias() = mw.transpose() * mg;
            detail::col2im(dcols.data(), c, h, wd, k, stride, g,
                           tp.acc(xi).data() + b * c * h * wd);
          }
          if (bi >= 0) {
            auto& gb = tp.acc(bi);
            for (std::size_t fi = 0; fi < f; ++fi) {
              const S* src = gr.data() + (b * f + fi) * out_hw;
              S acc = 0;
              for (std::size_t p = 0; p < out_hw; ++p) acc += src[p];
              gb[fi] += acc;
            }
          }
        }
      });
  return r.with_node(id);
}

template <typename S>
Tensor<S> conv2d(Tape<S>& t, const Tensor<S>& x, const Tensor<S>& w,
                 std::size_t stride, Padding pad) {
  return conv2d(t, x, w, static_cast<const Tensor<S>*>(nullptr), stride, pad);
}

// ---------------------------------------------------------------------------
// conv2d_transpose: doubles spatial resolution (stride-1/2 convolution).
// input [B x C x H x W], kernel [C x F x k x k], output [B x F x sH x sW].

template <typename S>
Tensor<S> conv2d_transpose(Tape<S>& t, const Tensor<S>& x, const Tensor<S>& w,
                           const Tensor<S>* bias, std::size_t stride = 2) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d_transpose expects [BxCxHxW] and [CxFxkxk]");
  if (x.dim(1) != w.dim(0))
    throw ShapeError("conv2d_transpose channel mismatch");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  const std::size_t bsz = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t f = w.dim(1), k = w.dim(2);
  const std::size_t oh = h * stride, ow = wd * stride;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k - 1) / 2;
  if (bias && (bias->rank() != 1 || bias->dim(0) != f))
    throw ShapeError("conv2d_transpose bias must be [F]");

  std::vector<S> out(bsz * f * oh * ow, S(0));
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t iy = 0; iy < h; ++iy)
        for (std::size_t ix = 0; ix < wd; ++ix) {
          const S v = x[((b * c + ci) * h + iy) * wd + ix];
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t oy =
                static_cast<std::ptrdiff_t>(iy * stride + ky) - pad;
            if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(oh)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ox =
                  static_cast<std::ptrdiff_t>(ix * stride + kx) - pad;
              if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(ow)) continue;
              const S* wrow = w.data() + ((ci * f) * k + ky) * k + kx;
              S* orow = out.data() +
                        (b * f * oh + static_cast<std::size_t>(oy)) * ow +
                        static_cast<std::size_t>(ox);
              for (std::size_t fi = 0; fi < f; ++fi)
                orow[fi * oh * ow] += v * wrow[fi * k * k];
            }
          }
        }
  if (bias) {
    for (std::size_t b = 0; b < bsz; ++b)
      for (std::size_t fi = 0; fi < f; ++fi) {
        S* dst = out.data() + (b * f + fi) * oh * ow;
        for (std::size_t p = 0; p < oh * ow; ++p) dst[p] += (*bias)[fi];
      }
  }
  Tensor<S> r({bsz, f, oh, ow}, std::move(out));
  const int xi = x.node(), wi = w.node(), bi = bias ? bias->node() : -1;
  if (xi < 0 && wi < 0 && bi < 0) return r;
  const int id = t.add_node(
      "conv2d_transpose", {xi, wi, bi},
      r.size(),
      [xi, wi, bi, x, w, bsz, c, h, wd, f, k, stride, oh, ow,
       pad](Tape<S>& tp, const std::vector<S>& gr) {
        for (std::size_t b = 0; b < bsz; ++b)
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t iy = 0; iy < h; ++iy)
              for (std::size_t ix = 0; ix < wd; ++ix) {
                const std::size_t xidx = ((b * c + ci) * h + iy) * wd + ix;
                const S v = x[xidx];
                S gx = 0;
                for (std::size_t ky = 0; ky < k; ++ky) {
                  const std::ptrdiff_t oy =
                      static_cast<std::ptrdiff_t>(iy * stride + ky) - pad;
                  if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(oh)) continue;
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::ptrdiff_t ox =
                        static_cast<std::ptrdiff_t>(ix * stride + kx) - pad;
                    if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(ow))
                      continue;
                    for (std::size_t fi = 0; fi < f; ++fi) {
                      const S go =
                          gr[(b * f + fi) * oh * ow +
                             static_cast<std::size_t>(oy) * ow +
                             static_cast<std::size_t>(ox)];
                      const std::size_t widx = ((ci * f + fi) * k + ky) * k + kx;
                      if (xi >= 0) gx += go * w[widx];
                      if (wi >= 0) tp.acc(wi)[widx] += go * v;
                    }
                  }
                }
                if (xi >= 0) tp.acc(xi)[xidx] += gx;
              }
        if (bi >= 0) {
          auto& gb = tp.acc(bi);
          for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t fi = 0; fi < f; ++fi) {
              const S* src = gr.data() + (b * f + fi) * oh * ow;
              S acc = 0;
              for (std::size_t p = 0; p < oh * ow; ++p) acc += src[p];
              gb[fi] += acc;
            }
        }
      });
  return r.with_node(id);
}

// ---------------------------------------------------------------------------
// pooling

// Max pooling. With "same" padding the padded cells take part as zero
// candidates; gradient routes to the argmax input cell, first scan position
// on ties, and vanishes if a padded zero wins.
template <typename S>
Tensor<S> maxpool2d(Tape<S>& t, const Tensor<S>& x, std::size_t k,
                    std::size_t stride, Padding pad = Padding::Same) {
  if (x.rank() != 4) throw ShapeError("maxpool2d expects [BxCxHxW]");
  if (k < 1) throw ConfigError("maxpool2d kernel must be >= 1");
  const std::size_t bsz = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto g = detail::conv_geometry(h, w, k, stride, pad);
  const std::size_t out_hw = g.out_h * g.out_w;

  std::vector<S> out(bsz * c * out_hw);
  std::vector<std::int32_t> argmax(out.size(), -1);
  for (std::size_t bc = 0; bc < bsz * c; ++bc) {
    const S* img = x.data() + bc * h * w;
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        S best = std::numeric_limits<S>::lowest();
        std::int32_t best_idx = -1;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + ky) - g.pad_top;
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - g.pad_left;
            const bool inside = iy >= 0 &&
                                iy < static_cast<std::ptrdiff_t>(h) &&
                                ix >= 0 && ix < static_cast<std::ptrdiff_t>(w);
            if (pad == Padding::Valid && !inside) continue;
            const S v = inside
                            ? img[static_cast<std::size_t>(iy) * w +
                                  static_cast<std::size_t>(ix)]
                            : S(0);
            if (v > best) {
              best = v;
              best_idx = inside ? static_cast<std::int32_t>(iy * w + ix) : -1;
            }
          }
        out[bc * out_hw + oy * g.out_w + ox] = best;
        argmax[bc * out_hw + oy * g.out_w + ox] = best_idx;
      }
  }
  Tensor<S> r({bsz, c, g.out_h, g.out_w}, std::move(out));
  if (!tracked(x)) return r;
  const int xi = x.node();
  const std::size_t in_hw = h * w;
  const int id = t.add_node(
      "maxpool2d", {xi}, r.size(),
      [xi, argmax = std::move(argmax), bsz, c, out_hw, in_hw](
          Tape<S>& tp, const std::vector<S>& gr) {
        auto& gx = tp.acc(xi);
        for (std::size_t bc = 0; bc < bsz * c; ++bc)
          for (std::size_t p = 0; p < out_hw; ++p) {
            const std::int32_t a = argmax[bc * out_hw + p];
            if (a >= 0)
              gx[bc * in_hw + static_cast<std::size_t>(a)] +=
                  gr[bc * out_hw + p];
          }
      });
  return r.with_node(id);
}

// Non-overlapping average pooling; inputs not divisible by the factor are
// zero-padded at the bottom/right first.
template <typename S>
Tensor<S> avgpool2d(Tape<S>& t, const Tensor<S>& x, std::size_t factor) {
  if (x.rank() != 4) throw ShapeError("avgpool2d expects [BxCxHxW]");
  if (factor < 1) throw ConfigError("avgpool2d factor must be >= 1");
  const std::size_t bsz = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = (h + factor - 1) / factor,
                    ow = (w + factor - 1) / factor;
  const S inv = S(1) / static_cast<S>(factor * factor);
  std::vector<S> out(bsz * c * oh * ow, S(0));
  for (std::size_t bc = 0; bc < bsz * c; ++bc) {
    const S* img = x.data() + bc * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        S acc = 0;
        for (std::size_t ky = 0; ky < factor; ++ky)
          for (std::size_t kx = 0; kx < factor; ++kx) {
            const std::size_t iy = oy * factor + ky, ix = ox * factor + kx;
            if (iy < h && ix < w) acc += img[iy * w + ix];
          }
        out[bc * oh * ow + oy * ow + ox] = acc * inv;
      }
  }
  Tensor<S> r({bsz, c, oh, ow}, std::move(out));
  if (!tracked(x)) return r;
  const int xi = x.node();
  const int id = t.add_node(
      "avgpool2d", {xi}, r.size(),
      [xi, bsz, c, h, w, oh, ow, factor, inv](Tape<S>& tp,
                                              const std::vector<S>& gr) {
        auto& gx = tp.acc(xi);
        for (std::size_t bc = 0; bc < bsz * c; ++bc)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const S gv = gr[bc * oh * ow + oy * ow + ox] * inv;
              for (std::size_t ky = 0; ky < factor; ++ky)
                for (std::size_t kx = 0; kx < factor; ++kx) {
                  const std::size_t iy = oy * factor + ky,
                                    ix = ox * factor + kx;
                  if (iy < h && ix < w) gx[bc * h * w + iy * w + ix] += gv;
                }
            }
      });
  return r.with_node(id);
}

// ---------------------------------------------------------------------------
// batch normalization
//
// Normalizes over every axis except axis 1 (features/channels). Train mode
// uses batch statistics (biased variance) and updates the running buffers
// in place: running = momentum * running + (1 - momentum) * batch.

template <typename S>
Tensor<S> batchnorm(Tape<S>& t, const Tensor<S>& x, const Tensor<S>& gamma,
                    const Tensor<S>& beta, std::vector<S>& running_mean,
                    std::vector<S>& running_var, Mode mode,
                    S eps = S(1e-5), S momentum = S(0.9)) {
  if (x.rank() != 2 && x.rank() != 4)
    throw ShapeError("batchnorm expects [BxD] or [BxCxHxW]");
  const std::size_t bsz = x.dim(0), ch = x.dim(1);
  const std::size_t sp = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.size() != ch || beta.size() != ch ||
      running_mean.size() != ch || running_var.size() != ch)
    throw ShapeError("batchnorm parameter size mismatch");
  if (mode == Mode::Train && bsz < 2)
    throw ConfigError("batchnorm requires batch size >= 2 in train mode");

  const std::size_t m = bsz * sp;
  std::vector<S> mean_v(ch), inv_std(ch);
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < ch; ++c) {
      S mu = 0;
      for (std::size_t b = 0; b < bsz; ++b) {
        const S* src = x.data() + (b * ch + c) * sp;
        for (std::size_t p = 0; p < sp; ++p) mu += src[p];
      }
      mu /= static_cast<S>(m);
      S var = 0;
      for (std::size_t b = 0; b < bsz; ++b) {
        const S* src = x.data() + (b * ch + c) * sp;
        for (std::size_t p = 0; p < sp; ++p) {
          const S d = src[p] - mu;
          var += d * d;
        }
      }
      var /= static_cast<S>(m);
      mean_v[c] = mu;
      inv_std[c] = S(1) / std::sqrt(var + eps);
      running_mean[c] = momentum * running_mean[c] + (S(1) - momentum) * mu;
      running_var[c] = momentum * running_var[c] + (S(1) - momentum) * var;
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mean_v[c] = running_mean[c];
      inv_std[c] = S(1) / std::sqrt(running_var[c] + eps);
    }
  }

  std::vector<S> xhat(x.size()), out(x.size());
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      const S* src = x.data() + (b * ch + c) * sp;
      S* xh = xhat.data() + (b * ch + c) * sp;
      S* dst = out.data() + (b * ch + c) * sp;
      for (std::size_t p = 0; p < sp; ++p) {
        xh[p] = (src[p] - mean_v[c]) * inv_std[c];
        dst[p] = gamma[c] * xh[p] + beta[c];
      }
    }
  Tensor<S> r(x.shape(), std::move(out));
  if (!tracked(x, gamma, beta)) return r;
  const int xi = x.node(), gi = gamma.node(), bi = beta.node();
  const bool train = mode == Mode::Train;
  const int id = t.add_node(
      "batchnorm", {xi, gi, bi},
      r.size(),
      [xi, gi, bi, gamma, xhat = std::move(xhat), inv_std, bsz, ch, sp, m,
       train](Tape<S>& tp, const std::vector<S>& gr) {
        for (std::size_t c = 0; c < ch; ++c) {
          S sum_g = 0, sum_gx = 0;
          for (std::size_t b = 0; b < bsz; ++b) {
            const std::size_t off = (b * ch + c) * sp;
            for (std::size_t p = 0; p < sp; ++p) {
              sum_g += gr[off + p];
              sum_gx += gr[off + p] * xhat[off + p];
            }
          }
          if (gi >= 0) tp.acc(gi)[c] += sum_gx;
          if (bi >= 0) tp.acc(bi)[c] += sum_g;
          if (xi >= 0) {
            auto& gx = tp.acc(xi);
            const S inv_m = S(1) / static_cast<S>(m);
            for (std::size_t b = 0; b < bsz; ++b) {
              const std::size_t off = (b * ch + c) * sp;
              for (std::size_t p = 0; p < sp; ++p) {
                if (train) {
                  gx[off + p] += gamma[c] * inv_std[c] *
                                 (gr[off + p] - sum_g * inv_m -
                                  xhat[off + p] * sum_gx * inv_m);
                } else {
                  gx[off + p] += gamma[c] * inv_std[c] * gr[off + p];
                }
              }
            }
          }
        }
      });
  return r.with_node(id);
}

// ---------------------------------------------------------------------------
// initialization

template <typename S>
Tensor<S> init_uniform_fan_in(Rng& rng, Shape shape, std::size_t fan_in) {
  const double limit = std::sqrt(3.0 / static_cast<double>(fan_in));
  return Tensor<S>::uniform(std::move(shape), rng, static_cast<S>(-limit),
                            static_cast<S>(limit));
}

// ---------------------------------------------------------------------------
// modules

// Dense layer y = x W + b with parameters registered under a name prefix.
template <typename S>
struct Linear {
  Parameter<S> weight, bias;

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(name + ".w", init_uniform_fan_in<S>(rng, {in, out}, in)),
        bias(name + ".b", Tensor<S>::zeros({out})) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x) {
    return add_bias(t, matmul(t, x, t.use(weight)), t.use(bias));
  }

  void params(std::vector<Parameter<S>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

// Conv layer wrapper owning kernel + bias.
template <typename S>
struct Conv2d {
  Parameter<S> weight, bias;
  std::size_t stride;
  Padding pad;

  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in_ch, std::size_t out_ch,
         std::size_t k, std::size_t stride_, Padding pad_, Rng& rng)
      : weight(name + ".w", init_uniform_fan_in<S>(rng, {out_ch, in_ch, k, k},
                                                   in_ch * k * k)),
        bias(name + ".b", Tensor<S>::zeros({out_ch})),
        stride(stride_),
        pad(pad_) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x) {
    const Tensor<S> b = t.use(bias);
    return conv2d(t, x, t.use(weight), &b, stride, pad);
  }

  void params(std::vector<Parameter<S>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename S>
struct ConvTranspose2d {
  Parameter<S> weight, bias;
  std::size_t stride;

  ConvTranspose2d() = default;
  ConvTranspose2d(const std::string& name, std::size_t in_ch,
                  std::size_t out_ch, std::size_t k, std::size_t stride_,
                  Rng& rng)
      : weight(name + ".w", init_uniform_fan_in<S>(rng, {in_ch, out_ch, k, k},
                                                   in_ch * k * k)),
        bias(name + ".b", Tensor<S>::zeros({out_ch})),
        stride(stride_) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x) {
    const Tensor<S> b = t.use(bias);
    return conv2d_transpose(t, x, t.use(weight), &b, stride);
  }

  void params(std::vector<Parameter<S>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

// Batch-norm module owning scale/shift parameters and running-stat buffers.
template <typename S>
struct BatchNorm {
  Parameter<S> gamma, beta;
  Parameter<S> running_mean, running_var;  // buffers, not trainable

  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t ch)
      : gamma(name + ".gamma", Tensor<S>::full({ch}, S(1))),
        beta(name + ".beta", Tensor<S>::zeros({ch})),
        running_mean(name + ".running_mean", Tensor<S>::zeros({ch}), false),
        running_var(name + ".running_var", Tensor<S>::full({ch}, S(1)),
                    false) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x, Mode mode) {
    // running stats mutate through a scratch copy so buffer tensors stay
    // immutable values
    std::vector<S> rm(running_mean.value.vec()), rv(running_var.value.vec());
    Tensor<S> y = batchnorm(t, x, t.use(gamma), t.use(beta), rm, rv, mode);
    if (mode == Mode::Train) {
      running_mean.assign(Tensor<S>(running_mean.value.shape(), std::move(rm)));
      running_var.assign(Tensor<S>(running_var.value.shape(), std::move(rv)));
    }
    return y;
  }

  void params(std::vector<Parameter<S>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
  void buffers(std::vector<Parameter<S>*>& out) {
    out.push_back(&running_mean);
    out.push_back(&running_var);
  }
};

// ---------------------------------------------------------------------------
// LSTM

template <typename S>
struct LstmState {
  Tensor<S> c, h;  // [B x H] each

  static LstmState zeros(std::size_t batch, std::size_t hidden) {
    return {Tensor<S>::zeros({batch, hidden}),
            Tensor<S>::zeros({batch, hidden})};
  }
};

// Single LSTM cell; gate order in the packed weights is [i, f, g, o].
// Forget-gate bias initializes to +1.
template <typename S>
struct LstmCell {
  Parameter<S> w_x, w_h, bias;
  std::size_t input_size = 0, hidden_size = 0;

  LstmCell() = default;
  LstmCell(const std::string& name, std::size_t in, std::size_t hidden,
           Rng& rng)
      : w_x(name + ".w_x",
            Tensor<S>::uniform({in, 4 * hidden}, rng,
                               static_cast<S>(-1.0 / std::sqrt(double(in))),
                               static_cast<S>(1.0 / std::sqrt(double(in))))),
        w_h(name + ".w_h",
            Tensor<S>::uniform({hidden, 4 * hidden}, rng,
                               static_cast<S>(-1.0 / std::sqrt(double(hidden))),
                               static_cast<S>(1.0 / std::sqrt(double(hidden))))),
        bias(name + ".b", Tensor<S>::zeros({4 * hidden})),
        input_size(in),
        hidden_size(hidden) {
    std::vector<S> b(bias.value.vec());
    for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = S(1);
    bias.assign(Tensor<S>({4 * hidden}, std::move(b)));
  }

  LstmState<S> forward(Tape<S>& t, const Tensor<S>& x,
                       const LstmState<S>& state) {
    if (x.rank() != 2 || x.dim(1) != input_size)
      throw ShapeError(strformat("lstm_cell: input %s, expected [Bx%zu]",
                                 shape_str(x.shape()).c_str(), input_size));
    if (state.h.dim(1) != hidden_size || state.c.dim(1) != hidden_size)
      throw ShapeError("lstm_cell: state width mismatch");
    const std::size_t hs = hidden_size;
    Tensor<S> pre =
        add_bias(t,
                 add(t, matmul(t, x, t.use(w_x)),
                     matmul(t, state.h, t.use(w_h))),
                 t.use(bias));
    Tensor<S> gi = sigmoid(t, slice(t, pre, 1, 0, hs));
    Tensor<S> gf = sigmoid(t, slice(t, pre, 1, hs, hs));
    Tensor<S> gg = tanh(t, slice(t, pre, 1, 2 * hs, hs));
    Tensor<S> go = sigmoid(t, slice(t, pre, 1, 3 * hs, hs));
    Tensor<S> c2 = add(t, mul(t, gf, state.c), mul(t, gi, gg));
    Tensor<S> h2 = mul(t, go, tanh(t, c2));
    return {c2, h2};
  }

  void params(std::vector<Parameter<S>*>& out) {
    out.push_back(&w_x);
    out.push_back(&w_h);
    out.push_back(&bias);
  }
};

}  // namespace cram
