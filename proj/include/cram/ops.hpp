#pragma once
// Differentiable tensor operations. Each op computes its forward value
// eagerly and, when an operand is tracked, appends a node whose closure
// accumulates input gradients. Inputs are never mutated.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "cram/tape.hpp"
#include "cram/tensor.hpp"

namespace cram {

namespace detail {

template <typename S>
using EMat =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

template <typename S>
inline void check_same_shape(const char* op, const Tensor<S>& a,
                             const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(strformat("%s: shape %s vs %s", op,
                               shape_str(a.shape()).c_str(),
                               shape_str(b.shape()).c_str()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic

template <typename S>
Tensor<S> add(Tape<S>& t, const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a, b);
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a, b)) return r;
  const int ai = a.node(), bi = b.node();
  const int id = t.add_node("add", {ai, bi}, r.size(),
                            [ai, bi](Tape<S>& tp, const std::vector<S>& g) {
                              tp.add_grad(ai, g.data(), g.size());
                              tp.add_grad(bi, g.data(), g.size());
                            });
  return r.with_node(id);
}

template <typename S>
Tensor<S> sub(Tape<S>& t, const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a, b)) return r;
  const int ai = a.node(), bi = b.node();
  const int id = t.add_node("sub", {ai, bi}, r.size(),
                            [ai, bi](Tape<S>& tp, const std::vector<S>& g) {
                              tp.add_grad(ai, g.data(), g.size());
                              if (bi >= 0) {
                                auto& gb = tp.acc(bi);
                                for (std::size_t i = 0; i < g.size(); ++i)
                                  gb[i] -= g[i];
                              }
                            });
  return r.with_node(id);
}

template <typename S>
Tensor<S> mul(Tape<S>& t, const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a, b)) return r;
  const int ai = a.node(), bi = b.node();
  const int id = t.add_node(
      "mul", {ai, bi}, r.size(),
      [ai, bi, a, b](Tape<S>& tp, const std::vector<S>& g) {
        if (ai >= 0) {
          auto& ga = tp.acc(ai);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
        }
        if (bi >= 0) {
          auto& gb = tp.acc(bi);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
        }
      });
  return r.with_node(id);
}

template <typename S>
Tensor<S> neg(Tape<S>& t, const Tensor<S>& a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a[i];
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a)) return r;
  const int ai = a.node();
  const int id = t.add_node("neg", {ai}, r.size(),
                            [ai](Tape<S>& tp, const std::vector<S>& g) {
                              auto& ga = tp.acc(ai);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                ga[i] -= g[i];
                            });
  return r.with_node(id);
}

template <typename S>
Tensor<S> scale(Tape<S>& t, const Tensor<S>& a, S c) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a)) return r;
  const int ai = a.node();
  const int id = t.add_node("scale", {ai}, r.size(),
                            [ai, c](Tape<S>& tp, const std::vector<S>& g) {
                              auto& ga = tp.acc(ai);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                ga[i] += g[i] * c;
                            });
  return r.with_node(id);
}

template <typename S>
Tensor<S> add_scalar(Tape<S>& t, const Tensor<S>& a, S c) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c;
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a)) return r;
  const int ai = a.node();
  const int id = t.add_node("add_scalar", {ai}, r.size(),
                            [ai](Tape<S>& tp, const std::vector<S>& g) {
                              tp.add_grad(ai, g.data(), g.size());
                            });
  return r.with_node(id);
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
Tensor<S> sum(Tape<S>& t, const Tensor<S>& a) {
  S acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  Tensor<S> r = Tensor<S>::scalar(acc);
  if (!tracked(a)) return r;
  const int ai = a.node();
  const std::size_t n = a.size();
  const int id = t.add_node("sum", {ai}, 1,
                            [ai, n](Tape<S>& tp, const std::vector<S>& g) {
                              auto& ga = tp.acc(ai);
                              for (std::size_t i = 0; i < n; ++i)
                                ga[i] += g[0];
                            });
  return r.with_node(id);
}

template <typename S>
Tensor<S> mean(Tape<S>& t, const Tensor<S>& a) {
  if (a.size() == 0) throw UsageError("mean of empty tensor");
  S acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  const S inv = S(1) / static_cast<S>(a.size());
  Tensor<S> r = Tensor<S>::scalar(acc * inv);
  if (!tracked(a)) return r;
  const int ai = a.node();
  const std::size_t n = a.size();
  const int id = t.add_node("mean", {ai}, 1,
                            [ai, n, inv](Tape<S>& tp, const std::vector<S>& g) {
                              auto& ga = tp.acc(ai);
                              const S gv = g[0] * inv;
                              for (std::size_t i = 0; i < n; ++i) ga[i] += gv;
                            });
  return r.with_node(id);
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities

template <typename S>
Tensor<S> abs(Tape<S>& t, const Tensor<S>& a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a[i]);
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a)) return r;
  const int ai = a.node();
  // subgradient 0 at the kink
  const int id = t.add_node(
      "abs", {ai}, r.size(), [ai, a](Tape<S>& tp, const std::vector<S>& g) {
        auto& ga = tp.acc(ai);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (a[i] > S(0))
            ga[i] += g[i];
          else if (a[i] < S(0))
            ga[i] -= g[i];
        }
      });
  return r.with_node(id);
}

template <typename S>
Tensor<S> log_clamped(Tape<S>& t, const Tensor<S>& a, S floor = S(1e-8)) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::log(std::max(a[i], floor));
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a)) return r;
  const int ai = a.node();
  const int id = t.add_node(
      "log_clamped", {ai}, r.size(),
      [ai, a, floor](Tape<S>& tp, const std::vector<S>& g) {
        auto& ga = tp.acc(ai);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (a[i] > floor) ga[i] += g[i] / a[i];
      });
  return r.with_node(id);
}

template <typename S>
Tensor<S> clamp(Tape<S>& t, const Tensor<S>& a, S lo, S hi) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(std::max(a[i], lo), hi);
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a)) return r;
  const int ai = a.node();
  const int id = t.add_node(
      "clamp", {ai}, r.size(),
      [ai, a, lo, hi](Tape<S>& tp, const std::vector<S>& g) {
        auto& ga = tp.acc(ai);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (a[i] > lo && a[i] < hi) ga[i] += g[i];
      });
  return r.with_node(id);
}

template <typename S>
Tensor<S> sigmoid(Tape<S>& t, const Tensor<S>& a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S x = a[i];
    if (x >= S(0)) {
      out[i] = S(1) / (S(1) + std::exp(-x));
    } else {
      const S e = std::exp(x);
      out[i] = e / (S(1) + e);
    }
  }
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a)) return r;
  const int ai = a.node();
  const int id = t.add_node(
      "sigmoid", {ai}, r.size(),
      [ai, r](Tape<S>& tp, const std::vector<S>& g) {
        auto& ga = tp.acc(ai);
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * r[i] * (S(1) - r[i]);
      });
  return r.with_node(id);
}

template <typename S>
Tensor<S> tanh(Tape<S>& t, const Tensor<S>& a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a)) return r;
  const int ai = a.node();
  const int id = t.add_node(
      "tanh", {ai}, r.size(), [ai, r](Tape<S>& tp, const std::vector<S>& g) {
        auto& ga = tp.acc(ai);
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * (S(1) - r[i] * r[i]);
      });
  return r.with_node(id);
}

template <typename S>
Tensor<S> elu(Tape<S>& t, const Tensor<S>& a) {
  std::vector<S> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a[i] > S(0) ? a[i] : std::expm1(a[i]);
  Tensor<S> r(a.shape(), std::move(out));
  if (!tracked(a)) return r;
  const int ai = a.node();
  const int id = t.add_node(
      "elu", {ai}, r.size(), [ai, a, r](Tape<S>& tp, const std::vector<S>& g) {
        auto& ga = tp.acc(ai);
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += a[i] > S(0) ? g[i] : g[i] * (r[i] + S(1));
      });
  return r.with_node(id);
}

// ---------------------------------------------------------------------------
// structure

template <typename S>
Tensor<S> concat(Tape<S>& t, const std::vector<Tensor<S>>& xs,
                 std::size_t axis) {
  if (xs.empty()) throw UsageError("concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat axis out of range");
  Shape out_shape = s0;
  std::size_t axis_total = 0;
  for (const auto& x : xs) {
    if (x.rank() != s0.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && x.dim(d) != s0[d])
        throw ShapeError(strformat("concat: shape %s vs %s on axis %zu",
                                   shape_str(x.shape()).c_str(),
                                   shape_str(s0).c_str(), d));
    axis_total += x.dim(axis);
  }
  out_shape[axis] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<S> out(numel(out_shape));
  const std::size_t out_stride = axis_total * inner;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t blk = x.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(x.data() + o * blk, x.data() + (o + 1) * blk,
                out.data() + o * out_stride + off);
    off += blk;
  }
  Tensor<S> r(out_shape, std::move(out));

  bool any = false;
  std::vector<int> ids(xs.size());
  std::vector<std::size_t> blks(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    ids[i] = xs[i].node();
    blks[i] = xs[i].dim(axis) * inner;
    any = any || ids[i] >= 0;
  }
  if (!any) return r;
  const int id = t.add_node(
      "concat", ids, r.size(),
      [ids, blks, outer, out_stride](Tape<S>& tp, const std::vector<S>& g) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (ids[i] >= 0) {
            auto& gi = tp.acc(ids[i]);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t k = 0; k < blks[i]; ++k)
                gi[o * blks[i] + k] += g[o * out_stride + off + k];
          }
          off += blks[i];
        }
      });
  return r.with_node(id);
}

template <typename S>
Tensor<S> slice(Tape<S>& t, const Tensor<S>& a, std::size_t axis,
                std::size_t start, std::size_t len) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("slice axis out of range");
  if (start + len > s[axis])
    throw ShapeError(strformat("slice [%zu,%zu) exceeds dim %zu of %s", start,
                               start + len, axis, shape_str(s).c_str()));
  Shape out_shape = s;
  out_shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];

  std::vector<S> out(numel(out_shape));
  const std::size_t in_stride = s[axis] * inner;
  const std::size_t blk = len * inner;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(a.data() + o * in_stride + start * inner,
              a.data() + o * in_stride + start * inner + blk,
              out.data() + o * blk);
  Tensor<S> r(out_shape, std::move(out));
  if (!tracked(a)) return r;
  const int ai = a.node();
  const int id = t.add_node(
      "slice", {ai}, r.size(),
      [ai, outer, in_stride, inner, start, blk](Tape<S>& tp,
                                                const std::vector<S>& g) {
        auto& ga = tp.acc(ai);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < blk; ++k)
            ga[o * in_stride + start * inner + k] += g[o * blk + k];
      });
  return r.with_node(id);
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename S>
Tensor<S> matmul(Tape<S>& t, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError(strformat("matmul: %s by %s",
                               shape_str(a.shape()).c_str(),
                               shape_str(b.shape()).c_str()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(m * n);
  {
    detail::ECMap<S> ma(a.data(), m, k), mb(b.data(), k, n);
    detail::EMap<S> mo(out.data(), m, n);
    mo.noalias() = ma * mb;
  }
  Tensor<S> r({m, n}, std::move(out));
  if (!tracked(a, b)) return r;
  const int ai = a.node(), bi = b.node();
  const int id = t.add_node(
      "matmul", {ai, bi}, r.size(),
      [ai, bi, a, b, m, k, n](Tape<S>& tp, const std::vector<S>& g) {
        detail::ECMap<S> mg(g.data(), m, n);
        if (ai >= 0) {
          detail::ECMap<S> mb(b.data(), k, n);
          detail::EMap<S> ga(tp.acc(ai).data(), m, k);
          ga.noalias() += mg * mb.transpose();
        }
        if (bi >= 0) {
          detail::ECMap<S> ma(a.data(), m, k);
          detail::EMap<S> gb(tp.acc(bi).data(), k, n);
          gb.noalias() += ma.transpose() * mg;
        }
      });
  return r.with_node(id);
}

// Row-broadcast bias: x[B x D] + b[D].
template <typename S>
Tensor<S> add_bias(Tape<S>& t, const Tensor<S>& x, const Tensor<S>& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
    throw ShapeError(strformat("add_bias: %s + %s",
                               shape_str(x.shape()).c_str(),
                               shape_str(b.shape()).c_str()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<S> out(x.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out[i * cols + j] = x[i * cols + j] + b[j];
  Tensor<S> r(x.shape(), std::move(out));
  if (!tracked(x, b)) return r;
  const int xi = x.node(), bi = b.node();
  const int id = t.add_node(
      "add_bias", {xi, bi}, r.size(),
      [xi, bi, rows, cols](Tape<S>& tp, const std::vector<S>& g) {
        tp.add_grad(xi, g.data(), g.size());
        if (bi >= 0) {
          auto& gb = tp.acc(bi);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) gb[j] += g[i * cols + j];
        }
      });
  return r.with_node(id);
}

// Channel-broadcast mask: x[B x C x H x W] * m[B x 1 x H x W].
template <typename S>
Tensor<S> mul_mask(Tape<S>& t, const Tensor<S>& x, const Tensor<S>& m) {
  if (x.rank() != 4 || m.rank() != 4 || m.dim(1) != 1 ||
      x.dim(0) != m.dim(0) || x.dim(2) != m.dim(2) || x.dim(3) != m.dim(3))
    throw ShapeError(strformat("mul_mask: %s by %s",
                               shape_str(x.shape()).c_str(),
                               shape_str(m.shape()).c_str()));
  const std::size_t bsz = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<S> out(x.size());
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < hw; ++p)
        out[(b * ch + c) * hw + p] = x[(b * ch + c) * hw + p] * m[b * hw + p];
  Tensor<S> r(x.shape(), std::move(out));
  if (!tracked(x, m)) return r;
  const int xi = x.node(), mi = m.node();
  const int id = t.add_node(
      "mul_mask", {xi, mi}, r.size(),
      [xi, mi, x, m, bsz, ch, hw](Tape<S>& tp, const std::vector<S>& g) {
        if (xi >= 0) {
          auto& gx = tp.acc(xi);
          for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t c = 0; c < ch; ++c)
              for (std::size_t p = 0; p < hw; ++p)
                gx[(b * ch + c) * hw + p] +=
                    g[(b * ch + c) * hw + p] * m[b * hw + p];
        }
        if (mi >= 0) {
          auto& gm = tp.acc(mi);
          for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t c = 0; c < ch; ++c)
              for (std::size_t p = 0; p < hw; ++p)
                gm[b * hw + p] +=
                    g[(b * ch + c) * hw + p] * x[(b * ch + c) * hw + p];
        }
      });
  return r.with_node(id);
}

// ---------------------------------------------------------------------------
// classification loss

template <typename S>
Tensor<S> softmax_cross_entropy(Tape<S>& t, const Tensor<S>& logits,
                                const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw ShapeError("softmax_cross_entropy expects [B x K] logits");
  const std::size_t bsz = logits.dim(0), k = logits.dim(1);
  if (labels.size() != bsz)
    throw ShapeError("softmax_cross_entropy: label count mismatch");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= k)
      throw ValueError(strformat("label %d outside [0, %zu)", l, k));

  std::vector<S> probs(logits.size());
  S loss = 0;
  for (std::size_t b = 0; b < bsz; ++b) {
    const S* row = logits.data() + b * k;
    S mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    S denom = 0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[b * k + j] = std::exp(row[j] - mx);
      denom += probs[b * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[b * k + j] /= denom;
    loss -= std::log(
        std::max(probs[b * k + static_cast<std::size_t>(labels[b])],
                 std::numeric_limits<S>::min()));
  }
  loss /= static_cast<S>(bsz);
  Tensor<S> r = Tensor<S>::scalar(loss);
  if (!tracked(logits)) return r;
  const int li = logits.node();
  const int id = t.add_node(
      "softmax_cross_entropy", {li}, 1,
      [li, probs = std::move(probs), labels, bsz, k](Tape<S>& tp,
                                                     const std::vector<S>& g) {
        auto& gl = tp.acc(li);
        const S gv = g[0] / static_cast<S>(bsz);
        for (std::size_t b = 0; b < bsz; ++b)
          for (std::size_t j = 0; j < k; ++j) {
            S d = probs[b * k + j];
            if (j == static_cast<std::size_t>(labels[b])) d -= S(1);
            gl[b * k + j] += gv * d;
          }
      });
  return r.with_node(id);
}

}  // namespace cram
