#pragma once
// Finite-difference gradient verification. The oracle evaluates losses
// through forward passes only (central differences, step 1e-5, double
// precision) and never touches the backward implementation it checks.
// Every differentiable operation registers a case here; the CLI `check`
// command and the acceptance suite run the registry.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cram/decoders.hpp"
#include "cram/encoder.hpp"
#include "cram/losses.hpp"
#include "cram/nn.hpp"
#include "cram/ops.hpp"
#include "cram/sampler.hpp"

namespace cram {

struct FdReport {
  double max_rel_err = 0.0;
  long checks = 0;
};

inline double fd_rel_err(double analytic, double fd) {
  const double denom = std::max(std::fabs(analytic), std::fabs(fd));
  if (denom < 1e-6) return std::fabs(analytic - fd);
  return std::fabs(analytic - fd) / denom;
}

// A differentiation problem: leaf inputs plus (optionally) model parameters
// that the loss closure reads through its own modules.
struct FdProblem {
  std::vector<Tensor<double>> inputs;
  std::vector<Parameter<double>*> params;
  std::function<Tensor<double>(Tape<double>&, const std::vector<Tensor<double>>&)>
      loss;
  std::shared_ptr<void> keepalive;  // owns the model behind `params`
};

namespace detail {

inline std::vector<std::size_t> pick_indices(std::size_t n, long cap,
                                             Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (cap < 0 || n <= static_cast<std::size_t>(cap)) return idx;
  for (std::size_t i = 0; i < static_cast<std::size_t>(cap); ++i) {
    const std::size_t j = i + rng.below(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(cap));
  return idx;
}

}  // namespace detail

namespace detail {

// Central difference with a kink guard: where the two one-sided slopes
// disagree, the loss is not C^1 inside the window (max-pool ties, bilinear
// cell boundaries, strong curvature), so the analytic subgradient is judged
// against the nearest of the three slopes instead of the symmetric one.
inline double fd_slope_err(double analytic, double f_plus, double f_minus,
                           double f0, double step) {
  const double fd_sym = (f_plus - f_minus) / (2.0 * step);
  const double fd_l = (f0 - f_minus) / step;
  const double fd_r = (f_plus - f0) / step;
  const double scale = std::max({std::fabs(fd_l), std::fabs(fd_r), 1e-6});
  if (std::fabs(fd_l - fd_r) <= 0.02 * scale)
    return fd_rel_err(analytic, fd_sym);
  return std::min({fd_rel_err(analytic, fd_sym), fd_rel_err(analytic, fd_l),
                   fd_rel_err(analytic, fd_r)});
}

}  // namespace detail

inline FdReport fd_compare(FdProblem& p, Rng& rng, long cap_per_input = -1,
                           double step = 1e-5) {
  std::vector<std::vector<double>> leaf_grads;
  std::vector<std::vector<double>> param_grads;
  {
    Tape<double> tape;
    std::vector<Tensor<double>> leaves;
    leaves.reserve(p.inputs.size());
    for (const auto& x : p.inputs) leaves.push_back(tape.leaf(x));
    for (auto* pr : p.params) pr->zero_grad();
    tape.backward(p.loss(tape, leaves));
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      const auto* g = tape.grad(leaves[k]);
      leaf_grads.push_back(g ? *g
                             : std::vector<double>(leaves[k].size(), 0.0));
    }
    for (auto* pr : p.params) param_grads.push_back(pr->grad);
  }

  auto eval = [&]() {
    Tape<double> tape;
    return p.loss(tape, p.inputs).item();
  };
  const double f0 = eval();

  FdReport rep;
  for (std::size_t k = 0; k < p.inputs.size(); ++k) {
    const Tensor<double> base = p.inputs[k];
    for (std::size_t i : detail::pick_indices(base.size(), cap_per_input, rng)) {
      auto bump = [&](double delta) {
        std::vector<double> d = base.vec();
        d[i] += delta;
        p.inputs[k] = Tensor<double>(base.shape(), std::move(d));
        return eval();
      };
      const double f_plus = bump(step), f_minus = bump(-step);
      p.inputs[k] = base;
      rep.max_rel_err = std::max(
          rep.max_rel_err,
          detail::fd_slope_err(leaf_grads[k][i], f_plus, f_minus, f0, step));
      ++rep.checks;
    }
  }
  for (std::size_t k = 0; k < p.params.size(); ++k) {
    Parameter<double>& pr = *p.params[k];
    const Tensor<double> base = pr.value;
    for (std::size_t i : detail::pick_indices(base.size(), cap_per_input, rng)) {
      auto bump = [&](double delta) {
        std::vector<double> d = base.vec();
        d[i] += delta;
        pr.assign(Tensor<double>(base.shape(), std::move(d)));
        return eval();
      };
      const double f_plus = bump(step), f_minus = bump(-step);
      pr.assign(base);
      rep.max_rel_err = std::max(
          rep.max_rel_err,
          detail::fd_slope_err(param_grads[k][i], f_plus, f_minus, f0, step));
      ++rep.checks;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// registered cases

struct GradCheckCase {
  std::string name;
  double tol;
  std::function<FdReport(std::uint64_t seed)> run;
};

namespace gradcheck_cases {

using T = Tensor<double>;

inline T rand_t(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  return T::uniform(std::move(shape), rng, lo, hi);
}

// weighted sum turns any output into a scalar without losing per-element
// gradient information
inline T wsum(Tape<double>& t, const T& x, const T& w) {
  return sum(t, mul(t, x, w.constant()));
}

inline FdReport run_matmul(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {3, 4}), rand_t(rng, {4, 2})};
  T w = rand_t(rng, {3, 2});
  p.loss = [w](Tape<double>& t, const std::vector<T>& xs) {
    return wsum(t, matmul(t, xs[0], xs[1]), w);
  };
  return fd_compare(p, pick);
}

inline FdReport run_conv2d(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {2, 3, 8, 8}), rand_t(rng, {4, 3, 3, 3}),
              rand_t(rng, {4})};
  T w1 = rand_t(rng, {2, 4, 8, 8});
  T w2 = rand_t(rng, {2, 4, 3, 3});
  p.loss = [w1, w2](Tape<double>& t, const std::vector<T>& xs) {
    const T& b = xs[2];
    T same = conv2d(t, xs[0], xs[1], &b, 1, Padding::Same);
    T valid = conv2d(t, xs[0], xs[1], &b, 2, Padding::Valid);
    return add(t, wsum(t, same, w1), wsum(t, valid, w2));
  };
  return fd_compare(p, pick);
}

inline FdReport run_conv2d_transpose(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {2, 3, 4, 4}), rand_t(rng, {3, 2, 3, 3}),
              rand_t(rng, {2})};
  T w = rand_t(rng, {2, 2, 8, 8});
  p.loss = [w](Tape<double>& t, const std::vector<T>& xs) {
    const T& b = xs[2];
    return wsum(t, conv2d_transpose(t, xs[0], xs[1], &b, 2), w);
  };
  return fd_compare(p, pick);
}

inline FdReport run_maxpool2d(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {1, 1, 7, 7})};
  T w1 = rand_t(rng, {1, 1, 4, 4});
  T w2 = rand_t(rng, {1, 1, 3, 3});
  p.loss = [w1, w2](Tape<double>& t, const std::vector<T>& xs) {
    T same = maxpool2d(t, xs[0], 3, 2, Padding::Same);
    T valid = maxpool2d(t, xs[0], 2, 2, Padding::Valid);
    return add(t, wsum(t, same, w1), wsum(t, valid, w2));
  };
  return fd_compare(p, pick);
}

inline FdReport run_avgpool2d(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {1, 2, 7, 7})};
  T w1 = rand_t(rng, {1, 2, 4, 4});
  T w2 = rand_t(rng, {1, 2, 2, 2});
  p.loss = [w1, w2](Tape<double>& t, const std::vector<T>& xs) {
    return add(t, wsum(t, avgpool2d(t, xs[0], 2), w1),
               wsum(t, avgpool2d(t, xs[0], 4), w2));
  };
  return fd_compare(p, pick);
}

inline FdReport run_batchnorm(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {8, 4}), rand_t(rng, {4}, 0.5, 1.5),
              rand_t(rng, {4}, -0.5, 0.5), rand_t(rng, {4, 3, 5, 5}),
              rand_t(rng, {3}, 0.5, 1.5), rand_t(rng, {3}, -0.5, 0.5)};
  T w1 = rand_t(rng, {8, 4});
  T w2 = rand_t(rng, {4, 3, 5, 5});
  p.loss = [w1, w2](Tape<double>& t, const std::vector<T>& xs) {
    std::vector<double> rm1(4, 0), rv1(4, 1), rm2(3, 0), rv2(3, 1);
    T a = batchnorm(t, xs[0], xs[1], xs[2], rm1, rv1, Mode::Train);
    T b = batchnorm(t, xs[3], xs[4], xs[5], rm2, rv2, Mode::Train);
    return add(t, wsum(t, a, w1), wsum(t, b, w2));
  };
  return fd_compare(p, pick);
}

inline FdReport run_unary(std::uint64_t seed, int which) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {3, 7}, -5.0, 5.0)};
  T w = rand_t(rng, {3, 7});
  p.loss = [w, which](Tape<double>& t, const std::vector<T>& xs) {
    T y = which == 0 ? elu(t, xs[0])
                     : which == 1 ? sigmoid(t, xs[0]) : tanh(t, xs[0]);
    return wsum(t, y, w);
  };
  return fd_compare(p, pick);
}

inline FdReport run_lstm_cell(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  auto cell = std::make_shared<LstmCell<double>>("fd.lstm", 5, 4, rng);
  FdProblem p;
  p.inputs = {rand_t(rng, {2, 5}), rand_t(rng, {2, 4}), rand_t(rng, {2, 4})};
  cell->params(p.params);
  p.keepalive = cell;
  T w1 = rand_t(rng, {2, 4});
  T w2 = rand_t(rng, {2, 4});
  p.loss = [cell, w1, w2](Tape<double>& t, const std::vector<T>& xs) {
    LstmState<double> next = cell->forward(t, xs[0], {xs[1], xs[2]});
    return add(t, wsum(t, next.c, w1), wsum(t, next.h, w2));
  };
  return fd_compare(p, pick);
}

inline FdReport run_softmax_ce(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {3, 5})};
  std::vector<int> labels(3);
  for (auto& l : labels) l = static_cast<int>(rng.below(5));
  p.loss = [labels](Tape<double>& t, const std::vector<T>& xs) {
    return softmax_cross_entropy(t, xs[0], labels);
  };
  return fd_compare(p, pick);
}

inline FdReport run_make_grid(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {T({3}, {rng.uniform(0.2, 0.9), rng.uniform(-0.5, 0.5),
                      rng.uniform(-0.5, 0.5)})};
  T w = rand_t(rng, {4, 5, 2});
  p.loss = [w](Tape<double>& t, const std::vector<T>& xs) {
    return wsum(t, make_grid(t, xs[0], 4, 5), w);
  };
  return fd_compare(p, pick);
}

inline FdReport run_bilinear_sample(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {1, 8, 8}),
              T({3}, {rng.uniform(0.3, 0.9), rng.uniform(-0.4, 0.4),
                      rng.uniform(-0.4, 0.4)})};
  T w = rand_t(rng, {1, 5, 5});
  p.loss = [w](Tape<double>& t, const std::vector<T>& xs) {
    T grid = make_grid(t, xs[1], 5, 5);
    return wsum(t, bilinear_sample(t, xs[0], grid), w);
  };
  return fd_compare(p, pick);
}

inline FdReport run_elementwise(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {2, 6}), rand_t(rng, {2, 6}), rand_t(rng, {6})};
  T w = rand_t(rng, {2, 6});
  p.loss = [w](Tape<double>& t, const std::vector<T>& xs) {
    T a = add(t, xs[0], xs[1]);
    T b = sub(t, xs[0], xs[1]);
    T c = mul(t, a, b);
    T d = add_scalar(t, scale(t, abs(t, c), 1.3), 0.7);
    T e = log_clamped(t, d, 1e-8);
    T f = concat(t, {e, neg(t, xs[0])}, 1);
    T g = slice(t, f, 1, 3, 6);
    T h = add_bias(t, g, xs[2]);
    return add(t, mean(t, h), wsum(t, sigmoid(t, xs[0]), w));
  };
  return fd_compare(p, pick);
}

inline FdReport run_conv_chain(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  FdProblem p;
  p.inputs = {rand_t(rng, {1, 2, 6, 6}), rand_t(rng, {3, 2, 3, 3}),
              rand_t(rng, {27, 4})};
  // fixed binary-ish mask exercises mul_mask in the chain
  std::vector<double> mv(36);
  for (auto& v : mv) v = rng.uniform() < 0.7 ? 1.0 : 0.0;
  T mask({1, 1, 6, 6}, std::move(mv));
  T w = rand_t(rng, {1, 4});
  p.loss = [mask, w](Tape<double>& t, const std::vector<T>& xs) {
    T xm = mul_mask(t, xs[0], mask);
    T c = conv2d(t, xm, xs[1], 1, Padding::Same);
    T e = elu(t, c);
    T m = maxpool2d(t, e, 2, 2, Padding::Valid);
    T flat = m.reshaped({std::size_t(1), std::size_t(27)});
    return wsum(t, matmul(t, flat, xs[2]), w);
  };
  return fd_compare(p, pick);
}

inline EncoderConfig tiny_encoder_config() {
  EncoderConfig cfg;
  cfg.image_h = cfg.image_w = 12;
  cfg.channels = 1;
  cfg.glimpse_h = cfg.glimpse_w = 4;
  cfg.n_glimpses = 2;
  cfg.hidden_size = 8;
  cfg.z_dim = 4;
  cfg.gv_dim = 6;
  cfg.downsample_factor = 4;
  cfg.context_filters = {2, 3, 3};
  cfg.loc_filters = {2, 3, 3};
  cfg.glimpse_filters = {2, 3, 3};
  cfg.context_mlp_hidden = 6;
  cfg.loc_mlp_hidden = 6;
  cfg.r_feature_dim = 5;
  return cfg;
}

inline FdReport run_encoder_unroll(std::uint64_t seed) {
  Rng rng(seed), pick(seed ^ 0x517cc1b727220a95ULL);
  auto enc = std::make_shared<Encoder<double>>(tiny_encoder_config(), rng);
  FdProblem p;
  p.inputs = {rand_t(rng, {2, 1, 12, 12}, -1.0, 1.0)};
  std::vector<double> cv(2 * 1 * 12 * 12, 0.0);
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
  T clues({2, 1, 12, 12}, std::move(cv));
  enc->params(p.params);
  p.keepalive = enc;
  T w = rand_t(rng, {2, 4});
  p.loss = [enc, clues, w](Tape<double>& t, const std::vector<T>& xs) {
    auto res = enc->encode(t, xs[0], clues, Mode::Train);
    return wsum(t, res.z, w);
  };
  return fd_compare(p, pick, 4);
}

}  // namespace gradcheck_cases

inline const std::vector<GradCheckCase>& gradcheck_registry() {
  static const std::vector<GradCheckCase> cases = [] {
    using namespace gradcheck_cases;
    std::vector<GradCheckCase> v;
    v.push_back({"matmul", 1e-4, run_matmul});
    v.push_back({"conv2d", 1e-4, run_conv2d});
    v.push_back({"conv2d_transpose", 1e-4, run_conv2d_transpose});
    v.push_back({"maxpool2d", 1e-4, run_maxpool2d});
    v.push_back({"avgpool2d", 1e-4, run_avgpool2d});
    v.push_back({"batchnorm", 1e-4, run_batchnorm});
    v.push_back({"elu", 1e-4, [](std::uint64_t s) { return run_unary(s, 0); }});
    v.push_back(
        {"sigmoid", 1e-4, [](std::uint64_t s) { return run_unary(s, 1); }});
    v.push_back(
        {"tanh", 1e-4, [](std::uint64_t s) { return run_unary(s, 2); }});
    v.push_back({"lstm_cell", 1e-4, run_lstm_cell});
    v.push_back({"softmax_cross_entropy", 1e-4, run_softmax_ce});
    v.push_back({"make_grid", 1e-4, run_make_grid});
    v.push_back({"bilinear_sample", 1e-4, run_bilinear_sample});
    v.push_back({"elementwise", 1e-4, run_elementwise});
    v.push_back({"conv_elu_pool_matmul", 1e-4, run_conv_chain});
    v.push_back({"encoder_unroll_n2", 1e-3, run_encoder_unroll});
    return v;
  }();
  return cases;
}

struct GradCheckSummary {
  std::string name;
  double tol = 0;
  double max_rel_err = 0;
  long checks = 0;
  bool pass = false;
};

// Runs every registered case over `seeds` consecutive seeds starting at
// `seed0`; a case passes when every seed stays under its tolerance.
inline std::vector<GradCheckSummary> run_gradchecks(int seeds,
                                                    std::uint64_t seed0 = 1) {
  std::vector<GradCheckSummary> out;
  for (const auto& c : gradcheck_registry()) {
    GradCheckSummary s{c.name, c.tol, 0.0, 0, true};
    for (int i = 0; i < seeds; ++i) {
      const FdReport rep = c.run(seed0 + static_cast<std::uint64_t>(i));
      s.max_rel_err = std::max(s.max_rel_err, rep.max_rel_err);
      s.checks += rep.checks;
    }
    s.pass = s.max_rel_err <= s.tol;
    out.push_back(s);
  }
  return out;
}

}  // namespace cram
