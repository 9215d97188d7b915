#pragma once
// Loss assembly: clue-attraction loss over the glimpse sequence, the
// two-scale GAN objectives, masked L1 reconstruction, and the per-step
// LossReport with its metrics-log line format.

#include <cstdio>
#include <string>
#include <vector>

#include "cram/decoders.hpp"
#include "cram/ops.hpp"
#include "cram/sampler.hpp"

namespace cram {

// Negated mean clue coverage across glimpses: minimizing drives glimpses
// onto clue=1 regions. Differentiable w.r.t. every tau.
template <typename S>
Tensor<S> clue_loss(Tape<S>& t, const Tensor<S>& clues,
                    const std::vector<Tensor<S>>& taus, std::size_t glimpse_h,
                    std::size_t glimpse_w) {
  if (taus.empty()) throw UsageError("clue_loss needs at least one tau");
  if (clues.rank() != 4 || clues.dim(1) != 1)
    throw ShapeError("clue_loss clues must be [B x 1 x H x W]");
  const std::size_t bsz = clues.dim(0), h = clues.dim(2), w = clues.dim(3);
  std::vector<Tensor<S>> sampled;
  sampled.reserve(taus.size() * bsz);
  for (const auto& tau : taus) {
    if (tau.rank() != 2 || tau.dim(0) != bsz || tau.dim(1) != 3)
      throw ShapeError("clue_loss taus must be [B x 3]");
    for (std::size_t b = 0; b < bsz; ++b) {
      Tensor<S> tau_b = slice(t, tau, 0, b, 1).reshaped({3});
      Tensor<S> clue_b = slice(t, clues, 0, b, 1).reshaped({1, h, w});
      Tensor<S> grid = make_grid(t, tau_b, glimpse_h, glimpse_w);
      sampled.push_back(
          bilinear_sample(t, clue_b, grid).reshaped({glimpse_h * glimpse_w}));
    }
  }
  return neg(t, mean(t, concat(t, sampled, 0)));
}

// ---------------------------------------------------------------------------
// GAN losses (standard convention, non-saturating generator objective).
// Fake images are detached inside the discriminator losses.

template <typename S>
struct GanLossParts {
  Tensor<S> d_local, d_global, g;
};

template <typename S>
GanLossParts<S> gan_losses(Tape<S>& t, const Tensor<S>& real,
                           const Tensor<S>& fake, const Tensor<S>& clues,
                           LocalDiscriminator<S>& d_local,
                           GlobalDiscriminator<S>& d_global, Mode mode) {
  detail::check_same_shape("gan_losses", real, fake);
  const Tensor<S> fake_detached = fake.constant();

  auto log_p = [&](const Tensor<S>& p) { return log_clamped(t, p, S(1e-8)); };
  auto log_1mp = [&](const Tensor<S>& p) {
    return log_clamped(t, add_scalar(t, neg(t, p), S(1)), S(1e-8));
  };

  Tensor<S> dl = neg(
      t, add(t, mean(t, log_p(d_local.forward(t, real, clues, mode))),
             mean(t, log_1mp(d_local.forward(t, fake_detached, clues, mode)))));
  Tensor<S> dg = neg(
      t, add(t, mean(t, log_p(d_global.forward(t, real, mode))),
             mean(t, log_1mp(d_global.forward(t, fake_detached, mode)))));
  Tensor<S> g = neg(
      t, add(t, mean(t, log_p(d_local.forward(t, fake, clues, mode))),
             mean(t, log_p(d_global.forward(t, fake, mode)))));
  return {dl, dg, g};
}

// L1 over the occluded region, normalized by the number of active mask
// pixels (per channel), so the loss is invariant to mask size.
template <typename S>
Tensor<S> masked_l1(Tape<S>& t, const Tensor<S>& fake, const Tensor<S>& target,
                    const Tensor<S>& clues) {
  detail::check_same_shape("masked_l1", fake, target);
  std::size_t active = 0;
  for (std::size_t i = 0; i < clues.size(); ++i)
    if (clues[i] > S(0.5)) ++active;
  active *= fake.dim(1);  // channels share the mask
  Tensor<S> diff = mul_mask(t, sub(t, fake, target), clues);
  return scale(t, sum(t, abs(t, diff)),
               S(1) / static_cast<S>(std::max<std::size_t>(active, 1)));
}

// ---------------------------------------------------------------------------
// per-step report and the metrics log format

struct LossReport {
  long step = 0;
  double l_clue = 0, l_task = 0, l_d_local = 0, l_d_global = 0, total = 0;
  double coverage = 0;
  bool has_acc = false;
  double acc = 0;
};

inline std::string metrics_line(const LossReport& r) {
  char buf[320];
  int n = std::snprintf(
      buf, sizeof(buf),
      "step=%ld l_clue=%.9g l_task=%.9g l_d_local=%.9g l_d_global=%.9g "
      "total=%.9g coverage=%.9g",
      r.step, r.l_clue, r.l_task, r.l_d_local, r.l_d_global, r.total,
      r.coverage);
  if (r.has_acc)
    std::snprintf(buf + n, sizeof(buf) - n, " acc=%.9g", r.acc);
  return buf;
}

inline bool parse_metrics_line(const std::string& line, LossReport& out) {
  LossReport r;
  int consumed = 0;
  const int got = std::sscanf(
      line.c_str(),
      "step=%ld l_clue=%lf l_task=%lf l_d_local=%lf l_d_global=%lf "
      "total=%lf coverage=%lf%n",
      &r.step, &r.l_clue, &r.l_task, &r.l_d_local, &r.l_d_global, &r.total,
      &r.coverage, &consumed);
  if (got != 7) return false;
  const char* rest = line.c_str() + consumed;
  if (*rest != '\0') {
    if (std::sscanf(rest, " acc=%lf", &r.acc) != 1) return false;
    r.has_acc = true;
  }
  out = r;
  return true;
}

}  // namespace cram
