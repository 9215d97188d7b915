#pragma once
// Task heads on top of the encoded vector: a 3-layer MLP classifier, a
// fractionally-strided convolutional generator, and the local/global
// discriminators for adversarial inpainting.

#include <string>
#include <vector>

#include "cram/encoder.hpp"
#include "cram/nn.hpp"

namespace cram {

template <typename S>
struct Classifier {
  Linear<S> l1, l2, l3;
  BatchNorm<S> bn1, bn2;

  Classifier() = default;
  Classifier(std::size_t z_dim, std::size_t hidden, std::size_t classes,
             Rng& rng)
      : l1("cls.l1", z_dim, hidden, rng),
        l2("cls.l2", hidden, hidden, rng),
        l3("cls.l3", hidden, classes, rng),
        bn1("cls.bn1", hidden),
        bn2("cls.bn2", hidden) {
    if (classes < 2) throw ConfigError("classifier needs >= 2 classes");
  }

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& z, Mode mode) {
    Tensor<S> h = elu(t, bn1.forward(t, l1.forward(t, z), mode));
    h = elu(t, bn2.forward(t, l2.forward(t, h), mode));
    return l3.forward(t, h);
  }

  void params(std::vector<Parameter<S>*>& out) {
    l1.params(out);
    l2.params(out);
    l3.params(out);
    bn1.params(out);
    bn2.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) {
    bn1.buffers(out);
    bn2.buffers(out);
  }
};

// ---------------------------------------------------------------------------
// generator: z -> 4x4 seed -> 3x3 stride-1/2 convolutions doubling the
// resolution until the target size; tanh output in [-1, 1]. Targets that are
// not 4 * 2^m are generated at the next power of two and center-cropped.

template <typename S>
struct Generator {
  Linear<S> fc;
  BatchNorm<S> fc_bn;
  std::vector<ConvTranspose2d<S>> ups;
  std::vector<BatchNorm<S>> up_bns;  // one per up layer except the last
  std::size_t out_ch = 1, out_h = 0, out_w = 0;
  std::size_t gen_hw = 4, seed_ch = 64;

  Generator() = default;
  Generator(std::size_t z_dim, std::size_t channels, std::size_t h,
            std::size_t w, Rng& rng)
      : out_ch(channels), out_h(h), out_w(w) {
    if (h != w) throw ConfigError("generator supports square targets only");
    if (h < 4) throw ConfigError("generator target must be >= 4");
    gen_hw = 4;
    std::size_t levels = 0;
    while (gen_hw < h) {
      gen_hw *= 2;
      ++levels;
    }
    fc = Linear<S>("gen.fc", z_dim, seed_ch * 4 * 4, rng);
    fc_bn = BatchNorm<S>("gen.fc_bn", seed_ch);
    std::size_t ch = seed_ch;
    for (std::size_t i = 0; i < levels; ++i) {
      const bool last = i + 1 == levels;
      const std::size_t next = last ? channels : std::max<std::size_t>(ch / 2, 8);
      ups.emplace_back("gen.up" + std::to_string(i + 1), ch, next, 3, 2, rng);
      if (!last)
        up_bns.emplace_back("gen.up" + std::to_string(i + 1) + ".bn", next);
      ch = next;
    }
    if (levels == 0) throw ConfigError("generator target must exceed the seed");
  }

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& z, Mode mode) {
    const std::size_t bsz = z.dim(0);
    Tensor<S> h = fc.forward(t, z).reshaped({bsz, seed_ch, 4, 4});
    h = elu(t, fc_bn.forward(t, h, mode));
    for (std::size_t i = 0; i < ups.size(); ++i) {
      h = ups[i].forward(t, h);
      if (i + 1 < ups.size())
        h = elu(t, up_bns[i].forward(t, h, mode));
    }
    Tensor<S> img = tanh(t, h);
    if (gen_hw != out_h) {
      const std::size_t off = (gen_hw - out_h) / 2;
      img = slice(t, img, 2, off, out_h);
      img = slice(t, img, 3, (gen_hw - out_w) / 2, out_w);
    }
    return img;
  }

  void params(std::vector<Parameter<S>*>& out) {
    fc.params(out);
    fc_bn.params(out);
    for (auto& u : ups) u.params(out);
    for (auto& b : up_bns) b.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) {
    fc_bn.buffers(out);
    for (auto& b : up_bns) b.buffers(out);
  }
};

// ---------------------------------------------------------------------------
// discriminators
//
// Scores are sigmoid outputs nudged into [1e-6, 1 - 1e-6] so they stay
// strictly inside (0, 1) even where float sigmoid saturates.

template <typename S>
inline Tensor<S> squeeze_score(Tape<S>& t, const Tensor<S>& logits) {
  return clamp(t, sigmoid(t, logits), S(1e-6), S(1) - S(1e-6));
}

template <typename S>
struct DiscriminatorTrunk {
  std::vector<ConvBlock<S>> blocks;
  Linear<S> fc1, fc2;
  BatchNorm<S> fc_bn;
  std::size_t flat = 0;

  DiscriminatorTrunk() = default;
  DiscriminatorTrunk(const std::string& name, std::size_t layers,
                     std::size_t in_ch, std::size_t h, std::size_t w,
                     std::size_t mlp_hidden, Rng& rng) {
    std::size_t ch = in_ch, filters = 8;
    for (std::size_t i = 0; i < layers; ++i) {
      blocks.emplace_back(name + ".conv" + std::to_string(i + 1), ch, filters,
                          5, 2, rng);
      ch = filters;
      filters *= 2;
      h = detail::halved(h);
      w = detail::halved(w);
    }
    flat = ch * h * w;
    fc1 = Linear<S>(name + ".fc1", flat, mlp_hidden, rng);
    fc_bn = BatchNorm<S>(name + ".fc_bn", mlp_hidden);
    fc2 = Linear<S>(name + ".fc2", mlp_hidden, 1, rng);
  }

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x, Mode mode) {
    Tensor<S> h = x;
    for (auto& b : blocks) h = b.forward(t, h, mode);
    h = h.reshaped({x.dim(0), flat});
    h = elu(t, fc_bn.forward(t, fc1.forward(t, h), mode));
    return squeeze_score(t, fc2.forward(t, h));
  }

  void params(std::vector<Parameter<S>*>& out) {
    for (auto& b : blocks) b.params(out);
    fc1.params(out);
    fc2.params(out);
    fc_bn.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) {
    for (auto& b : blocks) b.buffers(out);
    fc_bn.buffers(out);
  }
};

// Judges the occluded region: the input image is masked by the clue at full
// resolution before a 4-layer strided CNN.
template <typename S>
struct LocalDiscriminator {
  DiscriminatorTrunk<S> trunk;

  LocalDiscriminator() = default;
  LocalDiscriminator(std::size_t channels, std::size_t h, std::size_t w,
                     Rng& rng)
      : trunk("d_local", 4, channels, h, w, 64, rng) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& images, const Tensor<S>& clues,
                    Mode mode) {
    return trunk.forward(t, mul_mask(t, images, clues), mode);
  }
  void params(std::vector<Parameter<S>*>& out) { trunk.params(out); }
  void buffers(std::vector<Parameter<S>*>& out) { trunk.buffers(out); }
};

// Judges the whole image with a 3-layer strided CNN.
template <typename S>
struct GlobalDiscriminator {
  DiscriminatorTrunk<S> trunk;

  GlobalDiscriminator() = default;
  GlobalDiscriminator(std::size_t channels, std::size_t h, std::size_t w,
                      Rng& rng)
      : trunk("d_global", 3, channels, h, w, 64, rng) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& images, Mode mode) {
    return trunk.forward(t, images, mode);
  }
  void params(std::vector<Parameter<S>*>& out) { trunk.params(out); }
  void buffers(std::vector<Parameter<S>*>& out) { trunk.buffers(out); }
};

// ---------------------------------------------------------------------------
// composite: generated pixels inside the clue, original pixels elsewhere.
// Implemented as a per-pixel select so both branches pass through bit-exact.

template <typename S>
Tensor<S> composite(Tape<S>& t, const Tensor<S>& generated,
                    const Tensor<S>& original, const Tensor<S>& clue) {
  detail::check_same_shape("composite", generated, original);
  if (clue.rank() != 4 || clue.dim(1) != 1 || clue.dim(0) != generated.dim(0) ||
      clue.dim(2) != generated.dim(2) || clue.dim(3) != generated.dim(3))
    throw ShapeError("composite clue must be [B x 1 x H x W]");
  const std::size_t bsz = generated.dim(0), ch = generated.dim(1),
                    hw = generated.dim(2) * generated.dim(3);
  std::vector<S> out(generated.size());
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t i = (b * ch + c) * hw + p;
        out[i] = clue[b * hw + p] > S(0.5) ? generated[i] : original[i];
      }
  Tensor<S> r(generated.shape(), std::move(out));
  if (!tracked(generated, original)) return r;
  const int gi = generated.node(), oi = original.node();
  const int id = t.add_node(
      "composite", {gi, oi}, r.size(),
      [gi, oi, clue, bsz, ch, hw](Tape<S>& tp, const std::vector<S>& g) {
        for (std::size_t b = 0; b < bsz; ++b)
          for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t i = (b * ch + c) * hw + p;
              if (clue[b * hw + p] > S(0.5)) {
                if (gi >= 0) tp.acc(gi)[i] += g[i];
              } else {
                if (oi >= 0) tp.acc(oi)[i] += g[i];
              }
            }
      });
  return r.with_node(id);
}

}  // namespace cram
