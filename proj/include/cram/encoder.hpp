#pragma once
// Recurrent attention encoder: a context network initializes the top
// recurrent layer from downsampled image and clue, then for each step a
// localization head predicts tau, a glimpse is sampled, embedded, and fed
// through the two-layer LSTM core. The final states project to the encoded
// vector z.

#include <array>
#include <string>
#include <vector>

#include "cram/nn.hpp"
#include "cram/sampler.hpp"

namespace cram {

struct EncoderConfig {
  std::size_t image_h = 32, image_w = 32, channels = 1;
  std::size_t glimpse_h = 12, glimpse_w = 12;
  std::size_t n_glimpses = 4;
  std::size_t hidden_size = 256;
  std::size_t z_dim = 128;
  std::size_t gv_dim = 128;
  std::size_t downsample_factor = 4;
  std::array<std::size_t, 3> context_filters{8, 16, 32};
  std::array<std::size_t, 3> loc_filters{8, 16, 32};
  std::array<std::size_t, 3> glimpse_filters{8, 16, 32};
  std::size_t context_mlp_hidden = 128;
  std::size_t loc_mlp_hidden = 64;
  std::size_t r_feature_dim = 64;
  double s_min = 0.05;

  void validate() const {
    if (n_glimpses < 1) throw ConfigError("encoder needs n_glimpses >= 1");
    if (image_h < 1 || image_w < 1 || channels < 1)
      throw ConfigError("encoder image dimensions must be positive");
    if (glimpse_h < 1 || glimpse_w < 1)
      throw ConfigError("encoder glimpse size must be positive");
    if (hidden_size < 1 || z_dim < 1 || gv_dim < 1)
      throw ConfigError("encoder vector sizes must be positive");
    if (downsample_factor < 1)
      throw ConfigError("downsample factor must be >= 1");
    if (s_min <= 0.0 || s_min > 1.0)
      throw ConfigError("s_min must lie in (0, 1]");
  }
};

namespace detail {

inline std::size_t halved(std::size_t d) { return (d + 1) / 2; }

}  // namespace detail

// conv + batchnorm + elu
template <typename S>
struct ConvBlock {
  Conv2d<S> conv;
  BatchNorm<S> bn;

  ConvBlock() = default;
  ConvBlock(const std::string& name, std::size_t in_ch, std::size_t out_ch,
            std::size_t k, std::size_t stride, Rng& rng)
      : conv(name + ".conv", in_ch, out_ch, k, stride, Padding::Same, rng),
        bn(name + ".bn", out_ch) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x, Mode mode) {
    return elu(t, bn.forward(t, conv.forward(t, x), mode));
  }
  void params(std::vector<Parameter<S>*>& out) {
    conv.params(out);
    bn.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) { bn.buffers(out); }
};

// Three conv(3x3, stride 1) blocks, each followed by 3x3/stride-2 max-pool.
template <typename S>
struct ConvPoolTower {
  std::array<ConvBlock<S>, 3> blocks;
  std::size_t out_h = 0, out_w = 0, out_ch = 0;

  ConvPoolTower() = default;
  ConvPoolTower(const std::string& name, std::size_t in_ch, std::size_t h,
                std::size_t w, const std::array<std::size_t, 3>& filters,
                Rng& rng) {
    std::size_t ch = in_ch;
    for (std::size_t i = 0; i < 3; ++i) {
      blocks[i] = ConvBlock<S>(name + ".conv" + std::to_string(i + 1), ch,
                               filters[i], 3, 1, rng);
      ch = filters[i];
      h = detail::halved(h);
      w = detail::halved(w);
    }
    out_h = h;
    out_w = w;
    out_ch = ch;
  }

  std::size_t flat_dim() const { return out_ch * out_h * out_w; }

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x, Mode mode) {
    Tensor<S> y = x;
    for (auto& b : blocks) {
      y = b.forward(t, y, mode);
      y = maxpool2d(t, y, 3, 2, Padding::Same);
    }
    return y.reshaped({y.dim(0), flat_dim()});
  }
  void params(std::vector<Parameter<S>*>& out) {
    for (auto& b : blocks) b.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) {
    for (auto& b : blocks) b.buffers(out);
  }
};

// Three conv(5x5, stride 2) blocks flattened to a feature vector.
template <typename S>
struct StridedTower {
  std::array<ConvBlock<S>, 3> blocks;
  std::size_t out_h = 0, out_w = 0, out_ch = 0;

  StridedTower() = default;
  StridedTower(const std::string& name, std::size_t in_ch, std::size_t h,
               std::size_t w, const std::array<std::size_t, 3>& filters,
               Rng& rng) {
    std::size_t ch = in_ch;
    for (std::size_t i = 0; i < 3; ++i) {
      blocks[i] = ConvBlock<S>(name + ".conv" + std::to_string(i + 1), ch,
                               filters[i], 5, 2, rng);
      ch = filters[i];
      h = detail::halved(h);
      w = detail::halved(w);
    }
    out_h = h;
    out_w = w;
    out_ch = ch;
  }

  std::size_t flat_dim() const { return out_ch * out_h * out_w; }

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x, Mode mode) {
    Tensor<S> y = x;
    for (auto& b : blocks) y = b.forward(t, y, mode);
    return y.reshaped({y.dim(0), flat_dim()});
  }
  void params(std::vector<Parameter<S>*>& out) {
    for (auto& b : blocks) b.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) {
    for (auto& b : blocks) b.buffers(out);
  }
};

// Two-layer head with batch-norm + elu on the hidden layer and a raw output.
template <typename S>
struct MlpHead {
  Linear<S> l1, l2;
  BatchNorm<S> bn;

  MlpHead() = default;
  MlpHead(const std::string& name, std::size_t in, std::size_t hidden,
          std::size_t out, Rng& rng)
      : l1(name + ".l1", in, hidden, rng),
        l2(name + ".l2", hidden, out, rng),
        bn(name + ".bn", hidden) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x, Mode mode) {
    return l2.forward(t, elu(t, bn.forward(t, l1.forward(t, x), mode)));
  }
  void params(std::vector<Parameter<S>*>& out) {
    l1.params(out);
    l2.params(out);
    bn.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) { bn.buffers(out); }
};

// ---------------------------------------------------------------------------
// context network (Eqs. of the initial state)

template <typename S>
struct ContextNet {
  ConvPoolTower<S> image_tower, clue_tower;
  MlpHead<S> mlp_c, mlp_h;
  std::size_t factor = 4;

  ContextNet() = default;
  ContextNet(const EncoderConfig& cfg, Rng& rng) : factor(cfg.downsample_factor) {
    const std::size_t dh = (cfg.image_h + factor - 1) / factor;
    const std::size_t dw = (cfg.image_w + factor - 1) / factor;
    image_tower = ConvPoolTower<S>("context.image", cfg.channels, dh, dw,
                                   cfg.context_filters, rng);
    clue_tower =
        ConvPoolTower<S>("context.clue", 1, dh, dw, cfg.context_filters, rng);
    const std::size_t feat = image_tower.flat_dim() + clue_tower.flat_dim();
    mlp_c = MlpHead<S>("context.mlp_c", feat, cfg.context_mlp_hidden,
                       cfg.hidden_size, rng);
    mlp_h = MlpHead<S>("context.mlp_h", feat, cfg.context_mlp_hidden,
                       cfg.hidden_size, rng);
  }

  LstmState<S> forward(Tape<S>& t, const Tensor<S>& images,
                       const Tensor<S>& clues, Mode mode) {
    Tensor<S> fi =
        image_tower.forward(t, avgpool2d(t, images, factor), mode);
    Tensor<S> fc = clue_tower.forward(t, avgpool2d(t, clues, factor), mode);
    Tensor<S> f = concat(t, {fi, fc}, 1);
    return {mlp_c.forward(t, f, mode), mlp_h.forward(t, f, mode)};
  }

  void params(std::vector<Parameter<S>*>& out) {
    image_tower.params(out);
    clue_tower.params(out);
    mlp_c.params(out);
    mlp_h.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) {
    image_tower.buffers(out);
    clue_tower.buffers(out);
    mlp_c.buffers(out);
    mlp_h.buffers(out);
  }
};

// ---------------------------------------------------------------------------
// localization network
//
// The image/clue feature towers depend only on the inputs, so they run once
// per forward pass and are reused across all glimpse steps.

template <typename S>
struct LocalizationNet {
  StridedTower<S> image_tower, clue_tower;
  Linear<S> r_l1, r_l2;
  BatchNorm<S> r_bn1, r_bn2;
  MlpHead<S> head;

  LocalizationNet() = default;
  LocalizationNet(const EncoderConfig& cfg, Rng& rng) {
    image_tower = StridedTower<S>("loc.image", cfg.channels, cfg.image_h,
                                  cfg.image_w, cfg.loc_filters, rng);
    clue_tower = StridedTower<S>("loc.clue", 1, cfg.image_h, cfg.image_w,
                                 cfg.loc_filters, rng);
    r_l1 = Linear<S>("loc.r.l1", cfg.hidden_size, cfg.loc_mlp_hidden, rng);
    r_l2 = Linear<S>("loc.r.l2", cfg.loc_mlp_hidden, cfg.r_feature_dim, rng);
    r_bn1 = BatchNorm<S>("loc.r.bn1", cfg.loc_mlp_hidden);
    r_bn2 = BatchNorm<S>("loc.r.bn2", cfg.r_feature_dim);
    const std::size_t feat = image_tower.flat_dim() + clue_tower.flat_dim() +
                             cfg.r_feature_dim;
    head = MlpHead<S>("loc.head", feat, cfg.loc_mlp_hidden, 3, rng);
  }

  Tensor<S> image_features(Tape<S>& t, const Tensor<S>& images, Mode mode) {
    return image_tower.forward(t, images, mode);
  }
  Tensor<S> clue_features(Tape<S>& t, const Tensor<S>& clues, Mode mode) {
    return clue_tower.forward(t, clues, mode);
  }

  // Raw (pre-squash) tau triple per batch row.
  Tensor<S> localize(Tape<S>& t, const Tensor<S>& image_feat,
                     const Tensor<S>& clue_feat, const Tensor<S>& r2_h,
                     Mode mode) {
    Tensor<S> r = elu(t, r_bn1.forward(t, r_l1.forward(t, r2_h), mode));
    r = elu(t, r_bn2.forward(t, r_l2.forward(t, r), mode));
    Tensor<S> f = concat(t, {image_feat, clue_feat, r}, 1);
    return head.forward(t, f, mode);
  }

  void params(std::vector<Parameter<S>*>& out) {
    image_tower.params(out);
    clue_tower.params(out);
    r_l1.params(out);
    r_l2.params(out);
    r_bn1.params(out);
    r_bn2.params(out);
    head.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) {
    image_tower.buffers(out);
    clue_tower.buffers(out);
    r_bn1.buffers(out);
    r_bn2.buffers(out);
    head.buffers(out);
  }
};

// ---------------------------------------------------------------------------
// glimpse network: multiplicative fusion of appearance and location

template <typename S>
struct GlimpseNet {
  ConvPoolTower<S> what_tower;
  Linear<S> what_fc, where_fc;

  GlimpseNet() = default;
  GlimpseNet(const EncoderConfig& cfg, Rng& rng) {
    what_tower = ConvPoolTower<S>("glimpse.what", cfg.channels, cfg.glimpse_h,
                                  cfg.glimpse_w, cfg.glimpse_filters, rng);
    what_fc = Linear<S>("glimpse.what_fc", what_tower.flat_dim(), cfg.gv_dim,
                        rng);
    where_fc = Linear<S>("glimpse.where_fc", 3, cfg.gv_dim, rng);
  }

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& patches, const Tensor<S>& tau,
                    Mode mode) {
    Tensor<S> what = what_fc.forward(t, what_tower.forward(t, patches, mode));
    Tensor<S> where = where_fc.forward(t, tau);
    return mul(t, what, where);
  }

  void params(std::vector<Parameter<S>*>& out) {
    what_tower.params(out);
    what_fc.params(out);
    where_fc.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) { what_tower.buffers(out); }
};

// ---------------------------------------------------------------------------
// encoder

template <typename S>
struct EncoderState {
  LstmState<S> layer1, layer2;
  std::vector<Tensor<S>> taus;     // per step, squashed [B x 3]
  std::vector<Tensor<S>> patches;  // per step, [B x C x Hg x Wg]

  AffineParams<S> tau_at(std::size_t step, std::size_t b) const {
    const Tensor<S>& t = taus.at(step);
    return {t[b * 3 + 0], t[b * 3 + 1], t[b * 3 + 2]};
  }
};

template <typename S>
struct EncodeResult {
  Tensor<S> z;  // [B x z_dim]
  EncoderState<S> state;
};

// Test hooks: severing a path verifies where gradients can flow.
struct EncodeOptions {
  bool detach_context = false;
  bool detach_loc_features = false;
  bool detach_patches = false;
};

template <typename S>
struct Encoder {
  EncoderConfig cfg;
  ContextNet<S> context;
  LocalizationNet<S> loc;
  GlimpseNet<S> glimpse;
  LstmCell<S> lstm1, lstm2;
  Linear<S> z_head;

  Encoder() = default;
  Encoder(const EncoderConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    context = ContextNet<S>(cfg, rng);
    loc = LocalizationNet<S>(cfg, rng);
    glimpse = GlimpseNet<S>(cfg, rng);
    lstm1 = LstmCell<S>("core.lstm1", cfg.gv_dim, cfg.hidden_size, rng);
    lstm2 = LstmCell<S>("core.lstm2", cfg.hidden_size, cfg.hidden_size, rng);
    z_head = Linear<S>("core.z", 2 * cfg.hidden_size, cfg.z_dim, rng);
  }

  EncodeResult<S> encode(Tape<S>& t, const Tensor<S>& images,
                         const Tensor<S>& clues, Mode mode,
                         const EncodeOptions& opts = {}) {
    if (images.rank() != 4 || images.dim(1) != cfg.channels ||
        images.dim(2) != cfg.image_h || images.dim(3) != cfg.image_w)
      throw ShapeError(strformat("encode: images %s do not match config",
                                 shape_str(images.shape()).c_str()));
    if (clues.rank() != 4 || clues.dim(0) != images.dim(0) ||
        clues.dim(1) != 1 || clues.dim(2) != cfg.image_h ||
        clues.dim(3) != cfg.image_w)
      throw ValueError(strformat("encode: clues %s do not align with images",
                                 shape_str(clues.shape()).c_str()));
    const std::size_t bsz = images.dim(0);

    Tensor<S> feat_i = loc.image_features(t, images, mode);
    Tensor<S> feat_c = loc.clue_features(t, clues, mode);
    if (opts.detach_loc_features) {
      feat_i = feat_i.constant();
      feat_c = feat_c.constant();
    }
    LstmState<S> state2 = context.forward(t, images, clues, mode);
    if (opts.detach_context)
      state2 = {state2.c.constant(), state2.h.constant()};
    LstmState<S> state1 = LstmState<S>::zeros(bsz, cfg.hidden_size);

    EncoderState<S> trace;
    for (std::size_t n = 1; n <= cfg.n_glimpses; ++n) {
      Tensor<S> raw = loc.localize(t, feat_i, feat_c, state2.h, mode);
      Tensor<S> tau = squash_tau(t, raw, static_cast<S>(cfg.s_min));

      std::vector<Tensor<S>> patch_rows;
      patch_rows.reserve(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        Tensor<S> tau_b = slice(t, tau, 0, b, 1).reshaped({3});
        Tensor<S> img_b = slice(t, images, 0, b, 1)
                              .reshaped({cfg.channels, cfg.image_h,
                                         cfg.image_w});
        Tensor<S> grid = make_grid(t, tau_b, cfg.glimpse_h, cfg.glimpse_w);
        Tensor<S> patch = bilinear_sample(t, img_b, grid);
        patch_rows.push_back(patch.reshaped(
            {1, cfg.channels, cfg.glimpse_h, cfg.glimpse_w}));
      }
      Tensor<S> gp = concat(t, patch_rows, 0);
      if (opts.detach_patches) gp = gp.constant();

      Tensor<S> gv = glimpse.forward(t, gp, tau, mode);
      state1 = lstm1.forward(t, gv, state1);
      state2 = lstm2.forward(t, state1.h, state2);
      trace.taus.push_back(tau);
      trace.patches.push_back(gp);
    }
    trace.layer1 = state1;
    trace.layer2 = state2;

    Tensor<S> z =
        z_head.forward(t, concat(t, {state1.h, state2.h}, 1));
    return {z, std::move(trace)};
  }

  void params(std::vector<Parameter<S>*>& out) {
    context.params(out);
    loc.params(out);
    glimpse.params(out);
    lstm1.params(out);
    lstm2.params(out);
    z_head.params(out);
  }
  void buffers(std::vector<Parameter<S>*>& out) {
    context.buffers(out);
    loc.buffers(out);
    glimpse.buffers(out);
  }
};

}  // namespace cram
