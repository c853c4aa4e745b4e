#pragma once

// The refinement network: encoder, spatial-varying enhancement (SVE),
// prior-guided channel/spatial attention (CSA), decoder, and the final
// mask/residual composition
//
//   refined = degraded + (restored - degraded) * mask + residual

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ptg/errors.hpp"
#include "ptg/layers.hpp"
#include "ptg/ops.hpp"
#include "ptg/parameters.hpp"

namespace ptg {

struct RefinementConfig {
  std::size_t channels = 16;
  std::size_t prior_dim = 512;
  std::size_t kernel_size = 3;
  std::size_t downsample_levels = 2;
  std::size_t attn_downsample = 4;
  double mask_bias_init = 4.0;

  void validate() const {
    if (kernel_size % 2 == 0) throw ConfigError("kernel_size must be odd");
    if (channels < 4) throw ConfigError("channels must be at least 4");
    if (prior_dim < 1) throw ConfigError("prior_dim must be at least 1");
    if (attn_downsample < 1) throw ConfigError("attn_downsample must be at least 1");
  }

  std::size_t scale() const { return std::size_t{1} << downsample_levels; }
};

/// Component toggles for ablation runs. All false is the full model.
struct Ablation {
  bool no_sve = false;        // fixed 0.5 / 0.5 blend of short and long range
  bool no_ca = false;         // channel weights fixed to 1
  bool no_sa = false;         // spatial weights fixed to 1
  bool no_pos_embed = false;  // position embeddings replaced by zeros
  bool snr_mask = false;      // range score from a fixed SNR estimate
  bool concat_prior = false;  // raw prior tiled into the encoder input

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n{"no_sve",       "no_ca",    "no_sa",
                                            "no_pos_embed", "snr_mask", "concat_prior"};
    return n;
  }

  bool& flag(const std::string& name) {
    if (name == "no_sve") return no_sve;
    if (name == "no_ca") return no_ca;
    if (name == "no_sa") return no_sa;
    if (name == "no_pos_embed") return no_pos_embed;
    if (name == "snr_mask") return snr_mask;
    if (name == "concat_prior") return concat_prior;
    throw ConfigError("unknown ablation toggle: " + name);
  }
  bool flag(const std::string& name) const { return const_cast<Ablation*>(this)->flag(name); }

  static Ablation from_names(const std::vector<std::string>& toggles) {
    Ablation a;
    for (const auto& t : toggles) a.flag(t) = true;
    a.validate();
    return a;
  }

  std::vector<std::string> active() const {
    std::vector<std::string> out;
    for (const auto& n : names())
      if (flag(n)) out.push_back(n);
    return out;
  }

  std::string label() const {
    auto a = active();
    if (a.empty()) return "full";
    std::string s;
    for (const auto& n : a) s += (s.empty() ? "" : "+") + n;
    return s;
  }

  void validate() const {
    if (snr_mask && no_sve) throw ConfigError("ablation toggles snr_mask and no_sve conflict");
  }
};

/// (h, w, 2) map of (x, y) pixel coordinates scaled linearly to [-1, 1].
template <class T>
Tensor<T> coordinate_map(std::size_t h, std::size_t w) {
  Tensor<T> map(Shape{h, w, 2});
  auto norm = [](std::size_t i, std::size_t n) {
    return n > 1 ? T(-1) + T(2) * static_cast<T>(i) / static_cast<T>(n - 1) : T(0);
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      map.at(y, x, 0) = norm(x, w);
      map.at(y, x, 1) = norm(y, h);
    }
  return map;
}

/// Per-location two-layer perceptron 2 -> c -> c over the coordinate map.
template <class T>
struct PositionEmbedding {
  Linear<T> hidden, out;

  static PositionEmbedding make(ParamFactory<T>& f, const std::string& name, std::size_t c) {
    return {Linear<T>::make(f, name + ".hidden", 2, c), Linear<T>::make(f, name + ".out", c, c)};
  }

  Tensor<T> operator()(Tape<T>& tape, std::size_t h, std::size_t w) const {
    const auto map = coordinate_map<T>(h, w);
    Tensor<T> coords(Shape{h * w, 2}, std::vector<T>(map.data().begin(), map.data().end()));
    auto z = out(tape, silu(tape, hidden(tape, coords)));
    return reshape(tape, z, Shape{h, w, out.weight.dim(1)});
  }
};

/// Intermediate maps of one refinement pass, kept for inspection.
template <class T>
struct RefinementDiagnostics {
  Tensor<T> feature;          // encoder output f
  Tensor<T> short_range;      // f_s
  Tensor<T> long_range;       // f_l
  Tensor<T> range_score;      // M, (h, w, 1)
  Tensor<T> enhanced;         // f_hat
  Tensor<T> channel_weights;  // M_c, (c)
  Tensor<T> kernels;          // C_p, (h, w, k*k*c); undefined when spatial attention is off
  Tensor<T> spatial_weights;  // M_s, (h, w, 1)
  Tensor<T> fused;            // f_bar
};

template <class T>
struct RefinementOutput {
  Tensor<T> mask;      // I_m, (H, W, 1)
  Tensor<T> residual;  // I_r, (H, W, 3)
  Tensor<T> composed;  // refined image, unclamped
  RefinementDiagnostics<T> diagnostics;
};

namespace detail {

/// Re-throws a component error with the failing stage prefixed.
template <class F>
auto staged(const char* stage, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const DimensionError& e) {
    throw DimensionError(std::string(stage) + ": " + e.what());
  } catch (const InputError& e) {
    throw InputError(std::string(stage) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(stage) + ": " + e.what());
  }
}

template <class T>
void check_image(const Tensor<T>& img, const char* what) {
  if (img.rank() != 3 || img.dim(2) != 3)
    throw DimensionError(std::string(what) + " must be (H, W, 3), got " + shape_string(img.shape()));
  for (T v : img.data())
    if (!(v >= T(0) && v <= T(1)))
      throw InputError(std::string(what) + " has a pixel outside [0, 1]");
}

}  // namespace detail

template <class T>
class RefinementModule {
 public:
  struct ChannelAttention {
    Tensor<T> features;  // f_hat_c
    Tensor<T> weights;   // M_c
  };
  struct SpatialAttention {
    Tensor<T> features;  // f_hat_s
    Tensor<T> weights;   // M_s
  };
  struct Decoded {
    Tensor<T> mask;
    Tensor<T> residual;
  };

  explicit RefinementModule(RefinementConfig config = {}, Ablation ablation = {},
                            std::uint64_t seed = 0)
      : config_(config), ablation_(ablation) {
    config_.validate();
    ablation_.validate();
    build(seed);
  }

  const RefinementConfig& config() const { return config_; }
  const Ablation& ablation() const { return ablation_; }
  ParameterTree<T>& parameters() { return params_; }
  const ParameterTree<T>& parameters() const { return params_; }

  // -------------------------------------------------------------------------
  // Stages

  Tensor<T> encode(Tape<T>& tape, const Tensor<T>& restored, const Tensor<T>& degraded,
                   const Tensor<T>* prior = nullptr) const {
    detail::check_image(restored, "restored image");
    detail::check_image(degraded, "degraded image");
    detail::expect_same(restored.shape(), degraded.shape(), "encode");
    const std::size_t H = restored.dim(0), W = restored.dim(1), s = config_.scale();
    if (H % s != 0 || W % s != 0)
      throw ConfigError("image size " + std::to_string(H) + "x" + std::to_string(W) +
                        " is not divisible by " + std::to_string(s));
    std::vector<Tensor<T>> parts{restored, degraded};
    if (ablation_.concat_prior) {
      if (!prior) throw InputError("concat_prior encoder needs the prior vector");
      check_prior(*prior);
      parts.push_back(tile_spatial(tape, *prior, H, W));
    }
    auto x = concat_channels(tape, parts);
    for (const auto& conv : encoder_) x = silu(tape, conv(tape, x));
    return x;
  }

  /// Range score map M in (0, 1), (h, w, 1).
  Tensor<T> range_score(Tape<T>& tape, const Tensor<T>& f, const Tensor<T>& prior) const {
    if (!range_head_) throw ContractError("range_score is disabled in this ablation");
    std::vector<Tensor<T>> parts{f};
    if (range_prior_) {
      check_prior(prior);
      parts.push_back(tile_spatial(tape, (*range_prior_)(tape, prior), f.dim(0), f.dim(1)));
    }
    parts.push_back(position(tape, range_position_, f.dim(0), f.dim(1)));
    auto x = silu(tape, range_head_->first(tape, concat_channels(tape, parts)));
    return sigmoid(tape, range_head_->second(tape, x));
  }

  /// Two residual 3x3 blocks; receptive field 9x9.
  Tensor<T> short_range(Tape<T>& tape, const Tensor<T>& f) const {
    auto x = f;
    for (std::size_t b = 0; b < short_.size(); b += 2)
      x = add(tape, x, short_[b + 1](tape, silu(tape, short_[b](tape, x))));
    return x;
  }

  /// Downsample, attend across all tokens, upsample back.
  Tensor<T> long_range(Tape<T>& tape, const Tensor<T>& f) const {
    const std::size_t h = f.dim(0), w = f.dim(1), c = f.dim(2);
    const std::size_t hd = std::max<std::size_t>(1, h / config_.attn_downsample);
    const std::size_t wd = std::max<std::size_t>(1, w / config_.attn_downsample);
    auto small = bilinear_resize(tape, f, hd, wd);
    auto tokens = attention_(tape, reshape(tape, small, Shape{hd * wd, c}));
    return bilinear_resize(tape, reshape(tape, tokens, Shape{hd, wd, c}), h, w);
  }

  /// f_hat = M * f_s + (1 - M) * f_l, M broadcast over channels.
  static Tensor<T> blend_ranges(Tape<T>& tape, const Tensor<T>& score, const Tensor<T>& f_short,
                                const Tensor<T>& f_long) {
    auto complement = add_scalar(tape, scalar_mul(tape, score, T(-1)), T(1));
    return add(tape, mul_spatial(tape, f_short, score), mul_spatial(tape, f_long, complement));
  }

  Tensor<T> sve(Tape<T>& tape, const Tensor<T>& f, const Tensor<T>& prior) const {
    return blend_ranges(tape, range_score(tape, f, prior), short_range(tape, f), long_range(tape, f));
  }

  ChannelAttention channel_attention(Tape<T>& tape, const Tensor<T>& f_hat,
                                     const Tensor<T>& prior) const {
    if (!channel_) throw ContractError("channel_attention is disabled in this ablation");
    std::vector<Tensor<T>> parts{global_avg_pool(tape, f_hat)};
    if (channel_prior_) {
      check_prior(prior);
      parts.push_back((*channel_prior_)(tape, prior));
    }
    auto hidden = silu(tape, channel_->first(tape, concat_channels(tape, parts)));
    auto weights = sigmoid(tape, channel_->second(tape, hidden));
    return {mul_channels(tape, f_hat, weights), weights};
  }

  /// Per-location depthwise kernels, tanh-bounded and scaled by 1/(k*k).
  Tensor<T> predict_kernels(Tape<T>& tape, const Tensor<T>& f_hat, const Tensor<T>& prior) const {
    if (!kernel_head_) throw ContractError("predict_kernels is disabled in this ablation");
    const std::size_t h = f_hat.dim(0), w = f_hat.dim(1);
    std::vector<Tensor<T>> parts{f_hat};
    if (channel_prior_) {
      check_prior(prior);
      parts.push_back(tile_spatial(tape, (*channel_prior_)(tape, prior), h, w));
    }
    parts.push_back(position(tape, kernel_position_, h, w));
    auto x = silu(tape, kernel_head_->first(tape, concat_channels(tape, parts)));
    const T k2 = static_cast<T>(config_.kernel_size * config_.kernel_size);
    return scalar_mul(tape, tanh(tape, kernel_head_->second(tape, x)), T(1) / k2);
  }

  SpatialAttention spatial_attention(Tape<T>& tape, const Tensor<T>& f_hat,
                                     const Tensor<T>& kernels) const {
    if (!spatial_out_) throw ContractError("spatial_attention is disabled in this ablation");
    auto response = per_location_conv(tape, f_hat, kernels);
    auto weights = sigmoid(tape, (*spatial_out_)(tape, response));
    return {mul_spatial(tape, f_hat, weights), weights};
  }

  Tensor<T> fuse(Tape<T>& tape, const Tensor<T>& f_hat_c, const Tensor<T>& f_hat_s) const {
    detail::expect_same(f_hat_c.shape(), f_hat_s.shape(), "fuse");
    return fuse_(tape, concat_channels(tape, {f_hat_c, f_hat_s}));
  }

  Decoded decode(Tape<T>& tape, const Tensor<T>& f_bar) const {
    auto x = f_bar;
    for (const auto& conv : decoder_)
      x = silu(tape, conv(tape, bilinear_resize(tape, x, 2 * x.dim(0), 2 * x.dim(1))));
    return {sigmoid(tape, mask_head_(tape, x)), residual_head_(tape, x)};
  }

  static Tensor<T> compose(Tape<T>& tape, const Tensor<T>& degraded, const Tensor<T>& restored,
                           const Tensor<T>& mask, const Tensor<T>& residual) {
    // Written as restored*m + degraded*(1-m), which equals degraded +
    // (restored - degraded)*m but is exact in floating point at m = 0 and 1.
    auto complement = add_scalar(tape, scalar_mul(tape, mask, T(-1)), T(1));
    auto blended = add(tape, mul_spatial(tape, restored, mask), mul_spatial(tape, degraded, complement));
    return add(tape, blended, residual);
  }

  /// Fixed SNR-style score: blurred luminance of the restored image over
  /// (signal + |degraded luminance - its blur|), average-pooled to (h, w, 1).
  Tensor<T> snr_range_score(const Tensor<T>& restored, const Tensor<T>& degraded) const {
    const std::size_t H = restored.dim(0), W = restored.dim(1), s = config_.scale();
    auto luma = [&](const Tensor<T>& img) {
      std::vector<T> g(H * W);
      for (std::size_t p = 0; p < H * W; ++p)
        g[p] = T(0.299) * img[p * 3] + T(0.587) * img[p * 3 + 1] + T(0.114) * img[p * 3 + 2];
      return g;
    };
    auto box3 = [&](const std::vector<T>& g) {
      std::vector<T> out(H * W);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          T acc = T(0);
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const auto yy = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
                  static_cast<std::ptrdiff_t>(y) + dy, 0, static_cast<std::ptrdiff_t>(H) - 1));
              const auto xx = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
                  static_cast<std::ptrdiff_t>(x) + dx, 0, static_cast<std::ptrdiff_t>(W) - 1));
              acc += g[yy * W + xx];
            }
          out[y * W + x] = acc / T(9);
        }
      return out;
    };
    const auto signal = box3(luma(restored));
    const auto dl = luma(degraded);
    const auto dl_blur = box3(dl);
    Tensor<T> score(Shape{H / s, W / s, 1});
    const T inv = T(1) / static_cast<T>(s * s);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t p = y * W + x;
        const T noise = std::abs(dl[p] - dl_blur[p]);
        const T sig = std::max(signal[p], T(0));
        const T ratio = std::clamp(sig / (sig + noise + T(1e-6)), T(0), T(1));
        score[(y / s) * (W / s) + x / s] += ratio * inv;
      }
    return score;
  }

  /// Full pass: encode -> SVE -> channel + spatial attention -> fuse ->
  /// decode -> composition. The composed image is not clamped.
  RefinementOutput<T> refine(Tape<T>& tape, const Tensor<T>& degraded, const Tensor<T>& restored,
                             const Tensor<T>& prior) const {
    RefinementOutput<T> out;
    auto& d = out.diagnostics;
    detail::staged("refine/prior", [&] { check_prior(prior); });
    d.feature = detail::staged("refine/encode", [&] { return encode(tape, restored, degraded, &prior); });
    const std::size_t h = d.feature.dim(0), w = d.feature.dim(1), c = d.feature.dim(2);

    detail::staged("refine/sve", [&] {
      d.short_range = short_range(tape, d.feature);
      d.long_range = long_range(tape, d.feature);
      if (ablation_.no_sve)
        d.range_score = Tensor<T>::filled(Shape{h, w, 1}, T(0.5));
      else if (ablation_.snr_mask)
        d.range_score = snr_range_score(restored, degraded);
      else
        d.range_score = range_score(tape, d.feature, prior);
      d.enhanced = blend_ranges(tape, d.range_score, d.short_range, d.long_range);
    });

    Tensor<T> f_hat_c = detail::staged("refine/channel_attention", [&] {
      if (ablation_.no_ca) {
        d.channel_weights = Tensor<T>::filled(Shape{c}, T(1));
        return d.enhanced;
      }
      auto ca = channel_attention(tape, d.enhanced, prior);
      d.channel_weights = ca.weights;
      return ca.features;
    });

    Tensor<T> f_hat_s = detail::staged("refine/spatial_attention", [&] {
      if (ablation_.no_sa) {
        d.spatial_weights = Tensor<T>::filled(Shape{h, w, 1}, T(1));
        return d.enhanced;
      }
      d.kernels = predict_kernels(tape, d.enhanced, prior);
      auto sa = spatial_attention(tape, d.enhanced, d.kernels);
      d.spatial_weights = sa.weights;
      return sa.features;
    });

    d.fused = detail::staged("refine/fuse", [&] { return fuse(tape, f_hat_c, f_hat_s); });
    auto decoded = detail::staged("refine/decode", [&] { return decode(tape, d.fused); });
    out.mask = decoded.mask;
    out.residual = decoded.residual;
    out.composed = compose(tape, degraded, restored, out.mask, out.residual);
    return out;
  }

 private:
  using ConvPair = std::pair<Conv2d<T>, Conv2d<T>>;
  using LinearPair = std::pair<Linear<T>, Linear<T>>;

  void check_prior(const Tensor<T>& prior) const {
    if (prior.rank() != 1 || prior.dim(0) != config_.prior_dim)
      throw InputError("prior has shape " + shape_string(prior.shape()) + ", expected [" +
                       std::to_string(config_.prior_dim) + "]");
  }

  Tensor<T> position(Tape<T>& tape, const std::optional<PositionEmbedding<T>>& embed,
                     std::size_t h, std::size_t w) const {
    if (!embed) return Tensor<T>(Shape{h, w, config_.channels});
    return (*embed)(tape, h, w);
  }

  void build(std::uint64_t seed) {
    const std::size_t c = config_.channels, k = config_.kernel_size, dg = config_.prior_dim;
    ParamFactory<T> root(params_, seed, "refine.");
    const bool uses_range_head = !ablation_.no_sve && !ablation_.snr_mask;
    const bool uses_prior_maps = !ablation_.concat_prior;

    const std::size_t in_ch = 6 + (ablation_.concat_prior ? dg : 0);
    for (std::size_t l = 0; l < config_.downsample_levels; ++l)
      encoder_.push_back(
          Conv2d<T>::make(root, "encoder." + std::to_string(l), 3, l == 0 ? in_ch : c, c, 2));

    if (uses_range_head) {
      if (uses_prior_maps) range_prior_ = Linear<T>::make(root, "range.prior_map", dg, c);
      if (!ablation_.no_pos_embed)
        range_position_ = PositionEmbedding<T>::make(root, "range.position", c);
      const std::size_t width = uses_prior_maps ? 3 * c : 2 * c;
      range_head_ = ConvPair{Conv2d<T>::make(root, "range.conv0", 3, width, c),
                             Conv2d<T>::make(root, "range.conv1", 3, c, 1)};
    }

    for (std::size_t b = 0; b < 4; ++b)
      short_.push_back(Conv2d<T>::make(root, "short_range.conv" + std::to_string(b), 3, c, c));
    attention_ = SelfAttention<T>::make(root, "long_range.attention", c);

    if (uses_prior_maps && !(ablation_.no_ca && ablation_.no_sa))
      channel_prior_ = Linear<T>::make(root, "attention.prior_map", dg, c);
    if (!ablation_.no_ca) {
      const std::size_t width = uses_prior_maps ? 2 * c : c;
      channel_ = LinearPair{Linear<T>::make(root, "channel.fc0", width, c),
                            Linear<T>::make(root, "channel.fc1", c, c)};
    }
    if (!ablation_.no_sa) {
      if (!ablation_.no_pos_embed)
        kernel_position_ = PositionEmbedding<T>::make(root, "kernel.position", c);
      const std::size_t width = uses_prior_maps ? 3 * c : 2 * c;
      kernel_head_ = ConvPair{Conv2d<T>::make(root, "kernel.conv0", 3, width, c),
                              Conv2d<T>::make(root, "kernel.conv1", 3, c, k * k * c)};
      spatial_out_ = Conv2d<T>::make(root, "spatial.project", 1, c, 1);
    }
    fuse_ = Conv2d<T>::make(root, "fuse", 1, 2 * c, c);

    for (std::size_t l = 0; l < config_.downsample_levels; ++l)
      decoder_.push_back(Conv2d<T>::make(root, "decoder." + std::to_string(l), 3, c, c));
    mask_head_ = Conv2d<T>::constant(root, "decoder.mask", 3, c, 1, static_cast<T>(config_.mask_bias_init));
    residual_head_ = Conv2d<T>::constant(root, "decoder.residual", 3, c, 3, T(0));
  }

  RefinementConfig config_;
  Ablation ablation_;
  ParameterTree<T> params_;

  std::vector<Conv2d<T>> encoder_;
  std::optional<Linear<T>> range_prior_;       // T_m
  std::optional<PositionEmbedding<T>> range_position_;   // S_m
  std::optional<ConvPair> range_head_;         // R_m
  std::vector<Conv2d<T>> short_;               // R_s
  SelfAttention<T> attention_;                 // R_l
  std::optional<Linear<T>> channel_prior_;     // T_c, shared by both attentions
  std::optional<LinearPair> channel_;          // R_c
  std::optional<PositionEmbedding<T>> kernel_position_;  // S_c
  std::optional<ConvPair> kernel_head_;        // R_p
  std::optional<Conv2d<T>> spatial_out_;       // R_o
  Conv2d<T> fuse_;                             // R_f
  std::vector<Conv2d<T>> decoder_;
  Conv2d<T> mask_head_;
  Conv2d<T> residual_head_;
};

}  // namespace ptg
