#pragma once

#include "flowdet/gdu.hpp"

namespace flowdet {

// LayerNorm across channels of an [N,C,H,W] map (per spatial position).
template <typename T>
inline Tensor<T> channel_layernorm(const Tensor<T>& x, const Tensor<T>& gamma,
                                   const Tensor<T>& beta) {
  Tensor<T> nhwc = permute(x, {0, 2, 3, 1});
  Tensor<T> normed = layernorm(nhwc, gamma, beta);
  return permute(normed, {0, 3, 1, 2});
}

// Adaptive refinement block: GDU -> channel norm -> SiLU -> pointwise conv,
// added back onto the input. With all weights zero the residual branch is
// exactly zero and the block is an identity.
template <typename T>
struct ArbParams {
  GduParams<T> gdu;
  Tensor<T> ln_gamma;  // [C]
  Tensor<T> ln_beta;   // [C]
  Tensor<T> pw_w;      // [C,C,1,1]
  Tensor<T> pw_b;      // [C]

  static ArbParams init(int64_t channels, int64_t points, Rng& rng) {
    ArbParams p;
    p.gdu = GduParams<T>::init(channels, points, rng);
    p.ln_gamma = Tensor<T>::ones({channels});
    p.ln_beta = Tensor<T>::zeros({channels});
    p.pw_w = Tensor<T>::randn({channels, channels, 1, 1}, rng, std::sqrt(1.0 / double(channels)));
    p.pw_b = Tensor<T>::zeros({channels});
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    gdu.visit(prefix + ".gdu", fn);
    fn(prefix + ".ln_gamma", ln_gamma);
    fn(prefix + ".ln_beta", ln_beta);
    fn(prefix + ".pw_w", pw_w);
    fn(prefix + ".pw_b", pw_b);
  }
};

template <typename T>
inline Tensor<T> arb_forward(const Tensor<T>& x, const GduConfig& cfg, const ArbParams<T>& params) {
  Tensor<T> y = gdu_forward(x, cfg, params.gdu);
  y = channel_layernorm(y, params.ln_gamma, params.ln_beta);
  y = silu(y);
  y = conv2d(y, params.pw_w, params.pw_b, 1, 0);
  return add(x, y);
}

struct PafcConfig {
  int64_t in_channels = 3;
  int64_t width = 32;     // stem output channels; must be even for the split
  int64_t arb_count = 3;  // cascade index bound n; the chain holds n-1 ARBs
  int64_t stride = 2;     // stem stride (stage downsampling)
  GduConfig gdu = GduConfig::grid3x3();

  int64_t fusion_input_channels() const { return width / 2 * (arb_count + 1); }

  void validate() const {
    if (width % 2 != 0)
      throw ConfigError("PafcConfig: width must be even for the channel split, got " +
                        std::to_string(width));
    if (arb_count < 1) throw ConfigError("PafcConfig: arb_count must be >= 1");
    gdu.validate();
  }
};

template <typename T>
struct PafcParams {
  Tensor<T> stem_w;  // [width, in, 3, 3]
  Tensor<T> stem_b;  // [width]
  std::vector<ArbParams<T>> arbs;
  Tensor<T> stage_weights;  // [arb_count + 1], softmax-normalized in forward
  Tensor<T> fusion_w;       // [width, width/2*(n+1), 1, 1]
  Tensor<T> fusion_b;       // [width]

  static PafcParams init(const PafcConfig& cfg, Rng& rng) {
    cfg.validate();
    PafcParams p;
    const int64_t points = int64_t(cfg.gdu.kernel_points.size());
    p.stem_w = Tensor<T>::randn({cfg.width, cfg.in_channels, 3, 3}, rng,
                                std::sqrt(2.0 / double(cfg.in_channels * 9)));
    p.stem_b = Tensor<T>::zeros({cfg.width});
    for (int64_t i = 0; i + 1 < cfg.arb_count; ++i)
      p.arbs.push_back(ArbParams<T>::init(cfg.width / 2, points, rng));
    p.stage_weights = Tensor<T>::zeros({cfg.arb_count + 1});
    p.fusion_w = Tensor<T>::randn({cfg.width, cfg.fusion_input_channels(), 1, 1}, rng,
                                  std::sqrt(2.0 / double(cfg.fusion_input_channels())));
    p.fusion_b = Tensor<T>::zeros({cfg.width});
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".stem_w", stem_w);
    fn(prefix + ".stem_b", stem_b);
    for (size_t i = 0; i < arbs.size(); ++i) arbs[i].visit(prefix + ".arb" + std::to_string(i), fn);
    fn(prefix + ".stage_weights", stage_weights);
    fn(prefix + ".fusion_w", fusion_w);
    fn(prefix + ".fusion_b", fusion_b);
  }
};

// Cross-stage partial cascade: stem conv, channel split into (Y0, Y1), a
// chain of ARBs refining the second half, then fusion of all softmax-weighted
// stages by concatenation and a 1x1 conv.
template <typename T>
inline Tensor<T> pafc_forward(const Tensor<T>& x, const PafcConfig& cfg,
                              const PafcParams<T>& params) {
  cfg.validate();
  Tensor<T> stem = conv2d(x, params.stem_w, params.stem_b, cfg.stride, 1);
  std::vector<Tensor<T>> halves = split(stem, 1, 2);
  std::vector<Tensor<T>> stages;
  stages.push_back(halves[0]);
  stages.push_back(halves[1]);
  for (const auto& arb : params.arbs) stages.push_back(arb_forward(stages.back(), cfg.gdu, arb));
  Tensor<T> w = softmax(params.stage_weights, 0);
  std::vector<Tensor<T>> w_parts = split(w, 0, int64_t(stages.size()));
  std::vector<Tensor<T>> weighted;
  for (size_t i = 0; i < stages.size(); ++i)
    weighted.push_back(mul_scalar_tensor(stages[i], w_parts[i]));
  Tensor<T> fused_in = concat(weighted, 1);
  return conv2d(fused_in, params.fusion_w, params.fusion_b, 1, 0);
}

}  // namespace flowdet
