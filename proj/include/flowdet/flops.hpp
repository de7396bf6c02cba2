#pragma once

#include "flowdet/detector.hpp"

namespace flowdet {

// Analytic multiply-add cost model; 1 MAC = 2 FLOPs throughout. Elementwise
// activations, normalizations and softmax are not counted (they are O(n)
// noise next to the contractions).

struct LayerFlops {
  std::string name;
  int64_t flops = 0;
};

struct FlopReport {
  std::vector<LayerFlops> rows;
  int64_t total = 0;

  void add(const std::string& name, int64_t flops) {
    rows.push_back({name, flops});
    total += flops;
  }

  // sum of every row whose name starts with the prefix
  int64_t sum_prefix(const std::string& prefix) const {
    int64_t acc = 0;
    for (const auto& r : rows)
      if (r.name.rfind(prefix, 0) == 0) acc += r.flops;
    return acc;
  }
};

inline int64_t flops_conv2d(int64_t out_ch, int64_t in_ch, int64_t kh, int64_t kw, int64_t ho,
                            int64_t wo) {
  return 2 * out_ch * in_ch * kh * kw * ho * wo;
}

inline int64_t flops_dwconv(int64_t in_ch, int64_t out_ch, int64_t kh, int64_t kw, int64_t h,
                            int64_t w) {
  return 2 * in_ch * kh * kw * h * w + 2 * out_ch * in_ch * h * w;
}

inline int64_t flops_linear(int64_t tokens, int64_t din, int64_t dout) {
  return 2 * tokens * din * dout;
}

// QK^T logits plus attention-weighted values; dim is the total embed width.
inline int64_t flops_attention_core(int64_t tq, int64_t tk, int64_t dim) {
  return 2 * tq * tk * dim + 2 * tq * tk * dim;
}

// Deformable sampling: per branch, kernel point, location and channel a
// 4-tap interpolation (4 MACs) plus the omega*psi modulation and accumulate
// (2 MACs) -> 12 FLOPs.
inline int64_t flops_gdu_sampling(int64_t channels, int64_t points, int64_t h, int64_t w) {
  return 12 * channels * points * h * w;
}

inline void flops_gdu(FlopReport& rep, const std::string& prefix, int64_t c, int64_t points,
                      int64_t h, int64_t w) {
  for (const char* branch : {".h", ".v"}) {
    const std::string b = prefix + branch;
    rep.add(b + ".trunk_dwconv", flops_dwconv(c, c, 3, 3, h, w));
    rep.add(b + ".offset_head", flops_conv2d(2 * points, c, 1, 1, h, w));
    rep.add(b + ".omega_head", flops_conv2d(points, c, 1, 1, h, w));
    rep.add(b + ".psi", 6 * points * h * w);
    rep.add(b + ".sampling", flops_gdu_sampling(c, points, h, w));
  }
  rep.add(prefix + ".combine", flops_conv2d(c, c, 1, 1, h, w));
}

inline void flops_pafc_stage(FlopReport& rep, const std::string& prefix, const PafcConfig& cfg,
                             int64_t h_in, int64_t w_in) {
  const int64_t h = h_in / cfg.stride, w = w_in / cfg.stride;
  const int64_t half = cfg.width / 2;
  const int64_t points = int64_t(cfg.gdu.kernel_points.size());
  rep.add(prefix + ".stem", flops_conv2d(cfg.width, cfg.in_channels, 3, 3, h, w));
  for (int64_t i = 0; i + 1 < cfg.arb_count; ++i) {
    const std::string arb = prefix + ".arb" + std::to_string(i);
    flops_gdu(rep, arb + ".gdu", half, points, h, w);
    rep.add(arb + ".pw", flops_conv2d(half, half, 1, 1, h, w));
  }
  rep.add(prefix + ".fusion",
          flops_conv2d(cfg.width, cfg.fusion_input_channels(), 1, 1, h, w));
}

inline void flops_plain_stage(FlopReport& rep, const std::string& prefix, int64_t in_ch,
                              int64_t width, int64_t convs, int64_t h_in, int64_t w_in,
                              int64_t stride) {
  const int64_t h = h_in / stride, w = w_in / stride;
  rep.add(prefix + ".stem", flops_conv2d(width, in_ch, 3, 3, h, w));
  for (int64_t i = 0; i < convs; ++i)
    rep.add(prefix + ".conv" + std::to_string(i), flops_conv2d(width, width, 3, 3, h, w));
}

inline void flops_ffn_conv(FlopReport& rep, const std::string& prefix, int64_t dim, int64_t hidden,
                           int64_t tokens) {
  rep.add(prefix + ".ffn1", flops_linear(tokens, dim, hidden));
  rep.add(prefix + ".ffn2", flops_linear(tokens, hidden, dim));
}

inline void flops_saa(FlopReport& rep, const std::string& prefix, const SaaConfig& cfg, int64_t h,
                      int64_t w) {
  const int64_t t = h * w, d = cfg.embed_dim;
  const int64_t hp = (h + cfg.window - 1) / cfg.window * cfg.window;
  const int64_t wp = (w + cfg.window - 1) / cfg.window * cfg.window;
  const int64_t tp = hp * wp;
  // local branch: projections at padded resolution, windowed attention core
  rep.add(prefix + ".ldb.qkv_proj", 3 * flops_linear(tp, d, d));
  rep.add(prefix + ".ldb.attn",
          (tp / (cfg.window * cfg.window)) *
              flops_attention_core(cfg.window * cfg.window, cfg.window * cfg.window, d));
  rep.add(prefix + ".ldb.out_proj", flops_linear(tp, d, d));
  // global branch: queries at full resolution, K/V on the reduced map
  const int64_t hr = (h + cfg.reduction - 1) / cfg.reduction;
  const int64_t wr = (w + cfg.reduction - 1) / cfg.reduction;
  const int64_t tr = hr * wr;
  rep.add(prefix + ".gcb.pool", 2 * d * t);  // sum + scale per input cell
  rep.add(prefix + ".gcb.q_proj", flops_linear(t, d, d));
  rep.add(prefix + ".gcb.kv_proj", 2 * flops_linear(tr, d, d));
  rep.add(prefix + ".gcb.attn", flops_attention_core(t, tr, d));
  rep.add(prefix + ".gcb.out_proj", flops_linear(t, d, d));
  rep.add(prefix + ".gate", flops_conv2d(1, d, 1, 1, h, w));
  rep.add(prefix + ".cross", flops_conv2d(d, d, 1, 1, h, w) + 2 * d * t);
  flops_ffn_conv(rep, prefix, d, cfg.ffn_hidden, t);
}

inline void flops_plain_encoder(FlopReport& rep, const std::string& prefix, int64_t d,
                                int64_t hidden, int64_t heads, int64_t h, int64_t w) {
  (void)heads;
  const int64_t t = h * w;
  rep.add(prefix + ".qkv_proj", 3 * flops_linear(t, d, d));
  rep.add(prefix + ".attn", flops_attention_core(t, t, d));
  rep.add(prefix + ".out_proj", flops_linear(t, d, d));
  flops_ffn_conv(rep, prefix, d, hidden, t);
}

inline void flops_decoder(FlopReport& rep, const std::string& prefix, int64_t layers, int64_t q,
                          int64_t t, int64_t d, int64_t hidden) {
  for (int64_t l = 0; l < layers; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    rep.add(p + ".q_proj", flops_linear(q, d, d));
    rep.add(p + ".kv_proj", 2 * flops_linear(t, d, d));
    rep.add(p + ".attn", flops_attention_core(q, t, d));
    rep.add(p + ".out_proj", flops_linear(q, d, d));
    flops_ffn_conv(rep, p, d, hidden, q);
  }
}

// Static per-layer FLOP breakdown of the full detector forward pass.
inline FlopReport count_flops(const ModelConfig& cfg) {
  cfg.validate();
  FlopReport rep;
  int64_t h = cfg.input_h, w = cfg.input_w;
  int64_t in_ch = 3;
  for (size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    const std::string prefix = "backbone.stage" + std::to_string(s);
    if (cfg.use_pafc) {
      PafcConfig pc;
      pc.in_channels = in_ch;
      pc.width = cfg.stage_channels[s];
      pc.arb_count = cfg.arb_count;
      pc.stride = 2;
      pc.gdu = cfg.gdu_config();
      flops_pafc_stage(rep, prefix, pc, h, w);
    } else {
      flops_plain_stage(rep, prefix, in_ch, cfg.stage_channels[s], cfg.arb_count - 1, h, w, 2);
    }
    h /= 2;
    w /= 2;
    in_ch = cfg.stage_channels[s];
  }
  if (cfg.use_saa)
    flops_saa(rep, "encoder.saa", cfg.saa_config(), h, w);
  else
    flops_plain_encoder(rep, "encoder.plain", cfg.embed_dim(), cfg.ffn_hidden, cfg.heads, h, w);
  flops_decoder(rep, "decoder", cfg.decoder_layers, cfg.query_count, h * w, cfg.embed_dim(),
                cfg.ffn_hidden);
  rep.add("head.cls", flops_linear(cfg.query_count, cfg.embed_dim(), cfg.class_count + 1));
  rep.add("head.box", flops_linear(cfg.query_count, cfg.embed_dim(), 4));
  return rep;
}

}  // namespace flowdet
