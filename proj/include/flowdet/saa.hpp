#pragma once

#include <optional>

#include "flowdet/boxes.hpp"
#include "flowdet/pafc.hpp"

namespace flowdet {

// ---------------------------------------------------------------------------
// window partition / merge
// ---------------------------------------------------------------------------

struct WindowLayout {
  int64_t n = 0, c = 0, h = 0, w = 0;  // original map
  int64_t hp = 0, wp = 0;              // zero-padded extents
  int64_t win = 0;                     // window side
  int64_t windows_y() const { return hp / win; }
  int64_t windows_x() const { return wp / win; }
  int64_t windows_per_image() const { return windows_y() * windows_x(); }
};

// Partition an [N,C,H,W] map into non-overlapping win x win windows
// (zero-padding H and W up to multiples of win). Output rows are ordered
// (image, window-row, window-col); the layout record inverts the operation.
template <typename T>
inline std::pair<Tensor<T>, WindowLayout> window_partition(const Tensor<T>& x, int64_t win) {
  if (win <= 0) throw ValueError("window_partition: window size must be positive");
  if (x.rank() != 4) throw ShapeError("window_partition: input must be [N,C,H,W]");
  WindowLayout lay;
  lay.n = x.dim(0);
  lay.c = x.dim(1);
  lay.h = x.dim(2);
  lay.w = x.dim(3);
  lay.win = win;
  lay.hp = (lay.h + win - 1) / win * win;
  lay.wp = (lay.w + win - 1) / win * win;
  const int64_t nw = lay.windows_per_image();
  Tensor<T> out = Tensor<T>::zeros({lay.n * nw, lay.c, win, win});
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  const int64_t nwx = lay.windows_x();
  for (int64_t n = 0; n < lay.n; ++n)
    for (int64_t wy = 0; wy < lay.windows_y(); ++wy)
      for (int64_t wx = 0; wx < nwx; ++wx) {
        const int64_t widx = n * nw + wy * nwx + wx;
        for (int64_t c = 0; c < lay.c; ++c)
          for (int64_t iy = 0; iy < win; ++iy)
            for (int64_t ix = 0; ix < win; ++ix) {
              const int64_t y = wy * win + iy, xx = wx * win + ix;
              po[((widx * lay.c + c) * win + iy) * win + ix] =
                  (y < lay.h && xx < lay.w) ? px[((n * lay.c + c) * lay.h + y) * lay.w + xx] : T(0);
            }
      }
  if (auto* g = detail::begin_record<T>({&x}, out)) {
    g->add_node("window_partition", [x, out, lay]() {
      const T* go = out.storage()->grad.data();
      T* gx = x.storage()->grad.data();
      const int64_t nw = lay.windows_per_image(), nwx = lay.windows_x(), win = lay.win;
      for (int64_t n = 0; n < lay.n; ++n)
        for (int64_t wy = 0; wy < lay.windows_y(); ++wy)
          for (int64_t wx = 0; wx < nwx; ++wx) {
            const int64_t widx = n * nw + wy * nwx + wx;
            for (int64_t c = 0; c < lay.c; ++c)
              for (int64_t iy = 0; iy < win; ++iy)
                for (int64_t ix = 0; ix < win; ++ix) {
                  const int64_t y = wy * win + iy, xx = wx * win + ix;
                  if (y < lay.h && xx < lay.w)
                    gx[((n * lay.c + c) * lay.h + y) * lay.w + xx] +=
                        go[((widx * lay.c + c) * win + iy) * win + ix];
                }
          }
    });
  }
  return {out, lay};
}

template <typename T>
inline Tensor<T> window_merge(const Tensor<T>& windows, const WindowLayout& lay) {
  const int64_t nw = lay.windows_per_image();
  if (windows.shape() != Shape{lay.n * nw, lay.c, lay.win, lay.win})
    throw ShapeError("window_merge: windows " + shape_str(windows.shape()) +
                     " do not match layout");
  Tensor<T> out = Tensor<T>::zeros({lay.n, lay.c, lay.h, lay.w});
  const T* pw = windows.data().data();
  T* po = out.mutable_data().data();
  const int64_t nwx = lay.windows_x(), win = lay.win;
  for (int64_t n = 0; n < lay.n; ++n)
    for (int64_t wy = 0; wy < lay.windows_y(); ++wy)
      for (int64_t wx = 0; wx < nwx; ++wx) {
        const int64_t widx = n * nw + wy * nwx + wx;
        for (int64_t c = 0; c < lay.c; ++c)
          for (int64_t iy = 0; iy < win; ++iy)
            for (int64_t ix = 0; ix < win; ++ix) {
              const int64_t y = wy * win + iy, xx = wx * win + ix;
              if (y < lay.h && xx < lay.w)
                po[((n * lay.c + c) * lay.h + y) * lay.w + xx] =
                    pw[((widx * lay.c + c) * win + iy) * win + ix];
            }
      }
  if (auto* g = detail::begin_record<T>({&windows}, out)) {
    g->add_node("window_merge", [windows, out, lay]() {
      const T* go = out.storage()->grad.data();
      T* gw = windows.storage()->grad.data();
      const int64_t nw = lay.windows_per_image(), nwx = lay.windows_x(), win = lay.win;
      for (int64_t n = 0; n < lay.n; ++n)
        for (int64_t wy = 0; wy < lay.windows_y(); ++wy)
          for (int64_t wx = 0; wx < nwx; ++wx) {
            const int64_t widx = n * nw + wy * nwx + wx;
            for (int64_t c = 0; c < lay.c; ++c)
              for (int64_t iy = 0; iy < win; ++iy)
                for (int64_t ix = 0; ix < win; ++ix) {
                  const int64_t y = wy * win + iy, xx = wx * win + ix;
                  if (y < lay.h && xx < lay.w)
                    gw[((widx * lay.c + c) * win + iy) * win + ix] +=
                        go[((n * lay.c + c) * lay.h + y) * lay.w + xx];
                }
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// positional encodings
// ---------------------------------------------------------------------------

// Fixed 2D sinusoidal encoding evaluated at continuous (y, x) positions.
// First half of the channels encodes y, second half x.
template <typename T>
inline Tensor<T> sinusoidal_pe_2d(const std::vector<std::pair<double, double>>& positions,
                                  int64_t dim) {
  if (dim % 4 != 0) throw ConfigError("sinusoidal_pe_2d: dim must be divisible by 4");
  const int64_t half = dim / 2;
  Tensor<T> pe = Tensor<T>::zeros({int64_t(positions.size()), dim});
  T* p = pe.mutable_data().data();
  for (size_t t = 0; t < positions.size(); ++t) {
    auto [y, x] = positions[t];
    for (int64_t i = 0; i < half / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * double(i) / double(half));
      p[int64_t(t) * dim + 2 * i] = T(std::sin(y * freq));
      p[int64_t(t) * dim + 2 * i + 1] = T(std::cos(y * freq));
      p[int64_t(t) * dim + half + 2 * i] = T(std::sin(x * freq));
      p[int64_t(t) * dim + half + 2 * i + 1] = T(std::cos(x * freq));
    }
  }
  return pe;
}

// grid positions of an H x W map (pixel centers at integer coordinates)
inline std::vector<std::pair<double, double>> grid_positions(int64_t h, int64_t w, double stride,
                                                             double offset) {
  std::vector<std::pair<double, double>> pos;
  pos.reserve(size_t(h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      pos.emplace_back(double(y) * stride + offset, double(x) * stride + offset);
  return pos;
}

// In-window relative position index map: token pair (i, j) -> row of the
// (2w-1)^2 bias table.
inline std::vector<int64_t> relative_index_map(int64_t win) {
  const int64_t t = win * win, span = 2 * win - 1;
  std::vector<int64_t> map(static_cast<size_t>(t * t));
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < t; ++j) {
      const int64_t dy = i / win - j / win + win - 1;
      const int64_t dx = i % win - j % win + win - 1;
      map[size_t(i * t + j)] = dy * span + dx;
    }
  return map;
}

// ---------------------------------------------------------------------------
// attention blocks
// ---------------------------------------------------------------------------

template <typename T>
struct MhaParams {
  Tensor<T> wq, wk, wv, wo;  // [C, C]
  Tensor<T> bq, bk, bv, bo;  // [C]

  static MhaParams init(int64_t dim, Rng& rng) {
    MhaParams p;
    const double s = std::sqrt(1.0 / double(dim));
    p.wq = Tensor<T>::randn({dim, dim}, rng, s);
    p.wk = Tensor<T>::randn({dim, dim}, rng, s);
    p.wv = Tensor<T>::randn({dim, dim}, rng, s);
    p.wo = Tensor<T>::randn({dim, dim}, rng, s);
    p.bq = Tensor<T>::zeros({dim});
    p.bk = Tensor<T>::zeros({dim});
    p.bv = Tensor<T>::zeros({dim});
    p.bo = Tensor<T>::zeros({dim});
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".wq", wq);
    fn(prefix + ".wk", wk);
    fn(prefix + ".wv", wv);
    fn(prefix + ".wo", wo);
    fn(prefix + ".bq", bq);
    fn(prefix + ".bk", bk);
    fn(prefix + ".bv", bv);
    fn(prefix + ".bo", bo);
  }
};

// [N,C,H,W] -> [N, H*W, C]
template <typename T>
inline Tensor<T> tokens_from_map(const Tensor<T>& x) {
  return permute(x, {0, 2, 3, 1}).reshape({x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

// [N, H*W, C] -> [N,C,H,W]
template <typename T>
inline Tensor<T> map_from_tokens(const Tensor<T>& t, int64_t h, int64_t w) {
  return permute(t.reshape({t.dim(0), h, w, t.dim(2)}), {0, 3, 1, 2});
}

// Standard multi-head attention over token tensors. q: [B,Tq,C],
// k/v: [B,Tk,C]; optional additive logit bias [heads,Tq,Tk].
template <typename T>
inline Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& k_in,
                                      const Tensor<T>& v_in, const MhaParams<T>& p, int64_t heads,
                                      const Tensor<T>* logit_bias = nullptr) {
  const int64_t B = q_in.dim(0), tq = q_in.dim(1), tk = k_in.dim(1), c = q_in.dim(2);
  if (c % heads != 0) throw ConfigError("multi_head_attention: dim not divisible by heads");
  const int64_t dh = c / heads;
  auto split_heads = [&](const Tensor<T>& t, int64_t tokens) {
    return permute(t.reshape({B, tokens, heads, dh}), {0, 2, 1, 3}).reshape({B * heads, tokens, dh});
  };
  Tensor<T> q = split_heads(linear(q_in, p.wq, p.bq), tq);
  Tensor<T> k = split_heads(linear(k_in, p.wk, p.bk), tk);
  Tensor<T> v = split_heads(linear(v_in, p.wv, p.bv), tk);
  Tensor<T> logits = scale(bmm(q, k, false, true), 1.0 / std::sqrt(double(dh)));
  if (logit_bias != nullptr) {
    logits = add_head_bias(logits.reshape({B, heads, tq, tk}), *logit_bias)
                 .reshape({B * heads, tq, tk});
  }
  Tensor<T> attn = softmax(logits, -1);
  Tensor<T> ctx = bmm(attn, v);  // [B*heads, tq, dh]
  Tensor<T> merged =
      permute(ctx.reshape({B, heads, tq, dh}), {0, 2, 1, 3}).reshape({B, tq, c});
  return linear(merged, p.wo, p.bo);
}

struct SaaConfig {
  int64_t embed_dim = 64;
  int64_t heads = 4;
  int64_t window = 2;     // local branch window side
  int64_t reduction = 2;  // global branch K/V spatial reduction
  int64_t ffn_hidden = 128;

  void validate() const {
    if (embed_dim % heads != 0) throw ConfigError("SaaConfig: embed_dim must divide into heads");
    if (embed_dim % 4 != 0) throw ConfigError("SaaConfig: embed_dim must be divisible by 4");
    if (window < 1) throw ConfigError("SaaConfig: window must be >= 1");
    if (reduction < 1) throw ConfigError("SaaConfig: reduction must be >= 1");
  }
};

template <typename T>
struct SaaParams {
  MhaParams<T> ldb;
  Tensor<T> lpe_table;  // [(2w-1)^2, heads], zero-initialized
  MhaParams<T> gcb;
  Tensor<T> gate_w;   // [1, C, 1, 1]
  Tensor<T> gate_b;   // [1]
  Tensor<T> cross_w;  // [C, C, 1, 1], zero-initialized
  Tensor<T> cross_b;  // [C]
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static SaaParams init(const SaaConfig& cfg, Rng& rng) {
    cfg.validate();
    SaaParams p;
    const int64_t c = cfg.embed_dim, span = 2 * cfg.window - 1;
    p.ldb = MhaParams<T>::init(c, rng);
    p.lpe_table = Tensor<T>::zeros({span * span, cfg.heads});
    p.gcb = MhaParams<T>::init(c, rng);
    p.gate_w = Tensor<T>::zeros({1, c, 1, 1});
    p.gate_b = Tensor<T>::zeros({1});
    p.cross_w = Tensor<T>::zeros({c, c, 1, 1});
    p.cross_b = Tensor<T>::zeros({c});
    p.ln1_g = Tensor<T>::ones({c});
    p.ln1_b = Tensor<T>::zeros({c});
    p.ln2_g = Tensor<T>::ones({c});
    p.ln2_b = Tensor<T>::zeros({c});
    p.ffn_w1 = Tensor<T>::randn({cfg.ffn_hidden, c, 1, 1}, rng, std::sqrt(2.0 / double(c)));
    p.ffn_b1 = Tensor<T>::zeros({cfg.ffn_hidden});
    p.ffn_w2 = Tensor<T>::randn({c, cfg.ffn_hidden, 1, 1}, rng,
                                std::sqrt(2.0 / double(cfg.ffn_hidden)));
    p.ffn_b2 = Tensor<T>::zeros({c});
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    ldb.visit(prefix + ".ldb", fn);
    fn(prefix + ".lpe_table", lpe_table);
    gcb.visit(prefix + ".gcb", fn);
    fn(prefix + ".gate_w", gate_w);
    fn(prefix + ".gate_b", gate_b);
    fn(prefix + ".cross_w", cross_w);
    fn(prefix + ".cross_b", cross_b);
    fn(prefix + ".ln1_g", ln1_g);
    fn(prefix + ".ln1_b", ln1_b);
    fn(prefix + ".ln2_g", ln2_g);
    fn(prefix + ".ln2_b", ln2_b);
    fn(prefix + ".ffn_w1", ffn_w1);
    fn(prefix + ".ffn_b1", ffn_b1);
    fn(prefix + ".ffn_w2", ffn_w2);
    fn(prefix + ".ffn_b2", ffn_b2);
  }
};

// Local Detail Branch: windowed self-attention with a learned relative
// position bias per head.
template <typename T>
inline Tensor<T> local_detail_attention(const Tensor<T>& x, const SaaConfig& cfg,
                                        const MhaParams<T>& attn, const Tensor<T>& lpe_table) {
  auto [windows, lay] = window_partition(x, cfg.window);
  Tensor<T> tok = tokens_from_map(windows);
  const int64_t t = cfg.window * cfg.window;
  Tensor<T> bias = gather_bias_table(lpe_table, relative_index_map(cfg.window), cfg.heads, t);
  Tensor<T> out_tok = multi_head_attention(tok, tok, tok, attn, cfg.heads, &bias);
  Tensor<T> out_win = map_from_tokens(out_tok, cfg.window, cfg.window);
  return window_merge(out_win, lay);
}

// Global Context Branch: full-resolution queries against spatially reduced
// keys/values, sinusoidal scene encoding added to the query/key tokens.
template <typename T>
inline Tensor<T> global_context_attention(const Tensor<T>& x, const SaaConfig& cfg,
                                          const MhaParams<T>& attn) {
  const int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3), c = x.dim(1);
  Tensor<T> q_tok = tokens_from_map(x);
  Tensor<T> pe_full = sinusoidal_pe_2d<T>(grid_positions(h, w, 1.0, 0.0), c);
  q_tok = add(q_tok, broadcast_batch(pe_full, n));

  Tensor<T> reduced = avgpool2d(x, cfg.reduction);
  const int64_t hr = reduced.dim(2), wr = reduced.dim(3);
  Tensor<T> kv_tok = tokens_from_map(reduced);
  Tensor<T> pe_red = sinusoidal_pe_2d<T>(
      grid_positions(hr, wr, double(cfg.reduction), double(cfg.reduction - 1) / 2.0), c);
  Tensor<T> k_tok = add(kv_tok, broadcast_batch(pe_red, n));

  Tensor<T> out_tok = multi_head_attention(q_tok, k_tok, kv_tok, attn, cfg.heads);
  return map_from_tokens(out_tok, h, w);
}

// Eq-style gated blend: local * (1 - gate) + global * gate + cross.
template <typename T>
inline Tensor<T> gate_fuse(const Tensor<T>& f_local, const Tensor<T>& f_global,
                           const Tensor<T>& w_gate, const Tensor<T>& f_cross) {
  require_same_shape(f_local, f_global, "gate_fuse");
  require_same_shape(f_local, f_cross, "gate_fuse");
  Tensor<T> inv_gate = add_scalar(scale(w_gate, -1.0), 1.0);
  Tensor<T> local_part = broadcast_mul_channel(f_local, inv_gate);
  Tensor<T> global_part = broadcast_mul_channel(f_global, w_gate);
  return add(add(local_part, global_part), f_cross);
}

// Per-pixel gate map in [0,1]; a frozen value replaces the learned head when
// running the fixed-blend harness.
template <typename T>
inline Tensor<T> saa_gate_map(const Tensor<T>& x, const SaaParams<T>& params,
                              std::optional<double> freeze = std::nullopt) {
  if (freeze.has_value())
    return Tensor<T>::full({x.dim(0), 1, x.dim(2), x.dim(3)}, T(*freeze));
  return sigmoid(conv2d(x, params.gate_w, params.gate_b, 1, 0));
}

template <typename T>
inline Tensor<T> saa_forward(const Tensor<T>& x, const SaaConfig& cfg, const SaaParams<T>& params,
                             std::optional<double> gate_freeze = std::nullopt) {
  cfg.validate();
  Tensor<T> f_local = local_detail_attention(x, cfg, params.ldb, params.lpe_table);
  Tensor<T> f_global = global_context_attention(x, cfg, params.gcb);
  Tensor<T> w_gate = saa_gate_map(x, params, gate_freeze);
  Tensor<T> f_cross = conv2d(mul(f_local, f_global), params.cross_w, params.cross_b, 1, 0);
  Tensor<T> fused = gate_fuse(f_local, f_global, w_gate, f_cross);
  Tensor<T> y1 = channel_layernorm(add(x, fused), params.ln1_g, params.ln1_b);
  Tensor<T> ffn = conv2d(silu(conv2d(y1, params.ffn_w1, params.ffn_b1, 1, 0)), params.ffn_w2,
                         params.ffn_b2, 1, 0);
  return channel_layernorm(add(y1, ffn), params.ln2_g, params.ln2_b);
}

// ---------------------------------------------------------------------------
// gate diagnostics
// ---------------------------------------------------------------------------

struct GateStats {
  double mean_small = 0.0;  // mean gate inside small-object boxes
  double mean_large = 0.0;  // mean gate inside large-object boxes
  int64_t pixels_small = 0;
  int64_t pixels_large = 0;
};

// Mean gate value inside object boxes, stratified by box area. Boxes are in
// image pixels; the gate map lives on the feature grid at `feat_stride`.
template <typename T>
inline GateStats gate_statistics(const Tensor<T>& gate,
                                 const std::vector<std::vector<BoxXYWH>>& boxes_per_image,
                                 double feat_stride, double small_area_max) {
  if (gate.rank() != 4 || gate.dim(1) != 1)
    throw ShapeError("gate_statistics: gate map must be [N,1,H,W]");
  if (int64_t(boxes_per_image.size()) != gate.dim(0))
    throw ShapeError("gate_statistics: need one box list per image");
  const int64_t h = gate.dim(2), w = gate.dim(3);
  double sum_small = 0, sum_large = 0;
  GateStats stats;
  for (int64_t n = 0; n < gate.dim(0); ++n) {
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double cy = (double(y) + 0.5) * feat_stride;
        const double cx = (double(x) + 0.5) * feat_stride;
        bool in_small = false, in_large = false;
        for (const auto& b : boxes_per_image[size_t(n)]) {
          if (cx >= b.x && cx < b.x + b.w && cy >= b.y && cy < b.y + b.h) {
            (b.area() < small_area_max ? in_small : in_large) = true;
          }
        }
        const double v = double(gate[((n * 1 + 0) * h + y) * w + x]);
        if (in_small) {
          sum_small += v;
          stats.pixels_small++;
        }
        if (in_large) {
          sum_large += v;
          stats.pixels_large++;
        }
      }
  }
  if (stats.pixels_small) stats.mean_small = sum_small / double(stats.pixels_small);
  if (stats.pixels_large) stats.mean_large = sum_large / double(stats.pixels_large);
  return stats;
}

}  // namespace flowdet
