#pragma once

#include "flowdet/boxes.hpp"
#include "flowdet/saa.hpp"

namespace flowdet {

struct ModelConfig {
  int64_t input_h = 64, input_w = 64;
  std::vector<int64_t> stage_channels = {32, 64};
  int64_t arb_count = 3;
  int64_t heads = 4;
  int64_t window = 2;
  int64_t reduction = 2;
  int64_t ffn_hidden = 128;
  int64_t query_count = 25;
  int64_t class_count = 3;
  int64_t decoder_layers = 2;
  double gdu_sigma = 4.0;
  double gdu_tau = 4.0;
  double lambda_cls = 2.0, lambda_l1 = 5.0, lambda_giou = 2.0;
  double no_object_weight = 0.1;
  double lr = 1.5e-3;
  double weight_decay = 1e-4;
  int64_t total_steps = 2000;
  int64_t batch_size = 4;
  uint64_t seed = 42;
  // component toggles for the ablation harness
  bool use_pafc = true;
  bool use_saa = true;
  std::optional<double> gate_freeze;

  int64_t embed_dim() const { return stage_channels.back(); }
  int64_t backbone_stride() const { return 1LL << int64_t(stage_channels.size()); }
  int64_t feat_h() const { return input_h / backbone_stride(); }
  int64_t feat_w() const { return input_w / backbone_stride(); }

  SaaConfig saa_config() const {
    SaaConfig s;
    s.embed_dim = embed_dim();
    s.heads = heads;
    s.window = window;
    s.reduction = reduction;
    s.ffn_hidden = ffn_hidden;
    return s;
  }

  GduConfig gdu_config() const {
    GduConfig g = GduConfig::grid3x3();
    g.sigma = gdu_sigma;
    g.epsilon = gdu_sigma / 4.0;
    g.tau = gdu_tau;
    return g;
  }

  void validate() const {
    if (stage_channels.empty()) throw ConfigError("ModelConfig: stage_channels must be non-empty");
    for (int64_t c : stage_channels)
      if (c < 2 || c % 2 != 0)
        throw ConfigError("ModelConfig: stage channels must be even and >= 2");
    if (input_h % backbone_stride() != 0 || input_w % backbone_stride() != 0)
      throw ConfigError("ModelConfig: input size must be divisible by the backbone stride " +
                        std::to_string(backbone_stride()));
    if (query_count < 1) throw ConfigError("ModelConfig: query_count must be >= 1");
    if (class_count < 1) throw ConfigError("ModelConfig: class_count must be >= 1");
    if (lambda_cls < 0 || lambda_l1 < 0 || lambda_giou < 0)
      throw ConfigError("ModelConfig: loss weights must be >= 0");
    if (arb_count < 1) throw ConfigError("ModelConfig: arb_count must be >= 1");
    saa_config().validate();
    gdu_config().validate();
  }
};

// Plain backbone stage for the PAFC-off ablation: strided stem plus dense
// 3x3 convolutions at full width.
template <typename T>
struct PlainStageParams {
  Tensor<T> stem_w, stem_b;
  std::vector<Tensor<T>> conv_w, conv_b;

  static PlainStageParams init(int64_t in_ch, int64_t width, int64_t convs, Rng& rng) {
    PlainStageParams p;
    p.stem_w = Tensor<T>::randn({width, in_ch, 3, 3}, rng, std::sqrt(2.0 / double(in_ch * 9)));
    p.stem_b = Tensor<T>::zeros({width});
    for (int64_t i = 0; i < convs; ++i) {
      p.conv_w.push_back(Tensor<T>::randn({width, width, 3, 3}, rng,
                                          std::sqrt(2.0 / double(width * 9))));
      p.conv_b.push_back(Tensor<T>::zeros({width}));
    }
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".stem_w", stem_w);
    fn(prefix + ".stem_b", stem_b);
    for (size_t i = 0; i < conv_w.size(); ++i) {
      fn(prefix + ".conv" + std::to_string(i) + "_w", conv_w[i]);
      fn(prefix + ".conv" + std::to_string(i) + "_b", conv_b[i]);
    }
  }
};

template <typename T>
inline Tensor<T> plain_stage_forward(const Tensor<T>& x, const PlainStageParams<T>& p,
                                     int64_t stride) {
  Tensor<T> y = silu(conv2d(x, p.stem_w, p.stem_b, stride, 1));
  for (size_t i = 0; i < p.conv_w.size(); ++i)
    y = silu(conv2d(y, p.conv_w[i], p.conv_b[i], 1, 1));
  return y;
}

// Plain single-branch encoder layer for the SAA-off ablation: full global
// self-attention plus the same FFN shape.
template <typename T>
struct PlainEncoderParams {
  MhaParams<T> attn;
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static PlainEncoderParams init(int64_t dim, int64_t hidden, Rng& rng) {
    PlainEncoderParams p;
    p.attn = MhaParams<T>::init(dim, rng);
    p.ln1_g = Tensor<T>::ones({dim});
    p.ln1_b = Tensor<T>::zeros({dim});
    p.ln2_g = Tensor<T>::ones({dim});
    p.ln2_b = Tensor<T>::zeros({dim});
    p.ffn_w1 = Tensor<T>::randn({hidden, dim, 1, 1}, rng, std::sqrt(2.0 / double(dim)));
    p.ffn_b1 = Tensor<T>::zeros({hidden});
    p.ffn_w2 = Tensor<T>::randn({dim, hidden, 1, 1}, rng, std::sqrt(2.0 / double(hidden)));
    p.ffn_b2 = Tensor<T>::zeros({dim});
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    attn.visit(prefix + ".attn", fn);
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

template <typename T>
inline Tensor<T> plain_encoder_forward(const Tensor<T>& x, const PlainEncoderParams<T>& p,
                                       int64_t heads) {
  const int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3), c = x.dim(1);
  Tensor<T> pe = sinusoidal_pe_2d<T>(grid_positions(h, w, 1.0, 0.0), c);
  Tensor<T> tok = tokens_from_map(x);
  Tensor<T> tok_pe = add(tok, broadcast_batch(pe, n));
  Tensor<T> attn_out = multi_head_attention(tok_pe, tok_pe, tok, p.attn, heads);
  Tensor<T> y = map_from_tokens(attn_out, h, w);
  Tensor<T> y1 = channel_layernorm(add(x, y), p.ln1_g, p.ln1_b);
  Tensor<T> ffn =
      conv2d(silu(conv2d(y1, p.ffn_w1, p.ffn_b1, 1, 0)), p.ffn_w2, p.ffn_b2, 1, 0);
  return channel_layernorm(add(y1, ffn), p.ln2_g, p.ln2_b);
}

template <typename T>
struct DecoderLayerParams {
  MhaParams<T> cross;
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;  // linear orientation [in, out]

  static DecoderLayerParams init(int64_t dim, int64_t hidden, Rng& rng) {
    DecoderLayerParams p;
    p.cross = MhaParams<T>::init(dim, rng);
    p.ln1_g = Tensor<T>::ones({dim});
    p.ln1_b = Tensor<T>::zeros({dim});
    p.ln2_g = Tensor<T>::ones({dim});
    p.ln2_b = Tensor<T>::zeros({dim});
    p.ffn_w1 = Tensor<T>::randn({dim, hidden}, rng, std::sqrt(2.0 / double(dim)));
    p.ffn_b1 = Tensor<T>::zeros({hidden});
    p.ffn_w2 = Tensor<T>::randn({hidden, dim}, rng, std::sqrt(2.0 / double(hidden)));
    p.ffn_b2 = Tensor<T>::zeros({dim});
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    cross.visit(prefix + ".cross", fn);
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

template <typename T>
struct Model {
  ModelConfig cfg;
  std::vector<PafcConfig> stage_cfgs;
  std::vector<PafcParams<T>> pafc_stages;
  std::vector<PlainStageParams<T>> plain_stages;
  SaaParams<T> saa;
  PlainEncoderParams<T> plain_encoder;
  std::vector<DecoderLayerParams<T>> decoder;
  Tensor<T> queries;  // [Q, D]
  Tensor<T> cls_w, cls_b;
  Tensor<T> box_w, box_b;

  // Deterministic, stable parameter enumeration used by the optimizer and
  // the checkpoint format.
  std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto add = [&out](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); };
    if (cfg.use_pafc) {
      for (size_t s = 0; s < pafc_stages.size(); ++s)
        pafc_stages[s].visit("backbone.stage" + std::to_string(s), add);
    } else {
      for (size_t s = 0; s < plain_stages.size(); ++s)
        plain_stages[s].visit("backbone.stage" + std::to_string(s), add);
    }
    if (cfg.use_saa)
      saa.visit("encoder.saa", add);
    else
      plain_encoder.visit("encoder.plain", add);
    for (size_t l = 0; l < decoder.size(); ++l)
      decoder[l].visit("decoder.layer" + std::to_string(l), add);
    add("decoder.queries", queries);
    add("head.cls_w", cls_w);
    add("head.cls_b", cls_b);
    add("head.box_w", box_w);
    add("head.box_b", box_b);
    return out;
  }

  int64_t parameter_count() {
    int64_t total = 0;
    for (auto& [name, t] : named_params()) total += t->numel();
    return total;
  }

  void set_requires_grad(bool flag) {
    for (auto& [name, t] : named_params()) t->set_requires_grad(flag);
  }
};

// Deterministic model construction. Offset heads, the LPE table, the gate
// head and the cross projection start at zero (identity-ish cold start).
template <typename T>
inline Model<T> build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  int64_t in_ch = 3;
  for (size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    PafcConfig pc;
    pc.in_channels = in_ch;
    pc.width = cfg.stage_channels[s];
    pc.arb_count = cfg.arb_count;
    pc.stride = 2;
    pc.gdu = cfg.gdu_config();
    m.stage_cfgs.push_back(pc);
    if (cfg.use_pafc)
      m.pafc_stages.push_back(PafcParams<T>::init(pc, rng));
    else
      m.plain_stages.push_back(
          PlainStageParams<T>::init(in_ch, cfg.stage_channels[s], cfg.arb_count - 1, rng));
    in_ch = cfg.stage_channels[s];
  }
  if (cfg.use_saa)
    m.saa = SaaParams<T>::init(cfg.saa_config(), rng);
  else
    m.plain_encoder = PlainEncoderParams<T>::init(cfg.embed_dim(), cfg.ffn_hidden, rng);
  for (int64_t l = 0; l < cfg.decoder_layers; ++l)
    m.decoder.push_back(DecoderLayerParams<T>::init(cfg.embed_dim(), cfg.ffn_hidden, rng));
  m.queries = Tensor<T>::randn({cfg.query_count, cfg.embed_dim()}, rng, 0.5);
  m.cls_w = Tensor<T>::randn({cfg.embed_dim(), cfg.class_count + 1}, rng,
                             std::sqrt(1.0 / double(cfg.embed_dim())));
  m.cls_b = Tensor<T>::zeros({cfg.class_count + 1});
  m.box_w = Tensor<T>::randn({cfg.embed_dim(), 4}, rng, std::sqrt(1.0 / double(cfg.embed_dim())));
  m.box_b = Tensor<T>::zeros({4});
  return m;
}

template <typename T>
struct BatchOutput {
  Tensor<T> logits;  // [N, Q, classes+1]
  Tensor<T> boxes;   // [N, Q, 4] normalized cx,cy,w,h in (0,1)
};

template <typename T>
inline Tensor<T> backbone_forward(Model<T>& m, const Tensor<T>& images) {
  Tensor<T> cur = images;
  for (size_t s = 0; s < m.stage_cfgs.size(); ++s) {
    if (m.cfg.use_pafc)
      cur = pafc_forward(cur, m.stage_cfgs[s], m.pafc_stages[s]);
    else
      cur = plain_stage_forward(cur, m.plain_stages[s], m.stage_cfgs[s].stride);
  }
  return cur;
}

template <typename T>
inline Tensor<T> encoder_forward(Model<T>& m, const Tensor<T>& feat) {
  if (m.cfg.use_saa) return saa_forward(feat, m.cfg.saa_config(), m.saa, m.cfg.gate_freeze);
  return plain_encoder_forward(feat, m.plain_encoder, m.cfg.heads);
}

// Full detector: backbone stages, encoder layer, query decoder, shared
// prediction heads. Every image yields exactly query_count candidate boxes.
// The per-layer variant applies the heads after each decoder layer so
// training can supervise intermediate query states as well; inference uses
// the last entry only.
template <typename T>
inline std::vector<BatchOutput<T>> forward_all_layers(Model<T>& m, const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw ShapeError("forward: images must be [N,3,H,W], got " + shape_str(images.shape()));
  if (images.dim(2) != m.cfg.input_h || images.dim(3) != m.cfg.input_w)
    throw ShapeError("forward: image size " + std::to_string(images.dim(2)) + "x" +
                     std::to_string(images.dim(3)) + " does not match config " +
                     std::to_string(m.cfg.input_h) + "x" + std::to_string(m.cfg.input_w));
  const int64_t n = images.dim(0);
  Tensor<T> feat = backbone_forward(m, images);
  Tensor<T> enc = encoder_forward(m, feat);

  const int64_t h = enc.dim(2), w = enc.dim(3), d = enc.dim(1);
  Tensor<T> memory = tokens_from_map(enc);  // [N, T, D]
  Tensor<T> pe = sinusoidal_pe_2d<T>(grid_positions(h, w, 1.0, 0.0), d);
  Tensor<T> keys = add(memory, broadcast_batch(pe, n));
  Tensor<T> q = broadcast_batch(m.queries, n);  // [N, Q, D]
  std::vector<BatchOutput<T>> outs;
  for (auto& layer : m.decoder) {
    Tensor<T> attn = multi_head_attention(q, keys, memory, layer.cross, m.cfg.heads);
    Tensor<T> q1 = layernorm(add(q, attn), layer.ln1_g, layer.ln1_b);
    Tensor<T> ffn = linear(silu(linear(q1, layer.ffn_w1, layer.ffn_b1)), layer.ffn_w2,
                           layer.ffn_b2);
    q = layernorm(add(q1, ffn), layer.ln2_g, layer.ln2_b);
    BatchOutput<T> out;
    out.logits = linear(q, m.cls_w, m.cls_b);
    out.boxes = sigmoid(linear(q, m.box_w, m.box_b));
    outs.push_back(std::move(out));
  }
  return outs;
}

template <typename T>
inline BatchOutput<T> forward(Model<T>& m, const Tensor<T>& images) {
  return forward_all_layers(m, images).back();
}

// Per-image detections in plain form, for evaluation and export. Confidence
// is the softmax probability of the argmax non-background class.
struct Detection {
  BoxCXCYWH box;  // normalized
  int category = 0;
  double score = 0.0;
};

using DetectionSet = std::vector<Detection>;

template <typename T>
inline std::vector<DetectionSet> extract_detections(const BatchOutput<T>& out) {
  const int64_t n = out.logits.dim(0), q = out.logits.dim(1), nc = out.logits.dim(2);
  std::vector<DetectionSet> all(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < q; ++j) {
      std::vector<double> logits(static_cast<size_t>(nc));
      for (int64_t c = 0; c < nc; ++c) logits[size_t(c)] = double(out.logits[(i * q + j) * nc + c]);
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double z = 0;
      for (double& v : logits) {
        v = std::exp(v - mx);
        z += v;
      }
      int best = 0;
      for (int64_t c = 1; c < nc - 1; ++c)
        if (logits[size_t(c)] > logits[size_t(best)]) best = int(c);
      Detection det;
      det.category = best;
      det.score = logits[size_t(best)] / z;
      det.box = {double(out.boxes[(i * q + j) * 4 + 0]), double(out.boxes[(i * q + j) * 4 + 1]),
                 double(out.boxes[(i * q + j) * 4 + 2]), double(out.boxes[(i * q + j) * 4 + 3])};
      all[size_t(i)].push_back(det);
    }
  }
  return all;
}

// Gate map of the SAA encoder for diagnostics, on the backbone feature grid.
template <typename T>
inline Tensor<T> model_gate_map(Model<T>& m, const Tensor<T>& images) {
  if (!m.cfg.use_saa) throw ValueError("model_gate_map: model has no SAA encoder");
  Tensor<T> feat = backbone_forward(m, images);
  return saa_gate_map(feat, m.saa, m.cfg.gate_freeze);
}

}  // namespace flowdet
