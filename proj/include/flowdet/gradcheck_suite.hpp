#pragma once

#include "flowdet/gradcheck.hpp"
#include "flowdet/loss.hpp"
#include "flowdet/optim.hpp"

namespace flowdet {

// Registry of finite-difference checks covering every differentiable
// operator, from primitives to the full micro model. The CLI surfaces this
// as `flowdet gradcheck`; the per-op CSV has one row per registered entry.

namespace detail {

inline Tensor<double> gc_randn(Shape s, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return Tensor<double>::randn(std::move(s), rng, scale);
}

// minimum distance of predicted sampling offsets to the bilinear seams
inline double suite_kink_margin(const Tensor<double>& x, const GduConfig& cfg,
                                const GduParams<double>& p) {
  double margin = 1e9;
  for (auto axis : {BranchAxis::horizontal, BranchAxis::vertical}) {
    const auto& br = axis == BranchAxis::horizontal ? p.horizontal : p.vertical;
    auto field = predict_offsets(x, cfg, br, axis);
    for (int64_t i = 0; i < field.offsets.numel(); ++i)
      margin = std::min(margin, std::fabs(field.offsets[i] - std::round(field.offsets[i])));
  }
  return margin;
}

inline void suite_randomize_heads(GduParams<double>& p, Rng& rng, double s = 0.4) {
  for (auto* br : {&p.horizontal, &p.vertical}) {
    br->offset_w = Tensor<double>::randn(br->offset_w.shape(), rng, s);
    br->offset_b = Tensor<double>::randn(br->offset_b.shape(), rng, s);
    br->omega_w = Tensor<double>::randn(br->omega_w.shape(), rng, s);
    br->omega_b = Tensor<double>::randn(br->omega_b.shape(), rng, s);
  }
}

// The set loss is piecewise-smooth: |pred - tgt| kinks when a matched
// coordinate ties its target, and the GIoU min/max/relu terms kink when box
// edges tie or the intersection collapses. Finite differences need fixtures
// away from all of those seams; this returns the smallest such margin.
inline double set_loss_tie_margin(const BatchOutput<double>& out,
                                  const std::vector<GroundTruth>& targets,
                                  const std::vector<MatchResult>& matches) {
  double margin = 1e9;
  const int64_t q = out.boxes.dim(1);
  for (size_t img = 0; img < matches.size(); ++img) {
    for (auto [qi, ti] : matches[img].pairs) {
      const auto& tb = targets[img][size_t(ti)].box;
      double p[4];
      for (int64_t c = 0; c < 4; ++c) p[c] = out.boxes[(int64_t(img) * q + qi) * 4 + c];
      const double pred[4] = {p[0], p[1], p[2], p[3]};
      const double tgt[4] = {tb.cx, tb.cy, tb.w, tb.h};
      for (int c = 0; c < 4; ++c) margin = std::min(margin, std::fabs(pred[c] - tgt[c]));
      const double ax1 = p[0] - p[2] / 2, ax2 = p[0] + p[2] / 2;
      const double ay1 = p[1] - p[3] / 2, ay2 = p[1] + p[3] / 2;
      const double bx1 = tb.cx - tb.w / 2, bx2 = tb.cx + tb.w / 2;
      const double by1 = tb.cy - tb.h / 2, by2 = tb.cy + tb.h / 2;
      for (double d : {ax1 - bx1, ax2 - bx2, ay1 - by1, ay2 - by2})
        margin = std::min(margin, std::fabs(d));
      margin = std::min(margin, std::fabs(std::min(ax2, bx2) - std::max(ax1, bx1)));
      margin = std::min(margin, std::fabs(std::min(ay2, by2) - std::max(ay1, by1)));
    }
  }
  return margin;
}

}  // namespace detail

inline std::vector<GradCheckReport> run_gradcheck_suite(bool sabotage = false) {
  using detail::gc_randn;
  std::vector<GradCheckReport> reports;
  auto run = [&reports](const std::string& name, const std::function<Tensor<double>()>& fn,
                        std::vector<Tensor<double>*> inputs, GradCheckOptions opt = {}) {
    reports.push_back(gradcheck(name, fn, std::move(inputs), opt));
  };

  {
    auto a = gc_randn({3, 4}, 11), b = gc_randn({3, 4}, 12);
    run("add", [&] { return add(a, b); }, {&a, &b});
    run("sub", [&] { return sub(a, b); }, {&a, &b});
    run("mul", [&] { return mul(a, b); }, {&a, &b});
    run("minimum", [&] { return minimum(a, b); }, {&a, &b});
    run("maximum", [&] { return maximum(a, b); }, {&a, &b});
    run("scale", [&] { return scale(a, -1.75); }, {&a});
    Rng rng(13);
    auto pos = Tensor<double>::rand_uniform({3, 4}, rng, 0.5, 2.0);
    run("div", [&] { return div(a, pos); }, {&a, &pos});
    run("log", [&] { return log(pos); }, {&pos});
  }
  {
    auto x = gc_randn({2, 6}, 21);
    run("sigmoid", [&] { return sigmoid(x); }, {&x});
    run("tanh", [&] { return tanh(x); }, {&x});
    run("silu", [&] { return silu(x); }, {&x});
    run("relu", [&] { return relu(x); }, {&x});
    run("exp", [&] { return exp(x); }, {&x});
    run("abs", [&] { return abs(x); }, {&x});
    run("softmax", [&] { return softmax(x, 1); }, {&x});
    run("sum", [&] { return sum(x); }, {&x});
    run("mean", [&] { return mean(x); }, {&x});
  }
  {
    auto a = gc_randn({3, 4}, 31), b = gc_randn({4, 5}, 32);
    run("matmul", [&] { return matmul(a, b); }, {&a, &b});
    auto ba = gc_randn({2, 4, 3}, 33), bb = gc_randn({2, 4, 5}, 34);
    run("bmm", [&] { return bmm(ba, bb, true, false); }, {&ba, &bb});
    auto x = gc_randn({3, 6}, 35), g = gc_randn({6}, 36), be = gc_randn({6}, 37);
    run("layernorm", [&] { return layernorm(x, g, be); }, {&x, &g, &be});
    auto rv = gc_randn({6}, 38);
    run("add_rowvec", [&] { return add_rowvec(x, rv); }, {&x, &rv});
  }
  {
    auto x = gc_randn({1, 3, 5, 4}, 41);
    auto w = gc_randn({2, 3, 3, 3}, 42, 0.5);
    auto b = gc_randn({2}, 43, 0.2);
    run("conv2d", [&] { return conv2d(x, w, b, 2, 1); }, {&x, &w, &b});
    auto wd = gc_randn({3, 3, 3}, 44), wp = gc_randn({4, 3}, 45);
    run("dwconv", [&] { return dwconv(x, wd, wp); }, {&x, &wd, &wp});
    run("avgpool2d", [&] { return avgpool2d(x, 2); }, {&x});
    run("split_concat",
        [&] {
          auto parts = split(x, 1, 3);
          return concat(std::vector<Tensor<double>>{parts[2], parts[0], parts[1]}, 1);
        },
        {&x});
    run("permute", [&] { return permute(x, {0, 2, 3, 1}); }, {&x});
  }
  {
    auto x = gc_randn({5, 3}, 51);
    run("select_rows", [&] { return select_rows(x, {4, 0, 0, 2}); }, {&x});
    run("cross_entropy_rows",
        [&] { return cross_entropy_rows(x, {0, 2, 1, 2, 0}, {1.0, 0.1, 1.0, 0.1, 1.0}); }, {&x});
    auto logits = gc_randn({2, 2, 3, 3}, 52);
    auto bias = gc_randn({2, 3, 3}, 53);
    run("add_head_bias", [&] { return add_head_bias(logits, bias); }, {&logits, &bias});
    auto table = gc_randn({9, 2}, 54);
    run("gather_bias_table",
        [&] { return gather_bias_table(table, relative_index_map(2), 2, 4); }, {&table});
    auto q = gc_randn({3, 4}, 55);
    run("broadcast_batch", [&] { return broadcast_batch(q, 3); }, {&q});
    auto m4 = gc_randn({1, 3, 4, 4}, 56);
    auto gate = gc_randn({1, 1, 4, 4}, 57);
    run("broadcast_mul_channel", [&] { return broadcast_mul_channel(m4, gate); }, {&m4, &gate});
    auto sc = gc_randn({1}, 58);
    run("mul_scalar_tensor", [&] { return mul_scalar_tensor(m4, sc); }, {&m4, &sc});
    auto off = gc_randn({1, 4, 3, 3}, 59);
    run("offset_magnitude_sq", [&] { return offset_magnitude_sq(off); }, {&off});
  }
  {
    auto x = gc_randn({1, 2, 5, 5}, 61);
    auto p = Tensor<double>::from({1.43, 2.78}, {2});
    run("bilinear_sample", [&] { return bilinear_sample(x, p); }, {&x, &p});
    Rng rng(62);
    std::vector<std::pair<int, int>> points = {{0, 0}, {1, 0}, {0, -1}};
    auto offsets = Tensor<double>::rand_uniform({1, 6, 4, 4}, rng, -1.2, 1.2);
    auto omega = Tensor<double>::rand_uniform({1, 3, 4, 4}, rng, 0.2, 0.8);
    auto psi = Tensor<double>::rand_uniform({1, 3, 4, 4}, rng, 0.4, 1.0);
    auto xs = gc_randn({1, 2, 4, 4}, 63);
    run("gdu_sample", [&] { return gdu_sample(xs, offsets, omega, psi, points); },
        {&xs, &offsets, &omega, &psi});
  }
  {
    // GDU / ARB / PAFC composites: fixtures are seed-searched away from the
    // bilinear seams, then checked with a small eps inside that margin.
    GradCheckOptions opt;
    opt.eps = 3e-6;
    GduConfig gcfg = GduConfig::grid3x3();
    {
      Tensor<double> x;
      GduParams<double> params;
      for (uint64_t seed = 71; seed < 171; ++seed) {
        Rng rng(seed);
        params = GduParams<double>::init(2, 9, rng);
        detail::suite_randomize_heads(params, rng);
        x = Tensor<double>::randn({1, 2, 5, 5}, rng);
        if (detail::suite_kink_margin(x, gcfg, params) > 2e-4) break;
      }
      run("gdu_forward", [&] { return gdu_forward(x, gcfg, params); },
          {&x, &params.horizontal.offset_w, &params.vertical.trunk_point, &params.combine_w}, opt);
    }
    {
      Tensor<double> x;
      ArbParams<double> arb;
      for (uint64_t seed = 81; seed < 181; ++seed) {
        Rng rng(seed);
        arb = ArbParams<double>::init(2, 9, rng);
        detail::suite_randomize_heads(arb.gdu, rng);
        x = Tensor<double>::randn({1, 2, 4, 4}, rng);
        if (detail::suite_kink_margin(x, gcfg, arb.gdu) > 2e-4) break;
      }
      run("arb_forward", [&] { return arb_forward(x, gcfg, arb); },
          {&x, &arb.ln_gamma, &arb.pw_w}, opt);
    }
    {
      PafcConfig pcfg;
      pcfg.in_channels = 4;
      pcfg.width = 4;
      pcfg.arb_count = 2;
      pcfg.stride = 1;
      Tensor<double> x;
      PafcParams<double> params;
      double margin = 0;
      for (uint64_t seed = 91; seed < 191; ++seed) {
        Rng rng(seed);
        params = PafcParams<double>::init(pcfg, rng);
        for (auto& arb : params.arbs) detail::suite_randomize_heads(arb.gdu, rng, 0.3);
        x = Tensor<double>::randn({1, 4, 6, 6}, rng);
        auto stem = conv2d(x, params.stem_w, params.stem_b, 1, 1);
        auto halves = split(stem, 1, 2);
        margin = detail::suite_kink_margin(halves[1], pcfg.gdu, params.arbs[0].gdu);
        if (margin > 1e-4) break;
      }
      GradCheckOptions popt = opt;
      popt.max_elements_per_input = 36;
      run("pafc_forward", [&] { return pafc_forward(x, pcfg, params); },
          {&x, &params.stem_w, &params.stage_weights, &params.fusion_w}, popt);
    }
  }
  {
    SaaConfig scfg;
    scfg.embed_dim = 8;
    scfg.heads = 2;
    scfg.window = 2;
    scfg.reduction = 2;
    scfg.ffn_hidden = 12;
    Rng rng(101);
    auto params = SaaParams<double>::init(scfg, rng);
    params.lpe_table = Tensor<double>::randn({9, 2}, rng, 0.3);
    params.gate_w = Tensor<double>::randn({1, 8, 1, 1}, rng, 0.3);
    params.cross_w = Tensor<double>::randn({8, 8, 1, 1}, rng, 0.2);
    auto x = Tensor<double>::randn({1, 8, 4, 4}, rng);
    run("local_detail_attention",
        [&] { return local_detail_attention(x, scfg, params.ldb, params.lpe_table); },
        {&x, &params.ldb.wq, &params.lpe_table});
    run("global_context_attention",
        [&] { return global_context_attention(x, scfg, params.gcb); },
        {&x, &params.gcb.wk, &params.gcb.wv});
    auto fl = Tensor<double>::randn({1, 3, 4, 4}, rng);
    auto fg = Tensor<double>::randn({1, 3, 4, 4}, rng);
    auto wg = Tensor<double>::rand_uniform({1, 1, 4, 4}, rng, 0.1, 0.9);
    auto fc = Tensor<double>::randn({1, 3, 4, 4}, rng, 0.2);
    run("gate_fuse", [&] { return gate_fuse(fl, fg, wg, fc); }, {&fl, &fg, &wg, &fc});
    GradCheckOptions sopt;
    sopt.max_elements_per_input = 36;
    run("saa_forward", [&] { return saa_forward(x, scfg, params); },
        {&x, &params.ldb.wv, &params.gcb.wq, &params.gate_w, &params.ffn_w1}, sopt);
  }
  {
    ModelConfig mcfg;
    mcfg.query_count = 4;
    mcfg.class_count = 2;
    std::vector<GroundTruth> targets = {
        {{0, {0.4, 0.4, 0.3, 0.3}}, {1, {0.6, 0.7, 0.2, 0.25}}}, {{1, {0.5, 0.35, 0.3, 0.2}}}};
    Tensor<double> logits, boxes;
    std::vector<MatchResult> matches;
    for (uint64_t seed = 111; seed < 211; ++seed) {
      Rng rng(seed);
      logits = Tensor<double>::randn({2, 4, 3}, rng);
      boxes = Tensor<double>::rand_uniform({2, 4, 4}, rng, 0.25, 0.75);
      BatchOutput<double> probe{logits, boxes};
      matches = set_loss(probe, targets, mcfg).matches;
      if (detail::set_loss_tie_margin(probe, targets, matches) > 1e-4) break;
    }
    run("set_loss",
        [&] {
          BatchOutput<double> out{logits, boxes};
          return set_loss(out, targets, mcfg, &matches).total;
        },
        {&logits, &boxes});
  }
  {
    // full micro model end to end, tolerance 1e-4
    ModelConfig mcfg;
    mcfg.input_h = 16;
    mcfg.input_w = 16;
    mcfg.stage_channels = {4, 8};
    mcfg.arb_count = 2;
    mcfg.heads = 2;
    mcfg.ffn_hidden = 16;
    mcfg.query_count = 4;
    mcfg.class_count = 2;
    mcfg.seed = 7;
    auto model = build_model<double>(mcfg);
    Rng rng(121);
    for (auto& stage : model.pafc_stages)
      for (auto& arb : stage.arbs) detail::suite_randomize_heads(arb.gdu, rng);
    model.saa.lpe_table = Tensor<double>::randn(model.saa.lpe_table.shape(), rng, 0.2);
    model.saa.gate_w = Tensor<double>::randn(model.saa.gate_w.shape(), rng, 0.2);
    model.saa.cross_w = Tensor<double>::randn(model.saa.cross_w.shape(), rng, 0.2);
    std::vector<GroundTruth> targets = {{{0, {0.4, 0.45, 0.3, 0.25}}, {1, {0.65, 0.6, 0.2, 0.3}}}};
    Tensor<double> images;
    BatchOutput<double> probe;
    std::vector<MatchResult> matches;
    double margin = 0;
    for (uint64_t seed = 131; seed < 231; ++seed) {
      Rng irng(seed);
      images = Tensor<double>::rand_uniform({1, 3, 16, 16}, irng, 0.0, 1.0);
      margin = 1e9;
      Tensor<double> cur = images;
      for (size_t s = 0; s < model.stage_cfgs.size(); ++s) {
        auto stem = conv2d(cur, model.pafc_stages[s].stem_w, model.pafc_stages[s].stem_b,
                           model.stage_cfgs[s].stride, 1);
        auto halves = split(stem, 1, 2);
        Tensor<double> t = halves[1];
        for (const auto& arb : model.pafc_stages[s].arbs) {
          margin = std::min(margin, detail::suite_kink_margin(t, model.stage_cfgs[s].gdu, arb.gdu));
          t = arb_forward(t, model.stage_cfgs[s].gdu, arb);
        }
        cur = pafc_forward(cur, model.stage_cfgs[s], model.pafc_stages[s]);
      }
      probe = forward(model, images);
      matches = set_loss(probe, targets, model.cfg).matches;
      margin = std::min(margin, detail::set_loss_tie_margin(probe, targets, matches));
      if (margin > 5e-5) break;
    }
    GradCheckOptions opt;
    opt.eps = 3e-6;
    opt.tol = 1e-4;
    opt.max_elements_per_input = 16;
    run("full_micro_model",
        [&] {
          BatchOutput<double> out = forward(model, images);
          return set_loss(out, targets, model.cfg, &matches).total;
        },
        {&images, &model.pafc_stages[0].stem_w, &model.saa.ldb.wq, &model.decoder[0].cross.wk,
         &model.queries, &model.cls_w, &model.box_w},
        opt);
  }
  if (sabotage) {
    // negative control: an op whose registered backward rule is wrong
    auto x = gc_randn({4}, 999);
    run("sabotaged_backward",
        [&] {
          Tensor<double> out = Tensor<double>::zeros(x.shape());
          for (int64_t i = 0; i < x.numel(); ++i) out[i] = 2.0 * x[i];
          if (auto* g = detail::begin_record<double>({&x}, out)) {
            g->add_node("sabotaged", [x, out]() {
              for (int64_t i = 0; i < x.numel(); ++i)
                x.storage()->grad[size_t(i)] += 3.0 * out.storage()->grad[size_t(i)];
            });
          }
          return out;
        },
        {&x});
  }
  return reports;
}

inline void write_gradcheck_csv(const std::vector<GradCheckReport>& reports, std::ostream& os) {
  os << "op,max_rel_err,pass\n";
  for (const auto& r : reports) {
    std::ostringstream v;
    v.precision(6);
    v << r.max_rel_err;
    os << r.op << "," << v.str() << "," << (r.pass ? "1" : "0") << "\n";
  }
}

}  // namespace flowdet
