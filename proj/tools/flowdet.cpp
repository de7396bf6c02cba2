// flowdet command-line tool: gradient verification, toy training, COCO-style
// evaluation, dataset statistics and cost/latency benchmarks.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "flowdet/ablation.hpp"
#include "flowdet/gradcheck_suite.hpp"
#include "flowdet/svg.hpp"

namespace fs = std::filesystem;
using namespace flowdet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;  // verification or evaluation failure
constexpr int kExitUsage = 2;    // bad flags, bad config

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::string data = "synthetic";
  std::string checkpoint;
  uint64_t seed = 0;  // 0 = keep the config's seed
  bool seed_set = false;
};

ModelConfig resolve_config(const CommonOpts& opts) {
  ModelConfig cfg;
  if (!opts.config_path.empty()) cfg = load_config_file(opts.config_path);
  if (opts.seed_set) cfg.seed = opts.seed;
  cfg.validate();
  return cfg;
}

void ensure_out_dir(const std::string& dir) { fs::create_directories(dir); }

SynthSceneSpec synth_spec_for(const ModelConfig& cfg) {
  SynthSceneSpec spec;
  spec.image_size = cfg.input_h;
  spec.category_count = std::min<int64_t>(3, cfg.class_count);
  return spec;
}

uint64_t train_seed_base(const ModelConfig& cfg) { return cfg.seed * 1000 + 1; }
uint64_t heldout_seed_base(const ModelConfig& cfg) { return cfg.seed * 1000 + 500001; }

Dataset resolve_dataset(const CommonOpts& opts, const ModelConfig& cfg, bool heldout,
                        int64_t count) {
  if (opts.data == "synthetic") {
    return make_synth_dataset(synth_spec_for(cfg), count,
                              heldout ? heldout_seed_base(cfg) : train_seed_base(cfg));
  }
  return load_ppm_dataset(opts.data, cfg);
}

int cmd_gradcheck(const CommonOpts& opts, bool sabotage) {
  ensure_out_dir(opts.out_dir);
  auto reports = run_gradcheck_suite(sabotage);
  {
    std::ofstream csv(opts.out_dir + "/gradcheck.csv");
    write_gradcheck_csv(reports, csv);
  }
  bool all_pass = true;
  for (const auto& r : reports) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.op << "  max_rel_err=" << r.max_rel_err;
    if (!r.pass) std::cout << "  (" << r.note << ")";
    std::cout << "\n";
    all_pass = all_pass && r.pass;
  }
  std::cout << reports.size() << " ops checked, report at " << opts.out_dir << "/gradcheck.csv\n";
  return all_pass ? kExitOk : kExitFailure;
}

int cmd_train(const CommonOpts& opts, int64_t steps_override, int64_t train_images,
              int64_t eval_images) {
  ModelConfig cfg = resolve_config(opts);
  if (steps_override > 0) cfg.total_steps = steps_override;
  ensure_out_dir(opts.out_dir);

  Dataset train = resolve_dataset(opts, cfg, false, train_images);
  Dataset heldout = resolve_dataset(opts, cfg, true, eval_images);

  auto model = build_model<float>(cfg);
  AdamWState<float> state;
  if (!opts.checkpoint.empty()) {
    load_checkpoint(opts.checkpoint, model, state);
    std::cout << "resumed from " << opts.checkpoint << " at step " << state.step << "\n";
  }
  const int64_t remaining = cfg.total_steps - state.step;
  if (remaining <= 0) {
    std::cout << "checkpoint already trained for " << state.step << " steps\n";
  }
  std::ofstream loss_csv(opts.out_dir + "/loss.csv");
  loss_csv << "step,cls,l1,giou,total,lr\n";
  TrainResult result;
  if (remaining > 0) result = train_loop(model, train, state, remaining, &loss_csv, &std::cout);
  loss_csv.close();

  save_checkpoint(opts.out_dir + "/checkpoint.fdckpt", model, state);
  auto report = evaluate_model(model, heldout);
  write_ap_report_json(report, opts.out_dir + "/ap_report.json");

  if (!result.history.empty()) {
    SvgSeries total_series{"total", {}};
    for (const auto& rec : result.history)
      total_series.points.emplace_back(double(rec.step), rec.loss.total);
    svg_line_chart(opts.out_dir + "/loss_curve.svg", "training loss", {total_series}, "step",
                   "loss");
  }
  if (cfg.use_saa) {
    std::vector<int64_t> all_idx;
    for (size_t i = 0; i < heldout.images.size(); ++i) all_idx.push_back(int64_t(i));
    Tensor<float> gate_in = stack_batch(heldout, all_idx);
    auto gate = model_gate_map(model, gate_in);
    const double small_max = double(cfg.input_h / 4) * double(cfg.input_h / 4);
    auto stats = gate_statistics(gate, heldout.boxes_px, double(cfg.backbone_stride()), small_max);
    nlohmann::json j;
    j["mean_gate_small_objects"] = stats.mean_small;
    j["mean_gate_large_objects"] = stats.mean_large;
    j["pixels_small"] = stats.pixels_small;
    j["pixels_large"] = stats.pixels_large;
    j["small_area_max"] = small_max;
    std::ofstream os(opts.out_dir + "/gate_stats.json");
    os << j.dump(2) << "\n";
  }
  std::cout << "checkpoint at step " << state.step << "; held-out ap=" << report.ap
            << " ap50=" << report.ap50 << "\n";
  return kExitOk;
}

int cmd_eval(const CommonOpts& opts, const std::string& dets_path, const std::string& ann_path,
             bool gt_as_dets, int64_t eval_images) {
  ensure_out_dir(opts.out_dir);
  ApReport report;
  if (!ann_path.empty()) {
    CocoDoc doc = load_annotations(ann_path);
    std::vector<int> categories;
    for (const auto& c : doc.categories) categories.push_back(c.id);
    std::vector<EvalGroundTruth> gts;
    for (const auto& ann : doc.annotations)
      gts.push_back({ann.image_id, ann.category_id, ann.bbox, ann.area});
    std::vector<EvalDetection> dets;
    if (gt_as_dets) {
      for (const auto& g : gts) dets.push_back({g.image_id, g.category, 1.0, g.box});
    } else if (!dets_path.empty()) {
      dets = load_detections(dets_path);
    } else {
      throw ConfigError("eval with --ann needs either --dets or --gt-as-dets");
    }
    report = ap_evaluate(dets, gts, categories);
  } else {
    if (opts.checkpoint.empty())
      throw ConfigError("eval needs --checkpoint (or --ann with --dets/--gt-as-dets)");
    AdamWState<float> state;
    Checkpoint<float> ck = read_checkpoint<float>(opts.checkpoint);
    ModelConfig cfg = ck.cfg;
    if (opts.seed_set) cfg.seed = opts.seed;
    auto model = build_model<float>(ck.cfg);
    load_checkpoint(opts.checkpoint, model, state);
    model.cfg.seed = cfg.seed;
    Dataset heldout = resolve_dataset(opts, model.cfg, true, eval_images);
    auto dets = detect_dataset(model, heldout);
    export_detections(dets, opts.out_dir + "/detections.json");
    report = ap_evaluate(dets, dataset_ground_truth(heldout), [&] {
      std::vector<int> cats;
      for (int c = 0; c < int(model.cfg.class_count); ++c) cats.push_back(c);
      return cats;
    }());
  }
  write_ap_report_json(report, opts.out_dir + "/ap_report.json");
  std::vector<SvgSeries> curves;
  for (const auto& pr : report.pr_curves) {
    SvgSeries s{"cat " + std::to_string(pr.category), {}};
    for (size_t r = 0; r < pr.precision.size(); ++r)
      s.points.emplace_back(double(r) / 100.0, pr.precision[r]);
    curves.push_back(std::move(s));
  }
  if (!curves.empty())
    svg_line_chart(opts.out_dir + "/pr_curve.svg", "precision vs recall (IoU 0.5)", curves,
                   "recall", "precision");
  std::cout << "ap=" << report.ap << " ap50=" << report.ap50 << " ap_s=" << report.ap_s
            << " ap_l=" << report.ap_l << "\n";
  std::cout << "report at " << opts.out_dir << "/ap_report.json\n";
  return kExitOk;
}

int cmd_stats(const CommonOpts& opts, const std::string& ann_path, const std::string& splits_dir) {
  ensure_out_dir(opts.out_dir);
  CocoDoc doc = load_annotations(ann_path);
  std::map<int64_t, int> split_of;
  std::vector<std::string> names = {"all"};
  if (!splits_dir.empty()) {
    names = {"train", "val", "test"};
    split_of = read_split_manifest(names, splits_dir);
  }
  auto table = dataset_stats(doc, split_of, names);
  write_stats_csv(table, std::cout);
  std::ofstream csv(opts.out_dir + "/stats.csv");
  write_stats_csv(table, csv);
  std::cout << "stats at " << opts.out_dir << "/stats.csv\n";
  return kExitOk;
}

int cmd_bench(const CommonOpts& opts, const std::string& sweep, int64_t iters, int64_t steps) {
  ModelConfig cfg = resolve_config(opts);
  ensure_out_dir(opts.out_dir);
  if (sweep.empty()) {
    // per-layer FLOP table plus a single latency measurement
    auto rep = count_flops(cfg);
    std::ofstream csv(opts.out_dir + "/flops.csv");
    csv << "layer,flops\n";
    for (const auto& row : rep.rows) csv << row.name << "," << row.flops << "\n";
    csv << "total," << rep.total << "\n";
    auto model = build_model<float>(cfg);
    Dataset probe = make_synth_dataset(synth_spec_for(cfg), 1, heldout_seed_base(cfg));
    Tensor<float> image = stack_batch(probe, {0});
    auto lat = latency_bench([&] { (void)forward(model, image); }, iters);
    std::cout << "total flops " << rep.total << ", mean " << lat.mean_ms << " ms, p50 "
              << lat.p50_ms << " ms, p95 " << lat.p95_ms << " ms, fps " << lat.fps << "\n";
    std::ofstream lcsv(opts.out_dir + "/latency.csv");
    lcsv << "mean_ms,p50_ms,p95_ms,fps,iters\n";
    lcsv << lat.mean_ms << "," << lat.p50_ms << "," << lat.p95_ms << "," << lat.fps << ","
         << lat.iters << "\n";
    return kExitOk;
  }
  Dataset train = resolve_dataset(opts, cfg, false, 16);
  Dataset heldout = resolve_dataset(opts, cfg, true, 8);
  std::vector<AblationRow> rows;
  if (sweep == "window") {
    rows = window_sweep(cfg, train, heldout, steps, true, &std::cout);
  } else if (sweep == "gate") {
    rows = gate_sweep(cfg, train, heldout, steps > 0 ? steps : 50, &std::cout);
  } else if (sweep == "ablation") {
    rows = ablation_harness(cfg, train, heldout, steps > 0 ? steps : 50, true, &std::cout);
  } else {
    throw ConfigError("unknown sweep '" + sweep + "' (expected window|gate|ablation)");
  }
  const std::string csv_path = opts.out_dir + "/bench_" + sweep + ".csv";
  {
    std::ofstream csv(csv_path);
    write_ablation_csv(rows, csv);
  }
  std::vector<std::string> labels;
  std::vector<double> flops;
  for (const auto& r : rows) {
    labels.push_back(r.mode);
    flops.push_back(double(r.flops));
  }
  svg_bar_chart(opts.out_dir + "/bench_" + sweep + ".svg", "analytic FLOPs per mode", labels,
                flops, "FLOPs");
  write_ablation_csv(rows, std::cout);
  std::cout << "rows at " << csv_path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowdet: deformable-cascade detector toolkit"};
  app.require_subcommand(1);

  CommonOpts opts;
  int64_t steps = 0, iters = 50, train_images = 32, eval_images = 16;
  bool sabotage = false, gt_as_dets = false;
  std::string sweep, dets_path, ann_path, splits_dir, stats_ann;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "model/training config file");
    sub->add_option("--out", opts.out_dir, "output directory");
    sub->add_option("--data", opts.data, "'synthetic' or a dataset directory");
    sub->add_option("--checkpoint", opts.checkpoint, "checkpoint path");
    sub->add_option("--seed", opts.seed, "seed override")->each([&](const std::string&) {
      opts.seed_set = true;
    });
  };

  auto* sc_grad = app.add_subcommand("gradcheck", "finite-difference checks for every operator");
  add_common(sc_grad);
  sc_grad->add_flag("--sabotage", sabotage,
                    "include a deliberately wrong backward rule (negative control)");

  auto* sc_train = app.add_subcommand("train", "train the toy detector");
  add_common(sc_train);
  sc_train->add_option("--steps", steps, "override total training steps");
  sc_train->add_option("--train-images", train_images, "synthetic training scene count");
  sc_train->add_option("--eval-images", eval_images, "synthetic held-out scene count");

  auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint or a detections file");
  add_common(sc_eval);
  sc_eval->add_option("--dets", dets_path, "COCO results JSON to score");
  sc_eval->add_option("--ann", ann_path, "COCO annotations JSON");
  sc_eval->add_flag("--gt-as-dets", gt_as_dets, "score the ground truth against itself");
  sc_eval->add_option("--eval-images", eval_images, "synthetic held-out scene count");

  auto* sc_stats = app.add_subcommand("stats", "dataset statistics table");
  sc_stats->add_option("annotations", stats_ann, "COCO annotations JSON")->required();
  sc_stats->add_option("--splits", splits_dir, "directory with split_{train,val,test}.txt");
  sc_stats->add_option("--out", opts.out_dir, "output directory");

  auto* sc_bench = app.add_subcommand("bench", "FLOPs/latency tables and sweeps");
  add_common(sc_bench);
  sc_bench->add_option("--sweep", sweep, "window|gate|ablation");
  sc_bench->add_option("--iters", iters, "latency iterations");
  sc_bench->add_option("--steps", steps, "training steps per sweep row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (sc_grad->parsed()) return cmd_gradcheck(opts, sabotage);
    if (sc_train->parsed()) return cmd_train(opts, steps, train_images, eval_images);
    if (sc_eval->parsed()) return cmd_eval(opts, dets_path, ann_path, gt_as_dets, eval_images);
    if (sc_stats->parsed()) return cmd_stats(opts, stats_ann, splits_dir);
    if (sc_bench->parsed()) return cmd_bench(opts, sweep, iters, steps);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
