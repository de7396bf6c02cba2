#pragma once

#include <filesystem>

#include "flowdet/checkpoint.hpp"
#include "flowdet/coco.hpp"
#include "flowdet/synth.hpp"

namespace flowdet {

// ---------------------------------------------------------------------------
// desk-scale datasets
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<Tensor<float>> images;  // each [3,H,W]
  std::vector<GroundTruth> targets;   // normalized boxes per image
  std::vector<std::vector<BoxXYWH>> boxes_px;
  std::vector<std::vector<int>> categories;
};

inline Dataset make_synth_dataset(const SynthSceneSpec& base, int64_t count, uint64_t seed_base) {
  Dataset ds;
  for (int64_t i = 0; i < count; ++i) {
    SynthSceneSpec spec = base;
    spec.seed = seed_base + uint64_t(i);
    SynthScene scene = synth_generate(spec);
    ds.images.push_back(scene.image);
    ds.targets.push_back(synth_targets(scene, spec.image_size));
    std::vector<BoxXYWH> px;
    std::vector<int> cats;
    for (const auto& obj : scene.objects) {
      px.push_back(obj.box);
      cats.push_back(obj.category);
    }
    ds.boxes_px.push_back(std::move(px));
    ds.categories.push_back(std::move(cats));
  }
  return ds;
}

// Dataset from a directory holding annotations.json (COCO format) plus one
// .ppm per image, named as in the annotation file.
inline Dataset load_ppm_dataset(const std::string& dir, const ModelConfig& cfg) {
  Dataset ds;
  CocoDoc doc = load_annotations(dir + "/annotations.json");
  for (const auto& im : doc.images) {
    if (im.width != cfg.input_w || im.height != cfg.input_h)
      throw ConfigError("load_ppm_dataset: image " + im.file_name + " is " +
                        std::to_string(im.width) + "x" + std::to_string(im.height) +
                        ", config expects " + std::to_string(cfg.input_w) + "x" +
                        std::to_string(cfg.input_h));
    ds.images.push_back(ppm_read(dir + "/" + im.file_name));
    GroundTruth gt;
    std::vector<BoxXYWH> px;
    std::vector<int> cats;
    for (const auto& ann : doc.annotations) {
      if (ann.image_id != im.id) continue;
      TargetBox tb;
      tb.class_id = ann.category_id;
      tb.box.cx = (ann.bbox.x + ann.bbox.w / 2) / double(im.width);
      tb.box.cy = (ann.bbox.y + ann.bbox.h / 2) / double(im.height);
      tb.box.w = ann.bbox.w / double(im.width);
      tb.box.h = ann.bbox.h / double(im.height);
      gt.push_back(tb);
      px.push_back(ann.bbox);
      cats.push_back(ann.category_id);
    }
    ds.targets.push_back(std::move(gt));
    ds.boxes_px.push_back(std::move(px));
    ds.categories.push_back(std::move(cats));
  }
  return ds;
}

inline Tensor<float> stack_batch(const Dataset& ds, const std::vector<int64_t>& idx) {
  const auto& first = ds.images[size_t(idx[0])];
  Tensor<float> batch =
      Tensor<float>::zeros({int64_t(idx.size()), first.dim(0), first.dim(1), first.dim(2)});
  float* out = batch.mutable_data().data();
  const int64_t per = first.numel();
  for (size_t k = 0; k < idx.size(); ++k)
    std::copy(ds.images[size_t(idx[k])].data().begin(), ds.images[size_t(idx[k])].data().end(),
              out + int64_t(k) * per);
  return batch;
}

// Seeded training-time augmentation: horizontal mirror, integer translation
// with edge replication, mild photometric jitter. Boxes follow the geometry;
// targets that leave the frame (or shrink under 2 px) are dropped.
inline void augment_sample(Tensor<float>& batch, int64_t k, GroundTruth& gt, Rng& rng) {
  const int64_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  float* data = batch.mutable_data().data() + k * c * h * w;

  const bool flip = rng.uniform() < 0.5;
  const int64_t dx = rng.below(9) - 4;
  const int64_t dy = rng.below(9) - 4;
  const double gain = rng.uniform(0.9, 1.1);
  double offset[3];
  for (double& o : offset) o = rng.uniform(-0.03, 0.03);

  std::vector<float> plane(static_cast<size_t>(h * w));
  for (int64_t ch = 0; ch < c; ++ch) {
    float* img = data + ch * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        int64_t sx = flip ? w - 1 - x : x;
        sx = std::clamp(sx - dx, int64_t(0), w - 1);
        const int64_t sy = std::clamp(y - dy, int64_t(0), h - 1);
        const double v = double(img[sy * w + sx]) * gain + offset[ch];
        plane[size_t(y * w + x)] = float(std::clamp(v, 0.0, 1.0));
      }
    std::copy(plane.begin(), plane.end(), img);
  }

  GroundTruth moved;
  const double min_extent = 2.0 / double(w);
  for (TargetBox tb : gt) {
    if (flip) tb.box.cx = 1.0 - tb.box.cx;
    tb.box.cx += double(dx) / double(w);
    tb.box.cy += double(dy) / double(h);
    const double x1 = std::max(0.0, tb.box.cx - tb.box.w / 2);
    const double y1 = std::max(0.0, tb.box.cy - tb.box.h / 2);
    const double x2 = std::min(1.0, tb.box.cx + tb.box.w / 2);
    const double y2 = std::min(1.0, tb.box.cy + tb.box.h / 2);
    if (x2 - x1 < min_extent || y2 - y1 < min_extent) continue;
    tb.box = {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
    moved.push_back(tb);
  }
  gt = std::move(moved);
}

// ---------------------------------------------------------------------------
// evaluation glue
// ---------------------------------------------------------------------------

// Run the model over a dataset (batch 1) and convert its fixed-size
// candidate sets to evaluation records in pixel coordinates.
inline std::vector<EvalDetection> detect_dataset(Model<float>& model, const Dataset& ds) {
  std::vector<EvalDetection> dets;
  for (size_t i = 0; i < ds.images.size(); ++i) {
    auto out = forward(model, stack_batch(ds, {int64_t(i)}));
    auto per_image = extract_detections(out);
    for (const auto& d : per_image[0]) {
      EvalDetection e;
      e.image_id = int64_t(i);
      e.category = d.category;
      e.score = d.score;
      const double w = d.box.w * double(model.cfg.input_w);
      const double h = d.box.h * double(model.cfg.input_h);
      e.box = {d.box.cx * double(model.cfg.input_w) - w / 2,
               d.box.cy * double(model.cfg.input_h) - h / 2, w, h};
      if (e.box.w <= 0 || e.box.h <= 0) continue;
      dets.push_back(e);
    }
  }
  return dets;
}

inline std::vector<EvalGroundTruth> dataset_ground_truth(const Dataset& ds) {
  std::vector<EvalGroundTruth> gts;
  for (size_t i = 0; i < ds.boxes_px.size(); ++i)
    for (size_t j = 0; j < ds.boxes_px[i].size(); ++j)
      gts.push_back({int64_t(i), ds.categories[i][j], ds.boxes_px[i][j],
                     ds.boxes_px[i][j].area()});
  return gts;
}

inline ApReport evaluate_model(Model<float>& model, const Dataset& ds) {
  std::vector<int> categories;
  for (int c = 0; c < int(model.cfg.class_count); ++c) categories.push_back(c);
  return ap_evaluate(detect_dataset(model, ds), dataset_ground_truth(ds), categories);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainRecord {
  int64_t step = 0;
  LossBreakdown loss;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<TrainRecord> history;
  double first_loss = 0.0;
  double final_loss = 0.0;
};

// Deterministic minibatch training: a seeded permutation is drawn per epoch,
// consumed in order. Loss rows (no header) can stream to a CSV with the
// schema `step,cls,l1,giou,total,lr`.
inline TrainResult train_loop(Model<float>& model, const Dataset& train, AdamWState<float>& state,
                              int64_t steps, std::ostream* loss_csv = nullptr,
                              std::ostream* progress = nullptr) {
  if (train.images.empty()) throw ValueError("train_loop: empty training set");
  const int64_t n = int64_t(train.images.size());
  const int64_t batch = std::max<int64_t>(1, std::min(model.cfg.batch_size, n));
  TrainResult result;
  std::vector<int64_t> order;
  int64_t cursor = 0;
  uint64_t epoch = 0;
  // fast-forward the permutation stream when resuming
  auto reshuffle = [&](uint64_t e) {
    order.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng rng(model.cfg.seed * 2654435761ull + e + 1);
    for (int64_t i = n - 1; i > 0; --i) std::swap(order[size_t(i)], order[size_t(rng.below(i + 1))]);
  };
  const int64_t batches_per_epoch = (n + batch - 1) / batch;
  epoch = uint64_t(state.step / batches_per_epoch);
  cursor = (state.step % batches_per_epoch) * batch;
  reshuffle(epoch);
  // augmentation stream keyed off the resume point so runs stay reproducible
  Rng aug_rng(model.cfg.seed * 7919 + uint64_t(state.step) + 11);

  for (int64_t s = 0; s < steps; ++s) {
    if (cursor >= n) {
      epoch++;
      cursor = 0;
      reshuffle(epoch);
    }
    std::vector<int64_t> idx;
    std::vector<GroundTruth> targets;
    for (int64_t k = 0; k < batch; ++k) {
      const int64_t i = order[size_t((cursor + k) % n)];
      idx.push_back(i);
      targets.push_back(train.targets[size_t(i)]);
    }
    cursor += batch;
    Tensor<float> images = stack_batch(train, idx);
    for (int64_t k = 0; k < batch; ++k) augment_sample(images, k, targets[size_t(k)], aug_rng);
    const int64_t step_idx = state.step;  // 0-based index of this update
    const double lr = cosine_lr(model.cfg.lr, step_idx, model.cfg.total_steps);
    LossBreakdown loss = train_step(model, images, targets, state);
    TrainRecord rec{step_idx, loss, lr};
    result.history.push_back(rec);
    if (result.history.size() == 1) result.first_loss = loss.total;
    result.final_loss = loss.total;
    if (loss_csv) {
      std::ostringstream row;
      row.precision(10);
      row << rec.step << "," << loss.cls << "," << loss.l1 << "," << loss.giou << ","
          << loss.total << "," << lr << "\n";
      *loss_csv << row.str();
    }
    if (progress && (s % 50 == 0 || s + 1 == steps)) {
      *progress << "step " << rec.step << " loss " << loss.total << " (cls " << loss.cls
                << " l1 " << loss.l1 << " giou " << loss.giou << ") lr " << lr << "\n";
      progress->flush();
    }
  }
  return result;
}

inline void write_ap_report_json(const ApReport& rep, const std::string& path) {
  nlohmann::json j;
  j["ap"] = rep.ap;
  j["ap50"] = rep.ap50;
  j["ap_s"] = rep.ap_s;
  j["ap_m"] = rep.ap_m;
  j["ap_l"] = rep.ap_l;
  j["ap_per_threshold"] = rep.ap_per_threshold;
  std::ofstream os(path);
  if (!os) throw IoError("write_ap_report_json: cannot open " + path);
  os << j.dump(2) << "\n";
}

}  // namespace flowdet
