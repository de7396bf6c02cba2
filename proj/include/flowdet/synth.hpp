#pragma once

#include <set>

#include "flowdet/loss.hpp"

namespace flowdet {

// ---------------------------------------------------------------------------
// synthetic traffic-scene generator
// ---------------------------------------------------------------------------
// Shaded quadrilaterals on a textured road-like background. Objects shrink
// toward the top of the image (foreshortening) and shear away from the
// vanishing column; nearer objects are drawn last and may occlude farther
// ones up to the configured cap. Labels are measured from each object's own
// rasterized mask, so they are exact by construction.

struct SynthSceneSpec {
  int64_t image_size = 64;
  int64_t min_objects = 1;
  int64_t max_objects = 2;
  double reference_size = 640.0;  // resolution the min-side rule is stated at
  double min_side_ref = 15.0;     // smallest annotatable side at the reference
  double min_side = 14.0;         // configured smallest base side, pixels
  double max_side_frac = 0.5;     // largest object side, fraction of image
  double occlusion_cap = 0.5;     // max fraction of an object hidden by nearer ones
  double shear_strength = 0.35;
  int64_t category_count = 3;
  uint64_t seed = 1;

  // hard floor from the annotation rule, scaled to the working resolution
  double min_side_floor() const {
    return std::max(2.0, min_side_ref * double(image_size) / reference_size);
  }
  double min_side_px() const { return std::max(min_side, min_side_floor()); }

  void validate() const {
    if (image_size < 8) throw ConfigError("SynthSceneSpec: image_size must be >= 8");
    if (min_objects < 0 || max_objects < min_objects)
      throw ConfigError("SynthSceneSpec: bad object count range");
    if (occlusion_cap < 0.0 || occlusion_cap > 0.75)
      throw ConfigError("SynthSceneSpec: occlusion cap must lie in [0, 0.75]");
    if (category_count < 1 || category_count > 3)
      throw ConfigError("SynthSceneSpec: category_count must be 1..3");
    if (min_side <= 0) throw ConfigError("SynthSceneSpec: min_side must be positive");
  }
};

struct SynthObject {
  int category = 0;
  BoxXYWH box;         // pixels, exact bounds of the rendered shape
  double area = 0.0;   // box area in pixels
  double occlusion = 0.0;  // fraction hidden by nearer objects
};

struct SynthScene {
  Tensor<float> image;  // [3, H, W], values in [0, 1]
  std::vector<SynthObject> objects;
};

namespace detail {

struct Quad {
  // corners in drawing order: bottom-left, bottom-right, top-right, top-left
  double xs[4], ys[4];

  bool contains(double px, double py) const {
    bool inside = false;
    for (int i = 0, j = 3; i < 4; j = i++) {
      const bool crosses = (ys[i] > py) != (ys[j] > py);
      if (crosses && px < (xs[j] - xs[i]) * (py - ys[i]) / (ys[j] - ys[i]) + xs[i]) inside = !inside;
    }
    return inside;
  }
};

struct PlacedObject {
  Quad quad;
  int category;
  double base_color[3];
  std::vector<int64_t> mask;  // flat pixel indices covered by the shape alone
  BoxXYWH box;
  double depth;  // larger = nearer (drawn later)
};

inline std::vector<int64_t> rasterize(const Quad& q, int64_t size) {
  std::vector<int64_t> mask;
  double min_x = 1e9, max_x = -1e9, min_y = 1e9, max_y = -1e9;
  for (int i = 0; i < 4; ++i) {
    min_x = std::min(min_x, q.xs[i]);
    max_x = std::max(max_x, q.xs[i]);
    min_y = std::min(min_y, q.ys[i]);
    max_y = std::max(max_y, q.ys[i]);
  }
  const int64_t x0 = std::max<int64_t>(0, int64_t(std::floor(min_x)));
  const int64_t x1 = std::min<int64_t>(size - 1, int64_t(std::ceil(max_x)));
  const int64_t y0 = std::max<int64_t>(0, int64_t(std::floor(min_y)));
  const int64_t y1 = std::min<int64_t>(size - 1, int64_t(std::ceil(max_y)));
  for (int64_t y = y0; y <= y1; ++y)
    for (int64_t x = x0; x <= x1; ++x)
      if (q.contains(double(x) + 0.5, double(y) + 0.5)) mask.push_back(y * size + x);
  return mask;
}

inline BoxXYWH mask_bbox(const std::vector<int64_t>& mask, int64_t size) {
  int64_t min_x = size, max_x = -1, min_y = size, max_y = -1;
  for (int64_t idx : mask) {
    const int64_t y = idx / size, x = idx % size;
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  }
  return {double(min_x), double(min_y), double(max_x - min_x + 1), double(max_y - min_y + 1)};
}

}  // namespace detail

// Deterministic scene synthesis; identical seeds give bit-identical scenes.
inline SynthScene synth_generate(const SynthSceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int64_t size = spec.image_size;

  // textured background: vertical road gradient plus seeded noise and a
  // couple of faint lane lines
  SynthScene scene;
  scene.image = Tensor<float>::zeros({3, size, size});
  auto* img = scene.image.mutable_data().data();
  const double lane0 = size * (0.25 + 0.1 * rng.uniform());
  const double lane1 = size * (0.65 + 0.1 * rng.uniform());
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      const double shade = 0.32 + 0.18 * double(y) / double(size);
      double noise = 0.035 * (rng.uniform() - 0.5);
      double lane = 0.0;
      if (std::fabs(double(x) - lane0) < 0.8 || std::fabs(double(x) - lane1) < 0.8) lane = 0.10;
      for (int64_t c = 0; c < 3; ++c)
        img[(c * size + y) * size + x] = float(shade + noise + lane);
    }
  }

  // high-contrast category palettes keep the toy classification learnable
  const double palette[3][3] = {{0.85, 0.15, 0.12},   // category 0: red, squat
                                {0.10, 0.75, 0.20},   // category 1: green, wide
                                {0.12, 0.25, 0.88}};  // category 2: blue, tall

  const int64_t want = spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1);
  std::vector<detail::PlacedObject> placed;
  const double vanish_x = double(size) * (0.4 + 0.2 * rng.uniform());
  int64_t attempts = 0;
  while (int64_t(placed.size()) < want && attempts < 4000) {
    attempts++;
    detail::PlacedObject obj;
    obj.category = int(rng.below(spec.category_count));
    const double cy = double(size) * rng.uniform(0.18, 0.92);
    const double cx = double(size) * rng.uniform(0.10, 0.90);
    // foreshortening: scale shrinks toward the top of the frame
    const double persp = 0.65 + 0.35 * cy / double(size);
    const double max_side = spec.max_side_frac * double(size);
    double side = rng.uniform(spec.min_side_px(), max_side) * persp;
    side = std::max(side, spec.min_side_floor());
    double w = side, h = side;
    if (obj.category == 0) w = side * rng.uniform(1.2, 1.6);          // car
    if (obj.category == 1) w = side * rng.uniform(1.9, 2.6);          // truck/bus
    if (obj.category == 2) h = side * rng.uniform(1.7, 2.3), w = side * 0.85;  // pedestrian
    const double shear = spec.shear_strength * (cx - vanish_x) / double(size) * h;
    const double top_narrow = 0.82;  // trapezoid: top edge shorter than base
    detail::Quad q;
    q.xs[0] = cx - w / 2;
    q.ys[0] = cy + h / 2;
    q.xs[1] = cx + w / 2;
    q.ys[1] = cy + h / 2;
    q.xs[2] = cx + w * top_narrow / 2 + shear;
    q.ys[2] = cy - h / 2;
    q.xs[3] = cx - w * top_narrow / 2 + shear;
    q.ys[3] = cy - h / 2;
    obj.quad = q;
    obj.depth = cy;
    obj.mask = detail::rasterize(q, size);
    if (int64_t(obj.mask.size()) < 4) continue;  // degenerate after clipping
    obj.box = detail::mask_bbox(obj.mask, size);
    if (obj.box.w < 2.0 || obj.box.h < 2.0) continue;
    for (int64_t c = 0; c < 3; ++c)
      obj.base_color[c] = std::clamp(palette[obj.category][c] + 0.12 * (rng.uniform() - 0.5), 0.0, 1.0);

    // occlusion bookkeeping against the tentative configuration
    std::vector<detail::PlacedObject*> all;
    for (auto& p : placed) all.push_back(&p);
    all.push_back(&obj);
    bool ok = true;
    for (auto* a : all) {
      int64_t covered = 0;
      std::set<int64_t> nearer;
      for (auto* b : all) {
        if (b == a || b->depth <= a->depth) continue;
        for (int64_t idx : b->mask) nearer.insert(idx);
      }
      for (int64_t idx : a->mask) covered += nearer.count(idx) ? 1 : 0;
      if (double(covered) > spec.occlusion_cap * double(a->mask.size())) {
        ok = false;
        break;
      }
    }
    if (ok) placed.push_back(std::move(obj));
  }
  if (int64_t(placed.size()) < want)
    throw ValueError("synth_generate: could not place " + std::to_string(want) +
                     " objects under the occlusion cap");

  // far to near, so nearer objects overdraw
  std::stable_sort(placed.begin(), placed.end(),
                   [](const detail::PlacedObject& a, const detail::PlacedObject& b) {
                     return a.depth < b.depth;
                   });
  for (const auto& obj : placed) {
    for (int64_t idx : obj.mask) {
      const int64_t y = idx / size;
      const double top_light = 0.10 * (obj.box.y + obj.box.h - double(y)) / obj.box.h;
      for (int64_t c = 0; c < 3; ++c)
        img[(c * size + y) * size + idx % size] =
            float(std::clamp(obj.base_color[c] + top_light, 0.0, 1.0));
    }
  }

  // final occlusion measurement in draw order
  for (size_t i = 0; i < placed.size(); ++i) {
    std::set<int64_t> nearer;
    for (size_t j = i + 1; j < placed.size(); ++j)
      for (int64_t idx : placed[j].mask) nearer.insert(idx);
    int64_t covered = 0;
    for (int64_t idx : placed[i].mask) covered += nearer.count(idx) ? 1 : 0;
    SynthObject out;
    out.category = placed[i].category;
    out.box = placed[i].box;
    out.area = placed[i].box.area();
    out.occlusion = placed[i].mask.empty() ? 0.0 : double(covered) / double(placed[i].mask.size());
    scene.objects.push_back(out);
  }
  return scene;
}

// normalized training targets of a synthetic scene
inline GroundTruth synth_targets(const SynthScene& scene, int64_t image_size) {
  GroundTruth gt;
  for (const auto& obj : scene.objects) {
    TargetBox tb;
    tb.class_id = obj.category;
    tb.box.cx = (obj.box.x + obj.box.w / 2) / double(image_size);
    tb.box.cy = (obj.box.y + obj.box.h / 2) / double(image_size);
    tb.box.w = obj.box.w / double(image_size);
    tb.box.h = obj.box.h / double(image_size);
    gt.push_back(tb);
  }
  return gt;
}

// ---------------------------------------------------------------------------
// minimal PPM (P6) image io, used for fixtures and scene dumps
// ---------------------------------------------------------------------------

template <typename T>
inline void ppm_write(const std::string& path, const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("ppm_write: image must be [3,H,W]");
  const int64_t h = image.dim(1), w = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("ppm_write: cannot open " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        const double v = std::clamp(double(image[(c * h + y) * w + x]), 0.0, 1.0);
        const unsigned char byte = static_cast<unsigned char>(std::lround(v * 255.0));
        os.write(reinterpret_cast<const char*>(&byte), 1);
      }
  if (!os) throw IoError("ppm_write: write failed for " + path);
}

inline Tensor<float> ppm_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("ppm_read: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw IoError("ppm_read: not a P6 file: " + path);
  int64_t w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  is.get();  // single whitespace after the header
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError("ppm_read: unsupported header in " + path);
  Tensor<float> image = Tensor<float>::zeros({3, h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        unsigned char byte = 0;
        is.read(reinterpret_cast<char*>(&byte), 1);
        image[(c * h + y) * w + x] = float(byte) / 255.0f;
      }
  if (!is) throw IoError("ppm_read: truncated payload in " + path);
  return image;
}

}  // namespace flowdet
