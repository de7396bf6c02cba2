#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "flowdet/coco.hpp"
#include "flowdet/synth.hpp"

using namespace flowdet;

#ifndef FIXTURE_DIR
#define FIXTURE_DIR "tests/fixtures"
#endif

namespace {

std::string fixture(const std::string& name) { return std::string(FIXTURE_DIR) + "/" + name; }

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("iou: identical, disjoint, and the 1/7 hand case") {
  BoxXYXY a{0, 0, 2, 2};
  CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(iou(a, {5, 5, 7, 7}) == 0.0);
  CHECK(iou(a, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-9));
  CHECK(iou({1, 1, 3, 3}, a) == doctest::Approx(1.0 / 7.0).epsilon(1e-9));  // symmetry
  CHECK_THROWS_AS(iou(a, {3, 3, 3, 4}), ValueError);  // degenerate box
}

TEST_CASE("giou: identical, the -5/63 hand case, and the far-separation limit") {
  BoxXYXY a{0, 0, 2, 2};
  CHECK(giou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(giou(a, {1, 1, 3, 3}) == doctest::Approx(-5.0 / 63.0).epsilon(1e-9));
  CHECK(giou({0, 0, 1, 1}, {999, 0, 1000, 1}) == doctest::Approx(-1.0).epsilon(1e-2));
  CHECK(giou({0, 0, 1, 1}, {0.5, 0, 1.5, 1}) > giou({0, 0, 1, 1}, {5, 0, 6, 1}));
}

TEST_CASE("ap_evaluate: one perfect detection scores 1.0 everywhere") {
  std::vector<EvalGroundTruth> gts = {{1, 0, {10, 10, 20, 20}, 400}};
  std::vector<EvalDetection> dets = {{1, 0, 1.0, {10, 10, 20, 20}}};
  auto rep = ap_evaluate(dets, gts, {0});
  CHECK(rep.ap == doctest::Approx(1.0));
  CHECK(rep.ap50 == doctest::Approx(1.0));
}

TEST_CASE("ap_evaluate: no detections scores 0.0") {
  std::vector<EvalGroundTruth> gts = {{1, 0, {10, 10, 20, 20}, 400}};
  auto rep = ap_evaluate({}, gts, {0});
  CHECK(rep.ap == 0.0);
  CHECK(rep.ap50 == 0.0);
  CHECK(rep.ap_s == 0.0);
  CHECK(rep.ap_l == 0.0);
}

TEST_CASE("ap_evaluate rejects unknown category ids") {
  std::vector<EvalGroundTruth> gts = {{1, 0, {0, 0, 4, 4}, 16}};
  std::vector<EvalDetection> dets = {{1, 9, 0.8, {0, 0, 4, 4}}};
  CHECK_THROWS_AS(ap_evaluate(dets, gts, {0}), ValueError);
}

// Fixture: 3 ground truths, 5 scored detections; rank order TP TP FP(dup)
// FP TP. Recall levels 1/3, 2/3 at precision 1.0, then 3/5 at full recall.
// 101-point interpolation: grid points 0.00..0.66 read precision 1.0
// (recall 2/3 ~ 0.6667 covers them), 0.67..1.00 read 0.6,
// so AP50 = (67 * 1.0 + 34 * 0.6) / 101 = 87.4 / 101.
TEST_CASE("ap_evaluate matches the hand-computed PR fixture") {
  std::vector<EvalGroundTruth> gts = {
      {1, 0, {0, 0, 10, 10}, 100}, {1, 0, {20, 20, 10, 10}, 100}, {1, 0, {40, 40, 10, 10}, 100}};
  std::vector<EvalDetection> dets = {
      {1, 0, 0.95, {0, 0, 10, 10}},       // exact match of gt 0
      {1, 0, 0.90, {20, 20, 10, 10}},     // exact match of gt 1
      {1, 0, 0.85, {0.5, 0.5, 10, 10}},   // duplicate of gt 0, counted FP
      {1, 0, 0.80, {100, 100, 10, 10}},   // plain false positive
      {1, 0, 0.60, {40, 42, 10, 9}}};     // IoU 80/110 with gt 2, TP
  auto rep = ap_evaluate(dets, gts, {0});
  const double expect = 87.4 / 101.0;
  CHECK(rep.ap50 == doctest::Approx(expect).epsilon(1e-12));
  REQUIRE(rep.pr_curves.size() == 1);
  const auto& curve = rep.pr_curves[0].precision;
  REQUIRE(curve.size() == 101);
  for (int r = 0; r <= 66; ++r) CHECK(curve[size_t(r)] == doctest::Approx(1.0));
  for (int r = 67; r <= 100; ++r) CHECK(curve[size_t(r)] == doctest::Approx(0.6));
}

TEST_CASE("AP is monotone non-increasing in the IoU threshold") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<EvalGroundTruth> gts;
    std::vector<EvalDetection> dets;
    for (int g = 0; g < 6; ++g) {
      const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
      const double w = rng.uniform(4, 14), h = rng.uniform(4, 14);
      gts.push_back({g % 2, 0, {x, y, w, h}, w * h});
      // jittered detection near each gt plus occasional noise
      dets.push_back({g % 2, 0, rng.uniform(0.1, 1.0),
                      {x + rng.uniform(-3, 3), y + rng.uniform(-3, 3), w * rng.uniform(0.7, 1.3),
                       h * rng.uniform(0.7, 1.3)}});
      if (trial % 3 == 0)
        dets.push_back({g % 2, 0, rng.uniform(0.1, 1.0),
                        {rng.uniform(0, 50), rng.uniform(0, 50), 6, 6}});
    }
    auto rep = ap_evaluate(dets, gts, {0});
    for (size_t i = 1; i < rep.ap_per_threshold.size(); ++i)
      CHECK(rep.ap_per_threshold[i] <= rep.ap_per_threshold[i - 1] + 1e-12);
    CHECK(rep.ap <= rep.ap50 + 1e-12);
  }
}

TEST_CASE("appending a zero-confidence false positive never changes AP") {
  std::vector<EvalGroundTruth> gts = {{1, 0, {0, 0, 10, 10}, 100}, {1, 0, {30, 0, 8, 8}, 64}};
  std::vector<EvalDetection> dets = {{1, 0, 0.9, {0, 0, 10, 10}},
                                     {1, 0, 0.7, {30.5, 0, 8, 8}}};
  auto before = ap_evaluate(dets, gts, {0});
  dets.push_back({1, 0, 0.0, {100, 100, 5, 5}});
  auto after = ap_evaluate(dets, gts, {0});
  CHECK(before.ap == after.ap);
  CHECK(before.ap50 == after.ap50);
}

TEST_CASE("area strata partition every ground truth exactly once") {
  for (double area : {1.0, 100.0, 1023.9, 1024.0, 1025.0, 9215.9, 9216.0, 9217.0, 1e6}) {
    const bool s = area < 32.0 * 32.0;
    const bool m = area >= 32.0 * 32.0 && area <= 96.0 * 96.0;
    const bool l = area > 96.0 * 96.0;
    CHECK(int(s) + int(m) + int(l) == 1);
  }
}

TEST_CASE("latency bench: fps identity and quantile ordering") {
  volatile double sink = 0;
  auto rep = latency_bench(
      [&] {
        for (int i = 0; i < 2000; ++i) sink = sink + std::sqrt(double(i));
      },
      25);
  CHECK(rep.fps == doctest::Approx(1000.0 / rep.mean_ms).epsilon(1e-12));
  CHECK(rep.p50_ms <= rep.p95_ms);
  CHECK(rep.iters == 25);
}

TEST_CASE("load_annotations: minimal document and the 8-category fixture") {
  auto doc = load_annotations(fixture("mini_coco.json"));
  CHECK(doc.images.size() == 3);
  CHECK(doc.categories.size() == 8);
  CHECK(doc.annotations.size() == 13);  // nothing silently dropped
  std::map<int, int64_t> counts;
  for (const auto& ann : doc.annotations) counts[ann.category_id]++;
  // fixture manifest
  CHECK(counts[1] == 3);
  CHECK(counts[2] == 1);
  CHECK(counts[3] == 2);
  CHECK(counts[4] == 2);
  CHECK(counts[5] == 1);
  CHECK(counts[6] == 1);
  CHECK(counts[7] == 1);
  CHECK(counts[8] == 2);
}

TEST_CASE("load_annotations: parse errors carry the byte offset") {
  try {
    load_annotations(fixture("bad.json"));
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
}

TEST_CASE("load_annotations: dangling image reference names the id") {
  const auto path = temp_file("flowdet_dangling.json");
  {
    std::ofstream os(path);
    os << R"({"images":[{"id":1,"file_name":"a.jpg","width":8,"height":8}],
              "categories":[{"id":1,"name":"car"}],
              "annotations":[{"id":7,"image_id":99,"category_id":1,"bbox":[0,0,2,2],"area":4}]})";
  }
  try {
    load_annotations(path.string());
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("99") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("load_annotations: unknown top-level fields are reported, not guessed at") {
  const auto path = temp_file("flowdet_unknown_field.json");
  {
    std::ofstream os(path);
    os << R"({"images":[],"categories":[],"annotations":[],"segment_info":[]})";
  }
  try {
    load_annotations(path.string());
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("segment_info") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("dataset_stats: fixture counts and an empty document") {
  auto doc = load_annotations(fixture("mini_coco.json"));
  std::map<int64_t, int> split_of = {{1, 0}, {2, 0}, {3, 1}};
  auto table = dataset_stats(doc, split_of, {"train", "val"});
  CHECK(table.images.per_split[0] == 2);
  CHECK(table.images.per_split[1] == 1);
  CHECK(table.images.total == 3);
  CHECK(table.per_category.size() == 8);
  CHECK(table.per_category[0].name == "Vehicle");
  CHECK(table.per_category[0].total == 3);
  CHECK(table.total_objects.total == 13);
  int64_t split_sum = 0;
  for (auto v : table.total_objects.per_split) split_sum += v;
  CHECK(split_sum == table.total_objects.total);

  CocoDoc empty;
  auto empty_table = dataset_stats(empty, {}, {"all"});
  CHECK(empty_table.images.total == 0);
  CHECK(empty_table.total_objects.total == 0);
}

TEST_CASE("dataset_stats totals equal the sum of their parts on random documents") {
  Rng rng(321);
  for (int trial = 0; trial < 10; ++trial) {
    CocoDoc doc;
    const int64_t n_img = 5 + rng.below(20);
    for (int64_t i = 0; i < n_img; ++i) doc.images.push_back({i, "img", 64, 64});
    const int n_cat = 2 + int(rng.below(5));
    for (int c = 0; c < n_cat; ++c) doc.categories.push_back({c, "cat" + std::to_string(c)});
    std::map<int64_t, int> split_of;
    for (int64_t i = 0; i < n_img; ++i) split_of[i] = int(rng.below(3));
    const int64_t n_ann = rng.below(200);
    for (int64_t a = 0; a < n_ann; ++a)
      doc.annotations.push_back(
          {a, rng.below(n_img), int(rng.below(n_cat)), {0, 0, 4, 4}, 16.0});
    auto table = dataset_stats(doc, split_of, {"train", "val", "test"});
    for (const auto& row : table.per_category) {
      int64_t acc = 0;
      for (auto v : row.per_split) acc += v;
      CHECK(acc == row.total);
    }
    int64_t col_total = 0;
    for (const auto& row : table.per_category) col_total += row.total;
    CHECK(col_total == table.total_objects.total);
    CHECK(table.total_objects.total == n_ann);
  }
}

TEST_CASE("synth: identical seeds give bit-identical scenes") {
  SynthSceneSpec spec;
  spec.seed = 99;
  auto a = synth_generate(spec);
  auto b = synth_generate(spec);
  REQUIRE(a.image.numel() == b.image.numel());
  for (int64_t i = 0; i < a.image.numel(); ++i) CHECK(a.image[i] == b.image[i]);
  REQUIRE(a.objects.size() == b.objects.size());
  for (size_t i = 0; i < a.objects.size(); ++i) {
    CHECK(a.objects[i].category == b.objects[i].category);
    CHECK(a.objects[i].box.x == b.objects[i].box.x);
    CHECK(a.objects[i].box.w == b.objects[i].box.w);
  }
}

TEST_CASE("synth: bounds and occlusion cap hold over 1000 scenes") {
  SynthSceneSpec spec;
  spec.min_objects = 2;
  spec.max_objects = 4;
  spec.occlusion_cap = 0.6;
  int64_t total_objects = 0;
  for (uint64_t seed = 1; seed <= 1000; ++seed) {
    spec.seed = seed;
    auto scene = synth_generate(spec);
    for (const auto& obj : scene.objects) {
      total_objects++;
      CHECK(obj.box.x >= 0.0);
      CHECK(obj.box.y >= 0.0);
      CHECK(obj.box.x + obj.box.w <= double(spec.image_size));
      CHECK(obj.box.y + obj.box.h <= double(spec.image_size));
      CHECK(obj.occlusion <= spec.occlusion_cap + 1e-12);
    }
  }
  CHECK(total_objects >= 2000);
}

TEST_CASE("synth: exact object count when the range is degenerate") {
  SynthSceneSpec spec;
  spec.min_objects = 3;
  spec.max_objects = 3;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    spec.seed = seed;
    CHECK(synth_generate(spec).objects.size() == 3);
  }
}

TEST_CASE("synth labels are exact: re-measuring a lone rendered object recovers its box") {
  SynthSceneSpec spec;
  spec.min_objects = 1;
  spec.max_objects = 1;
  for (uint64_t seed = 1; seed <= 40; ++seed) {
    spec.seed = seed;
    auto scene = synth_generate(spec);
    REQUIRE(scene.objects.size() == 1);
    const auto& box = scene.objects[0].box;
    // object pixels are saturated, the road background is gray
    const int64_t s = spec.image_size;
    double min_x = 1e9, max_x = -1e9, min_y = 1e9, max_y = -1e9;
    for (int64_t y = 0; y < s; ++y)
      for (int64_t x = 0; x < s; ++x) {
        const double r = scene.image[(0 * s + y) * s + x];
        const double g = scene.image[(1 * s + y) * s + x];
        const double b = scene.image[(2 * s + y) * s + x];
        const double sat = std::max({r, g, b}) - std::min({r, g, b});
        if (sat > 0.25) {
          min_x = std::min(min_x, double(x));
          max_x = std::max(max_x, double(x));
          min_y = std::min(min_y, double(y));
          max_y = std::max(max_y, double(y));
        }
      }
    REQUIRE(max_x >= min_x);
    CHECK(std::fabs(min_x - box.x) <= 1.0);
    CHECK(std::fabs(min_y - box.y) <= 1.0);
    CHECK(std::fabs(max_x - min_x + 1 - box.w) <= 1.0);
    CHECK(std::fabs(max_y - min_y + 1 - box.h) <= 1.0);
  }
}

TEST_CASE("synth targets are normalized and consistent with the pixel boxes") {
  SynthSceneSpec spec;
  spec.seed = 7;
  auto scene = synth_generate(spec);
  auto gt = synth_targets(scene, spec.image_size);
  REQUIRE(gt.size() == scene.objects.size());
  for (size_t i = 0; i < gt.size(); ++i) {
    CHECK(gt[i].box.cx >= 0.0);
    CHECK(gt[i].box.cx <= 1.0);
    CHECK(gt[i].box.w > 0.0);
    CHECK(gt[i].box.w ==
          doctest::Approx(scene.objects[i].box.w / double(spec.image_size)).epsilon(1e-12));
  }
}

TEST_CASE("detection export round-trips within float formatting precision") {
  std::vector<EvalDetection> dets = {{1, 0, 0.875, {1.5, 2.25, 10.125, 8.5}},
                                     {2, 1, 0.0625, {0, 0, 3, 3}}};
  const auto path = temp_file("flowdet_dets.json");
  export_detections(dets, path.string());
  auto back = load_detections(path.string());
  REQUIRE(back.size() == dets.size());
  for (size_t i = 0; i < dets.size(); ++i) {
    CHECK(back[i].image_id == dets[i].image_id);
    CHECK(back[i].category == dets[i].category);
    CHECK(std::fabs(back[i].score - dets[i].score) <= 1e-6);
    CHECK(std::fabs(back[i].box.x - dets[i].box.x) <= 1e-6);
    CHECK(std::fabs(back[i].box.w - dets[i].box.w) <= 1e-6);
  }
  std::filesystem::remove(path);
}

TEST_CASE("splits: 80/10/10 on 100 images, deterministic by seed") {
  CocoDoc doc;
  for (int64_t i = 0; i < 100; ++i) doc.images.push_back({i, "img", 32, 32});
  auto a = make_splits(doc, {0.8, 0.1, 0.1}, 42);
  std::vector<int64_t> counts(3, 0);
  for (const auto& [id, s] : a) counts[size_t(s)]++;
  CHECK(counts[0] == 80);
  CHECK(counts[1] == 10);
  CHECK(counts[2] == 10);
  auto b = make_splits(doc, {0.8, 0.1, 0.1}, 42);
  CHECK(a == b);
  auto c = make_splits(doc, {0.8, 0.1, 0.1}, 43);
  CHECK(a != c);  // different seed shuffles differently
}

TEST_CASE("split manifest files round trip") {
  CocoDoc doc;
  for (int64_t i = 0; i < 12; ++i) doc.images.push_back({i, "img", 32, 32});
  auto splits = make_splits(doc, {0.5, 0.25, 0.25}, 9);
  const auto dir = std::filesystem::temp_directory_path() / "flowdet_splits";
  std::filesystem::create_directories(dir);
  write_split_manifest(splits, {"train", "val", "test"}, dir.string());
  auto back = read_split_manifest({"train", "val", "test"}, dir.string());
  CHECK(back == splits);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ppm round trip") {
  SynthSceneSpec spec;
  spec.seed = 3;
  auto scene = synth_generate(spec);
  const auto path = temp_file("flowdet_scene.ppm");
  ppm_write(path.string(), scene.image);
  auto back = ppm_read(path.string());
  REQUIRE(back.shape() == scene.image.shape());
  for (int64_t i = 0; i < back.numel(); ++i)
    CHECK(std::fabs(back[i] - scene.image[i]) <= 0.5 / 255.0 + 1e-6);
  std::filesystem::remove(path);
}

// Published statistics of the paper's corpus, used as pure arithmetic: the
// table's split columns must sum to its row totals and the grand total.
TEST_CASE("stats arithmetic on the published-count fixture") {
  const std::vector<std::string> names = {"Vehicle", "Bus",   "Bicycle",  "Pedestrian",
                                          "Engine",  "Truck", "Tricycle", "Obstacle"};
  const int64_t counts[8][3] = {{190417, 23450, 23978}, {2816, 315, 322},  {23396, 2771, 3051},
                                {19005, 2250, 2459},    {642, 74, 80},     {7749, 881, 916},
                                {1610, 225, 200},       {82190, 8902, 9059}};
  const int64_t images_per_split[3] = {5483, 722, 723};

  CocoDoc doc;
  std::map<int64_t, int> split_of;
  int64_t image_id = 0;
  std::vector<int64_t> first_image_of_split;
  for (int s = 0; s < 3; ++s) {
    first_image_of_split.push_back(image_id);
    for (int64_t i = 0; i < images_per_split[s]; ++i) {
      doc.images.push_back({image_id, "img", 1920, 1080});
      split_of[image_id] = s;
      image_id++;
    }
  }
  for (int c = 0; c < 8; ++c) doc.categories.push_back({c + 1, names[size_t(c)]});
  int64_t ann_id = 0;
  for (int c = 0; c < 8; ++c)
    for (int s = 0; s < 3; ++s)
      for (int64_t k = 0; k < counts[c][s]; ++k)
        doc.annotations.push_back(
            {ann_id++, first_image_of_split[size_t(s)], c + 1, {0, 0, 16, 16}, 256.0});

  auto table = dataset_stats(doc, split_of, {"train", "val", "test"});
  CHECK(table.images.total == 6928);
  REQUIRE(table.per_category.size() == 8);
  const int64_t expected_totals[8] = {237845, 3453, 29218, 23714, 796, 9546, 2035, 100151};
  for (int c = 0; c < 8; ++c) {
    int64_t row_sum = 0;
    for (auto v : table.per_category[size_t(c)].per_split) row_sum += v;
    CHECK(row_sum == table.per_category[size_t(c)].total);
    CHECK(table.per_category[size_t(c)].total == expected_totals[c]);
  }
  CHECK(table.total_objects.per_split[0] == 327825);
  CHECK(table.total_objects.per_split[1] == 38868);
  CHECK(table.total_objects.per_split[2] == 40065);
  CHECK(table.total_objects.total == 406758);
  CHECK(327825 + 38868 + 40065 == 406758);
}
