#pragma once

#include <json.hpp>

#include <fstream>
#include <map>
#include <set>

#include "flowdet/eval.hpp"

namespace flowdet {

// ---------------------------------------------------------------------------
// COCO annotation documents
// ---------------------------------------------------------------------------

struct CocoImage {
  int64_t id = 0;
  std::string file_name;
  int64_t width = 0, height = 0;
};

struct CocoAnnotation {
  int64_t id = 0;
  int64_t image_id = 0;
  int category_id = 0;
  BoxXYWH bbox;
  double area = 0.0;
};

struct CocoCategory {
  int id = 0;
  std::string name;
};

struct CocoDoc {
  std::vector<CocoImage> images;
  std::vector<CocoAnnotation> annotations;
  std::vector<CocoCategory> categories;

};

namespace detail {

inline void validate_coco(const CocoDoc& doc) {
  std::map<int64_t, const CocoImage*> images;
  std::set<int> category_ids;
  std::set<int64_t> annotation_ids;
  for (const auto& im : doc.images) {
    if (images.count(im.id))
      throw ValueError("load_annotations: duplicate image id " + std::to_string(im.id));
    if (im.width <= 0 || im.height <= 0)
      throw ValueError("load_annotations: image id " + std::to_string(im.id) +
                       " has non-positive extents");
    images[im.id] = &im;
  }
  for (const auto& cat : doc.categories) {
    if (category_ids.count(cat.id))
      throw ValueError("load_annotations: duplicate category id " + std::to_string(cat.id));
    category_ids.insert(cat.id);
  }
  for (const auto& ann : doc.annotations) {
    if (annotation_ids.count(ann.id))
      throw ValueError("load_annotations: duplicate annotation id " + std::to_string(ann.id));
    annotation_ids.insert(ann.id);
    auto it = images.find(ann.image_id);
    if (it == images.end())
      throw ValueError("load_annotations: annotation " + std::to_string(ann.id) +
                       " references missing image id " + std::to_string(ann.image_id));
    if (!category_ids.count(ann.category_id))
      throw ValueError("load_annotations: annotation " + std::to_string(ann.id) +
                       " references missing category id " + std::to_string(ann.category_id));
    if (ann.area <= 0.0)
      throw ValueError("load_annotations: annotation " + std::to_string(ann.id) +
                       " has non-positive area");
    const auto* im = it->second;
    if (ann.bbox.x < 0 || ann.bbox.y < 0 || ann.bbox.w <= 0 || ann.bbox.h <= 0 ||
        ann.bbox.x + ann.bbox.w > double(im->width) + 1e-6 ||
        ann.bbox.y + ann.bbox.h > double(im->height) + 1e-6)
      throw ValueError("load_annotations: annotation " + std::to_string(ann.id) +
                       " bbox outside image id " + std::to_string(ann.image_id));
  }
}

}  // namespace detail

inline CocoDoc parse_coco_json(const nlohmann::json& j) {
  CocoDoc doc;
  std::vector<std::string> unknown;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "images" && it.key() != "annotations" && it.key() != "categories" &&
        it.key() != "info" && it.key() != "licenses")
      unknown.push_back(it.key());
  }
  if (!unknown.empty()) {
    std::string msg = "load_annotations: unknown top-level fields:";
    for (const auto& k : unknown) msg += " " + k;
    throw ValueError(msg);
  }
  for (const auto& im : j.value("images", nlohmann::json::array())) {
    CocoImage rec;
    rec.id = im.at("id").get<int64_t>();
    rec.file_name = im.value("file_name", std::string{});
    rec.width = im.at("width").get<int64_t>();
    rec.height = im.at("height").get<int64_t>();
    doc.images.push_back(std::move(rec));
  }
  for (const auto& an : j.value("annotations", nlohmann::json::array())) {
    CocoAnnotation rec;
    rec.id = an.at("id").get<int64_t>();
    rec.image_id = an.at("image_id").get<int64_t>();
    rec.category_id = an.at("category_id").get<int>();
    const auto& bb = an.at("bbox");
    if (!bb.is_array() || bb.size() != 4)
      throw ValueError("load_annotations: annotation " + std::to_string(rec.id) +
                       " bbox must be [x,y,w,h]");
    rec.bbox = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(),
                bb[3].get<double>()};
    rec.area = an.contains("area") ? an.at("area").get<double>() : rec.bbox.area();
    doc.annotations.push_back(std::move(rec));
  }
  for (const auto& cat : j.value("categories", nlohmann::json::array())) {
    CocoCategory rec;
    rec.id = cat.at("id").get<int>();
    rec.name = cat.value("name", std::string{});
    doc.categories.push_back(std::move(rec));
  }
  detail::validate_coco(doc);
  return doc;
}

// Strict loader: parse failures report the byte offset, dangling references
// and malformed records are rejected by name. Nothing is silently dropped.
inline CocoDoc load_annotations(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("load_annotations: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("load_annotations: parse error at byte " + std::to_string(e.byte) + " in " +
                  path + ": " + e.what());
  }
  try {
    return parse_coco_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ValueError("load_annotations: malformed document " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// dataset statistics
// ---------------------------------------------------------------------------

struct StatsRow {
  std::string name;
  std::vector<int64_t> per_split;
  int64_t total = 0;
};

struct StatsTable {
  std::vector<std::string> split_names;
  StatsRow images;
  std::vector<StatsRow> per_category;  // ordered by category id
  StatsRow total_objects;
};

// Per-category, per-split annotation counts plus image counts and exact
// totals. `split_of` maps image id -> index into split_names; images without
// an entry fall into split 0.
inline StatsTable dataset_stats(const CocoDoc& doc, const std::map<int64_t, int>& split_of,
                                std::vector<std::string> split_names) {
  if (split_names.empty()) split_names = {"all"};
  const size_t ns = split_names.size();
  StatsTable table;
  table.split_names = split_names;
  table.images.name = "Images";
  table.images.per_split.assign(ns, 0);
  auto split_index = [&](int64_t image_id) {
    auto it = split_of.find(image_id);
    const int s = it == split_of.end() ? 0 : it->second;
    if (s < 0 || size_t(s) >= ns)
      throw ValueError("dataset_stats: split index " + std::to_string(s) + " for image " +
                       std::to_string(image_id) + " out of range");
    return size_t(s);
  };
  for (const auto& im : doc.images) {
    table.images.per_split[split_index(im.id)]++;
    table.images.total++;
  }
  std::vector<CocoCategory> cats = doc.categories;
  std::sort(cats.begin(), cats.end(),
            [](const CocoCategory& a, const CocoCategory& b) { return a.id < b.id; });
  std::map<int, size_t> cat_row;
  for (const auto& cat : cats) {
    StatsRow row;
    row.name = cat.name.empty() ? ("category_" + std::to_string(cat.id)) : cat.name;
    row.per_split.assign(ns, 0);
    cat_row[cat.id] = table.per_category.size();
    table.per_category.push_back(std::move(row));
  }
  table.total_objects.name = "Total Objects";
  table.total_objects.per_split.assign(ns, 0);
  for (const auto& ann : doc.annotations) {
    const size_t s = split_index(ann.image_id);
    auto& row = table.per_category[cat_row.at(ann.category_id)];
    row.per_split[s]++;
    row.total++;
    table.total_objects.per_split[s]++;
    table.total_objects.total++;
  }
  return table;
}

inline void write_stats_csv(const StatsTable& table, std::ostream& os) {
  os << "Category";
  for (const auto& s : table.split_names) os << "," << s;
  os << ",Total\n";
  auto row_out = [&os](const StatsRow& row) {
    os << row.name;
    for (int64_t v : row.per_split) os << "," << v;
    os << "," << row.total << "\n";
  };
  row_out(table.images);
  for (const auto& row : table.per_category) row_out(row);
  row_out(table.total_objects);
}

// ---------------------------------------------------------------------------
// results export / import (COCO results format)
// ---------------------------------------------------------------------------

inline void export_detections(const std::vector<EvalDetection>& dets, const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : dets) {
    nlohmann::json rec;
    rec["image_id"] = d.image_id;
    rec["category_id"] = d.category;
    rec["bbox"] = {d.box.x, d.box.y, d.box.w, d.box.h};
    rec["score"] = d.score;
    arr.push_back(std::move(rec));
  }
  std::ofstream os(path);
  if (!os) throw IoError("export_detections: cannot open " + path);
  os << arr.dump(2) << "\n";
  if (!os) throw IoError("export_detections: write failed for " + path);
}

inline std::vector<EvalDetection> load_detections(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("load_detections: cannot open " + path);
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("load_detections: parse error at byte " + std::to_string(e.byte) + " in " +
                  path + ": " + e.what());
  }
  if (!arr.is_array()) throw ValueError("load_detections: expected a JSON array");
  std::vector<EvalDetection> dets;
  for (const auto& rec : arr) {
    EvalDetection d;
    d.image_id = rec.at("image_id").get<int64_t>();
    d.category = rec.at("category_id").get<int>();
    d.score = rec.at("score").get<double>();
    const auto& bb = rec.at("bbox");
    d.box = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
    dets.push_back(d);
  }
  return dets;
}

// ---------------------------------------------------------------------------
// deterministic splits
// ---------------------------------------------------------------------------

// Seeded-shuffle split assignment. Counts are the rounded ratios with the
// remainder going to the earliest splits; every image lands in exactly one.
inline std::map<int64_t, int> make_splits(const CocoDoc& doc, const std::vector<double>& ratios,
                                          uint64_t seed) {
  double sum = 0;
  for (double r : ratios) {
    if (r < 0) throw ValueError("make_splits: ratios must be non-negative");
    sum += r;
  }
  if (std::fabs(sum - 1.0) > 1e-9) throw ValueError("make_splits: ratios must sum to 1");
  std::vector<int64_t> ids;
  for (const auto& im : doc.images) ids.push_back(im.id);
  std::sort(ids.begin(), ids.end());
  Rng rng(seed);
  for (int64_t i = int64_t(ids.size()) - 1; i > 0; --i)
    std::swap(ids[size_t(i)], ids[size_t(rng.below(i + 1))]);
  const int64_t n = int64_t(ids.size());
  std::vector<int64_t> counts;
  int64_t assigned = 0;
  for (size_t s = 0; s < ratios.size(); ++s) {
    counts.push_back(int64_t(std::floor(ratios[s] * double(n) + 1e-9)));
    assigned += counts.back();
  }
  for (size_t s = 0; assigned < n; s = (s + 1) % ratios.size()) {
    counts[s]++;
    assigned++;
  }
  std::map<int64_t, int> split_of;
  size_t cursor = 0;
  for (size_t s = 0; s < counts.size(); ++s)
    for (int64_t k = 0; k < counts[s]; ++k) split_of[ids[cursor++]] = int(s);
  return split_of;
}

// One file per split, line-delimited image ids.
inline void write_split_manifest(const std::map<int64_t, int>& split_of,
                                 const std::vector<std::string>& split_names,
                                 const std::string& dir) {
  for (size_t s = 0; s < split_names.size(); ++s) {
    const std::string path = dir + "/split_" + split_names[s] + ".txt";
    std::ofstream os(path);
    if (!os) throw IoError("write_split_manifest: cannot open " + path);
    for (const auto& [id, idx] : split_of)
      if (idx == int(s)) os << id << "\n";
  }
}

inline std::map<int64_t, int> read_split_manifest(const std::vector<std::string>& split_names,
                                                  const std::string& dir) {
  std::map<int64_t, int> split_of;
  for (size_t s = 0; s < split_names.size(); ++s) {
    const std::string path = dir + "/split_" + split_names[s] + ".txt";
    std::ifstream is(path);
    if (!is) throw IoError("read_split_manifest: cannot open " + path);
    int64_t id;
    while (is >> id) split_of[id] = int(s);
  }
  return split_of;
}

}  // namespace flowdet
