// Synthetic shapes datasets, dataset statistics and COCO-format annotation I/O.
#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "image_io.hpp"

namespace mtb {

using Json = nlohmann::json;

struct Sample {
  Image image;  // may be empty when only annotations were loaded
  DetectionSet annotations;
  std::string id;
};

/// Row-major K x K matrix of doubles.
struct SquareMatrix {
  int n = 0;
  std::vector<double> values;

  SquareMatrix() = default;
  explicit SquareMatrix(int size, double fill = 0.0)
      : n(size), values(std::size_t(size) * size, fill) {}
  double& operator()(int i, int j) { return values[std::size_t(i) * n + j]; }
  double operator()(int i, int j) const { return values[std::size_t(i) * n + j]; }
  friend bool operator==(const SquareMatrix&, const SquareMatrix&) = default;
};

struct DatasetSpec {
  int num_classes = 4;
  int n_images = 500;
  ImageSize image_size{56, 56};
  std::vector<double> class_frequency;  // empty = uniform
  SquareMatrix coexist_bias;            // empty = all ones
  int min_objects = 1;
  int max_objects = 3;
  int min_object_size = 12;
  int max_object_size = 22;
  std::uint64_t seed = 0;

  /// Fills empty frequency / bias fields with neutral defaults.
  DatasetSpec resolved() const {
    DatasetSpec s = *this;
    if (s.class_frequency.empty()) s.class_frequency.assign(std::size_t(std::max(0, s.num_classes)), 1.0 / std::max(1, s.num_classes));
    if (s.coexist_bias.n == 0) s.coexist_bias = SquareMatrix(s.num_classes, 1.0);
    return s;
  }
};

/// Class frequencies decaying geometrically so the rarest class has
/// (1 - imbalance) times the mass of the most frequent one.
inline std::vector<double> imbalanced_frequency(int num_classes, double imbalance) {
  if (num_classes <= 0) throw ConfigError("class count must be positive");
  if (imbalance < 0 || imbalance >= 1) throw ConfigError("imbalance must lie in [0, 1)");
  std::vector<double> f(static_cast<std::size_t>(num_classes));
  const double ratio = 1.0 - imbalance;
  for (int c = 0; c < num_classes; ++c)
    f[std::size_t(c)] = num_classes == 1 ? 1.0 : std::pow(ratio, double(c) / (num_classes - 1));
  const double total = std::accumulate(f.begin(), f.end(), 0.0);
  for (double& v : f) v /= total;
  return f;
}

struct DatasetStats {
  std::vector<double> instance_counts;
  SquareMatrix coexistence;
  friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

// Shape archetypes and colour palette for synthetic classes.
inline constexpr int kShapeCount = 6;
inline constexpr std::array<const char*, kShapeCount> kShapeNames = {
    "circle", "square", "triangle", "cross", "diamond", "ring"};
inline constexpr int kPaletteSize = 8;
inline constexpr std::array<std::array<double, 3>, kPaletteSize> kPalette = {{
    {0.90, 0.10, 0.10}, {0.10, 0.80, 0.10}, {0.15, 0.25, 0.95}, {0.95, 0.90, 0.10},
    {0.90, 0.15, 0.85}, {0.10, 0.85, 0.90}, {0.98, 0.55, 0.05}, {0.97, 0.97, 0.97}}};
inline constexpr std::array<const char*, kPaletteSize> kColorNames = {
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white"};
inline constexpr int kMaxSyntheticClasses = kShapeCount * kPaletteSize;

// gcd(kShapeCount + 1, kPaletteSize) == 1 makes (shape, colour) unique per class.
inline int shape_of(int cls) { return cls % kShapeCount; }
inline int color_of(int cls) { return (cls + cls / kShapeCount) % kPaletteSize; }

inline std::string synthetic_class_name(int cls) {
  return std::string(kColorNames[std::size_t(color_of(cls))]) + "_" +
         kShapeNames[std::size_t(shape_of(cls))];
}

inline void validate(const DatasetSpec& raw) {
  if (raw.num_classes <= 0) throw ConfigError("class count must be positive");
  if (raw.num_classes > kMaxSyntheticClasses)
    throw ConfigError("at most " + std::to_string(kMaxSyntheticClasses) +
                      " synthetic classes are available (shape archetypes x palette)");
  if (raw.n_images < 0) throw ConfigError("image count must be nonnegative");
  if (raw.min_objects < 0 || raw.max_objects < raw.min_objects)
    throw ConfigError("objects per image range is invalid");
  if (raw.min_object_size < 4 || raw.max_object_size < raw.min_object_size ||
      raw.max_object_size > std::min(raw.image_size.width, raw.image_size.height))
    throw ConfigError("object size range does not fit the image");
  const DatasetSpec s = raw.resolved();
  if (int(s.class_frequency.size()) != s.num_classes)
    throw ConfigError("class frequency length must equal the class count");
  double total = 0;
  for (double f : s.class_frequency) {
    if (f < 0) throw ConfigError("class frequencies must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("class frequencies must sum to 1");
  if (s.coexist_bias.n != s.num_classes) throw ConfigError("co-existence bias must be K x K");
  for (int i = 0; i < s.num_classes; ++i)
    for (int j = 0; j < s.num_classes; ++j) {
      if (s.coexist_bias(i, j) < 0) throw ConfigError("co-existence bias must be nonnegative");
      if (s.coexist_bias(i, j) != s.coexist_bias(j, i))
        throw ConfigError("co-existence bias must be symmetric");
    }
  for (int i = 0; i < s.num_classes; ++i)
    if (s.coexist_bias(i, i) != 1.0) throw ConfigError("co-existence bias needs a unit diagonal");
}

namespace detail {

// Membership test for the shape archetype, in coordinates relative to the
// shape's bounding square (u, v in [0, 1)).
inline bool shape_contains(int shape, double u, double v) {
  const double dx = u - 0.5, dy = v - 0.5;
  switch (shape) {
    case 0: return dx * dx + dy * dy <= 0.25;
    case 1: return true;
    case 2: return std::abs(dx) <= 0.5 * v;  // apex at the top
    case 3: return std::abs(dx) <= 1.0 / 6 || std::abs(dy) <= 1.0 / 6;
    case 4: return std::abs(dx) + std::abs(dy) <= 0.5;
    case 5: {
      const double r2 = dx * dx + dy * dy;
      return r2 <= 0.25 && r2 >= 0.0625;
    }
    default: return false;
  }
}

inline void paint_background(Image& img, Rng& rng) {
  const double base = rng.uniform(0.30, 0.55);
  const double amp = rng.uniform(0.03, 0.08);
  const double fx = rng.uniform(0.5, 2.0) * 2 * M_PI / img.width;
  const double fy = rng.uniform(0.5, 2.0) * 2 * M_PI / img.height;
  const double phase = rng.uniform(0, 2 * M_PI);
  std::array<double, 3> tint{};
  for (double& t : tint) t = rng.uniform(-0.05, 0.05);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double wave = amp * std::sin(fx * x + fy * y + phase);
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = std::clamp(base + tint[std::size_t(c)] + wave + 0.02 * rng.normal(), 0.0, 1.0);
    }
}

// Draws one shape; returns its tight pixel box (invalid if nothing was drawn).
inline BoundingBox paint_shape(Image& img, int cls, int x0, int y0, int side, Rng& rng) {
  const auto& base = kPalette[std::size_t(color_of(cls))];
  std::array<double, 3> color{};
  for (int c = 0; c < 3; ++c)
    color[std::size_t(c)] = std::clamp(base[std::size_t(c)] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
  int xmin = img.width, ymin = img.height, xmax = -1, ymax = -1;
  for (int y = y0; y < y0 + side && y < img.height; ++y)
    for (int x = x0; x < x0 + side && x < img.width; ++x) {
      const double u = (x - x0 + 0.5) / side, v = (y - y0 + 0.5) / side;
      if (!shape_contains(shape_of(cls), u, v)) continue;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[std::size_t(c)];
      xmin = std::min(xmin, x), xmax = std::max(xmax, x);
      ymin = std::min(ymin, y), ymax = std::max(ymax, y);
    }
  if (xmax < 0) return {};
  return {double(xmin), double(ymin), double(xmax + 1), double(ymax + 1)};
}

}  // namespace detail

/// Renders one synthetic image from its own derived random stream.
inline Sample generate_sample(const DatasetSpec& spec, int index) {
  Rng rng = Rng(spec.seed).derive(std::uint64_t(index));
  const int K = spec.num_classes;
  Sample sample;
  char id[32];
  std::snprintf(id, sizeof id, "img_%05d", index);
  sample.id = id;
  sample.image = Image(spec.image_size.width, spec.image_size.height);
  sample.annotations.image_size = spec.image_size;
  detail::paint_background(sample.image, rng);

  const int count = rng.between(spec.min_objects, spec.max_objects);
  std::vector<int> placed_classes;
  for (int k = 0; k < count; ++k) {
    std::vector<double> w(spec.class_frequency);
    for (int c = 0; c < K; ++c)
      for (int p : placed_classes) w[std::size_t(c)] *= spec.coexist_bias(p, c);
    int cls;
    try {
      cls = int(rng.categorical(w));
    } catch (const ConfigError&) {
      cls = int(rng.categorical(spec.class_frequency));
    }
    const int side = rng.between(spec.min_object_size, spec.max_object_size);
    // Prefer a spot with little overlap; accept the last attempt otherwise.
    int x0 = 0, y0 = 0;
    for (int attempt = 0; attempt < 40; ++attempt) {
      x0 = rng.between(0, spec.image_size.width - side);
      y0 = rng.between(0, spec.image_size.height - side);
      const BoundingBox candidate{double(x0), double(y0), double(x0 + side), double(y0 + side)};
      bool ok = true;
      for (const auto& r : sample.annotations.records)
        if (iou(candidate, r.box) > 0.05) ok = false;
      if (ok) break;
    }
    const BoundingBox box = detail::paint_shape(sample.image, cls, x0, y0, side, rng);
    if (!box.valid()) continue;
    sample.annotations.records.push_back({box, cls, 1.0});
    placed_classes.push_back(cls);
  }
  return sample;
}

/// Deterministic given spec.seed; image i only depends on (seed, i).
inline std::vector<Sample> generate_dataset(const DatasetSpec& raw) {
  validate(raw);
  const DatasetSpec spec = raw.resolved();
  std::vector<Sample> out;
  out.reserve(std::size_t(spec.n_images));
  for (int i = 0; i < spec.n_images; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

inline DatasetStats compute_stats(const std::vector<Sample>& samples, int num_classes) {
  DatasetStats stats{std::vector<double>(std::size_t(num_classes), 0.0), SquareMatrix(num_classes)};
  for (const auto& s : samples) {
    std::set<int> present;
    for (const auto& r : s.annotations.records) {
      if (r.class_id < 0 || r.class_id >= num_classes)
        throw ConfigError("class id " + std::to_string(r.class_id) + " out of range in " + s.id);
      stats.instance_counts[std::size_t(r.class_id)] += 1;
      present.insert(r.class_id);
    }
    for (int i : present)
      for (int j : present) stats.coexistence(i, j) += 1;
  }
  return stats;
}

// ---------------------------------------------------------------------------
// JSON

inline Json to_json(const DatasetStats& s) {
  Json co = Json::array();
  for (int i = 0; i < s.coexistence.n; ++i) {
    Json row = Json::array();
    for (int j = 0; j < s.coexistence.n; ++j) row.push_back(s.coexistence(i, j));
    co.push_back(row);
  }
  return {{"instance_counts", s.instance_counts}, {"coexistence", co}};
}

inline DatasetStats stats_from_json(const Json& j) {
  DatasetStats s;
  s.instance_counts = j.at("instance_counts").get<std::vector<double>>();
  const auto& co = j.at("coexistence");
  s.coexistence = SquareMatrix(int(co.size()));
  for (int i = 0; i < s.coexistence.n; ++i)
    for (int k = 0; k < s.coexistence.n; ++k) s.coexistence(i, k) = co.at(std::size_t(i)).at(std::size_t(k)).get<double>();
  return s;
}

inline Json to_json(const DatasetSpec& s) {
  Json bias = Json::array();
  for (int i = 0; i < s.coexist_bias.n; ++i) {
    Json row = Json::array();
    for (int j = 0; j < s.coexist_bias.n; ++j) row.push_back(s.coexist_bias(i, j));
    bias.push_back(row);
  }
  return {{"num_classes", s.num_classes},
          {"n_images", s.n_images},
          {"image_width", s.image_size.width},
          {"image_height", s.image_size.height},
          {"class_frequency", s.class_frequency},
          {"coexist_bias", bias},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"min_object_size", s.min_object_size},
          {"max_object_size", s.max_object_size},
          {"seed", s.seed}};
}

inline DatasetSpec dataset_spec_from_json(const Json& j) {
  DatasetSpec s;
  s.num_classes = j.value("num_classes", s.num_classes);
  s.n_images = j.value("n_images", s.n_images);
  s.image_size.width = j.value("image_width", s.image_size.width);
  s.image_size.height = j.value("image_height", s.image_size.height);
  s.class_frequency = j.value("class_frequency", std::vector<double>{});
  if (j.contains("coexist_bias") && !j["coexist_bias"].empty()) {
    const auto& b = j["coexist_bias"];
    s.coexist_bias = SquareMatrix(int(b.size()));
    for (int r = 0; r < s.coexist_bias.n; ++r)
      for (int c = 0; c < s.coexist_bias.n; ++c) s.coexist_bias(r, c) = b.at(std::size_t(r)).at(std::size_t(c)).get<double>();
  }
  s.min_objects = j.value("min_objects", s.min_objects);
  s.max_objects = j.value("max_objects", s.max_objects);
  s.min_object_size = j.value("min_object_size", s.min_object_size);
  s.max_object_size = j.value("max_object_size", s.max_object_size);
  s.seed = j.value("seed", s.seed);
  return s;
}

// ---------------------------------------------------------------------------
// COCO annotations

struct CocoDataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;   // indexed by contiguous class id
  std::vector<long long> category_ids;    // original id of each contiguous class
  std::vector<std::string> file_names;    // parallel to samples
  int skipped_records = 0;

  int num_classes() const { return int(class_names.size()); }
};

/// Serialises samples as COCO JSON (category ids are 1-based, boxes x,y,w,h).
inline Json export_coco(const std::vector<Sample>& samples, const std::vector<std::string>& class_names,
                        const std::vector<long long>& category_ids = {}) {
  Json images = Json::array(), annotations = Json::array(), categories = Json::array();
  auto cat_id = [&](int c) { return category_ids.empty() ? (long long)(c) + 1 : category_ids[std::size_t(c)]; };
  for (std::size_t c = 0; c < class_names.size(); ++c)
    categories.push_back({{"id", cat_id(int(c))}, {"name", class_names[c]}});
  long long ann_id = 1;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    images.push_back({{"id", (long long)(i) + 1},
                      {"file_name", s.id + ".png"},
                      {"width", s.annotations.image_size.width},
                      {"height", s.annotations.image_size.height}});
    for (const auto& r : s.annotations.records) {
      annotations.push_back({{"id", ann_id++},
                             {"image_id", (long long)(i) + 1},
                             {"category_id", cat_id(r.class_id)},
                             {"bbox", {r.box.x_min, r.box.y_min, r.box.width(), r.box.height()}},
                             {"area", r.box.area()},
                             {"iscrowd", 0}});
    }
  }
  return {{"images", images}, {"annotations", annotations}, {"categories", categories}};
}

/// Parses COCO-style JSON. Category ids are remapped to [0, K) in ascending
/// id order; degenerate boxes are skipped and counted.
inline CocoDataset parse_coco(const Json& doc, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& what) { throw ParseError(origin + ": " + what); };
  if (!doc.is_object() || !doc.contains("images") || !doc.contains("annotations") ||
      !doc.contains("categories"))
    fail("expected an object with images, annotations and categories arrays");
  const auto& images = doc["images"];
  const auto& anns = doc["annotations"];
  const auto& cats = doc["categories"];
  if (!images.is_array() || !anns.is_array() || !cats.is_array())
    fail("images, annotations and categories must be arrays");

  CocoDataset out;
  std::vector<std::pair<long long, std::string>> cat_list;
  for (const auto& c : cats) {
    if (!c.contains("id") || !c["id"].is_number_integer()) fail("category without integer id");
    cat_list.emplace_back(c["id"].get<long long>(), c.value("name", std::to_string(c["id"].get<long long>())));
  }
  std::sort(cat_list.begin(), cat_list.end());
  std::map<long long, int> cat_index;
  for (const auto& [id, name] : cat_list) {
    if (cat_index.count(id)) fail("duplicate category id " + std::to_string(id));
    cat_index[id] = int(out.class_names.size());
    out.class_names.push_back(name);
    out.category_ids.push_back(id);
  }

  std::map<long long, std::size_t> image_index;
  for (const auto& im : images) {
    if (!im.contains("id") || !im["id"].is_number_integer()) fail("image without integer id");
    const long long id = im["id"].get<long long>();
    if (!im.contains("width") || !im.contains("height") || !im["width"].is_number() ||
        !im["height"].is_number())
      fail("image id " + std::to_string(id) + ": missing width/height");
    if (image_index.count(id)) fail("duplicate image id " + std::to_string(id));
    Sample s;
    const std::string file = im.value("file_name", std::to_string(id));
    s.id = std::filesystem::path(file).stem().string();
    s.annotations.image_size = {im["width"].get<int>(), im["height"].get<int>()};
    image_index[id] = out.samples.size();
    out.samples.push_back(std::move(s));
    out.file_names.push_back(file);
  }

  for (const auto& a : anns) {
    const std::string rid = a.contains("id") ? a["id"].dump() : "?";
    if (!a.contains("image_id") || !a.contains("category_id") || !a.contains("bbox"))
      fail("annotation id " + rid + ": missing image_id, category_id or bbox");
    const auto& bbox = a["bbox"];
    if (!bbox.is_array() || bbox.size() != 4 ||
        !std::all_of(bbox.begin(), bbox.end(), [](const Json& v) { return v.is_number(); }))
      fail("annotation id " + rid + ": bbox must be four numbers");
    auto im = image_index.find(a["image_id"].get<long long>());
    if (im == image_index.end()) fail("annotation id " + rid + ": unknown image_id");
    auto cat = cat_index.find(a["category_id"].get<long long>());
    if (cat == cat_index.end()) fail("annotation id " + rid + ": unknown category_id");
    const double x = bbox[0].get<double>(), y = bbox[1].get<double>();
    const double w = bbox[2].get<double>(), h = bbox[3].get<double>();
    if (!(w > 0) || !(h > 0)) {
      ++out.skipped_records;
      continue;
    }
    Sample& s = out.samples[im->second];
    const BoundingBox box = clamp_box({x, y, x + w, y + h}, s.annotations.image_size);
    if (!box.valid()) {
      ++out.skipped_records;
      continue;
    }
    s.annotations.records.push_back({box, cat->second, 1.0});
  }
  return out;
}

inline CocoDataset load_coco_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open file");
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return parse_coco(doc, path.string());
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open file");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dataset directories: images/*.png + annotations.json + stats.json

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;
  int num_classes() const { return int(class_names.size()); }
};

inline Dataset make_synthetic(const DatasetSpec& spec) {
  Dataset d{generate_dataset(spec), {}};
  for (int c = 0; c < spec.num_classes; ++c) d.class_names.push_back(synthetic_class_name(c));
  return d;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& d,
                         const DatasetSpec* spec = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  for (const auto& s : d.samples)
    if (!s.image.pixels.empty()) write_png(dir / "images" / (s.id + ".png"), s.image);
  write_json(dir / "annotations.json", export_coco(d.samples, d.class_names));
  write_json(dir / "stats.json", to_json(compute_stats(d.samples, d.num_classes())));
  if (spec) write_json(dir / "dataset_spec.json", to_json(*spec));
}

/// Loads annotations and, when present, the PNG images of a dataset directory.
inline Dataset load_dataset(const std::filesystem::path& dir, bool with_images = true) {
  CocoDataset coco = load_coco_annotations(dir / "annotations.json");
  Dataset d{std::move(coco.samples), std::move(coco.class_names)};
  if (with_images) {
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
      const auto path = dir / "images" / coco.file_names[i];
      if (std::filesystem::exists(path)) d.samples[i].image = read_png(path);
    }
  }
  return d;
}

}  // namespace mtb
