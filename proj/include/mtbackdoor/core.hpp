// Domain types shared by every module: boxes, detection sets, images and a
// reproducible random number generator.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mtb {

/// Raised for invalid configurations and precondition violations.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an input file cannot be parsed.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by training when the loss stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageSize {
  int width = 0;
  int height = 0;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

/// Axis-aligned box in absolute corner coordinates.
struct BoundingBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  bool valid() const { return x_min < x_max && y_min < y_max; }
  bool inside(ImageSize size) const {
    return valid() && x_min >= 0 && y_min >= 0 && x_max <= size.width &&
           y_max <= size.height;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Intersection over union. Exactly 0 for disjoint or edge-touching boxes.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

inline BoundingBox clamp_box(BoundingBox b, ImageSize size) {
  b.x_min = std::clamp(b.x_min, 0.0, double(size.width));
  b.x_max = std::clamp(b.x_max, 0.0, double(size.width));
  b.y_min = std::clamp(b.y_min, 0.0, double(size.height));
  b.y_max = std::clamp(b.y_max, 0.0, double(size.height));
  return b;
}

struct DetectionRecord {
  BoundingBox box;
  int class_id = 0;
  double score = 1.0;  // 1.0 for ground truth

  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

struct DetectionSet {
  std::vector<DetectionRecord> records;
  ImageSize image_size;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  /// Checks every record against the image bounds and the class count.
  bool valid(int num_classes) const {
    return std::all_of(records.begin(), records.end(), [&](const DetectionRecord& r) {
      return r.box.inside(image_size) && r.class_id >= 0 && r.class_id < num_classes &&
             r.score >= 0.0 && r.score <= 1.0;
    });
  }

  /// Copy keeping only records with score >= tau.
  DetectionSet filtered(double tau) const {
    DetectionSet out{{}, image_size};
    for (const auto& r : records)
      if (r.score >= tau) out.records.push_back(r);
    return out;
  }

  friend bool operator==(const DetectionSet&, const DetectionSet&) = default;
};

/// H x W x 3 image with channel-interleaved storage and values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(std::size_t(w) * h * 3, fill) {}

  ImageSize size() const { return {width, height}; }
  double& at(int y, int x, int c) { return pixels[(std::size_t(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return pixels[(std::size_t(y) * width + x) * 3 + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Seeded generator with platform-independent draws.
///
/// The engine is mt19937_64 (its output sequence is fixed by the standard);
/// all conversions to real and integer ranges are done here rather than
/// through <random> distributions, whose algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return position_; }

  std::uint64_t next_u64() {
    ++position_;
    return engine_();
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) without modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below called with n = 0");
    const std::uint64_t limit = std::uint64_t(-1) - (std::uint64_t(-1) % n);
    std::uint64_t v;
    do v = next_u64();
    while (v >= limit);
    return v % n;
  }

  /// Inclusive integer range.
  int between(int lo, int hi) { return lo + int(below(std::uint64_t(hi - lo + 1))); }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Index drawn proportionally to nonnegative weights. Throws if all are zero.
  std::size_t categorical(const std::vector<double>& weights) {
    double total = 0;
    for (double w : weights) total += w;
    if (!(total > 0)) throw ConfigError("categorical draw over zero total weight");
    const double u = uniform() * total;
    double acc = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc && weights[i] > 0) return i;
    }
    for (std::size_t i = weights.size(); i-- > 0;)
      if (weights[i] > 0) return i;
    return 0;
  }

  /// Independent child stream for a sub-task (per-image, per-step, ...).
  Rng derive(std::uint64_t stream) const { return Rng(mix(seed_ ^ mix(stream + 0x9E37))); }

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t position_ = 0;
  std::mt19937_64 engine_;
};

inline double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace mtb
