// Small helpers shared by the test programs.
#pragma once

#include <algorithm>
#include <cmath>

#include "mtbackdoor/core.hpp"

namespace test_support {

/// Up to `max_records` random boxes inside `size`; scores uniform in (0, 1]
/// when `with_scores`, otherwise 1.
inline mtb::DetectionSet random_set(mtb::Rng& rng, int num_classes, int max_records, mtb::ImageSize size,
                                    bool with_scores) {
  mtb::DetectionSet s{{}, size};
  const int n = rng.between(0, max_records);
  for (int i = 0; i < n; ++i) {
    const double w = rng.uniform(1.0, size.width / 2.0), h = rng.uniform(1.0, size.height / 2.0);
    const double x = rng.uniform(0.0, size.width - w), y = rng.uniform(0.0, size.height - h);
    s.records.push_back({{x, y, x + w, y + h}, rng.between(0, num_classes - 1),
                         with_scores ? 1.0 - rng.uniform() : 1.0});
  }
  return s;
}

/// Copy of `s` with boxes jittered so that many pairs overlap near IoU 0.5.
inline mtb::DetectionSet jitter(mtb::Rng& rng, const mtb::DetectionSet& s, int num_classes, double amount) {
  mtb::DetectionSet out = s;
  for (auto& r : out.records) {
    const double dx = rng.uniform(-amount, amount) * r.box.width();
    const double dy = rng.uniform(-amount, amount) * r.box.height();
    r.box = mtb::clamp_box({r.box.x_min + dx, r.box.y_min + dy, r.box.x_max + dx, r.box.y_max + dy}, s.image_size);
    if (!r.box.valid()) r.box = {0, 0, 1, 1};
    if (rng.uniform() < 0.5) r.class_id = rng.between(0, num_classes - 1);
    r.score = 1.0 - rng.uniform();
  }
  return out;
}

/// |a - b| / max(|a|, |b|, floor); the floor keeps near-zero pairs on an absolute scale.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace test_support
