// Raster figures: detection overlays, side-by-side strips, training curves.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "core.hpp"
#include "data.hpp"

namespace mtb {

using Rgb = std::array<double, 3>;

inline Rgb class_color(int cls) {
  static constexpr std::array<Rgb, 8> kColors{{{0.90, 0.10, 0.10},
                                               {0.10, 0.60, 0.95},
                                               {0.15, 0.80, 0.20},
                                               {0.95, 0.75, 0.05},
                                               {0.75, 0.20, 0.85},
                                               {0.05, 0.80, 0.80},
                                               {0.95, 0.45, 0.05},
                                               {0.50, 0.50, 0.50}}};
  return kColors[std::size_t(cls) % kColors.size()];
}

inline void set_pixel(Image& img, int x, int y, const Rgb& c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  for (int k = 0; k < 3; ++k) img.at(y, x, k) = c[std::size_t(k)];
}

inline Image upscale(const Image& x, int factor) {
  Image out(x.width * factor, x.height * factor);
  for (int y = 0; y < out.height; ++y)
    for (int xx = 0; xx < out.width; ++xx)
      for (int c = 0; c < 3; ++c) out.at(y, xx, c) = x.at(y / factor, xx / factor, c);
  return out;
}

inline void draw_rect(Image& img, double x0, double y0, double x1, double y1, const Rgb& c, int thickness = 1) {
  const int l = int(std::floor(x0)), t = int(std::floor(y0));
  const int r = int(std::ceil(x1)) - 1, b = int(std::ceil(y1)) - 1;
  for (int k = 0; k < thickness; ++k) {
    for (int x = l; x <= r; ++x) set_pixel(img, x, t + k, c), set_pixel(img, x, b - k, c);
    for (int y = t; y <= b; ++y) set_pixel(img, l + k, y, c), set_pixel(img, r - k, y, c);
  }
}

/// `image` upscaled by `factor` with each record's box outlined in its class colour.
inline Image overlay(const Image& image, const DetectionSet& detections, int factor = 4) {
  Image out = upscale(image, factor);
  for (const auto& r : detections.records)
    draw_rect(out, r.box.x_min * factor, r.box.y_min * factor, r.box.x_max * factor, r.box.y_max * factor,
              class_color(r.class_id), 2);
  return out;
}

/// Horizontal concatenation with a `gap`-pixel white separator.
inline Image hstack(const std::vector<Image>& tiles, int gap = 4) {
  int width = 0, height = 0;
  for (const auto& t : tiles) width += t.width, height = std::max(height, t.height);
  width += gap * int(tiles.empty() ? 0 : tiles.size() - 1);
  Image out(width, height, 1.0);
  int x0 = 0;
  for (const auto& t : tiles) {
    for (int y = 0; y < t.height; ++y)
      for (int x = 0; x < t.width; ++x)
        for (int c = 0; c < 3; ++c) out.at(y, x0 + x, c) = t.at(y, x, c);
    x0 += t.width + gap;
  }
  return out;
}

struct PlotSeries {
  std::vector<std::optional<double>> values;  // one per x step; gaps allowed
  Rgb color;
};

inline void draw_line(Image& img, double x0, double y0, double x1, double y1, const Rgb& c) {
  const int steps = int(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = double(i) / steps;
    const int x = int(std::lround(x0 + t * (x1 - x0))), y = int(std::lround(y0 + t * (y1 - y0)));
    set_pixel(img, x, y, c);
    set_pixel(img, x, y + 1, c);
  }
}

/// Line chart of each series normalised to [0, 1] on a shared x axis, with
/// light horizontal gridlines at quarters. Series with a single point
/// draw a short tick.
inline Image plot_series(const std::vector<PlotSeries>& series, int width = 480, int height = 240) {
  Image img(width, height, 1.0);
  const int pad = 16;
  const double pw = width - 2 * pad, ph = height - 2 * pad;
  for (int q = 0; q <= 4; ++q) {
    const double y = pad + ph * (1.0 - q / 4.0);
    draw_line(img, pad, y, width - pad, y, {0.88, 0.88, 0.88});
  }
  draw_line(img, pad, pad, pad, height - pad, {0.2, 0.2, 0.2});
  draw_line(img, pad, height - pad, width - pad, height - pad, {0.2, 0.2, 0.2});
  for (const auto& s : series) {
    double lo = 1e300, hi = -1e300;
    for (const auto& v : s.values)
      if (v) lo = std::min(lo, *v), hi = std::max(hi, *v);
    if (lo > hi) continue;
    if (hi - lo < 1e-12) hi = lo + 1.0;
    const std::size_t n = s.values.size();
    auto px = [&](std::size_t i) { return pad + (n > 1 ? pw * double(i) / double(n - 1) : pw / 2); };
    auto py = [&](double v) { return pad + ph * (1.0 - (v - lo) / (hi - lo)); };
    std::optional<std::pair<double, double>> prev;
    for (std::size_t i = 0; i < n; ++i) {
      if (!s.values[i]) {
        prev.reset();
        continue;
      }
      const double x = px(i), y = py(*s.values[i]);
      if (prev) draw_line(img, prev->first, prev->second, x, y, s.color);
      else draw_line(img, x - 2, y, x + 2, y, s.color);
      prev = std::make_pair(x, y);
    }
  }
  return img;
}

}  // namespace mtb
