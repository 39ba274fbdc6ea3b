// Single-stage grid detector used as the victim model.
//
// Backbone: a stack of 3x3 convolutions (padding 1) with leaky ReLU; a 1x1
// head then predicts, per grid cell, one objectness logit, four box logits
// and K class logits. The cell containing a box centre owns that box.
#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "nn.hpp"

namespace mtb {

struct GridDetectorConfig {
  int num_classes = 4;
  int grid = 7;
  ImageSize image_size{56, 56};
  std::vector<int> channels{32, 64, 64, 128};
  std::vector<int> strides{1, 2, 2, 2};
  double leaky_slope = 0.1;
  double score_threshold = 0.3;  // tau
  double nms_iou = 0.5;
  double lambda_obj = 1.0;
  double lambda_box = 5.0;
  double lambda_cls = 1.0;
  double smooth_l1_beta = 0.05;

  int channels_per_cell() const { return 5 + num_classes; }

  void validate() const {
    if (num_classes <= 0) throw ConfigError("detector class count must be positive");
    if (grid < 1) throw ConfigError("grid must be at least 1x1");
    if (!(score_threshold > 0 && score_threshold < 1)) throw ConfigError("tau must lie in (0, 1)");
    if (channels.empty() || channels.size() != strides.size())
      throw ConfigError("backbone channels and strides must be nonempty and the same length");
    int h = image_size.height, w = image_size.width;
    for (int s : strides) {
      if (s < 1) throw ConfigError("strides must be positive");
      h = nn::conv_out(h, s);
      w = nn::conv_out(w, s);
    }
    if (h != grid || w != grid)
      throw ConfigError("backbone maps " + std::to_string(image_size.width) + "x" +
                        std::to_string(image_size.height) + " to " + std::to_string(w) + "x" +
                        std::to_string(h) + ", expected the " + std::to_string(grid) + "x" +
                        std::to_string(grid) + " grid");
  }
};

/// Raw head output, channel-major: (5 + K) x G x G.
/// Channel 0 = objectness, 1..4 = box (x offset, y offset, width, height), 5.. = class logits.
struct RawPredictions {
  int grid = 0;
  int channels = 0;
  std::vector<double> values;

  RawPredictions() = default;
  RawPredictions(int g, int ch) : grid(g), channels(ch), values(std::size_t(g) * g * ch, 0.0) {}

  double& at(int gy, int gx, int ch) { return values[(std::size_t(ch) * grid + gy) * grid + gx]; }
  double at(int gy, int gx, int ch) const { return values[(std::size_t(ch) * grid + gy) * grid + gx]; }
};

/// Greedy per-class non-maximum suppression over records already sorted by
/// priority; a record is dropped when IoU with a kept same-class record exceeds `threshold`.
inline std::vector<DetectionRecord> nms(const std::vector<DetectionRecord>& sorted, double threshold) {
  std::vector<DetectionRecord> kept;
  for (const auto& r : sorted) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.class_id == r.class_id && iou(k.box, r.box) > threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(r);
  }
  return kept;
}

/// Decodes raw predictions; scores below `threshold` are dropped, then NMS.
/// Output order: descending score, ties by cell index.
inline DetectionSet decode(const RawPredictions& raw, const GridDetectorConfig& cfg, double threshold) {
  const int G = raw.grid, K = cfg.num_classes;
  const double cw = double(cfg.image_size.width) / G, ch = double(cfg.image_size.height) / G;
  struct Candidate {
    DetectionRecord rec;
    int cell;
  };
  std::vector<Candidate> cands;
  for (int gy = 0; gy < G; ++gy)
    for (int gx = 0; gx < G; ++gx) {
      double max_logit = raw.at(gy, gx, 5);
      int best = 0;
      for (int c = 1; c < K; ++c)
        if (raw.at(gy, gx, 5 + c) > max_logit) max_logit = raw.at(gy, gx, 5 + c), best = c;
      double denom = 0;
      for (int c = 0; c < K; ++c) denom += std::exp(raw.at(gy, gx, 5 + c) - max_logit);
      const double score = sigmoid(raw.at(gy, gx, 0)) / denom;
      if (!(score >= threshold)) continue;
      const double cx = (gx + sigmoid(raw.at(gy, gx, 1))) * cw;
      const double cy = (gy + sigmoid(raw.at(gy, gx, 2))) * ch;
      const double w = sigmoid(raw.at(gy, gx, 3)) * cfg.image_size.width;
      const double h = sigmoid(raw.at(gy, gx, 4)) * cfg.image_size.height;
      const BoundingBox box = clamp_box({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, cfg.image_size);
      if (!box.valid()) continue;
      cands.push_back({{box, best, std::min(score, 1.0)}, gy * G + gx});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.rec.score != b.rec.score) return a.rec.score > b.rec.score;
    return a.cell < b.cell;
  });
  std::vector<DetectionRecord> sorted;
  for (const auto& c : cands) sorted.push_back(c.rec);
  return {nms(sorted, cfg.nms_iou), cfg.image_size};
}

inline DetectionSet decode(const RawPredictions& raw, const GridDetectorConfig& cfg) {
  return decode(raw, cfg, cfg.score_threshold);
}

struct LossTerms {
  double objectness = 0;
  double box = 0;
  double classification = 0;
  double total = 0;
};

/// Cell index owning each ground-truth record (-1 when a larger box in the
/// same cell took it).
inline std::vector<int> assign_cells(const DetectionSet& y, const GridDetectorConfig& cfg) {
  const int G = cfg.grid;
  const double cw = double(cfg.image_size.width) / G, ch = double(cfg.image_size.height) / G;
  std::vector<int> owner(std::size_t(G) * G, -1);
  for (std::size_t i = 0; i < y.records.size(); ++i) {
    const auto& b = y.records[i].box;
    const int gx = std::clamp(int(std::floor(b.center_x() / cw)), 0, G - 1);
    const int gy = std::clamp(int(std::floor(b.center_y() / ch)), 0, G - 1);
    int& o = owner[std::size_t(gy * G + gx)];
    if (o < 0 || b.area() > y.records[std::size_t(o)].box.area()) o = int(i);
  }
  std::vector<int> cell_of(y.records.size(), -1);
  for (int cell = 0; cell < G * G; ++cell)
    if (owner[std::size_t(cell)] >= 0) cell_of[std::size_t(owner[std::size_t(cell)])] = cell;
  return cell_of;
}

/// Detection loss and, if `grad` is non-null, its gradient w.r.t. raw.
inline LossTerms detection_loss(const RawPredictions& raw, const DetectionSet& y, const GridDetectorConfig& cfg,
                                RawPredictions* grad = nullptr) {
  const int G = raw.grid, K = cfg.num_classes;
  const double cw = double(cfg.image_size.width) / G, ch = double(cfg.image_size.height) / G;
  if (grad) *grad = RawPredictions(G, raw.channels);
  const auto cell_of = assign_cells(y, cfg);
  std::vector<int> target(std::size_t(G) * G, -1);
  for (std::size_t i = 0; i < cell_of.size(); ++i)
    if (cell_of[i] >= 0) target[std::size_t(cell_of[i])] = int(i);

  LossTerms terms;
  const double beta = cfg.smooth_l1_beta;
  for (int gy = 0; gy < G; ++gy)
    for (int gx = 0; gx < G; ++gx) {
      const int owner = target[std::size_t(gy * G + gx)];
      const double z = raw.at(gy, gx, 0);
      const double t = owner >= 0 ? 1.0 : 0.0;
      terms.objectness += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
      if (grad) grad->at(gy, gx, 0) = cfg.lambda_obj * (sigmoid(z) - t);
      if (owner < 0) continue;

      const auto& rec = y.records[std::size_t(owner)];
      const double goal[4] = {rec.box.center_x() / cw - gx, rec.box.center_y() / ch - gy,
                              rec.box.width() / cfg.image_size.width, rec.box.height() / cfg.image_size.height};
      for (int k = 0; k < 4; ++k) {
        const double s = sigmoid(raw.at(gy, gx, 1 + k));
        const double d = s - goal[k];
        const double ad = std::abs(d);
        terms.box += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
        if (grad) {
          const double dd = ad < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
          grad->at(gy, gx, 1 + k) = cfg.lambda_box * dd * s * (1 - s);
        }
      }

      double m = raw.at(gy, gx, 5);
      for (int c = 1; c < K; ++c) m = std::max(m, raw.at(gy, gx, 5 + c));
      double denom = 0;
      for (int c = 0; c < K; ++c) denom += std::exp(raw.at(gy, gx, 5 + c) - m);
      terms.classification += m + std::log(denom) - raw.at(gy, gx, 5 + rec.class_id);
      if (grad)
        for (int c = 0; c < K; ++c)
          grad->at(gy, gx, 5 + c) =
              cfg.lambda_cls * (std::exp(raw.at(gy, gx, 5 + c) - m) / denom - (c == rec.class_id ? 1.0 : 0.0));
    }
  terms.total = cfg.lambda_obj * terms.objectness + cfg.lambda_box * terms.box + cfg.lambda_cls * terms.classification;
  return terms;
}

inline double loss(const RawPredictions& raw, const DetectionSet& y, const GridDetectorConfig& cfg) {
  return detection_loss(raw, y, cfg).total;
}

class GridDetector {
 public:
  /// Intermediate activations kept for the backward pass.
  struct Workspace {
    std::vector<nn::Matrix> inputs;  // input to each backbone layer
    std::vector<nn::Matrix> cols;
    std::vector<nn::Matrix> pre;     // pre-activation outputs
    nn::Matrix features;             // last backbone activation (masked)
  };

  GridDetector() = default;
  explicit GridDetector(GridDetectorConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::size_t offset = 0;
    nn::Shape s{3, cfg_.image_size.height, cfg_.image_size.width};
    for (std::size_t l = 0; l < cfg_.channels.size(); ++l) {
      const int out = cfg_.channels[l];
      layers_.push_back({s, cfg_.strides[l], out, offset});
      offset += std::size_t(out) * s.channels * 9 + std::size_t(out);
      s = {out, nn::conv_out(s.height, cfg_.strides[l]), nn::conv_out(s.width, cfg_.strides[l])};
    }
    head_offset_ = offset;
    offset += std::size_t(cfg_.channels_per_cell()) * s.channels + std::size_t(cfg_.channels_per_cell());
    params_.assign(offset, 0.0);
    channel_mask_.assign(std::size_t(cfg_.channels.back()), 1);
  }

  const GridDetectorConfig& config() const { return cfg_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  const std::vector<char>& channel_mask() const { return channel_mask_; }
  std::size_t feature_channels() const { return channel_mask_.size(); }

  /// He-normal backbone, small head weights and a negative objectness prior.
  void initialize(Rng& rng) {
    std::fill(params_.begin(), params_.end(), 0.0);
    for (const auto& L : layers_) {
      const std::size_t fan_in = std::size_t(L.in.channels) * 9;
      const double sd = std::sqrt(2.0 / fan_in);
      for (std::size_t i = 0; i < std::size_t(L.out) * fan_in; ++i) params_[L.offset + i] = sd * rng.normal();
    }
    const int C = cfg_.channels.back(), P = cfg_.channels_per_cell();
    for (int i = 0; i < P * C; ++i) params_[head_offset_ + std::size_t(i)] = 0.01 * rng.normal();
    params_[head_offset_ + std::size_t(P * C)] = -4.0;  // objectness bias
  }

  /// Zeroes a backbone output channel of the last layer and keeps it masked.
  void prune_channel(int channel) {
    channel_mask_.at(std::size_t(channel)) = 0;
    const auto& L = layers_.back();
    const std::size_t fan_in = std::size_t(L.in.channels) * 9;
    for (std::size_t i = 0; i < fan_in; ++i) params_[L.offset + std::size_t(channel) * fan_in + i] = 0.0;
    params_[L.offset + std::size_t(L.out) * fan_in + std::size_t(channel)] = 0.0;
  }
  void set_channel_mask(std::vector<char> mask) {
    if (mask.size() != channel_mask_.size()) throw ConfigError("channel mask has the wrong size");
    for (std::size_t c = 0; c < mask.size(); ++c)
      if (!mask[c]) prune_channel(int(c));
  }

  RawPredictions forward(const Image& x) const {
    Workspace ws;
    return forward(x, ws);
  }

  RawPredictions forward(const Image& x, Workspace& ws) const {
    if (x.width != cfg_.image_size.width || x.height != cfg_.image_size.height)
      throw ConfigError("image is " + std::to_string(x.width) + "x" + std::to_string(x.height) +
                        ", detector expects " + std::to_string(cfg_.image_size.width) + "x" +
                        std::to_string(cfg_.image_size.height));
    const std::size_t n = layers_.size();
    ws.inputs.resize(n);
    ws.cols.resize(n);
    ws.pre.resize(n);
    nn::Matrix act(3, x.width * x.height);
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx)
        for (int c = 0; c < 3; ++c) act(c, y * x.width + xx) = x.at(y, xx, c);

    for (std::size_t l = 0; l < n; ++l) {
      const auto& L = layers_[l];
      ws.inputs[l] = std::move(act);
      nn::im2col(ws.inputs[l], L.in, L.stride, ws.cols[l]);
      const std::size_t fan_in = std::size_t(L.in.channels) * 9;
      nn::ConstMatrixMap W(params_.data() + L.offset, L.out, Eigen::Index(fan_in));
      Eigen::Map<const Eigen::VectorXd> b(params_.data() + L.offset + std::size_t(L.out) * fan_in, L.out);
      ws.pre[l].noalias() = W * ws.cols[l];
      ws.pre[l].colwise() += b;
      act = ws.pre[l].unaryExpr([s = cfg_.leaky_slope](double v) { return nn::leaky(v, s); });
    }
    for (std::size_t c = 0; c < channel_mask_.size(); ++c)
      if (!channel_mask_[c]) act.row(Eigen::Index(c)).setZero();
    ws.features = std::move(act);

    const int C = cfg_.channels.back(), P = cfg_.channels_per_cell(), G = cfg_.grid;
    nn::ConstMatrixMap Wh(params_.data() + head_offset_, P, C);
    Eigen::Map<const Eigen::VectorXd> bh(params_.data() + head_offset_ + std::size_t(P * C), P);
    nn::Matrix out = Wh * ws.features;
    out.colwise() += bh;
    RawPredictions raw(G, P);
    std::copy(out.data(), out.data() + out.size(), raw.values.begin());
    return raw;
  }

  /// Accumulates d(loss)/d(params) into `grad`; writes d(loss)/d(image) when requested.
  void backward(const Workspace& ws, const RawPredictions& grad_raw, std::span<double> grad,
                Image* grad_image = nullptr) const {
    if (grad.size() != params_.size()) throw ConfigError("parameter gradient has the wrong size");
    const int C = cfg_.channels.back(), P = cfg_.channels_per_cell(), G = cfg_.grid;
    nn::ConstMatrixMap dOut(grad_raw.values.data(), P, G * G);
    nn::ConstMatrixMap Wh(params_.data() + head_offset_, P, C);
    nn::MatrixMap dWh(grad.data() + head_offset_, P, C);
    Eigen::Map<Eigen::VectorXd> dbh(grad.data() + head_offset_ + std::size_t(P * C), P);
    dWh.noalias() += dOut * ws.features.transpose();
    dbh += dOut.rowwise().sum();
    nn::Matrix dAct = Wh.transpose() * dOut;
    for (std::size_t c = 0; c < channel_mask_.size(); ++c)
      if (!channel_mask_[c]) dAct.row(Eigen::Index(c)).setZero();

    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& L = layers_[l];
      const std::size_t fan_in = std::size_t(L.in.channels) * 9;
      nn::Matrix dPre = dAct.cwiseProduct(
          ws.pre[l].unaryExpr([s = cfg_.leaky_slope](double v) { return nn::leaky_grad(v, s); }));
      nn::MatrixMap dW(grad.data() + L.offset, L.out, Eigen::Index(fan_in));
      Eigen::Map<Eigen::VectorXd> db(grad.data() + L.offset + std::size_t(L.out) * fan_in, L.out);
      dW.noalias() += dPre * ws.cols[l].transpose();
      db += dPre.rowwise().sum();
      if (l == 0 && !grad_image) break;
      nn::ConstMatrixMap W(params_.data() + L.offset, L.out, Eigen::Index(fan_in));
      nn::Matrix dCols = W.transpose() * dPre;
      nn::col2im(dCols, L.in, L.stride, dAct);
    }
    if (grad_image) {
      *grad_image = Image(cfg_.image_size.width, cfg_.image_size.height);
      const int w = cfg_.image_size.width;
      for (int y = 0; y < cfg_.image_size.height; ++y)
        for (int x = 0; x < w; ++x)
          for (int c = 0; c < 3; ++c) grad_image->at(y, x, c) = dAct(c, y * w + x);
    }
  }

  DetectionSet predict(const Image& x) const { return decode(forward(x), cfg_); }
  DetectionSet predict(const Image& x, double threshold) const { return decode(forward(x), cfg_, threshold); }

 private:
  struct Layer {
    nn::Shape in;
    int stride;
    int out;
    std::size_t offset;
  };

  GridDetectorConfig cfg_;
  std::vector<Layer> layers_;
  std::size_t head_offset_ = 0;
  std::vector<double> params_;
  std::vector<char> channel_mask_;
};

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json to_json(const GridDetectorConfig& c) {
  return {{"num_classes", c.num_classes},
          {"grid", c.grid},
          {"image_width", c.image_size.width},
          {"image_height", c.image_size.height},
          {"channels", c.channels},
          {"strides", c.strides},
          {"leaky_slope", c.leaky_slope},
          {"score_threshold", c.score_threshold},
          {"nms_iou", c.nms_iou},
          {"lambda_obj", c.lambda_obj},
          {"lambda_box", c.lambda_box},
          {"lambda_cls", c.lambda_cls},
          {"smooth_l1_beta", c.smooth_l1_beta}};
}

inline GridDetectorConfig detector_config_from_json(const nlohmann::json& j) {
  GridDetectorConfig c;
  c.num_classes = j.value("num_classes", c.num_classes);
  c.grid = j.value("grid", c.grid);
  c.image_size.width = j.value("image_width", c.image_size.width);
  c.image_size.height = j.value("image_height", c.image_size.height);
  c.channels = j.value("channels", c.channels);
  c.strides = j.value("strides", c.strides);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.score_threshold = j.value("score_threshold", c.score_threshold);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  c.lambda_obj = j.value("lambda_obj", c.lambda_obj);
  c.lambda_box = j.value("lambda_box", c.lambda_box);
  c.lambda_cls = j.value("lambda_cls", c.lambda_cls);
  c.smooth_l1_beta = j.value("smooth_l1_beta", c.smooth_l1_beta);
  return c;
}

inline nlohmann::json to_json(const GridDetector& d, long step = 0) {
  std::vector<int> mask(d.channel_mask().begin(), d.channel_mask().end());
  return {{"format", "mtbackdoor-detector-v1"},
          {"config", to_json(d.config())},
          {"step", step},
          {"channel_mask", mask},
          {"params", d.params()}};
}

inline GridDetector detector_from_json(const nlohmann::json& j, long* step = nullptr) {
  GridDetector d(detector_config_from_json(j.at("config")));
  const auto params = j.at("params").get<std::vector<double>>();
  if (params.size() != d.params().size()) throw ParseError("detector checkpoint has the wrong parameter count");
  d.params() = params;
  if (j.contains("channel_mask")) {
    const auto m = j["channel_mask"].get<std::vector<int>>();
    d.set_channel_mask(std::vector<char>(m.begin(), m.end()));
  }
  if (step) *step = j.value("step", 0L);
  return d;
}

}  // namespace mtb
