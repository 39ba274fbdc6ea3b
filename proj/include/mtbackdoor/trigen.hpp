// Trigger generation, tiling (mosaicking) and bounded injection.
//
// A generator maps an attack target to a raw 3 x h x w patch. Injection turns
// the patch into a bounded perturbation eps * sigmoid(patch), tiles it over
// the image (full tiles only, zero elsewhere) and clips the sum to [0, 1].
// Patches and their gradients are stored channel-major (c, y, x).
#pragma once

#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "image_io.hpp"
#include "targets.hpp"

namespace mtb {

struct InjectionConfig {
  double epsilon = 0.05;
  int patch_height = 30;
  int patch_width = 30;
  // 2 * sigmoid - 1 instead of sigmoid, giving perturbations in [-eps, eps].
  bool centered_sigmoid = false;

  void validate() const {
    if (!(epsilon > 0 && epsilon <= 1)) throw ConfigError("epsilon must lie in (0, 1]");
    if (patch_height <= 0 || patch_width <= 0) throw ConfigError("patch size must be positive");
  }
};

struct TriggerPatch {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // 3 x height x width, raw (pre-sigmoid)
  AttackTarget target;

  double at(int c, int y, int x) const { return values[(std::size_t(c) * height + y) * width + x]; }
};

enum class GeneratorMode {
  Disentangled,  // G_r(e_r) + G_g(e_g)
  Flat,          // one affine map over a one-hot index into the target pool
};

/// Affine trigger generator(s). All parameters live in one flat vector so a
/// single optimizer can own them; blocks are addressed through offsets.
class TriggerGenerator {
 public:
  TriggerGenerator() = default;

  static TriggerGenerator disentangled(int num_classes, int patch_height, int patch_width) {
    TriggerGenerator g;
    g.mode_ = GeneratorMode::Disentangled;
    g.num_classes_ = num_classes;
    g.patch_height_ = patch_height;
    g.patch_width_ = patch_width;
    g.check_shape();
    g.params_.assign(2 * (g.patch_dim() * std::size_t(num_classes) + g.patch_dim()), 0.0);
    return g;
  }

  static TriggerGenerator flat(const TargetPool& pool, int patch_height, int patch_width) {
    TriggerGenerator g;
    g.mode_ = GeneratorMode::Flat;
    g.num_classes_ = pool.num_classes();
    g.pool_ = pool;
    g.patch_height_ = patch_height;
    g.patch_width_ = patch_width;
    g.check_shape();
    g.params_.assign(g.patch_dim() * pool.size() + g.patch_dim(), 0.0);
    return g;
  }

  GeneratorMode mode() const { return mode_; }
  int num_classes() const { return num_classes_; }
  int patch_height() const { return patch_height_; }
  int patch_width() const { return patch_width_; }
  std::size_t patch_dim() const { return std::size_t(3) * patch_height_ * patch_width_; }
  const TargetPool& pool() const { return pool_; }

  /// Width of the conditioning vector fed to each affine block.
  std::size_t input_dim() const {
    return mode_ == GeneratorMode::Disentangled ? std::size_t(num_classes_) : pool_.size();
  }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  /// PyTorch-style Linear initialisation, U(-1/sqrt(in), 1/sqrt(in)).
  void initialize(Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(input_dim()));
    for (double& p : params_) p = rng.uniform(-bound, bound);
  }

  /// Weight block b (0 = removal / flat, 1 = generation) is patch_dim x input_dim, row-major.
  std::span<double> weight(int block) { return {params_.data() + block_offset(block), weight_size()}; }
  std::span<double> bias(int block) {
    return {params_.data() + block_offset(block) + weight_size(), patch_dim()};
  }
  std::span<const double> weight(int block) const {
    return {params_.data() + block_offset(block), weight_size()};
  }
  std::span<const double> bias(int block) const {
    return {params_.data() + block_offset(block) + weight_size(), patch_dim()};
  }
  int block_count() const { return mode_ == GeneratorMode::Disentangled ? 2 : 1; }

  TriggerPatch generate_patch(const AttackTarget& t) const {
    const auto inputs = block_inputs(t);
    TriggerPatch patch{patch_height_, patch_width_, std::vector<double>(patch_dim(), 0.0), t};
    const std::size_t in = input_dim();
    for (int b = 0; b < block_count(); ++b) {
      const auto w = weight(b);
      const auto bi = bias(b);
      const auto& e = inputs[std::size_t(b)];
      for (std::size_t d = 0; d < patch_dim(); ++d) {
        double v = bi[d];
        const double* row = w.data() + d * in;
        for (std::size_t k = 0; k < in; ++k)
          if (e[k] != 0.0) v += row[k] * e[k];
        patch.values[d] += v;
      }
    }
    return patch;
  }

  /// Adds d(loss)/d(params) given d(loss)/d(patch) into `grad` (same layout as params()).
  void accumulate_gradient(const AttackTarget& t, std::span<const double> patch_grad,
                           std::span<double> grad) const {
    if (patch_grad.size() != patch_dim() || grad.size() != params_.size())
      throw ConfigError("generator gradient dimension mismatch");
    const auto inputs = block_inputs(t);
    const std::size_t in = input_dim();
    for (int b = 0; b < block_count(); ++b) {
      double* gw = grad.data() + block_offset(b);
      double* gb = gw + weight_size();
      const auto& e = inputs[std::size_t(b)];
      for (std::size_t d = 0; d < patch_dim(); ++d) {
        gb[d] += patch_grad[d];
        for (std::size_t k = 0; k < in; ++k)
          if (e[k] != 0.0) gw[d * in + k] += patch_grad[d] * e[k];
      }
    }
  }

  /// FNV-1a over the parameter bytes; used to assert frozen generators.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    const auto* bytes = reinterpret_cast<const unsigned char*>(params_.data());
    for (std::size_t i = 0; i < params_.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  void check_shape() const {
    if (num_classes_ <= 0) throw ConfigError("generator class count must be positive");
    if (patch_height_ <= 0 || patch_width_ <= 0) throw ConfigError("patch size must be positive");
  }
  std::size_t weight_size() const { return patch_dim() * input_dim(); }
  std::size_t block_offset(int block) const { return std::size_t(block) * (weight_size() + patch_dim()); }

  std::vector<std::vector<double>> block_inputs(const AttackTarget& t) const {
    if (t.num_classes != num_classes_ || int(t.removal.size()) != num_classes_ ||
        int(t.generation.size()) != num_classes_)
      throw ConfigError("target has " + std::to_string(t.num_classes) + " classes, generator expects " +
                        std::to_string(num_classes_));
    if (mode_ == GeneratorMode::Disentangled) return {t.removal, t.generation};
    const int idx = pool_.index_of(t);
    if (idx < 0) throw ConfigError("target " + describe(t) + " is not in the generator's pool");
    std::vector<double> onehot(pool_.size(), 0.0);
    onehot[std::size_t(idx)] = 1.0;
    return {onehot};
  }

  GeneratorMode mode_ = GeneratorMode::Disentangled;
  int num_classes_ = 0;
  int patch_height_ = 0;
  int patch_width_ = 0;
  TargetPool pool_;
  std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Mosaicking and injection

/// Bounded perturbation eps * sigmoid(raw) (or the centred variant), channel-major.
inline std::vector<double> bounded_perturbation(std::span<const double> raw, const InjectionConfig& cfg) {
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    out[i] = cfg.centered_sigmoid ? cfg.epsilon * (2.0 * sigmoid(raw[i]) - 1.0) : cfg.epsilon * sigmoid(raw[i]);
  return out;
}

/// Number of whole tiles along each axis; partial tiles are never placed.
inline std::pair<int, int> full_tiles(ImageSize image, int patch_height, int patch_width) {
  return {image.width / patch_width, image.height / patch_height};
}

inline bool in_full_tile(int x, int y, ImageSize image, int patch_height, int patch_width) {
  const auto [nx, ny] = full_tiles(image, patch_height, patch_width);
  return x / patch_width < nx && y / patch_height < ny;
}

/// Tiles a channel-major 3 x h x w field from the top-left corner over a
/// W x H x 3 image; uncovered strips are zero. A patch larger than the image
/// yields an all-zero field.
inline Image mosaic(std::span<const double> field, int patch_height, int patch_width, ImageSize image) {
  if (field.size() != std::size_t(3) * patch_height * patch_width)
    throw ConfigError("patch field has the wrong size for its shape");
  Image out(image.width, image.height, 0.0);
  const auto [nx, ny] = full_tiles(image, patch_height, patch_width);
  for (int y = 0; y < ny * patch_height; ++y)
    for (int x = 0; x < nx * patch_width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) =
            field[(std::size_t(c) * patch_height + y % patch_height) * patch_width + x % patch_width];
  return out;
}

inline Image mosaic(const TriggerPatch& patch, ImageSize image) {
  return mosaic(patch.values, patch.height, patch.width, image);
}

/// x' = clip(x + tile(eps * sigmoid(raw))).
inline Image inject_patch(const Image& x, const TriggerPatch& patch, const InjectionConfig& cfg) {
  const Image field = mosaic(bounded_perturbation(patch.values, cfg), patch.height, patch.width, x.size());
  Image out = x;
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = std::clamp(x.pixels[i] + field.pixels[i], 0.0, 1.0);
  return out;
}

inline Image inject(const Image& x, const TriggerGenerator& gen, const AttackTarget& t,
                    const InjectionConfig& cfg) {
  return inject_patch(x, gen.generate_patch(t), cfg);
}

/// Back-propagates d(loss)/d(x') through clipping, tiling and the sigmoid
/// bound, returning d(loss)/d(raw patch).
inline std::vector<double> injection_backward(const Image& x, const TriggerPatch& patch,
                                              const InjectionConfig& cfg, const Image& grad_dirty) {
  const int ph = patch.height, pw = patch.width;
  const auto pert = bounded_perturbation(patch.values, cfg);
  std::vector<double> grad(patch.values.size(), 0.0);
  const auto [nx, ny] = full_tiles(x.size(), ph, pw);
  for (int y = 0; y < ny * ph; ++y)
    for (int xx = 0; xx < nx * pw; ++xx)
      for (int c = 0; c < 3; ++c) {
        const std::size_t pi = (std::size_t(c) * ph + y % ph) * pw + xx % pw;
        const double v = x.at(y, xx, c) + pert[pi];
        if (v < 0.0 || v > 1.0) continue;  // clipped: no gradient
        grad[pi] += grad_dirty.at(y, xx, c);
      }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double s = sigmoid(patch.values[i]);
    const double dsig = s * (1.0 - s);
    grad[i] *= cfg.epsilon * (cfg.centered_sigmoid ? 2.0 * dsig : dsig);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json to_json(const TriggerGenerator& g) {
  nlohmann::json j{{"format", "mtbackdoor-generator-v1"},
                   {"mode", g.mode() == GeneratorMode::Disentangled ? "disentangled" : "flat"},
                   {"num_classes", g.num_classes()},
                   {"patch_height", g.patch_height()},
                   {"patch_width", g.patch_width()}};
  if (g.mode() == GeneratorMode::Disentangled) {
    const char* names[2] = {"removal", "generation"};
    for (int b = 0; b < 2; ++b) {
      const auto w = g.weight(b);
      const auto bi = g.bias(b);
      j[names[b]] = {{"weight", std::vector<double>(w.begin(), w.end())},
                     {"bias", std::vector<double>(bi.begin(), bi.end())}};
    }
  } else {
    j["pool"] = to_json(g.pool());
    const auto w = g.weight(0);
    const auto bi = g.bias(0);
    j["flat"] = {{"weight", std::vector<double>(w.begin(), w.end())},
                 {"bias", std::vector<double>(bi.begin(), bi.end())}};
  }
  return j;
}

inline TriggerGenerator generator_from_json(const nlohmann::json& j) {
  const int K = j.at("num_classes").get<int>();
  const int ph = j.at("patch_height").get<int>(), pw = j.at("patch_width").get<int>();
  TriggerGenerator g;
  std::vector<const char*> names;
  if (j.at("mode").get<std::string>() == "disentangled") {
    g = TriggerGenerator::disentangled(K, ph, pw);
    names = {"removal", "generation"};
  } else {
    g = TriggerGenerator::flat(pool_from_json(j.at("pool")), ph, pw);
    names = {"flat"};
  }
  for (int b = 0; b < g.block_count(); ++b) {
    const auto w = j.at(names[std::size_t(b)]).at("weight").get<std::vector<double>>();
    const auto bi = j.at(names[std::size_t(b)]).at("bias").get<std::vector<double>>();
    if (w.size() != g.weight(b).size() || bi.size() != g.bias(b).size())
      throw ParseError("generator checkpoint block '" + std::string(names[std::size_t(b)]) + "' has the wrong size");
    std::copy(w.begin(), w.end(), g.weight(b).begin());
    std::copy(bi.begin(), bi.end(), g.bias(b).begin());
  }
  return g;
}

/// Visualisation of a raw patch, sigmoid-mapped into [0, 1].
inline Image patch_image(const TriggerPatch& patch) {
  Image img(patch.width, patch.height);
  for (int y = 0; y < patch.height; ++y)
    for (int x = 0; x < patch.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = sigmoid(patch.at(c, y, x));
  return img;
}

inline void export_patch_png(const std::filesystem::path& path, const TriggerPatch& patch) {
  write_png(path, patch_image(patch));
}

}  // namespace mtb
