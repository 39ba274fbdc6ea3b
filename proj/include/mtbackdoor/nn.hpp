// Minimal dense building blocks: 3x3 convolution via im2col, leaky ReLU, and
// the two optimizers used in joint training (SGD with momentum, Adam).
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"

namespace mtb::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

/// Shape of a channel-major activation.
struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;
  int pixels() const { return height * width; }
};

/// Output size of a 3x3 convolution with padding 1.
inline int conv_out(int size, int stride) { return (size - 1) / stride + 1; }

/// Columns (C*9) x (H_out*W_out) for a 3x3, padding-1 convolution.
inline void im2col(const Matrix& input, Shape in, int stride, Matrix& cols) {
  const int ho = conv_out(in.height, stride), wo = conv_out(in.width, stride);
  cols.setZero(in.channels * 9, ho * wo);
  for (int c = 0; c < in.channels; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const int row = c * 9 + ky * 3 + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= in.height) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= in.width) continue;
            cols(row, oy * wo + ox) = input(c, iy * in.width + ix);
          }
        }
      }
}

/// Adjoint of im2col: scatters column gradients back onto the input.
inline void col2im(const Matrix& cols, Shape in, int stride, Matrix& grad_input) {
  const int ho = conv_out(in.height, stride), wo = conv_out(in.width, stride);
  grad_input.setZero(in.channels, in.pixels());
  for (int c = 0; c < in.channels; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const int row = c * 9 + ky * 3 + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= in.height) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= in.width) continue;
            grad_input(c, iy * in.width + ix) += cols(row, oy * wo + ox);
          }
        }
      }
}

inline double leaky(double v, double slope) { return v > 0 ? v : slope * v; }
inline double leaky_grad(double v, double slope) { return v > 0 ? 1.0 : slope; }

struct SgdConfig {
  double learning_rate = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

class Sgd {
 public:
  Sgd() = default;
  Sgd(SgdConfig cfg, std::size_t size) : cfg_(cfg), velocity_(size, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i] + cfg_.weight_decay * params[i];
      velocity_[i] = cfg_.momentum * velocity_[i] + g;
      params[i] -= cfg_.learning_rate * velocity_[i];
    }
  }
  SgdConfig& config() { return cfg_; }

 private:
  SgdConfig cfg_;
  std::vector<double> velocity_;
};

struct AdamConfig {
  double learning_rate = 0.1;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig cfg, std::size_t size) : cfg_(cfg), m_(size, 0.0), v_(size, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1 - cfg_.beta2) * grad[i] * grad[i];
      params[i] -= cfg_.learning_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.epsilon);
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace mtb::nn
