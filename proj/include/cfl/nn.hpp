#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace cfl::nn {

using Mat = Eigen::MatrixXf;
using Vec = Eigen::VectorXf;

/// Feature maps are (channels x H*W) matrices, one column per pixel in
/// row-major pixel order.
struct ConvShape {
  int in_channels = 0;
  int height = 0;
  int width = 0;
  int stride = 1;
  int pad = 1;
  int kernel = 3;

  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

inline Mat im2col(const Mat& in, const ConvShape& s) {
  const int ho = s.out_height();
  const int wo = s.out_width();
  const int kk = s.kernel * s.kernel;
  Mat cols = Mat::Zero(s.in_channels * kk, ho * wo);
  for (int c = 0; c < s.in_channels; ++c) {
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        const int row = c * kk + ky * s.kernel + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= s.height) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix < 0 || ix >= s.width) continue;
            cols(row, oy * wo + ox) = in(c, iy * s.width + ix);
          }
        }
      }
    }
  }
  return cols;
}

inline Mat col2im(const Mat& cols, const ConvShape& s) {
  const int ho = s.out_height();
  const int wo = s.out_width();
  const int kk = s.kernel * s.kernel;
  Mat out = Mat::Zero(s.in_channels, s.height * s.width);
  for (int c = 0; c < s.in_channels; ++c) {
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        const int row = c * kk + ky * s.kernel + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= s.height) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix < 0 || ix >= s.width) continue;
            out(c, iy * s.width + ix) += cols(row, oy * wo + ox);
          }
        }
      }
    }
  }
  return out;
}

inline void relu_inplace(Mat& m) { m = m.cwiseMax(0.f); }

/// Zeroes `grad` wherever the post-activation value is not positive.
inline void relu_backward(Mat& grad, const Mat& activated) {
  grad = (activated.array() > 0.f).select(grad, 0.f);
}

inline float smooth_l1(float x, float beta) {
  const float a = std::abs(x);
  return a < beta ? 0.5f * a * a / beta : a - 0.5f * beta;
}

inline float smooth_l1_grad(float x, float beta) {
  const float a = std::abs(x);
  if (a < beta) return x / beta;
  return x > 0 ? 1.f : -1.f;
}

inline float sigmoid(float x) { return 1.f / (1.f + std::exp(-x)); }

/// Numerically stable binary cross-entropy with logits.
inline float bce_with_logits(float logit, float target) {
  return std::max(logit, 0.f) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

}  // namespace cfl::nn
