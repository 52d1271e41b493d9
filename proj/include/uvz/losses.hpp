#pragma once

#include "uvz/tensor.hpp"

namespace uvz {

struct LossWeights {
  Real lambda1 = Real(3);     // depth term weight in the joint loss
  Real lambda2 = Real(0.5);   // dissimilarity weight in the refinement loss
  Real eps = Real(1e-3);      // Charbonnier smoothing constant
};

// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), valid mode,
// averaged across windows, channels and batch. Returns a scalar tensor on
// the inputs' tape; ssim(x, x) is exactly 1.
Tensor ssim(const Tensor& x, const Tensor& y);

// lambda1 * mean|d - d_gt| + mean|xhat - x|
Tensor stage1_loss(const Tensor& d, const Tensor& d_gt, const Tensor& xhat,
                   const Tensor& x, const LossWeights& w = {});

// mean Charbonnier(y - y_gt) + lambda2 * (1 - ssim(y, y_gt));
// equals exactly eps when y == y_gt.
Tensor stage2_loss(const Tensor& y, const Tensor& y_gt,
                   const LossWeights& w = {});

}  // namespace uvz
