#pragma once

#include "uvz/tensor.hpp"

namespace uvz {

// Depth convention: 0 = near, 1 = far. The transforms below are literal
// (reverse = 1 - d); flip the input first if a source uses the opposite
// sense.
inline constexpr bool kDepthNearIsZero = true;

// The four depth views consumed by the guidance network: the map resampled
// to feature resolution, its complement, and two region-smoothed variants.
struct DepthMaps {
  Tensor d_rev;
  Tensor d1;
  Tensor d3;
  Tensor d5;
};

// All functions are pure and accept (n,1,h,w) maps with values in [0,1].
Tensor reshape_nearest(const Tensor& d, int h, int w);
Tensor reverse(const Tensor& d);
Tensor region_smooth(const Tensor& d1, int k);
DepthMaps r3s(const Tensor& d, int h, int w);

}  // namespace uvz
