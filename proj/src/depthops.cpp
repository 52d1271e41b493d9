#include "uvz/depthops.hpp"

#include <algorithm>
#include <string>

#include "uvz/common.hpp"

namespace uvz {

namespace {

void require_single_channel(const Tensor& d, const char* who) {
  if (d.shape().c != 1)
    throw ShapeError(std::string(who) + ": depth map must be single-channel, got " +
                     d.shape().str());
}

void require_unit_range(const Tensor& d, const char* who) {
  const Real* p = d.data();
  for (std::int64_t i = 0; i < d.numel(); ++i)
    if (!(p[i] >= Real(0) && p[i] <= Real(1)))
      throw ContractError(std::string(who) + ": depth values must lie in [0,1]");
}

}  // namespace

Tensor reshape_nearest(const Tensor& d, int h, int w) {
  if (h <= 0 || w <= 0)
    throw ConfigError("reshape_nearest: target dims must be positive");
  require_single_channel(d, "reshape_nearest");
  return nearest_resize(d, h, w);
}

Tensor reverse(const Tensor& d) {
  require_single_channel(d, "reverse");
  require_unit_range(d, "reverse");
  Tensor out(d.shape());
  const Real* p = d.data();
  Real* q = out.data();
  for (std::int64_t i = 0; i < d.numel(); ++i) q[i] = Real(1) - p[i];
  return out;
}

Tensor region_smooth(const Tensor& d1, int k) {
  if (k <= 0) throw ConfigError("region_smooth: k must be positive");
  require_single_channel(d1, "region_smooth");
  if (k == 1) return d1.clone();
  const Shape s = d1.shape();
  const int th = (s.h + k - 1) / k;
  const int tw = (s.w + k - 1) / k;
  Tensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int ty = 0; ty < th; ++ty)
      for (int tx = 0; tx < tw; ++tx) {
        double acc = 0;
        for (int i = 0; i < k; ++i) {
          const int y = std::min(ty * k + i, s.h - 1);
          for (int j = 0; j < k; ++j)
            acc += double(d1.at(n, 0, y, std::min(tx * k + j, s.w - 1)));
        }
        const Real m = Real(acc / (double(k) * double(k)));
        for (int i = 0; i < k && ty * k + i < s.h; ++i)
          for (int j = 0; j < k && tx * k + j < s.w; ++j)
            out.at(n, 0, ty * k + i, tx * k + j) = m;
      }
  return out;
}

DepthMaps r3s(const Tensor& d, int h, int w) {
  DepthMaps m;
  m.d1 = reshape_nearest(d, h, w);
  m.d_rev = reverse(m.d1);
  m.d3 = region_smooth(m.d1, 3);
  m.d5 = region_smooth(m.d1, 5);
  return m;
}

}  // namespace uvz
