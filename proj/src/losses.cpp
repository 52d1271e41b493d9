#include "uvz/losses.hpp"

#include <array>
#include <cmath>

#include "uvz/common.hpp"

namespace uvz {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

const Tensor& gaussian_window() {
  static const Tensor w = [] {
    std::array<double, kWindow> g{};
    double s = 0;
    for (int i = 0; i < kWindow; ++i) {
      const double d = i - kWindow / 2;
      g[std::size_t(i)] = std::exp(-d * d / (2 * kSigma * kSigma));
      s += g[std::size_t(i)];
    }
    Tensor k(Shape(1, 1, kWindow, kWindow));
    for (int i = 0; i < kWindow; ++i)
      for (int j = 0; j < kWindow; ++j)
        k.at(0, 0, i, j) = Real(g[std::size_t(i)] * g[std::size_t(j)] / (s * s));
    return k;
  }();
  return w;
}

void require_weights(const LossWeights& w) {
  if (!(w.lambda1 > 0 && w.lambda2 > 0 && w.eps > 0))
    throw ConfigError("loss weights must be strictly positive");
}

Tensor charbonnier_mean(const Tensor& a, const Tensor& b, Real eps) {
  Tensor diff = sub(a, b);
  const Real e2 = Real(double(eps) * double(eps));
  return mean_all(sqrt_val(add_const(mul(diff, diff), e2)));
}

}  // namespace

Tensor ssim(const Tensor& x, const Tensor& y) {
  if (!(x.shape() == y.shape()))
    throw ShapeError("ssim: shapes differ, " + x.shape().str() + " vs " +
                     y.shape().str());
  if (x.shape().h < kWindow || x.shape().w < kWindow)
    throw ConfigError("ssim: image smaller than the 11x11 window");

  const Shape s = x.shape();
  const Shape flat(s.n * s.c, 1, s.h, s.w);
  Tensor xf = reshape(x, flat);
  Tensor yf = reshape(y, flat);
  const Tensor& g = gaussian_window();

  Tensor mx = conv2d(xf, g, nullptr, 1, 0);
  Tensor my = conv2d(yf, g, nullptr, 1, 0);
  Tensor mx2 = mul(mx, mx);
  Tensor my2 = mul(my, my);
  Tensor mxmy = mul(mx, my);
  Tensor sx = sub(conv2d(mul(xf, xf), g, nullptr, 1, 0), mx2);
  Tensor sy = sub(conv2d(mul(yf, yf), g, nullptr, 1, 0), my2);
  Tensor sxy = sub(conv2d(mul(xf, yf), g, nullptr, 1, 0), mxmy);

  const Real c1 = Real(1e-4);  // (0.01 * L)^2 with dynamic range L = 1
  const Real c2 = Real(9e-4);  // (0.03 * L)^2
  Tensor t1 = add_const(scale(mxmy, Real(2)), c1);
  Tensor t2 = add_const(scale(sxy, Real(2)), c2);
  Tensor b1 = add_const(add(mx2, my2), c1);
  Tensor b2 = add_const(add(sx, sy), c2);
  return mean_all(div(mul(t1, t2), mul(b1, b2)));
}

Tensor stage1_loss(const Tensor& d, const Tensor& d_gt, const Tensor& xhat,
                   const Tensor& x, const LossWeights& w) {
  require_weights(w);
  Tensor depth_term = mean_all(abs_val(sub(d, d_gt)));
  Tensor image_term = mean_all(abs_val(sub(xhat, x)));
  return add(scale(depth_term, w.lambda1), image_term);
}

Tensor stage2_loss(const Tensor& y, const Tensor& y_gt, const LossWeights& w) {
  require_weights(w);
  Tensor charb = charbonnier_mean(y, y_gt, w.eps);
  Tensor dissim = sub(Tensor::scalar(Real(1)), ssim(y, y_gt));
  return add(charb, scale(dissim, w.lambda2));
}

}  // namespace uvz
