#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "uvz/gradcheck.hpp"
#include "uvz/losses.hpp"
#include "uvz/tensor.hpp"

using namespace uvz;

namespace {

Tensor rand_img(const Shape& s, std::uint64_t seed, double lo = 0.02,
                double hi = 0.98) {
  Rng rng(seed);
  return Tensor::uniform(s, rng, lo, hi);
}

// Direct double-precision per-window SSIM, independent of the conv path.
double ssim_ref(const Tensor& x, const Tensor& y) {
  constexpr int W = 11;
  std::array<double, W> g{};
  double s = 0;
  for (int i = 0; i < W; ++i) {
    const double d = i - W / 2;
    g[std::size_t(i)] = std::exp(-d * d / (2 * 1.5 * 1.5));
    s += g[std::size_t(i)];
  }
  const Shape sh = x.shape();
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0;
  std::int64_t count = 0;
  for (int n = 0; n < sh.n; ++n)
    for (int c = 0; c < sh.c; ++c)
      for (int oy = 0; oy + W <= sh.h; ++oy)
        for (int ox = 0; ox + W <= sh.w; ++ox) {
          double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
          for (int i = 0; i < W; ++i)
            for (int j = 0; j < W; ++j) {
              const double wgt =
                  g[std::size_t(i)] * g[std::size_t(j)] / (s * s);
              const double xv = double(x.at(n, c, oy + i, ox + j));
              const double yv = double(y.at(n, c, oy + i, ox + j));
              mx += wgt * xv;
              my += wgt * yv;
              xx += wgt * xv * xv;
              yy += wgt * yv * yv;
              xy += wgt * xv * yv;
            }
          const double sx = xx - mx * mx, sy = yy - my * my,
                       sxy = xy - mx * my;
          acc += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                 ((mx * mx + my * my + c1) * (sx + sy + c2));
          ++count;
        }
  return acc / double(count);
}

double stage1_ref(const Tensor& d, const Tensor& dg, const Tensor& xh,
                  const Tensor& x, double l1) {
  double a = 0, b = 0;
  for (std::int64_t i = 0; i < d.numel(); ++i)
    a += std::abs(double(d.data()[i]) - double(dg.data()[i]));
  for (std::int64_t i = 0; i < x.numel(); ++i)
    b += std::abs(double(xh.data()[i]) - double(x.data()[i]));
  return l1 * a / double(d.numel()) + b / double(x.numel());
}

}  // namespace

TEST_CASE("loss weight defaults and validation") {
  LossWeights w;
  CHECK(w.lambda1 == Real(3));
  CHECK(w.lambda2 == Real(0.5));
  CHECK(w.eps == Real(1e-3));
  LossWeights bad;
  bad.eps = Real(0);
  Tensor t = rand_img(Shape(1, 1, 12, 12), 1);
  CHECK_THROWS_AS(stage2_loss(t, t, bad), ConfigError);
}

TEST_CASE("stage1 pinned values") {
  Tensor d = rand_img(Shape(2, 1, 8, 8), 2);
  Tensor x = rand_img(Shape(2, 3, 8, 8), 3);
  CHECK(stage1_loss(d, d, x, x).item() == Real(0));

  Tensor dg = Tensor::full(Shape(1, 1, 4, 4), Real(0.2f));
  Tensor dd = Tensor::full(Shape(1, 1, 4, 4), Real(0.3f));
  CHECK(double(stage1_loss(dd, dg, x, x).item()) ==
        doctest::Approx(0.3).epsilon(1e-6));
}

TEST_CASE("stage1 matches a flat-loop oracle") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Tensor d = rand_img(Shape(2, 1, 6, 7), seed * 4 + 1);
    Tensor dg = rand_img(Shape(2, 1, 6, 7), seed * 4 + 2);
    Tensor xh = rand_img(Shape(2, 3, 6, 7), seed * 4 + 3);
    Tensor x = rand_img(Shape(2, 3, 6, 7), seed * 4 + 4);
    CHECK(double(stage1_loss(d, dg, xh, x).item()) ==
          doctest::Approx(stage1_ref(d, dg, xh, x, 3)).epsilon(1e-6));
  }
}

TEST_CASE("stage1 depth term scales exactly with the residual") {
  Tensor r = rand_img(Shape(1, 1, 8, 8), 9, -0.3, 0.3);
  Tensor r2(r.shape());
  for (std::int64_t i = 0; i < r.numel(); ++i)
    r2.data()[i] = r.data()[i] * Real(2);
  Tensor zero = Tensor::full(r.shape(), Real(0));
  Tensor x = rand_img(Shape(1, 3, 8, 8), 10);
  const Real a = stage1_loss(r, zero, x, x).item();
  const Real b = stage1_loss(r2, zero, x, x).item();
  CHECK(b == a * Real(2));
}

TEST_CASE("stage1 rejects mismatched pairs") {
  Tensor d = rand_img(Shape(1, 1, 8, 8), 11);
  Tensor x = rand_img(Shape(1, 3, 8, 8), 12);
  CHECK_THROWS_AS(stage1_loss(d, rand_img(Shape(1, 1, 8, 7), 13), x, x),
                  ShapeError);
  CHECK_THROWS_AS(stage1_loss(d, d, x, rand_img(Shape(1, 3, 7, 8), 14)),
                  ShapeError);
}

TEST_CASE("ssim of an image with itself is exactly one") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor x = rand_img(Shape(1, 3, 16, 16), seed + 20, 0.0, 1.0);
    CHECK(ssim(x, x).item() == Real(1));
  }
}

TEST_CASE("ssim is symmetric and bounded") {
  Tensor x = rand_img(Shape(2, 3, 14, 14), 30);
  Tensor y = rand_img(Shape(2, 3, 14, 14), 31);
  const Real a = ssim(x, y).item();
  CHECK(a == ssim(y, x).item());
  CHECK(double(a) <= 1.0);
  CHECK(double(a) >= -1.0);
}

TEST_CASE("ssim of a checkerboard and its inverse is negative") {
  Tensor x(Shape(1, 1, 16, 16));
  Tensor y(Shape(1, 1, 16, 16));
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      const Real v = Real((i + j) % 2);
      x.at(0, 0, i, j) = v;
      y.at(0, 0, i, j) = Real(1) - v;
    }
  CHECK(double(ssim(x, y).item()) < 0.0);
}

TEST_CASE("ssim matches the per-window oracle") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Shape s(1, (seed % 2) ? 3 : 1, 32, 32);
    Tensor x = rand_img(s, seed * 2 + 40, 0.0, 1.0);
    Tensor y = rand_img(s, seed * 2 + 41, 0.0, 1.0);
    CHECK(double(ssim(x, y).item()) ==
          doctest::Approx(ssim_ref(x, y)).epsilon(1e-5));
  }
}

TEST_CASE("ssim input validation") {
  Tensor x = rand_img(Shape(1, 1, 16, 16), 50);
  CHECK_THROWS_AS(ssim(x, rand_img(Shape(1, 1, 16, 15), 51)), ShapeError);
  Tensor tiny = rand_img(Shape(1, 1, 10, 16), 52);
  CHECK_THROWS_AS(ssim(tiny, tiny), ConfigError);
}

TEST_CASE("stage2 pinned values") {
  Tensor y = rand_img(Shape(2, 3, 16, 16), 60, 0.0, 1.0);
  CHECK(stage2_loss(y, y).item() == Real(1e-3));

  // constant offset: the Charbonnier part has a closed form
  Tensor a = Tensor::full(Shape(1, 3, 16, 16), Real(0.5f));
  Tensor b = Tensor::full(Shape(1, 3, 16, 16), Real(0.4f));
  const double loss = double(stage2_loss(a, b).item());
  const double sim = double(ssim(a, b).item());
  CHECK(loss - 0.5 * (1.0 - sim) ==
        doctest::Approx(std::sqrt(0.01 + 1e-6)).epsilon(1e-5));

  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Tensor p = rand_img(Shape(1, 3, 12, 12), seed + 70, 0.0, 1.0);
    Tensor q = rand_img(Shape(1, 3, 12, 12), seed + 80, 0.0, 1.0);
    CHECK(stage2_loss(p, q).item() >= Real(1e-3));
  }
}

TEST_CASE("loss gradients match finite differences") {
  // residuals are kept away from zero so the probe step never straddles
  // the |.| kink
  auto offset_from = [](const Tensor& base, std::uint64_t seed) {
    Rng rng(seed);
    Tensor out(base.shape());
    for (std::int64_t i = 0; i < base.numel(); ++i) {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      out.data()[i] =
          base.data()[i] + Real(sign * (0.05 + 0.2 * rng.uniform()));
    }
    return out;
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor d_gt = rand_img(Shape(1, 1, 8, 8), seed * 8 + 1, 0.3, 0.7);
    Tensor x_gt = rand_img(Shape(1, 3, 8, 8), seed * 8 + 3, 0.3, 0.7);
    auto r1 = check_gradients(
        "stage1",
        [&](Tape&, std::vector<Tensor>& in) {
          return stage1_loss(in[0], d_gt, in[1], x_gt);
        },
        {offset_from(d_gt, seed * 8 + 2), offset_from(x_gt, seed * 8 + 4)},
        FdOpts{.seed = seed});
    INFO(r1.detail);
    CHECK(r1.pass);

    Tensor y_gt = rand_img(Shape(1, 3, 16, 16), seed * 8 + 5);
    auto r2 = check_gradients(
        "stage2",
        [&](Tape&, std::vector<Tensor>& in) {
          return stage2_loss(in[0], y_gt);
        },
        {rand_img(Shape(1, 3, 16, 16), seed * 8 + 6)}, FdOpts{.seed = seed});
    INFO(r2.detail);
    CHECK(r2.pass);
  }
}
