#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "uvz/losses.hpp"
#include "uvz/metrics.hpp"
#include "uvz/tensor.hpp"

using namespace uvz;

namespace {

Tensor rand_image(int h, int w, std::uint64_t seed, double lo = 0.0,
                  double hi = 1.0) {
  Rng rng(seed);
  return Tensor::uniform(Shape(1, 3, h, w), rng, lo, hi);
}

// image on the 1/256 grid so adding 0.25 stays exact in float
Tensor quantized_image(int h, int w, std::uint64_t seed) {
  Tensor x = rand_image(h, w, seed, 0.0, 0.5);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    x.data()[i] = Real(std::floor(double(x.data()[i]) * 256.0) / 256.0);
  return x;
}

double relative_gap(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

// ---- oracles: value-level reimplementations with physical padding ----

std::vector<double> padded_plane(const Tensor& x, int c, int ph, int pw) {
  const Shape s = x.shape();
  std::vector<double> out(std::size_t(ph) * std::size_t(pw));
  for (int i = 0; i < ph; ++i)
    for (int j = 0; j < pw; ++j) {
      const int si = std::min(i, s.h - 1), sj = std::min(j, s.w - 1);
      out[std::size_t(i) * std::size_t(pw) + std::size_t(j)] =
          double(x.data()[(std::int64_t(c) * s.h + si) * s.w + sj]);
    }
  return out;
}

double oracle_uicm(const Tensor& x) {
  const Shape s = x.shape();
  const std::int64_t npx = std::int64_t(s.h) * s.w;
  std::vector<double> rg, yb;
  for (std::int64_t i = 0; i < npx; ++i) {
    const double R = 255.0 * double(x.data()[i]);
    const double G = 255.0 * double(x.data()[npx + i]);
    const double B = 255.0 * double(x.data()[2 * npx + i]);
    rg.push_back(R - G);
    yb.push_back((R + G) / 2.0 - B);
  }
  auto stat = [](const std::vector<double>& raw) {
    std::vector<double> sorted = raw;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t t = std::size_t(0.1 * double(raw.size()));
    double acc = 0.0;
    std::size_t kept = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (i >= t && i < sorted.size() - t) {
        acc += sorted[i];
        ++kept;
      }
    const double mu = acc / double(kept);
    double var = 0.0;
    for (double v : raw) var += (v - mu) * (v - mu);
    return std::make_pair(mu, var / double(raw.size()));
  };
  const auto [mr, vr] = stat(rg);
  const auto [my, vy] = stat(yb);
  return -0.0268 * std::sqrt(mr * mr + my * my) + 0.1586 * std::sqrt(vr + vy);
}

double oracle_uism(const Tensor& x) {
  const Shape s = x.shape();
  const int ph = (s.h + 7) / 8 * 8, pw = (s.w + 7) / 8 * 8;
  const double weights[3] = {0.299, 0.587, 0.114};
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    // sobel magnitude on a physically replicated border
    std::vector<double> plane = padded_plane(x, c, s.h, s.w);
    std::vector<double> wide((std::size_t(s.h) + 2) * (std::size_t(s.w) + 2));
    for (int i = -1; i <= s.h; ++i)
      for (int j = -1; j <= s.w; ++j) {
        const int si = std::clamp(i, 0, s.h - 1);
        const int sj = std::clamp(j, 0, s.w - 1);
        wide[std::size_t(i + 1) * std::size_t(s.w + 2) + std::size_t(j + 1)] =
            plane[std::size_t(si) * std::size_t(s.w) + std::size_t(sj)];
      }
    std::vector<double> edge(std::size_t(s.h) * std::size_t(s.w));
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        auto at = [&](int a, int b) {
          return wide[std::size_t(i + a) * std::size_t(s.w + 2) +
                      std::size_t(j + b)];
        };
        const double gx = at(0, 0) + 2 * at(1, 0) + at(2, 0) - at(0, 2) -
                          2 * at(1, 2) - at(2, 2);
        const double gy = at(0, 0) + 2 * at(0, 1) + at(0, 2) - at(2, 0) -
                          2 * at(2, 1) - at(2, 2);
        edge[std::size_t(i) * std::size_t(s.w) + std::size_t(j)] =
            std::sqrt(gx * gx + gy * gy) *
            plane[std::size_t(i) * std::size_t(s.w) + std::size_t(j)];
      }
    // pad the edge map and accumulate block log-ratios
    std::vector<double> padded(std::size_t(ph) * std::size_t(pw));
    for (int i = 0; i < ph; ++i)
      for (int j = 0; j < pw; ++j)
        padded[std::size_t(i) * std::size_t(pw) + std::size_t(j)] =
            edge[std::size_t(std::min(i, s.h - 1)) * std::size_t(s.w) +
                 std::size_t(std::min(j, s.w - 1))];
    double sum = 0.0;
    for (int bi = 0; bi < ph / 8; ++bi)
      for (int bj = 0; bj < pw / 8; ++bj) {
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            const double v = padded[std::size_t(bi * 8 + i) *
                                        std::size_t(pw) +
                                    std::size_t(bj * 8 + j)];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
        if (lo > 0.0) sum += std::log(hi / lo);
      }
    total += weights[c] * 2.0 / (double(ph / 8) * double(pw / 8)) * sum;
  }
  return total;
}

double oracle_uiconm(const Tensor& x) {
  const Shape s = x.shape();
  const int ph = (s.h + 7) / 8 * 8, pw = (s.w + 7) / 8 * 8;
  std::vector<double> planes[3];
  for (int c = 0; c < 3; ++c) planes[c] = padded_plane(x, c, ph, pw);
  double sum = 0.0;
  for (int bi = 0; bi < ph / 8; ++bi)
    for (int bj = 0; bj < pw / 8; ++bj) {
      double lo = std::numeric_limits<double>::infinity();
      double hi = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            const double v =
                planes[c][std::size_t(bi * 8 + i) * std::size_t(pw) +
                          std::size_t(bj * 8 + j)];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
      if (hi > lo && hi + lo > 0.0) {
        const double m = (hi - lo) / (hi + lo);
        sum -= m * std::log(m);
      }
    }
  return sum / (double(ph / 8) * double(pw / 8));
}

}  // namespace

TEST_CASE("mse and psnr basics") {
  Tensor x = rand_image(9, 13, 1);
  CHECK(mse(x, x) == 0.0);
  CHECK(psnr(x, x) == std::numeric_limits<double>::infinity());

  Tensor lo = Tensor::full(Shape(1, 3, 8, 8), Real(0.5));
  Tensor hi = Tensor::full(Shape(1, 3, 8, 8), Real(0.5 + 1.0 / 255.0));
  const double d = double(hi.data()[0]) - double(lo.data()[0]);
  CHECK(mse(lo, hi) == doctest::Approx(d * d).epsilon(1e-12));
  CHECK(psnr(lo, hi) ==
        doctest::Approx(20.0 * std::log10(255.0)).epsilon(1e-6));

  CHECK_THROWS_AS(mse(x, rand_image(9, 12, 2)), ShapeError);
  CHECK_THROWS_AS(psnr(x, rand_image(8, 13, 2)), ShapeError);
}

TEST_CASE("psnr/mse definitional identity") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Tensor x = rand_image(11, 7, seed * 2 + 1);
    Tensor y = rand_image(11, 7, seed * 2 + 2);
    const double m = mse(x, y);
    REQUIRE(m > 0.0);
    CHECK(std::abs(psnr(x, y) - 10.0 * std::log10(1.0 / m)) < 1e-9);
  }
}

TEST_CASE("mse is order-independent across the batch") {
  Rng rng(77);
  Tensor a(Shape(2, 3, 6, 6)), b(Shape(2, 3, 6, 6));
  Tensor a2(Shape(2, 3, 6, 6)), b2(Shape(2, 3, 6, 6));
  const std::int64_t img = 3 * 6 * 6;
  for (std::int64_t i = 0; i < 2 * img; ++i) {
    a.data()[i] = Real(rng.uniform());
    b.data()[i] = Real(rng.uniform());
  }
  for (std::int64_t i = 0; i < img; ++i) {
    a2.data()[i] = a.data()[img + i];
    a2.data()[img + i] = a.data()[i];
    b2.data()[i] = b.data()[img + i];
    b2.data()[img + i] = b.data()[i];
  }
  CHECK(relative_gap(mse(a, b), mse(a2, b2)) < 1e-12);
}

TEST_CASE("ssim metric matches the loss value and is 1 at identity") {
  Tensor x = rand_image(16, 16, 5);
  Tensor y = rand_image(16, 16, 6);
  CHECK(ssim_index(x, x) == 1.0);
  CHECK(ssim_index(x, y) == double(ssim(x, y).item()));
}

TEST_CASE("colorfulness: gray, fixed chroma, brightness invariance") {
  Rng rng(9);
  Tensor gray(Shape(1, 3, 10, 14));
  for (int i = 0; i < 10 * 14; ++i) {
    const Real v = Real(rng.uniform());
    gray.data()[i] = v;
    gray.data()[10 * 14 + i] = v;
    gray.data()[2 * 10 * 14 + i] = v;
  }
  CHECK(uicm(gray) == 0.0);

  // constant chroma, zero variance: closed form -0.0268 * 255 * |R-G|
  Tensor flat(Shape(1, 3, 8, 8));
  for (int i = 0; i < 64; ++i) {
    flat.data()[i] = Real(0.5);
    flat.data()[64 + i] = Real(0.3);
    flat.data()[128 + i] = Real(0.4);  // (R+G)/2, so YB = 0
  }
  const double rg = 255.0 * (double(Real(0.5)) - double(Real(0.3)));
  CHECK(uicm(flat) == doctest::Approx(-0.0268 * rg).epsilon(1e-12));

  Tensor base = quantized_image(12, 9, 13);
  Tensor shifted = base.clone();
  for (std::int64_t i = 0; i < shifted.numel(); ++i)
    shifted.data()[i] = Real(double(shifted.data()[i]) + 0.25);
  CHECK(uicm(shifted) == uicm(base));

  CHECK_THROWS_AS(uicm(Tensor(Shape(1, 1, 8, 8))), ShapeError);
  CHECK_THROWS_AS(uicm(Tensor(Shape(2, 3, 8, 8))), ShapeError);
}

TEST_CASE("colorfulness matches the sort-and-trim oracle") {
  const int dims[][2] = {{8, 8}, {13, 19}, {16, 24}, {7, 31}};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto& d = dims[seed % 4];
    Tensor x = rand_image(d[0], d[1], 1000 + seed);
    CAPTURE(seed);
    CHECK(relative_gap(uicm(x), oracle_uicm(x)) < 1e-6);
  }
}

TEST_CASE("sharpness: constant image scores zero, oracle agreement") {
  CHECK(uism(Tensor::full(Shape(1, 3, 16, 16), Real(0.7))) == 0.0);

  const int dims[][2] = {{8, 8}, {13, 19}, {16, 24}, {9, 8}};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto& d = dims[seed % 4];
    Tensor x = rand_image(d[0], d[1], 2000 + seed, 0.05, 0.95);
    CAPTURE(seed);
    CHECK(relative_gap(uism(x), oracle_uism(x)) < 1e-6);
  }

  // ratios inside blocks are scale free
  Tensor x = rand_image(16, 16, 77, 0.1, 0.9);
  Tensor half = x.clone();
  for (std::int64_t i = 0; i < half.numel(); ++i)
    half.data()[i] = Real(0.5) * half.data()[i];
  CHECK(relative_gap(uism(x), uism(half)) < 1e-6);
}

TEST_CASE("contrast: degenerate blocks, closed form, oracle agreement") {
  CHECK(uiconm(Tensor::full(Shape(1, 3, 8, 8), Real(0.4))) == 0.0);
  CHECK(uiconm(Tensor(Shape(1, 3, 8, 8))) == 0.0);  // all black

  // one bright pixel in an otherwise flat 8x8 image
  Tensor one = Tensor::full(Shape(1, 3, 8, 8), Real(0.25));
  one.data()[0] = Real(0.75);
  const double m = (0.75 - 0.25) / (0.75 + 0.25);
  CHECK(uiconm(one) == doctest::Approx(-m * std::log(m)).epsilon(1e-9));

  const int dims[][2] = {{8, 8}, {13, 19}, {16, 24}, {25, 10}};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto& d = dims[seed % 4];
    Tensor x = rand_image(d[0], d[1], 3000 + seed);
    CAPTURE(seed);
    CHECK(relative_gap(uiconm(x), oracle_uiconm(x)) < 1e-6);
  }
}

TEST_CASE("uiqm combines the components with the standard weights") {
  Tensor x = rand_image(16, 16, 4);
  CHECK(uiqm(x) ==
        0.0282 * uicm(x) + 0.2953 * uism(x) + 3.5753 * uiconm(x));
  Tensor gray = Tensor::full(Shape(1, 3, 8, 8), Real(0.5));
  CHECK(uiqm(gray) == 0.0);
}

TEST_CASE("contrast stretching raises uiqm on a low-contrast patch") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor x = rand_image(16, 16, 500 + seed, 0.45, 0.55);
    Tensor stretched = x.clone();
    for (std::int64_t i = 0; i < stretched.numel(); ++i)
      stretched.data()[i] =
          Real(0.5 + 3.0 * (double(stretched.data()[i]) - 0.5));
    CAPTURE(seed);
    CHECK(uiqm(stretched) > uiqm(x));
  }
}

TEST_CASE("report means and csv layout") {
  MetricReport rep;
  MetricRow a;
  a.image = "a.ppm";
  a.has_ref = true;
  a.psnr = 30.0;
  a.mse = 0.001;
  a.ssim = 0.75;
  a.uicm = 1.5;
  a.uism = 2.0;
  a.uiconm = 0.25;
  a.uiqm = 1.5;
  MetricRow b;
  b.image = "b.ppm";
  b.uicm = 0.5;
  b.uism = 1.0;
  b.uiconm = 0.75;
  b.uiqm = 0.5;
  rep.rows = {a, b};

  const MetricRow m = rep.mean();
  CHECK(m.has_ref);
  CHECK(std::abs(m.psnr - 30.0) < 1e-9);  // only one referenced row
  CHECK(std::abs(m.uicm - 1.0) < 1e-9);
  CHECK(std::abs(m.uiconm - 0.5) < 1e-9);

  CHECK(rep.to_csv() ==
        "image,psnr,mse,ssim,uicm,uism,uiconm,uiqm\n"
        "a.ppm,30,0.001,0.75,1.5,2,0.25,1.5\n"
        "b.ppm,,,,0.5,1,0.75,0.5\n"
        "MEAN,30,0.001,0.75,1,1.5,0.5,1\n");

  MetricReport empty;
  CHECK_THROWS_AS(empty.mean(), ContractError);
}

TEST_CASE("report mean equals the arithmetic mean of its rows") {
  Rng rng(31);
  MetricReport rep;
  double sums[7] = {0, 0, 0, 0, 0, 0, 0};
  const int n = 17;
  for (int i = 0; i < n; ++i) {
    MetricRow r;
    r.image = "img" + std::to_string(i);
    r.has_ref = true;
    r.psnr = rng.uniform(10, 40);
    r.mse = rng.uniform(0, 0.1);
    r.ssim = rng.uniform(0, 1);
    r.uicm = rng.uniform(-5, 5);
    r.uism = rng.uniform(0, 10);
    r.uiconm = rng.uniform(0, 1);
    r.uiqm = rng.uniform(0, 5);
    sums[0] += r.psnr;
    sums[1] += r.mse;
    sums[2] += r.ssim;
    sums[3] += r.uicm;
    sums[4] += r.uism;
    sums[5] += r.uiconm;
    sums[6] += r.uiqm;
    rep.rows.push_back(r);
  }
  const MetricRow m = rep.mean();
  CHECK(std::abs(m.psnr - sums[0] / n) < 1e-9);
  CHECK(std::abs(m.mse - sums[1] / n) < 1e-9);
  CHECK(std::abs(m.ssim - sums[2] / n) < 1e-9);
  CHECK(std::abs(m.uicm - sums[3] / n) < 1e-9);
  CHECK(std::abs(m.uism - sums[4] / n) < 1e-9);
  CHECK(std::abs(m.uiconm - sums[5] / n) < 1e-9);
  CHECK(std::abs(m.uiqm - sums[6] / n) < 1e-9);
}
