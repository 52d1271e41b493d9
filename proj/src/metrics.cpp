#include "uvz/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <utility>
#include <vector>

#include "uvz/common.hpp"
#include "uvz/losses.hpp"

namespace uvz {

namespace {

constexpr int kBlock = 8;

void require_same_shape(const Tensor& x, const Tensor& y, const char* who) {
  if (!(x.shape() == y.shape()))
    throw ShapeError(std::string(who) + ": shape mismatch, " +
                     x.shape().str() + " vs " + y.shape().str());
}

void require_rgb(const Tensor& x, const char* who) {
  const Shape s = x.shape();
  if (s.n != 1 || s.c != 3)
    throw ShapeError(std::string(who) + ": expected one (1,3,h,w) image, got " +
                     s.str());
}

// trimmed mean (drop floor(alpha*n) from each end) plus the variance of
// all samples about that mean
std::pair<double, double> trimmed_stats(std::vector<double> v, double alpha) {
  const std::int64_t n = std::int64_t(v.size());
  const std::int64_t t = std::int64_t(std::floor(alpha * double(n)));
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (std::int64_t i = t; i < n - t; ++i) sum += v[std::size_t(i)];
  const double mu = sum / double(n - 2 * t);
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  return {mu, var / double(n)};
}

// replicate-clamped pixel access
double px(const std::vector<double>& img, int h, int w, int i, int j) {
  i = std::clamp(i, 0, h - 1);
  j = std::clamp(j, 0, w - 1);
  return img[std::size_t(i) * std::size_t(w) + std::size_t(j)];
}

std::vector<double> sobel_magnitude(const std::vector<double>& img, int h,
                                    int w) {
  static const int kx[3][3] = {{1, 0, -1}, {2, 0, -2}, {1, 0, -1}};
  std::vector<double> mag(std::size_t(h) * std::size_t(w));
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double gx = 0.0, gy = 0.0;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          const double v = px(img, h, w, i + a - 1, j + b - 1);
          gx += double(kx[a][b]) * v;
          gy += double(kx[b][a]) * v;
        }
      mag[std::size_t(i) * std::size_t(w) + std::size_t(j)] =
          std::hypot(gx, gy);
    }
  return mag;
}

// 2/(k1*k2) * sum log(max/min) over replicate-padded blocks; blocks
// touching zero contribute nothing
double eme(const std::vector<double>& img, int h, int w) {
  const int k1 = (h + kBlock - 1) / kBlock;
  const int k2 = (w + kBlock - 1) / kBlock;
  double sum = 0.0;
  for (int bi = 0; bi < k1; ++bi)
    for (int bj = 0; bj < k2; ++bj) {
      double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
      for (int i = 0; i < kBlock; ++i)
        for (int j = 0; j < kBlock; ++j) {
          const double v = px(img, h, w, bi * kBlock + i, bj * kBlock + j);
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      if (lo > 0.0 && hi > 0.0) sum += std::log(hi / lo);
    }
  return 2.0 / (double(k1) * double(k2)) * sum;
}

std::vector<double> channel(const Tensor& x, int c) {
  const Shape s = x.shape();
  const std::int64_t npx = std::int64_t(s.h) * s.w;
  const Real* base = x.data() + std::int64_t(c) * npx;
  std::vector<double> out(static_cast<std::size_t>(npx));
  for (std::int64_t i = 0; i < npx; ++i) out[std::size_t(i)] = double(base[i]);
  return out;
}

std::string format_field(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

double mse(const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "mse");
  double sum = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double d = double(x.data()[i]) - double(y.data()[i]);
    sum += d * d;
  }
  return sum / double(x.numel());
}

double psnr(const Tensor& x, const Tensor& y) {
  const double m = mse(x, y);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

double ssim_index(const Tensor& x, const Tensor& y) {
  return double(ssim(x, y).item());
}

double uicm(const Tensor& x) {
  require_rgb(x, "uicm");
  const Shape s = x.shape();
  const std::int64_t npx = std::int64_t(s.h) * s.w;
  const Real* r = x.data();
  const Real* g = r + npx;
  const Real* b = g + npx;
  std::vector<double> rg(static_cast<std::size_t>(npx));
  std::vector<double> yb(static_cast<std::size_t>(npx));
  for (std::int64_t i = 0; i < npx; ++i) {
    const double R = 255.0 * double(r[i]);
    const double G = 255.0 * double(g[i]);
    const double B = 255.0 * double(b[i]);
    rg[std::size_t(i)] = R - G;
    yb[std::size_t(i)] = 0.5 * (R + G) - B;
  }
  const auto [mu_rg, var_rg] = trimmed_stats(std::move(rg), 0.1);
  const auto [mu_yb, var_yb] = trimmed_stats(std::move(yb), 0.1);
  return -0.0268 * std::sqrt(mu_rg * mu_rg + mu_yb * mu_yb) +
         0.1586 * std::sqrt(var_rg + var_yb);
}

double uism(const Tensor& x) {
  require_rgb(x, "uism");
  const Shape s = x.shape();
  static const double weights[3] = {0.299, 0.587, 0.114};
  double out = 0.0;
  for (int c = 0; c < 3; ++c) {
    const std::vector<double> ch = channel(x, c);
    std::vector<double> edge = sobel_magnitude(ch, s.h, s.w);
    for (std::size_t i = 0; i < edge.size(); ++i) edge[i] *= ch[i];
    out += weights[c] * eme(edge, s.h, s.w);
  }
  return out;
}

double uiconm(const Tensor& x) {
  require_rgb(x, "uiconm");
  const Shape s = x.shape();
  const std::vector<double> chans[3] = {channel(x, 0), channel(x, 1),
                                        channel(x, 2)};
  const int k1 = (s.h + kBlock - 1) / kBlock;
  const int k2 = (s.w + kBlock - 1) / kBlock;
  double sum = 0.0;
  for (int bi = 0; bi < k1; ++bi)
    for (int bj = 0; bj < k2; ++bj) {
      double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < kBlock; ++i)
          for (int j = 0; j < kBlock; ++j) {
            const double v =
                px(chans[c], s.h, s.w, bi * kBlock + i, bj * kBlock + j);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
      const double top = hi - lo, bottom = hi + lo;
      if (top <= 0.0 || bottom <= 0.0) continue;
      const double m = top / bottom;
      sum += -m * std::log(m);
    }
  return sum / (double(k1) * double(k2));
}

double uiqm(const Tensor& x) {
  return 0.0282 * uicm(x) + 0.2953 * uism(x) + 3.5753 * uiconm(x);
}

MetricRow MetricReport::mean() const {
  if (rows.empty()) throw ContractError("MetricReport::mean: no rows");
  MetricRow m;
  m.image = "MEAN";
  std::int64_t n_ref = 0;
  for (const MetricRow& r : rows) {
    m.uicm += r.uicm;
    m.uism += r.uism;
    m.uiconm += r.uiconm;
    m.uiqm += r.uiqm;
    if (r.has_ref) {
      ++n_ref;
      m.psnr += r.psnr;
      m.mse += r.mse;
      m.ssim += r.ssim;
    }
  }
  const double n = double(rows.size());
  m.uicm /= n;
  m.uism /= n;
  m.uiconm /= n;
  m.uiqm /= n;
  if (n_ref > 0) {
    m.has_ref = true;
    m.psnr /= double(n_ref);
    m.mse /= double(n_ref);
    m.ssim /= double(n_ref);
  }
  return m;
}

std::string MetricReport::to_csv() const {
  std::string out = "image,psnr,mse,ssim,uicm,uism,uiconm,uiqm\n";
  auto emit = [&out](const MetricRow& r) {
    out += r.image;
    out += ',';
    if (r.has_ref) out += format_field(r.psnr);
    out += ',';
    if (r.has_ref) out += format_field(r.mse);
    out += ',';
    if (r.has_ref) out += format_field(r.ssim);
    out += ',';
    out += format_field(r.uicm);
    out += ',';
    out += format_field(r.uism);
    out += ',';
    out += format_field(r.uiconm);
    out += ',';
    out += format_field(r.uiqm);
    out += '\n';
  };
  for (const MetricRow& r : rows) emit(r);
  emit(mean());
  return out;
}

}  // namespace uvz
