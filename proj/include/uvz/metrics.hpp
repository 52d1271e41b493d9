#pragma once

#include <string>
#include <vector>

#include "uvz/tensor.hpp"

namespace uvz {

// Quality metrics. All arithmetic runs in double regardless of the tensor
// scalar type; none of these touch a tape.

// Referenced metrics over identically shaped batches in [0,1].
double mse(const Tensor& x, const Tensor& y);
// 10*log10(1/mse), +infinity when the inputs are identical
double psnr(const Tensor& x, const Tensor& y);
// scalar value of the windowed structural similarity used by the losses
double ssim_index(const Tensor& x, const Tensor& y);

// No-reference underwater metrics on a single (1,3,h,w) image in [0,1].
// Colorfulness from trimmed chroma statistics, sharpness from Sobel-edge
// block contrast, contrast from block Michelson entropy; uiqm is their
// standard weighted sum.
double uicm(const Tensor& x);
double uism(const Tensor& x);
double uiconm(const Tensor& x);
double uiqm(const Tensor& x);

struct MetricRow {
  std::string image;
  bool has_ref = false;  // referenced metrics present
  double psnr = 0.0;
  double mse = 0.0;
  double ssim = 0.0;
  double uicm = 0.0;
  double uism = 0.0;
  double uiconm = 0.0;
  double uiqm = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  // Arithmetic mean row; referenced columns average the rows that have
  // them. Requires at least one row.
  MetricRow mean() const;
  // header, one row per image, final MEAN row; referenced fields are left
  // empty on rows without ground truth
  std::string to_csv() const;
};

}  // namespace uvz
