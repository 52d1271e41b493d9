#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "uvz/datagen.hpp"
#include "uvz/losses.hpp"
#include "uvz/metrics.hpp"
#include "uvz/networks.hpp"

namespace uvz {

struct TrainConfig {
  int stage = 1;
  int epochs = 100;
  double lr = 2e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int lr_halve_epoch = 50;  // epochs beyond this one run at lr/2
  int batch = 4;
  LossWeights weights;
  NetConfig net;  // net.seed also seeds the per-epoch data order
};

void validate(const TrainConfig& cfg);

// One bias-corrected Adam update over the given handles, consuming the
// gradients accumulated by the last backward. The shared step counter
// advances once per call; a handle without a live gradient is a contract
// violation and is reported by name.
void adam_step(ParamStore& ps, const std::vector<int>& handles, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct TrainItem {
  Tensor raw, clean, depth;
};
struct TrainData {
  std::vector<TrainItem> train, test;
};

// Loads every triple referenced by a manifest into memory. Training data
// must be fully readable; any broken file is a hard error.
TrainData load_training_data(const std::string& manifest_path);

struct TrainResult {
  Checkpoint final_ckpt;
  double initial_loss = 0.0;  // train-split loss before any update; NaN on resume
  double best_val = 0.0;
  std::vector<double> train_curve, val_curve;  // one entry per epoch run
  std::vector<double> val_dmae;  // stage 1: held-out mean |d - d_gt|
  std::vector<double> val_psnr;  // stage 2: held-out mean PSNR
};

// Joint depth + scene supervision. Writes ckpt_path at the end and
// ckpt_path + ".best" whenever the held-out loss improves; logs UTF-8
// `epoch<TAB>split<TAB>loss` lines. Passing a resume checkpoint continues
// an interrupted run from its recorded epoch.
TrainResult train_stage1(const TrainData& data, const TrainConfig& cfg,
                         const std::string& ckpt_path, std::ostream& log,
                         const Checkpoint* resume = nullptr);

// Enhancement training on top of a finished stage-1 checkpoint. The depth
// branch stays frozen; this is verified bitwise at the end of the run.
TrainResult train_stage2(const TrainData& data, const TrainConfig& cfg,
                         const Checkpoint& init, const std::string& ckpt_path,
                         std::ostream& log, const Checkpoint* resume = nullptr);

// Frozen full-pipeline inference on one (1,3,h,w) image.
Tensor enhance_image(ParamStore& ps, const NetConfig& cfg, const Tensor& raw);
Tensor predict_depth(ParamStore& ps, const NetConfig& cfg, const Tensor& raw);

struct EvalOutput {
  MetricReport report;
  std::vector<std::string> skipped;  // per-image failures, for the footer
};

// Enhances every listed image and collects metrics, referenced ones only
// where the clean file loads. Unreadable or unprocessable entries are
// skipped with a warning on stderr and reported in the footer. With
// enhanced_dir nonempty the enhanced images are written there. threads > 1
// distributes whole images; results do not depend on the thread count.
EvalOutput evaluate(ParamStore& ps, const NetConfig& cfg,
                    const std::vector<ManifestEntry>& items,
                    const std::string& enhanced_dir, int threads);

// CSV table plus one `# skipped` line per failure.
std::string report_text(const EvalOutput& out);

}  // namespace uvz
