#include "uvz/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>
#include <ostream>
#include <thread>
#include <utility>

namespace uvz {
namespace {

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  return seed ^ (0x9e3779b97f4a7c15ULL * std::uint64_t(epoch));
}

void check_finite(double v, int stage, int epoch, int step) {
  if (std::isfinite(v)) return;
  std::string msg = "stage " + std::to_string(stage) +
                    ": non-finite loss at epoch " + std::to_string(epoch);
  msg += step > 0 ? " step " + std::to_string(step) : " (validation)";
  throw ContractError(msg);
}

std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n,
                                                              int batch) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < n; i += std::size_t(batch))
    out.emplace_back(i, std::min(n, i + std::size_t(batch)));
  return out;
}

Tensor stack_field(const std::vector<TrainItem>& items,
                   const std::vector<int>& order, std::size_t b0,
                   std::size_t b1, Tensor TrainItem::* field) {
  const Shape s0 = (items[std::size_t(order[b0])].*field).shape();
  Tensor out(Shape(int(b1 - b0), s0.c, s0.h, s0.w));
  const std::int64_t stride = s0.numel();
  for (std::size_t b = b0; b < b1; ++b) {
    const Tensor& t = items[std::size_t(order[b])].*field;
    if (!(t.shape() == s0))
      throw ShapeError("training batch mixes shapes " + s0.str() + " and " +
                       t.shape().str());
    std::copy(t.data(), t.data() + stride,
              out.data() + std::int64_t(b - b0) * stride);
  }
  return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows,
                  const std::vector<int>& order, std::size_t b0,
                  std::size_t b1) {
  const Shape s0 = rows[std::size_t(order[b0])].shape();
  Tensor out(Shape(int(b1 - b0), s0.c, s0.h, s0.w));
  const std::int64_t stride = s0.numel();
  for (std::size_t b = b0; b < b1; ++b) {
    const Tensor& t = rows[std::size_t(order[b])];
    std::copy(t.data(), t.data() + stride,
              out.data() + std::int64_t(b - b0) * stride);
  }
  return out;
}

// The depth branch stays frozen through refinement, so its prediction for
// each image is a constant; computing them once saves a forward per step.
// Every op treats batch entries independently, so the cached maps match
// what an in-batch forward would produce.
std::vector<Tensor> depth_cache(ParamStore& ps, const NetConfig& net,
                                const std::vector<TrainItem>& items) {
  std::vector<Tensor> out;
  out.reserve(items.size());
  for (const auto& it : items)
    out.push_back(den_forward(nullptr, ps, net, it.raw).d);
  return out;
}

std::vector<int> iota_order(std::size_t n) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  return order;
}

Tensor stage1_term(const TrainConfig& cfg, const DenOut& den, const Tensor& db,
                   Tape* tape, ParamStore& ps, const Tensor& xb) {
  if (cfg.net.use_asn) {
    const Tensor xhat = asn_forward(tape, ps, cfg.net, xb, den.feats);
    return stage1_loss(den.d, db, xhat, xb, cfg.weights);
  }
  return scale(mean_all(abs_val(sub(den.d, db))), cfg.weights.lambda1);
}

struct Stage1Val {
  double loss = 0.0, dmae = 0.0;
};

Stage1Val stage1_validate(ParamStore& ps, const TrainConfig& cfg,
                          const std::vector<TrainItem>& items) {
  const std::vector<int> order = iota_order(items.size());
  double lsum = 0.0, dsum = 0.0;
  std::int64_t n = 0;
  for (const auto& [b0, b1] : batch_ranges(items.size(), cfg.batch)) {
    const Tensor xb = stack_field(items, order, b0, b1, &TrainItem::raw);
    const Tensor db = stack_field(items, order, b0, b1, &TrainItem::depth);
    const DenOut den = den_forward(nullptr, ps, cfg.net, xb);
    const Tensor loss = stage1_term(cfg, den, db, nullptr, ps, xb);
    const Tensor dmae = mean_all(abs_val(sub(den.d, db)));
    const double w = double(b1 - b0);
    lsum += double(loss.item()) * w;
    dsum += double(dmae.item()) * w;
    n += std::int64_t(b1 - b0);
  }
  return {lsum / double(n), dsum / double(n)};
}

struct Stage2Val {
  double loss = 0.0, psnr = 0.0;
};

Stage2Val stage2_validate(ParamStore& ps, const TrainConfig& cfg,
                          const std::vector<TrainItem>& items,
                          const std::vector<Tensor>& depths) {
  const std::vector<int> order = iota_order(items.size());
  double lsum = 0.0, psum = 0.0;
  std::int64_t n = 0;
  for (const auto& [b0, b1] : batch_ranges(items.size(), cfg.batch)) {
    const Tensor xb = stack_field(items, order, b0, b1, &TrainItem::raw);
    const Tensor jb = stack_field(items, order, b0, b1, &TrainItem::clean);
    const Tensor db = stack_rows(depths, order, b0, b1);
    const Tensor y = dgen_forward(nullptr, ps, cfg.net, xb, db);
    const Tensor loss = stage2_loss(y, jb, cfg.weights);
    lsum += double(loss.item()) * double(b1 - b0);

    const Shape ys = y.shape();
    const std::int64_t per = std::int64_t(ys.c) * ys.h * ys.w;
    for (int b = 0; b < ys.n; ++b) {
      const Real* yp = y.data() + b * per;
      const Real* jp = jb.data() + b * per;
      double se = 0.0;
      for (std::int64_t i = 0; i < per; ++i) {
        const double d = double(yp[i]) - double(jp[i]);
        se += d * d;
      }
      const double m = se / double(per);
      psum += m > 0.0 ? 10.0 * std::log10(1.0 / m)
                      : std::numeric_limits<double>::infinity();
    }
    n += std::int64_t(b1 - b0);
  }
  return {lsum / double(n), psum / double(n)};
}

void require_matching_arch(const NetConfig& ck, const NetConfig& run,
                           const std::string& what) {
  auto differs = [&](const char* field) {
    throw ConfigError(what + " does not match the run configuration: " +
                      field + " differs");
  };
  if (ck.base_channels != run.base_channels) differs("base_channels");
  if (ck.depth_levels != run.depth_levels) differs("depth_levels");
  if (ck.block.window_size != run.block.window_size) differs("window_size");
  if (ck.block.heads != run.block.heads) differs("heads");
  if (ck.block.mlp_ratio != run.block.mlp_ratio) differs("mlp_ratio");
  if (ck.block.dam_pool_factor != run.block.dam_pool_factor)
    differs("dam_pool_factor");
  if (ck.use_dam != run.use_dam) differs("use_dam");
  if (ck.use_rsb != run.use_rsb) differs("use_rsb");
  if (ck.use_asn != run.use_asn) differs("use_asn");
  if (ck.use_rb != run.use_rb) differs("use_rb");
  if (ck.use_depth != run.use_depth) differs("use_depth");
  if (ck.use_reverse != run.use_reverse) differs("use_reverse");
  if (ck.use_rs != run.use_rs) differs("use_rs");
  if (ck.use_dpm != run.use_dpm) differs("use_dpm");
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (cfg.stage != 1 && cfg.stage != 2)
    throw ConfigError("train: stage must be 1 or 2");
  if (cfg.epochs < 1) throw ConfigError("train: epochs must be positive");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr))
    throw ConfigError("train: learning rate must be positive");
  if (cfg.batch < 1) throw ConfigError("train: batch size must be positive");
  if (!(cfg.adam_beta1 >= 0.0 && cfg.adam_beta1 < 1.0) ||
      !(cfg.adam_beta2 >= 0.0 && cfg.adam_beta2 < 1.0))
    throw ConfigError("train: Adam decay rates must lie in [0,1)");
  if (!(cfg.adam_eps > 0.0))
    throw ConfigError("train: Adam epsilon must be positive");
  if (cfg.lr_halve_epoch < 0)
    throw ConfigError("train: lr schedule epoch must be nonnegative");
  if (!(cfg.weights.lambda1 >= Real(0)) || !(cfg.weights.lambda2 >= Real(0)))
    throw ConfigError("train: loss weights must be nonnegative");
  if (!(cfg.weights.eps > Real(0)))
    throw ConfigError("train: Charbonnier epsilon must be positive");
  validate(cfg.net);
}

void adam_step(ParamStore& ps, const std::vector<int>& handles, double lr,
               double beta1, double beta2, double eps) {
  const std::int64_t t = ++ps.step_counter();
  const double bc1 = 1.0 - std::pow(beta1, double(t));
  const double bc2 = 1.0 - std::pow(beta2, double(t));
  for (const int h : handles) {
    if (!ps.grad_live(h))
      throw ContractError("adam_step: no gradient for " + ps.name(h));
    Tensor& p = ps.value(h);
    std::vector<Real>& g = *ps.grad_slot(h);
    std::vector<Real>& m = ps.adam_m(h);
    std::vector<Real>& v = ps.adam_v(h);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = double(g[i]);
      const double mi = beta1 * double(m[i]) + (1.0 - beta1) * gi;
      const double vi = beta2 * double(v[i]) + (1.0 - beta2) * gi * gi;
      m[i] = Real(mi);
      v[i] = Real(vi);
      p.data()[std::int64_t(i)] = Real(double(p.data()[std::int64_t(i)]) -
                                       lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
      g[i] = Real(0);
    }
    ps.grad_live(h) = false;
  }
}

TrainData load_training_data(const std::string& manifest_path) {
  const std::vector<ManifestEntry> entries = load_manifest(manifest_path);
  TrainData out;
  for (const ManifestEntry& e : entries) {
    TrainItem it;
    it.raw = load_image(e.raw);
    it.clean = load_image(e.clean);
    it.depth = load_depth(e.depth);
    (e.split == "train" ? out.train : out.test).push_back(std::move(it));
  }
  return out;
}

TrainResult train_stage1(const TrainData& data, const TrainConfig& cfg,
                         const std::string& ckpt_path, std::ostream& log,
                         const Checkpoint* resume) {
  validate(cfg);
  if (data.train.empty()) throw ConfigError("stage 1: training split is empty");
  if (ckpt_path.empty()) throw ConfigError("stage 1: checkpoint path is empty");

  ParamStore ps = init_params(cfg.net);
  int start = 0;
  if (resume) {
    require_matching_arch(resume->config, cfg.net, "resume checkpoint");
    restore_params(ps, *resume);
    start = int(resume->epoch);
    if (start > cfg.epochs)
      throw ConfigError("resume checkpoint already contains " +
                        std::to_string(start) + " epochs");
  }

  std::vector<int> handles = ps.handles_with_prefix("den.");
  if (cfg.net.use_asn) {
    const std::vector<int> asn = ps.handles_with_prefix("asn.");
    handles.insert(handles.end(), asn.begin(), asn.end());
  }

  TrainResult res;
  res.best_val = std::numeric_limits<double>::infinity();
  res.initial_loss = std::numeric_limits<double>::quiet_NaN();
  if (!resume) {
    res.initial_loss = stage1_validate(ps, cfg, data.train).loss;
    log << "0\ttrain\t" << fmt9(res.initial_loss) << "\n";
  }

  for (int epoch = start + 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = epoch > cfg.lr_halve_epoch ? cfg.lr * 0.5 : cfg.lr;
    std::vector<int> order = iota_order(data.train.size());
    Rng rng(epoch_seed(cfg.net.seed, epoch));
    rng.shuffle(order);

    double lsum = 0.0;
    std::int64_t n = 0;
    int step = 0;
    for (const auto& [b0, b1] : batch_ranges(order.size(), cfg.batch)) {
      ++step;
      const Tensor xb = stack_field(data.train, order, b0, b1, &TrainItem::raw);
      const Tensor db = stack_field(data.train, order, b0, b1, &TrainItem::depth);
      Tape tape;
      const DenOut den = den_forward(&tape, ps, cfg.net, xb);
      const Tensor loss = stage1_term(cfg, den, db, &tape, ps, xb);
      const double lv = double(loss.item());
      check_finite(lv, 1, epoch, step);
      tape.backward(loss);
      adam_step(ps, handles, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
      lsum += lv * double(b1 - b0);
      n += std::int64_t(b1 - b0);
    }
    const double train_loss = lsum / double(n);
    res.train_curve.push_back(train_loss);
    log << epoch << "\ttrain\t" << fmt9(train_loss) << "\n";

    double val_loss = train_loss;
    if (!data.test.empty()) {
      const Stage1Val v = stage1_validate(ps, cfg, data.test);
      check_finite(v.loss, 1, epoch, 0);
      val_loss = v.loss;
      res.val_dmae.push_back(v.dmae);
      log << epoch << "\ttest\t" << fmt9(v.loss) << "\td_mae=" << fmt9(v.dmae)
          << "\n";
    }
    res.val_curve.push_back(val_loss);
    if (val_loss < res.best_val) {
      res.best_val = val_loss;
      save_checkpoint(ckpt_path + ".best", ps, cfg.net, epoch);
    }
  }

  save_checkpoint(ckpt_path, ps, cfg.net, cfg.epochs);
  res.final_ckpt = load_checkpoint(ckpt_path);
  return res;
}

TrainResult train_stage2(const TrainData& data, const TrainConfig& cfg,
                         const Checkpoint& init, const std::string& ckpt_path,
                         std::ostream& log, const Checkpoint* resume) {
  validate(cfg);
  if (data.train.empty()) throw ConfigError("stage 2: training split is empty");
  if (ckpt_path.empty()) throw ConfigError("stage 2: checkpoint path is empty");

  ParamStore ps = init_params(cfg.net);
  int start = 0;
  if (resume) {
    require_matching_arch(resume->config, cfg.net, "resume checkpoint");
    restore_params(ps, *resume);
    start = int(resume->epoch);
    if (start > cfg.epochs)
      throw ConfigError("resume checkpoint already contains " +
                        std::to_string(start) + " epochs");
  } else {
    require_matching_arch(init.config, cfg.net, "stage-1 checkpoint");
    restore_params(ps, init);
    ps.step_counter() = 0;  // the refinement run starts a fresh Adam schedule
  }

  const std::vector<int> handles = ps.handles_with_prefix("dgen.");

  // Everything outside dgen.* is frozen; snapshot it and verify at the end.
  std::vector<std::pair<int, std::vector<Real>>> frozen;
  for (int h = 0; h < ps.size(); ++h)
    if (ps.name(h).rfind("dgen.", 0) != 0) {
      const Tensor& v = ps.value(h);
      frozen.emplace_back(h, std::vector<Real>(v.data(), v.data() + v.numel()));
    }

  const std::vector<Tensor> dtrain = depth_cache(ps, cfg.net, data.train);
  const std::vector<Tensor> dtest = depth_cache(ps, cfg.net, data.test);

  TrainResult res;
  res.best_val = std::numeric_limits<double>::infinity();
  res.initial_loss = std::numeric_limits<double>::quiet_NaN();
  if (!resume) {
    res.initial_loss = stage2_validate(ps, cfg, data.train, dtrain).loss;
    log << "0\ttrain\t" << fmt9(res.initial_loss) << "\n";
  }

  for (int epoch = start + 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = epoch > cfg.lr_halve_epoch ? cfg.lr * 0.5 : cfg.lr;
    std::vector<int> order = iota_order(data.train.size());
    Rng rng(epoch_seed(cfg.net.seed, epoch));
    rng.shuffle(order);

    double lsum = 0.0;
    std::int64_t n = 0;
    int step = 0;
    for (const auto& [b0, b1] : batch_ranges(order.size(), cfg.batch)) {
      ++step;
      const Tensor xb = stack_field(data.train, order, b0, b1, &TrainItem::raw);
      const Tensor jb = stack_field(data.train, order, b0, b1, &TrainItem::clean);
      const Tensor db = stack_rows(dtrain, order, b0, b1);
      Tape tape;
      const Tensor y = dgen_forward(&tape, ps, cfg.net, xb, db);
      const Tensor loss = stage2_loss(y, jb, cfg.weights);
      const double lv = double(loss.item());
      check_finite(lv, 2, epoch, step);
      tape.backward(loss);
      adam_step(ps, handles, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
      lsum += lv * double(b1 - b0);
      n += std::int64_t(b1 - b0);
    }
    const double train_loss = lsum / double(n);
    res.train_curve.push_back(train_loss);
    log << epoch << "\ttrain\t" << fmt9(train_loss) << "\n";

    double val_loss = train_loss;
    if (!data.test.empty()) {
      const Stage2Val v = stage2_validate(ps, cfg, data.test, dtest);
      check_finite(v.loss, 2, epoch, 0);
      val_loss = v.loss;
      res.val_psnr.push_back(v.psnr);
      log << epoch << "\ttest\t" << fmt9(v.loss) << "\tpsnr=" << fmt9(v.psnr)
          << "\n";
    }
    res.val_curve.push_back(val_loss);
    if (val_loss < res.best_val) {
      res.best_val = val_loss;
      save_checkpoint(ckpt_path + ".best", ps, cfg.net, epoch);
    }
  }

  for (const auto& [h, snap] : frozen) {
    const Tensor& v = ps.value(h);
    if (!std::equal(snap.begin(), snap.end(), v.data()))
      throw ContractError("stage 2: frozen parameter modified: " + ps.name(h));
  }

  save_checkpoint(ckpt_path, ps, cfg.net, cfg.epochs);
  res.final_ckpt = load_checkpoint(ckpt_path);
  return res;
}

Tensor enhance_image(ParamStore& ps, const NetConfig& cfg, const Tensor& raw) {
  const DenOut den = den_forward(nullptr, ps, cfg, raw);
  return dgen_forward(nullptr, ps, cfg, raw, den.d);
}

Tensor predict_depth(ParamStore& ps, const NetConfig& cfg, const Tensor& raw) {
  return den_forward(nullptr, ps, cfg, raw).d;
}

EvalOutput evaluate(ParamStore& ps, const NetConfig& cfg,
                    const std::vector<ManifestEntry>& items,
                    const std::string& enhanced_dir, int threads) {
  validate(cfg);
  if (items.empty()) throw ConfigError("evaluate: no images listed");
  if (threads < 1) throw ConfigError("evaluate: threads must be at least 1");
  if (!enhanced_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(enhanced_dir, ec);
    if (ec)
      throw ConfigError("cannot create '" + enhanced_dir + "': " + ec.message());
  }

  struct Slot {
    bool ok = false;
    std::string skip;
    MetricRow row;
  };
  std::vector<Slot> slots(items.size());

  std::atomic<std::size_t> cursor{0};
  auto worker = [&] {
    for (std::size_t i = cursor.fetch_add(1); i < items.size();
         i = cursor.fetch_add(1)) {
      Slot& s = slots[i];
      try {
        const Tensor raw = load_image(items[i].raw);
        const Tensor y = enhance_image(ps, cfg, raw);
        s.row.image = std::filesystem::path(items[i].raw).filename().string();
        s.row.uicm = uicm(y);
        s.row.uism = uism(y);
        s.row.uiconm = uiconm(y);
        s.row.uiqm = uiqm(y);
        if (!items[i].clean.empty()) {
          try {
            const Tensor clean = load_image(items[i].clean);
            s.row.psnr = psnr(y, clean);
            s.row.mse = mse(y, clean);
            s.row.ssim = ssim_index(y, clean);
            s.row.has_ref = true;
          } catch (const std::exception&) {
            s.row.has_ref = false;
          }
        }
        if (!enhanced_dir.empty()) {
          const std::string stem =
              std::filesystem::path(items[i].raw).stem().string();
          save_image(enhanced_dir + "/" + stem + "_enhanced.ppm", y);
        }
        s.ok = true;
      } catch (const std::exception& e) {
        s.skip = e.what();
      }
    }
  };

  const int nt = int(std::min<std::size_t>(std::size_t(threads), items.size()));
  if (nt <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(std::size_t(nt));
    for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }

  EvalOutput out;
  for (const Slot& s : slots) {
    if (s.ok) {
      out.report.rows.push_back(s.row);
    } else {
      out.skipped.push_back(s.skip);
      std::fprintf(stderr, "warning: skipped %s\n", s.skip.c_str());
    }
  }
  if (out.report.rows.empty())
    throw ConfigError("evaluate: every input failed to load");
  return out;
}

std::string report_text(const EvalOutput& out) {
  std::string text = out.report.to_csv();
  for (const std::string& s : out.skipped) text += "# skipped\t" + s + "\n";
  return text;
}

}  // namespace uvz
