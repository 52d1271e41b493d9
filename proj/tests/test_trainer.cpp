#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "uvz/trainer.hpp"

using namespace uvz;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 8 triples at 16x16: 6 train / 2 test.
std::string tiny_dataset(const TmpDir& tmp, std::uint64_t seed = 5) {
  DatagenOptions opt;
  opt.count = 8;
  opt.height = 16;
  opt.width = 16;
  opt.split_ratio = 0.75;
  opt.seed = seed;
  return make_dataset(opt, tmp.path.string());
}

TrainConfig tiny_cfg(int stage, int epochs) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.epochs = epochs;
  cfg.batch = 4;
  cfg.net.base_channels = 4;
  cfg.net.depth_levels = 2;
  cfg.net.seed = 3;
  return cfg;
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

const Tensor* array_named(const Checkpoint& ck, const std::string& name) {
  for (const auto& [n, t] : ck.arrays)
    if (n == name) return &t;
  return nullptr;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig cfg = tiny_cfg(1, 2);
  CHECK_NOTHROW(validate(cfg));

  TrainConfig bad = cfg;
  bad.stage = 3;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = cfg;
  bad.batch = 0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = cfg;
  bad.adam_beta1 = 1.0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = cfg;
  bad.adam_eps = 0.0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = cfg;
  bad.net.depth_levels = 1;
  CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("adam first step moves by about minus lr") {
  ParamStore ps;
  const int h = ps.add("p", Tensor::scalar(Real(1)));
  Tape tape;
  const Tensor pv = tape.param(ps, h);
  const Tensor loss = sum_all(pv);  // d(loss)/dp = 1
  tape.backward(loss);
  adam_step(ps, {h}, 0.01);
  CHECK(std::abs(double(ps.value(h).item()) - 0.99) < 1e-6);
  CHECK(ps.step_counter() == 1);
  CHECK_FALSE(ps.grad_live(h));
}

TEST_CASE("adam leaves parameters alone on zero gradients") {
  ParamStore ps;
  const int h = ps.add("p", Tensor::scalar(Real(0.75)));
  Tape tape;
  const Tensor pv = tape.param(ps, h);
  const Tensor loss = scale(pv, Real(0));
  tape.backward(loss);
  adam_step(ps, {h}, 0.5);
  CHECK(ps.value(h).item() == Real(0.75));
}

TEST_CASE("adam reports a missing gradient by name") {
  ParamStore ps;
  const int ha = ps.add("alpha", Tensor::scalar(Real(1)));
  const int hb = ps.add("beta", Tensor::scalar(Real(1)));
  Tape tape;
  const Tensor loss = sum_all(tape.param(ps, ha));
  tape.backward(loss);
  try {
    adam_step(ps, {ha, hb}, 0.1);
    FAIL("expected a contract error");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("beta") != std::string::npos);
  }
}

TEST_CASE("adam optimizes a quadratic") {
  ParamStore ps;
  const int h = ps.add("p", Tensor::scalar(Real(1)));
  for (int step = 0; step < 100; ++step) {
    Tape tape;
    const Tensor pv = tape.param(ps, h);
    const Tensor loss = mul(pv, pv);
    tape.backward(loss);
    adam_step(ps, {h}, 0.1);
  }
  CHECK(std::abs(double(ps.value(h).item())) < 0.05);
}

TEST_CASE("training data loads from a manifest") {
  TmpDir tmp("uvz_tr_data");
  const std::string mpath = tiny_dataset(tmp);
  const TrainData data = load_training_data(mpath);
  CHECK(data.train.size() == 6);
  CHECK(data.test.size() == 2);
  for (const TrainItem& it : data.train) {
    CHECK(it.raw.shape() == Shape(1, 3, 16, 16));
    CHECK(it.clean.shape() == Shape(1, 3, 16, 16));
    CHECK(it.depth.shape() == Shape(1, 1, 16, 16));
  }
  CHECK_THROWS_AS(load_training_data(tmp.file("missing.tsv")), ConfigError);
}

TEST_CASE("stage 1 runs, logs and checkpoints") {
  TmpDir tmp("uvz_tr_s1");
  const TrainData data = load_training_data(tiny_dataset(tmp));
  const TrainConfig cfg = tiny_cfg(1, 5);
  const std::string ckpt = tmp.file("s1.uvzc");

  std::ostringstream log;
  const TrainResult res = train_stage1(data, cfg, ckpt, log);

  REQUIRE(res.train_curve.size() == 5);
  REQUIRE(res.val_curve.size() == 5);
  REQUIRE(res.val_dmae.size() == 5);
  CHECK(std::isfinite(res.initial_loss));
  for (double v : res.train_curve) CHECK(std::isfinite(v));

  // The run heads downhill from the very start at this scale.
  CHECK(res.train_curve.back() < res.initial_loss);
  CHECK(res.best_val <= res.val_curve.front());

  const std::string text = log.str();
  CHECK(text.find("0\ttrain\t") != std::string::npos);
  CHECK(text.find("1\ttrain\t") != std::string::npos);
  CHECK(text.find("5\ttest\t") != std::string::npos);
  CHECK(text.find("\td_mae=") != std::string::npos);

  REQUIRE(fs::exists(ckpt));
  REQUIRE(fs::exists(ckpt + ".best"));
  const Checkpoint ck = load_checkpoint(ckpt);
  CHECK(ck.epoch == 5);
  CHECK(ck.adam_step == 10);  // 2 batches per epoch
  ParamStore ps = init_params(cfg.net);
  CHECK_NOTHROW(restore_params(ps, ck));

  CHECK_THROWS_AS(train_stage1(TrainData{}, cfg, ckpt, log), ConfigError);
}

TEST_CASE("stage 1 is deterministic in the seed") {
  TmpDir tmp("uvz_tr_det");
  const TrainData data = load_training_data(tiny_dataset(tmp));
  const TrainConfig cfg = tiny_cfg(1, 3);

  std::ostringstream la, lb;
  const TrainResult a = train_stage1(data, cfg, tmp.file("a.uvzc"), la);
  const TrainResult b = train_stage1(data, cfg, tmp.file("b.uvzc"), lb);
  CHECK(a.train_curve == b.train_curve);
  CHECK(a.val_curve == b.val_curve);
  CHECK(la.str() == lb.str());
  CHECK(slurp(tmp.file("a.uvzc")) == slurp(tmp.file("b.uvzc")));

  TrainConfig other = cfg;
  other.net.seed = 4;
  std::ostringstream lc;
  const TrainResult c = train_stage1(data, other, tmp.file("c.uvzc"), lc);
  CHECK(a.train_curve != c.train_curve);
}

TEST_CASE("stage 1 resume matches an uninterrupted run") {
  TmpDir tmp("uvz_tr_resume");
  const TrainData data = load_training_data(tiny_dataset(tmp));

  std::ostringstream la;
  train_stage1(data, tiny_cfg(1, 6), tmp.file("full.uvzc"), la);

  std::ostringstream lb, lc;
  train_stage1(data, tiny_cfg(1, 3), tmp.file("part.uvzc"), lb);
  const Checkpoint mid = load_checkpoint(tmp.file("part.uvzc"));
  CHECK(mid.epoch == 3);
  train_stage1(data, tiny_cfg(1, 6), tmp.file("part.uvzc"), lc, &mid);

  CHECK(slurp(tmp.file("full.uvzc")) == slurp(tmp.file("part.uvzc")));
  CHECK(lc.str().find("0\ttrain") == std::string::npos);
  CHECK(lc.str().find("4\ttrain") != std::string::npos);

  // Resuming past the requested horizon is a configuration error.
  TrainConfig shorter = tiny_cfg(1, 2);
  std::ostringstream ld;
  CHECK_THROWS_AS(train_stage1(data, shorter, tmp.file("x.uvzc"), ld, &mid),
                  ConfigError);
}

TEST_CASE("stage 1 without the regression branch") {
  TmpDir tmp("uvz_tr_noasn");
  const TrainData data = load_training_data(tiny_dataset(tmp));
  TrainConfig cfg = tiny_cfg(1, 2);
  cfg.net.use_asn = false;

  std::ostringstream log;
  const TrainResult res = train_stage1(data, cfg, tmp.file("s1.uvzc"), log);
  CHECK(res.train_curve.size() == 2);
  for (const auto& [name, t] : res.final_ckpt.arrays)
    CHECK(name.rfind("asn.", 0) != 0);
}

TEST_CASE("stage 2 trains the enhancer and freezes the depth branch") {
  TmpDir tmp("uvz_tr_s2");
  const TrainData data = load_training_data(tiny_dataset(tmp));
  const TrainConfig cfg1 = tiny_cfg(1, 2);
  std::ostringstream l1;
  train_stage1(data, cfg1, tmp.file("s1.uvzc"), l1);
  const Checkpoint ck1 = load_checkpoint(tmp.file("s1.uvzc"));

  TrainConfig cfg2 = tiny_cfg(2, 3);
  std::ostringstream l2;
  const TrainResult res = train_stage2(data, cfg2, ck1, tmp.file("s2.uvzc"), l2);

  REQUIRE(res.train_curve.size() == 3);
  REQUIRE(res.val_psnr.size() == 3);
  CHECK(l2.str().find("\tpsnr=") != std::string::npos);

  const Checkpoint ck2 = load_checkpoint(tmp.file("s2.uvzc"));
  CHECK(ck2.adam_step == 6);  // fresh optimizer, 2 batches x 3 epochs

  // den.* and asn.* arrays carried over bitwise; dgen.* moved.
  bool dgen_changed = false;
  for (const auto& [name, t] : ck1.arrays) {
    const Tensor* after = array_named(ck2, name);
    REQUIRE(after != nullptr);
    if (name.rfind("den.", 0) == 0 || name.rfind("asn.", 0) == 0)
      CHECK(same_values(t, *after));
    else if (name.rfind("dgen.", 0) == 0 && name.rfind(".m") == std::string::npos)
      dgen_changed = dgen_changed || !same_values(t, *after);
  }
  CHECK(dgen_changed);

  // Architecture drift between checkpoint and run is rejected.
  TrainConfig drift = cfg2;
  drift.net.use_dpm = false;
  std::ostringstream l3;
  try {
    train_stage2(data, drift, ck1, tmp.file("bad.uvzc"), l3);
    FAIL("expected a configuration error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("use_dpm") != std::string::npos);
  }
}

TEST_CASE("stage 2 resume matches an uninterrupted run") {
  TmpDir tmp("uvz_tr_s2resume");
  const TrainData data = load_training_data(tiny_dataset(tmp));
  std::ostringstream l1;
  train_stage1(data, tiny_cfg(1, 2), tmp.file("s1.uvzc"), l1);
  const Checkpoint ck1 = load_checkpoint(tmp.file("s1.uvzc"));

  std::ostringstream la, lb, lc;
  train_stage2(data, tiny_cfg(2, 4), ck1, tmp.file("full.uvzc"), la);
  train_stage2(data, tiny_cfg(2, 2), ck1, tmp.file("part.uvzc"), lb);
  const Checkpoint mid = load_checkpoint(tmp.file("part.uvzc"));
  train_stage2(data, tiny_cfg(2, 4), ck1, tmp.file("part.uvzc"), lc, &mid);
  CHECK(slurp(tmp.file("full.uvzc")) == slurp(tmp.file("part.uvzc")));
}

TEST_CASE("a poisoned parameter aborts with epoch and step") {
  TmpDir tmp("uvz_tr_nan");
  const TrainData data = load_training_data(tiny_dataset(tmp));
  const TrainConfig cfg = tiny_cfg(1, 3);

  ParamStore ps = init_params(cfg.net);
  const int h = ps.handle("den.enc0a.w");
  ps.value(h).data()[0] = std::numeric_limits<Real>::quiet_NaN();
  save_checkpoint(tmp.file("bad.uvzc"), ps, cfg.net, 1);
  const Checkpoint bad = load_checkpoint(tmp.file("bad.uvzc"));

  std::ostringstream log;
  try {
    train_stage1(data, cfg, tmp.file("out.uvzc"), log, &bad);
    FAIL("expected a contract error");
  } catch (const ContractError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite loss") != std::string::npos);
    CHECK(msg.find("epoch 2 step 1") != std::string::npos);
  }
}

TEST_CASE("evaluate reports metrics, writes images and tolerates broken files") {
  TmpDir tmp("uvz_tr_eval");
  const std::string mpath = tiny_dataset(tmp);
  const TrainData data = load_training_data(mpath);
  const TrainConfig cfg1 = tiny_cfg(1, 1);
  std::ostringstream l1, l2;
  train_stage1(data, cfg1, tmp.file("s1.uvzc"), l1);
  TrainConfig cfg2 = tiny_cfg(2, 1);
  train_stage2(data, cfg2, load_checkpoint(tmp.file("s1.uvzc")),
               tmp.file("s2.uvzc"), l2);

  const Checkpoint ck = load_checkpoint(tmp.file("s2.uvzc"));
  ParamStore ps = init_params(ck.config);
  restore_params(ps, ck);

  std::vector<ManifestEntry> items;
  for (const ManifestEntry& e : load_manifest(mpath))
    if (e.split == "test") items.push_back(e);
  REQUIRE(items.size() == 2);

  const std::string outdir = tmp.file("enhanced");
  const EvalOutput out = evaluate(ps, ck.config, items, outdir, 1);
  REQUIRE(out.report.rows.size() == 2);
  CHECK(out.skipped.empty());
  for (const MetricRow& r : out.report.rows) {
    CHECK(r.has_ref);
    CHECK(std::isfinite(r.psnr));
    CHECK(r.ssim <= 1.0);
  }
  const std::string text = report_text(out);
  CHECK(text.find("image,psnr,mse,ssim,uicm,uism,uiconm,uiqm") == 0);
  CHECK(text.find("MEAN,") != std::string::npos);

  int written = 0;
  for (const auto& e : fs::directory_iterator(outdir))
    written += e.path().extension() == ".ppm";
  CHECK(written == 2);
  const std::string stem = fs::path(items[0].raw).stem().string();
  const Tensor enhanced = load_image(outdir + "/" + stem + "_enhanced.ppm");
  CHECK(enhanced.shape() == Shape(1, 3, 16, 16));

  // Thread count changes scheduling, never results.
  const EvalOutput par = evaluate(ps, ck.config, items, outdir, 3);
  CHECK(report_text(par) == text);

  // A missing input is skipped and lands in the footer.
  std::vector<ManifestEntry> broken = items;
  broken.push_back({"test", tmp.file("nope.ppm"), "", ""});
  const EvalOutput skipping = evaluate(ps, ck.config, broken, "", 1);
  CHECK(skipping.report.rows.size() == 2);
  REQUIRE(skipping.skipped.size() == 1);
  CHECK(skipping.skipped[0].find("nope.ppm") != std::string::npos);
  CHECK(report_text(skipping).find("# skipped\t") != std::string::npos);

  std::vector<ManifestEntry> all_bad = {{"test", tmp.file("gone.ppm"), "", ""}};
  CHECK_THROWS_AS(evaluate(ps, ck.config, all_bad, "", 1), ConfigError);
  CHECK_THROWS_AS(evaluate(ps, ck.config, {}, "", 1), ConfigError);
  CHECK_THROWS_AS(evaluate(ps, ck.config, items, "", 0), ConfigError);
}

TEST_CASE("single image inference keeps shapes and range") {
  TmpDir tmp("uvz_tr_infer");
  const TrainData data = load_training_data(tiny_dataset(tmp));
  const TrainConfig cfg = tiny_cfg(1, 1);
  ParamStore ps = init_params(cfg.net);

  const Tensor y = enhance_image(ps, cfg.net, data.test[0].raw);
  CHECK(y.shape() == Shape(1, 3, 16, 16));
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.data()[i] >= Real(0));
    CHECK(y.data()[i] <= Real(1));
  }
  const Tensor d = predict_depth(ps, cfg.net, data.test[0].raw);
  CHECK(d.shape() == Shape(1, 1, 16, 16));
}
