#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "uvz/gradcheck.hpp"
#include "uvz/networks.hpp"
#include "uvz/tensor.hpp"

using namespace uvz;

namespace {

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.base_channels = 4;
  cfg.seed = 11;
  return cfg;
}

Tensor rand_image(int n, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform(Shape(n, 3, h, w), rng, 0.0, 1.0);
}

Tensor rand_depth(int n, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform(Shape(n, 1, h, w), rng, 0.0, 1.0);
}

Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed ^ 0x51ed2701ull);
  Tensor w = Tensor::uniform(y.shape(), rng, 0.5, 1.5);
  return sum_all(mul(y, w));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

bool in_unit_range(const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (!(t.data()[i] >= Real(0) && t.data()[i] <= Real(1))) return false;
  return true;
}

std::set<std::string> param_names(const ParamStore& ps) {
  std::set<std::string> names;
  for (int h = 0; h < ps.size(); ++h) names.insert(ps.name(h));
  return names;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(bool(out));
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

std::string tmp_path(const char* name) {
  return std::string("/tmp/uvz_test_") + name;
}

}  // namespace

TEST_CASE("config validation") {
  NetConfig cfg = tiny_config();
  CHECK_NOTHROW(validate(cfg));

  cfg.base_channels = 0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = tiny_config();
  cfg.depth_levels = 1;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = tiny_config();
  cfg.block.heads = 3;  // bottleneck 16 channels, not divisible
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg.use_dpm = false;  // heads only matter for the attention module
  CHECK_NOTHROW(validate(cfg));
  cfg = tiny_config();
  cfg.base_channels = 2;  // below the squeeze reduction
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg.use_dam = false;
  cfg.block.heads = 1;
  CHECK_NOTHROW(validate(cfg));
}

TEST_CASE("initialization is seeded and pins special values") {
  NetConfig cfg = tiny_config();
  ParamStore a = init_params(cfg);
  ParamStore b = init_params(cfg);
  REQUIRE(a.size() == b.size());
  for (int h = 0; h < a.size(); ++h) {
    CHECK(a.name(h) == b.name(h));
    CHECK(bitwise_equal(a.value(h), b.value(h)));
  }

  NetConfig other = cfg;
  other.seed = 12;
  ParamStore c = init_params(other);
  bool any_diff = false;
  for (int h = 0; h < a.size() && !any_diff; ++h)
    any_diff = !bitwise_equal(a.value(h), c.value(h));
  CHECK(any_diff);

  for (int h = 0; h < a.size(); ++h) {
    const std::string& name = a.name(h);
    const Tensor& v = a.value(h);
    if (name.ends_with(".gamma"))
      CHECK(v.data()[0] == Real(0));
    if (name.ends_with(".beta1") || name.ends_with(".beta3") ||
        name.ends_with(".beta5"))
      CHECK(v.data()[0] == Real(1));
    if (name.ends_with(".b"))
      for (std::int64_t i = 0; i < v.numel(); ++i)
        CHECK(v.data()[i] == Real(0));
    if (name.ends_with(".g"))
      for (std::int64_t i = 0; i < v.numel(); ++i)
        CHECK(v.data()[i] == Real(1));
  }
}

TEST_CASE("conv weights respect the fan-in bound") {
  NetConfig cfg;
  cfg.base_channels = 16;
  cfg.seed = 5;
  ParamStore ps = init_params(cfg);
  const Tensor& w = ps.value(ps.handle("den.enc0b.w"));
  REQUIRE(w.shape() == Shape(16, 16, 3, 3));
  const double bound = std::sqrt(6.0 / (1.04 * 16 * 9));
  double sq = 0.0;
  for (std::int64_t i = 0; i < w.numel(); ++i) {
    CHECK(std::abs(double(w.data()[i])) <= bound);
    sq += double(w.data()[i]) * double(w.data()[i]);
  }
  // uniform on [-bound, bound] has sd = bound/sqrt(3); 2304 samples keep
  // the estimate within a few percent
  const double sd = std::sqrt(sq / double(w.numel()));
  CHECK(sd == doctest::Approx(bound / std::sqrt(3.0)).epsilon(0.1));
}

TEST_CASE("depth estimation: shapes, range, decoder features") {
  NetConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg);
  Tensor x = rand_image(2, 16, 16, 31);
  DenOut out = den_forward(nullptr, ps, cfg, x);
  CHECK(out.d.shape() == Shape(2, 1, 16, 16));
  CHECK(in_unit_range(out.d));
  REQUIRE(int(out.feats.size()) == cfg.depth_levels);
  CHECK(out.feats[0].shape() == Shape(2, 16, 4, 4));
  CHECK(out.feats[1].shape() == Shape(2, 8, 8, 8));
  CHECK(out.feats[2].shape() == Shape(2, 4, 16, 16));
}

TEST_CASE("depth estimation rejects bad inputs before compute") {
  NetConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg);
  CHECK_THROWS_AS(den_forward(nullptr, ps, cfg, rand_depth(1, 16, 16, 1)),
                  ShapeError);
  CHECK_THROWS_AS(den_forward(nullptr, ps, cfg, rand_image(1, 18, 18, 1)),
                  ConfigError);
  // divisible by 4 but skip level 1 (6x6) is not poolable by 4
  CHECK_THROWS_AS(den_forward(nullptr, ps, cfg, rand_image(1, 12, 12, 1)),
                  ConfigError);
  NetConfig plain = cfg;
  plain.use_dam = false;
  ParamStore ps2 = init_params(plain);
  CHECK_NOTHROW(den_forward(nullptr, ps2, plain, rand_image(1, 12, 12, 1)));
}

TEST_CASE("regression branch contract") {
  NetConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg);
  Tensor x = rand_image(1, 16, 16, 7);
  DenOut den = den_forward(nullptr, ps, cfg, x);
  Tensor xhat = asn_forward(nullptr, ps, cfg, x, den.feats);
  CHECK(xhat.shape() == Shape(1, 3, 16, 16));
  CHECK(in_unit_range(xhat));

  std::vector<Tensor> short_list(den.feats.begin(), den.feats.end() - 1);
  CHECK_THROWS_AS(asn_forward(nullptr, ps, cfg, x, short_list), ConfigError);

  NetConfig off = cfg;
  off.use_asn = false;
  ParamStore ps2 = init_params(off);
  CHECK(ps2.handles_with_prefix("asn.").empty());
  CHECK_THROWS_AS(asn_forward(nullptr, ps2, off, x, den.feats), ConfigError);
}

TEST_CASE("enhancement: shapes and depth-map mismatch") {
  NetConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg);
  Tensor x = rand_image(2, 16, 16, 3);
  Tensor d = rand_depth(2, 16, 16, 4);
  Tensor y = dgen_forward(nullptr, ps, cfg, x, d);
  CHECK(y.shape() == Shape(2, 3, 16, 16));
  CHECK(in_unit_range(y));

  CHECK_THROWS_AS(dgen_forward(nullptr, ps, cfg, x, rand_depth(1, 16, 16, 4)),
                  ShapeError);
  CHECK_THROWS_AS(dgen_forward(nullptr, ps, cfg, x, rand_depth(2, 8, 8, 4)),
                  ShapeError);
  CHECK_THROWS_AS(dgen_forward(nullptr, ps, cfg, x, rand_image(2, 16, 16, 4)),
                  ShapeError);
  // 8x8 input leaves a 2x2 bottleneck that cannot host a 4x4 window
  CHECK_THROWS_AS(
      dgen_forward(nullptr, ps, cfg, rand_image(2, 8, 8, 3),
                   rand_depth(2, 8, 8, 4)),
      ConfigError);
}

TEST_CASE("depth guidance flags change only the maps") {
  NetConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg);
  Tensor x = rand_image(1, 16, 16, 9);
  Tensor da = rand_depth(1, 16, 16, 10);
  Tensor db = rand_depth(1, 16, 16, 11);
  Tensor y_full = dgen_forward(nullptr, ps, cfg, x, da);

  NetConfig nodepth = cfg;
  nodepth.use_depth = false;
  Tensor ya = dgen_forward(nullptr, ps, nodepth, x, da);
  Tensor yb = dgen_forward(nullptr, ps, nodepth, x, db);
  CHECK(bitwise_equal(ya, yb));
  CHECK_FALSE(bitwise_equal(ya, y_full));

  NetConfig norev = cfg;
  norev.use_reverse = false;
  CHECK_FALSE(bitwise_equal(dgen_forward(nullptr, ps, norev, x, da), y_full));

  NetConfig nors = cfg;
  nors.use_rs = false;
  CHECK_FALSE(bitwise_equal(dgen_forward(nullptr, ps, nors, x, da), y_full));

  // with guidance on, the output does react to the depth input
  CHECK_FALSE(bitwise_equal(dgen_forward(nullptr, ps, cfg, x, db), y_full));
}

TEST_CASE("ablation flags gate exactly their own parameters") {
  NetConfig full = tiny_config();
  ParamStore ps_full = init_params(full);
  const std::set<std::string> names_full = param_names(ps_full);

  struct Case {
    const char* tag;
    bool NetConfig::* flag;
    const char* marker;
  };
  const Case cases[] = {
      {"dam", &NetConfig::use_dam, ".dam"},
      {"rsb", &NetConfig::use_rsb, ".rsb"},
      {"asn", &NetConfig::use_asn, "asn."},
      {"rb", &NetConfig::use_rb, "dgen.rb"},
      {"dpm", &NetConfig::use_dpm, ".dpm"},
  };
  for (const Case& c : cases) {
    CAPTURE(c.tag);
    NetConfig cfg = full;
    cfg.*(c.flag) = false;
    ParamStore ps = init_params(cfg);
    const std::set<std::string> names = param_names(ps);
    CHECK(ps.scalar_count() < ps_full.scalar_count());
    for (const std::string& n : names) {
      CHECK(names_full.count(n) == 1);
      CHECK(n.find(c.marker) == std::string::npos);
    }
  }

  // map-only flags leave the parameter set untouched
  for (bool NetConfig::* flag : {&NetConfig::use_depth,
                                 &NetConfig::use_reverse,
                                 &NetConfig::use_rs}) {
    NetConfig cfg = full;
    cfg.*flag = false;
    ParamStore ps = init_params(cfg);
    CHECK(param_names(ps) == names_full);
    CHECK(ps.scalar_count() == ps_full.scalar_count());
  }
}

TEST_CASE("forward passes are deterministic") {
  NetConfig cfg = tiny_config();
  ParamStore a = init_params(cfg);
  ParamStore b = init_params(cfg);
  Tensor x = rand_image(1, 16, 16, 21);
  Tensor d = rand_depth(1, 16, 16, 22);
  CHECK(bitwise_equal(den_forward(nullptr, a, cfg, x).d,
                      den_forward(nullptr, b, cfg, x).d));
  CHECK(bitwise_equal(dgen_forward(nullptr, a, cfg, x, d),
                      dgen_forward(nullptr, b, cfg, x, d)));
}

TEST_CASE("frozen depth network never receives gradients") {
  NetConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg);
  Tensor x = rand_image(1, 16, 16, 33);

  // stage-2 pattern: depth produced off-tape, enhancement trained on tape
  DenOut den = den_forward(nullptr, ps, cfg, x);
  Tape tape;
  Tensor y = dgen_forward(&tape, ps, cfg, tape.leaf(x, false), den.d);
  tape.backward(weighted_sum(y, 40));

  for (int h : ps.handles_with_prefix("den."))
    CHECK(ps.grad_slot(h) == nullptr);
  for (int h : ps.handles_with_prefix("asn."))
    CHECK(ps.grad_slot(h) == nullptr);
  bool any_dgen_grad = false;
  for (int h : ps.handles_with_prefix("dgen."))
    if (ps.grad_live(h)) any_dgen_grad = true;
  CHECK(any_dgen_grad);
}

TEST_CASE("checkpoint: save, load, restore, byte-stable resave") {
  NetConfig cfg = tiny_config();
  cfg.seed = 77;
  ParamStore ps = init_params(cfg);

  // fake a bit of training state
  ps.step_counter() = 42;
  for (int h : {ps.handle("den.enc0a.w"), ps.handle("dgen.head.b")}) {
    std::vector<Real>& m = ps.adam_m(h);
    std::vector<Real>& v = ps.adam_v(h);
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = Real(0.01) * Real(double(i % 7));
      v[i] = Real(0.001) * Real(double(i % 5));
    }
  }

  const std::string p1 = tmp_path("ckpt1.uvzc");
  const std::string p2 = tmp_path("ckpt2.uvzc");
  save_checkpoint(p1, ps, cfg, 9);

  Checkpoint ck = load_checkpoint(p1);
  CHECK(ck.epoch == 9);
  CHECK(ck.adam_step == 42);
  CHECK(ck.config.base_channels == cfg.base_channels);
  CHECK(ck.config.seed == cfg.seed);
  CHECK(ck.config.use_dam == cfg.use_dam);

  ParamStore fresh = init_params(ck.config);
  // wipe so a silent non-restore cannot pass by matching seeds
  for (int h = 0; h < fresh.size(); ++h) {
    Tensor& v = fresh.value(h);
    std::fill(v.data(), v.data() + v.numel(), Real(0.5));
  }
  restore_params(fresh, ck);
  REQUIRE(fresh.size() == ps.size());
  for (int h = 0; h < ps.size(); ++h)
    CHECK(bitwise_equal(fresh.value(h), ps.value(h)));
  CHECK(fresh.step_counter() == 42);
  const int hm = fresh.handle("den.enc0a.w");
  REQUIRE(fresh.has_adam_state(hm));
  CHECK(fresh.adam_m(hm) == ps.adam_m(hm));
  CHECK(fresh.adam_v(hm) == ps.adam_v(hm));
  CHECK_FALSE(fresh.has_adam_state(fresh.handle("den.enc0b.w")));

  save_checkpoint(p2, fresh, ck.config, ck.epoch);
  CHECK(read_file(p1) == read_file(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint: corruption is reported with a byte offset") {
  NetConfig cfg = tiny_config();
  ParamStore ps = init_params(cfg);
  const std::string path = tmp_path("ckpt_corrupt.uvzc");
  save_checkpoint(path, ps, cfg, 0);
  const std::string good = read_file(path);

  auto expect_format_error = [&](const std::string& bytes,
                                 const char* needle) {
    write_file(path, bytes);
    try {
      load_checkpoint(path);
      FAIL_CHECK("expected a format error for " << needle);
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
      CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }
  };

  std::string bad = good;
  bad[0] = 'X';
  expect_format_error(bad, "magic");

  bad = good;
  bad[4] = 2;
  expect_format_error(bad, "version");

  expect_format_error(good.substr(0, good.size() / 2), "truncated");
  expect_format_error(good + "!", "trailing");

  // first array starts after the config block; blow up its first dim
  std::uint32_t cfg_len = 0;
  for (int i = 0; i < 4; ++i)
    cfg_len |= std::uint32_t(std::uint8_t(good[8 + i])) << (8 * i);
  const std::size_t first_array = 12 + cfg_len + 4;
  std::uint32_t name_len = std::uint32_t(std::uint8_t(good[first_array])) |
                           (std::uint32_t(std::uint8_t(good[first_array + 1]))
                            << 8);
  const std::size_t dims_at = first_array + 2 + name_len + 1;
  bad = good;
  bad[dims_at + 3] = char(0x7f);
  expect_format_error(bad, "implausible");

  std::remove(path.c_str());
}

TEST_CASE("checkpoint: config mismatches name the parameter") {
  NetConfig small = tiny_config();
  NetConfig wide = tiny_config();
  wide.base_channels = 8;
  const std::string path = tmp_path("ckpt_cross.uvzc");

  ParamStore ps_small = init_params(small);
  save_checkpoint(path, ps_small, small, 0);
  Checkpoint ck = load_checkpoint(path);

  ParamStore ps_wide = init_params(wide);
  try {
    restore_params(ps_wide, ck);
    FAIL_CHECK("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("den.") != std::string::npos);
  }

  // checkpoint without attention blocks into a full model: a parameter is
  // missing; the reverse direction carries an unknown parameter
  NetConfig nodam = small;
  nodam.use_dam = false;
  ParamStore ps_nodam = init_params(nodam);
  save_checkpoint(path, ps_nodam, nodam, 0);
  Checkpoint ck_nodam = load_checkpoint(path);
  ParamStore ps_full = init_params(small);
  try {
    restore_params(ps_full, ck_nodam);
    FAIL_CHECK("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("den.dam") != std::string::npos);
  }
  ParamStore ps_nodam2 = init_params(nodam);
  save_checkpoint(path, ps_full, small, 0);
  Checkpoint ck_full = load_checkpoint(path);
  CHECK_THROWS_AS(restore_params(ps_nodam2, ck_full), ShapeError);

  std::remove(path.c_str());
}

TEST_CASE("network gradients agree with finite differences") {
  NetConfig cfg = tiny_config();
  cfg.seed = 3;
  FdOpts opts;
  opts.tol = 1e-2;
  opts.max_probes = 2;
  opts.seed = 17;

  Tensor x = rand_image(1, 16, 16, 51);
  Tensor d = rand_depth(1, 16, 16, 52);

  SUBCASE("depth estimation") {
    ParamStore ps = init_params(cfg);
    GradCheckReport rep = check_param_gradients(
        "den",
        [&](Tape& tape, ParamStore& store) {
          DenOut out = den_forward(&tape, store, cfg, tape.leaf(x, false));
          return weighted_sum(out.d, 60);
        },
        ps, opts);
    INFO(rep.detail);
    CHECK(rep.pass);
    CHECK(rep.checked > 0);
  }

  SUBCASE("regression branch through shared features") {
    ParamStore ps = init_params(cfg);
    GradCheckReport rep = check_param_gradients(
        "asn",
        [&](Tape& tape, ParamStore& store) {
          Tensor xi = tape.leaf(x, false);
          DenOut den = den_forward(&tape, store, cfg, xi);
          return weighted_sum(asn_forward(&tape, store, cfg, xi, den.feats),
                              61);
        },
        ps, opts);
    INFO(rep.detail);
    CHECK(rep.pass);
    CHECK(rep.checked > 0);
  }

  SUBCASE("enhancement with frozen depth") {
    ParamStore ps = init_params(cfg);
    GradCheckReport rep = check_param_gradients(
        "dgen",
        [&](Tape& tape, ParamStore& store) {
          Tensor y = dgen_forward(&tape, store, cfg, tape.leaf(x, false), d);
          return weighted_sum(y, 62);
        },
        ps, opts);
    INFO(rep.detail);
    CHECK(rep.pass);
    CHECK(rep.checked > 0);
  }
}
