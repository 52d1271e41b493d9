// Command-line front end: dataset synthesis, the two training stages,
// inference, evaluation and the gradient self-check behind one binary.
//
// Every run resolves its settings from defaults, then an optional
// `key=value` config file, then command-line flags (flags win), prints the
// resolved configuration to stdout and executes. Exit codes: 0 success,
// 1 validation/input error, 2 runtime failure.

#include <fnmatch.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uvz/datagen.hpp"
#include "uvz/gradcheck.hpp"
#include "uvz/networks.hpp"
#include "uvz/trainer.hpp"

namespace fs = std::filesystem;

namespace {

using uvz::ConfigError;
using uvz::FormatError;

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("config: bad number '" + v + "' for " + key);
  return x;
}

long long parse_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  long long x = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("config: bad integer '" + v + "' for " + key);
  return x;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("config: bad integer '" + v + "' for " + key);
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

std::array<double, 3> parse_triple(const std::string& key,
                                   const std::string& v) {
  std::array<double, 3> out{};
  std::stringstream ss(v);
  std::string part;
  int i = 0;
  while (std::getline(ss, part, ',')) {
    if (i >= 3) throw ConfigError("config: " + key + " needs 3 values");
    out[std::size_t(i++)] = parse_double(key, part);
  }
  if (i != 3) throw ConfigError("config: " + key + " needs 3 values");
  return out;
}

// All settings of all commands; each command registers the subset it owns.
struct Settings {
  std::string config;
  std::uint64_t seed = 0;
  std::string out = "uvz_out";
  int threads = 1;

  // datagen
  int count = 64;
  int size = 64;
  double split = 0.75;
  std::string beta = "0.8,0.35,0.3";
  std::string backscatter = "0.05,0.35,0.45";
  double noise = 0.01;

  // training / eval
  std::string data;
  int epochs = 100;
  double lr = 2e-4;
  int batch = 4;
  std::string ckpt;
  std::string init_ckpt;
  std::string report;

  // inference
  std::string input;

  // ablations (registered on the train commands)
  bool use_dam = true, use_rsb = true, use_asn = true, use_rb = true;
  bool use_depth = true, use_reverse = true, use_rs = true, use_dpm = true;
};

// One resolved key: its config-file name, the flag that may override it,
// and accessors into Settings.
struct KeyBind {
  std::string key;
  CLI::Option* opt = nullptr;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

struct Command {
  CLI::App* app = nullptr;
  std::vector<KeyBind> keys;
  std::function<int()> run;
};

void apply_config_file(Command& cmd, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    std::size_t eq = line.find('=', start);
    if (eq == std::string::npos)
      throw FormatError(path + ": expected key=value at line " +
                        std::to_string(lineno));
    std::string key = line.substr(start, eq - start);
    std::string value = line.substr(eq + 1);
    auto it = std::find_if(cmd.keys.begin(), cmd.keys.end(),
                           [&key](const KeyBind& b) { return b.key == key; });
    if (it == cmd.keys.end())
      throw ConfigError("config: unknown key '" + key + "'");
    if (it->opt != nullptr && it->opt->count() > 0) continue;  // flag wins
    it->set(value);
  }
}

void print_resolved(const Command& cmd, const std::string& name) {
  std::cout << "# uvz " << name << " resolved configuration\n";
  for (const KeyBind& b : cmd.keys)
    std::cout << b.key << "=" << b.get() << "\n";
  std::cout << std::flush;
}

// Expands a pattern whose last path component may contain * ? [..]
// wildcards. A plain existing file passes through unchanged.
std::vector<std::string> expand_glob(const std::string& pattern) {
  std::vector<std::string> out;
  if (fs::exists(pattern) && !fs::is_directory(pattern)) {
    out.push_back(pattern);
    return out;
  }
  fs::path p(pattern);
  fs::path dir = p.parent_path();
  std::string leaf = p.filename().string();
  if (dir.empty()) dir = ".";
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    if (fnmatch(leaf.c_str(), name.c_str(), 0) == 0)
      out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void require_set(const std::string& cmd, const std::string& flag,
                 const std::string& value) {
  if (value.empty())
    throw ConfigError(cmd + ": --" + flag + " is required");
}

uvz::NetConfig net_config(const Settings& s) {
  uvz::NetConfig net;
  net.seed = s.seed;
  net.use_dam = s.use_dam;
  net.use_rsb = s.use_rsb;
  net.use_asn = s.use_asn;
  net.use_rb = s.use_rb;
  net.use_depth = s.use_depth;
  net.use_reverse = s.use_reverse;
  net.use_rs = s.use_rs;
  net.use_dpm = s.use_dpm;
  return net;
}

uvz::TrainConfig train_config(const Settings& s, int stage) {
  uvz::TrainConfig tc;
  tc.stage = stage;
  tc.epochs = s.epochs;
  tc.lr = s.lr;
  tc.batch = s.batch;
  tc.net = net_config(s);
  return tc;
}

// Loads a checkpoint and rebuilds its parameter store; the architecture
// (including ablation switches) comes from the checkpoint itself.
std::pair<uvz::Checkpoint, uvz::ParamStore> load_model(
    const std::string& path) {
  uvz::Checkpoint ck = uvz::load_checkpoint(path);
  uvz::ParamStore ps = uvz::init_params(ck.config);
  uvz::restore_params(ps, ck);
  return {std::move(ck), std::move(ps)};
}

int cmd_datagen(const Settings& s) {
  uvz::DatagenOptions opt;
  opt.count = s.count;
  opt.height = s.size;
  opt.width = s.size;
  opt.split_ratio = s.split;
  opt.seed = s.seed;
  auto beta = parse_triple("beta", s.beta);
  auto back = parse_triple("backscatter", s.backscatter);
  for (int i = 0; i < 3; ++i) {
    opt.params.beta[i] = beta[std::size_t(i)];
    opt.params.backscatter[i] = back[std::size_t(i)];
  }
  opt.params.noise_sigma = s.noise;
  const std::string manifest = uvz::make_dataset(opt, s.out);
  std::cout << "wrote " << s.count << " triples, manifest " << manifest
            << "\n";
  return 0;
}

int run_training(const Settings& s, int stage) {
  uvz::TrainConfig tc = train_config(s, stage);
  uvz::validate(tc);
  uvz::TrainData data = uvz::load_training_data(s.data);
  fs::create_directories(s.out);
  const std::string tag = "train" + std::to_string(stage);
  const std::string ckpt =
      s.ckpt.empty() ? s.out + "/stage" + std::to_string(stage) + ".ckpt"
                     : s.ckpt;
  std::ofstream log(s.out + "/" + tag + ".log", std::ios::binary);
  if (!log)
    throw ConfigError("cannot open log '" + s.out + "/" + tag + ".log'");

  uvz::TrainResult res;
  if (stage == 1) {
    res = uvz::train_stage1(data, tc, ckpt, log);
  } else {
    uvz::Checkpoint init = uvz::load_checkpoint(s.init_ckpt);
    res = uvz::train_stage2(data, tc, init, ckpt, log);
  }
  std::cout << "final train loss " << fmt_g(res.train_curve.back())
            << ", best held-out " << fmt_g(res.best_val) << ", checkpoint "
            << ckpt << "\n";
  return 0;
}

int cmd_enhance(const Settings& s, bool depth_mode) {
  auto [ck, ps] = load_model(s.ckpt);
  std::vector<std::string> files = expand_glob(s.input);
  if (files.empty())
    throw ConfigError("no input matches '" + s.input + "'");
  fs::create_directories(s.out);
  for (const std::string& f : files) {
    uvz::Tensor raw = uvz::load_image(f);
    const std::string stem = fs::path(f).stem().string();
    if (depth_mode) {
      uvz::Tensor d = uvz::predict_depth(ps, ck.config, raw);
      const std::string dst = s.out + "/" + stem + "_depth.pgm";
      uvz::save_depth(dst, d);
      std::cout << f << " -> " << dst << "\n";
    } else {
      uvz::Tensor y = uvz::enhance_image(ps, ck.config, raw);
      const std::string dst = s.out + "/" + stem + "_enhanced.ppm";
      uvz::save_image(dst, y);
      std::cout << f << " -> " << dst << "\n";
    }
  }
  return 0;
}

int cmd_eval(const Settings& s) {
  auto [ck, ps] = load_model(s.ckpt);
  std::vector<uvz::ManifestEntry> items = uvz::load_manifest(s.data);
  fs::create_directories(s.out);
  uvz::EvalOutput eo =
      uvz::evaluate(ps, ck.config, items, s.out + "/enhanced", s.threads);
  const std::string report =
      s.report.empty() ? s.out + "/report.csv" : s.report;
  {
    std::ofstream rf(report, std::ios::binary);
    if (!rf) throw ConfigError("cannot open report '" + report + "'");
    rf << uvz::report_text(eo);
  }
  const uvz::MetricRow mean = eo.report.mean();
  std::cout << "evaluated " << eo.report.rows.size() << " images ("
            << eo.skipped.size() << " skipped), mean uiqm "
            << fmt_g(mean.uiqm);
  if (mean.has_ref) std::cout << ", mean psnr " << fmt_g(mean.psnr);
  std::cout << ", report " << report << "\n";
  return 0;
}

int cmd_gradcheck(const Settings& s) {
  const int rounds = 20;
  std::vector<uvz::GradCheckReport> reports =
      uvz::gradcheck_suite(s.seed, rounds);
  std::printf("%-26s %-6s %8s %12s %12s\n", "operation", "status", "probes",
              "max rel err", "of allowance");
  bool all = true;
  for (const auto& r : reports) {
    std::printf("%-26s %-6s %8lld %12.3g %12.3g\n", r.name.c_str(),
                r.pass ? "PASS" : "FAIL", static_cast<long long>(r.checked),
                r.max_rel_err, r.worst);
    if (!r.pass) {
      all = false;
      std::fprintf(stderr, "gradcheck: %s\n", r.detail.c_str());
    }
  }
  std::printf("%s\n", all ? "all gradients match" : "GRADIENT MISMATCH");
  if (!all) throw uvz::ContractError("gradient check failed");
  return 0;
}

// Shared --config/--seed/--out/--threads plus per-command keys. Every
// registered key is also a legal config-file entry for that command.
void add_shared(Command& c, Settings& s) {
  c.app->add_option("--config", s.config,
                    "key=value file applied under the flags");
  KeyBind seed{"seed",
               c.app->add_option("--seed", s.seed, "master seed")
                   ->capture_default_str(),
               [&s](const std::string& v) { s.seed = parse_u64("seed", v); },
               [&s] { return std::to_string(s.seed); }};
  KeyBind out{"out",
              c.app->add_option("--out", s.out, "output directory")
                  ->capture_default_str(),
              [&s](const std::string& v) { s.out = v; },
              [&s] { return s.out; }};
  KeyBind threads{
      "threads",
      c.app->add_option("--threads", s.threads, "evaluation worker threads")
          ->capture_default_str(),
      [&s](const std::string& v) {
        s.threads = int(parse_int("threads", v));
      },
      [&s] { return std::to_string(s.threads); }};
  c.keys.push_back(seed);
  c.keys.push_back(out);
  c.keys.push_back(threads);
}

void add_int(Command& c, Settings&, const std::string& key, int& field,
             const std::string& help) {
  KeyBind b{key,
            c.app->add_option("--" + key, field, help)->capture_default_str(),
            [&field, key](const std::string& v) {
              field = int(parse_int(key, v));
            },
            [&field] { return std::to_string(field); }};
  c.keys.push_back(b);
}

void add_double(Command& c, const std::string& key, double& field,
                const std::string& help) {
  KeyBind b{key,
            c.app->add_option("--" + key, field, help)->capture_default_str(),
            [&field, key](const std::string& v) {
              field = parse_double(key, v);
            },
            [&field] { return fmt_g(field); }};
  c.keys.push_back(b);
}

void add_string(Command& c, const std::string& key, std::string& field,
                const std::string& help, const std::string& flag = "") {
  const std::string f = flag.empty() ? key : flag;
  KeyBind b{key,
            c.app->add_option("--" + f, field, help)->capture_default_str(),
            [&field](const std::string& v) { field = v; },
            [&field] { return field; }};
  c.keys.push_back(b);
}

void add_ablations(Command& c, Settings& s) {
  struct Row {
    const char* key;
    const char* flag;
    bool* field;
    const char* help;
  };
  const Row rows[] = {
      {"use_dam", "--no-dam", &s.use_dam, "drop dual attention blocks"},
      {"use_rsb", "--no-rsb", &s.use_rsb, "plain decoder skips in stage 1"},
      {"use_asn", "--no-asn", &s.use_asn, "drop the scene regression head"},
      {"use_rb", "--no-rb", &s.use_rb, "drop enhancer residual skips"},
      {"use_depth", "--no-depth", &s.use_depth, "ignore the depth input"},
      {"use_reverse", "--no-reverse", &s.use_reverse,
       "feed depth unreversed"},
      {"use_rs", "--no-rs", &s.use_rs, "skip region smoothing"},
      {"use_dpm", "--no-dpm", &s.use_dpm, "drop the perception bottleneck"},
  };
  for (const Row& r : rows) {
    bool* field = r.field;
    KeyBind b{r.key, c.app->add_flag_callback(
                         r.flag, [field] { *field = false; }, r.help),
              [field, key = std::string(r.key)](const std::string& v) {
                *field = parse_bool(key, v);
              },
              [field] { return *field ? std::string("true")
                                      : std::string("false"); }};
    c.keys.push_back(b);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"depth-guided underwater image enhancement"};
  app.require_subcommand(1);
  Settings s;
  std::map<std::string, Command> commands;

  auto make = [&](const std::string& name, const std::string& desc) {
    Command& c = commands[name];
    c.app = app.add_subcommand(name, desc);
    add_shared(c, s);
    return std::ref(c);
  };

  {
    Command& c = make("datagen", "synthesize a raw/clean/depth dataset");
    add_int(c, s, "count", s.count, "number of triples");
    add_int(c, s, "size", s.size, "image side in pixels");
    add_double(c, "split", s.split, "train fraction");
    add_string(c, "beta", s.beta, "attenuation r,g,b per unit depth");
    add_string(c, "backscatter", s.backscatter, "backscatter color r,g,b");
    add_double(c, "noise", s.noise, "sensor noise sigma");
    c.run = [&s] { return cmd_datagen(s); };
  }
  {
    Command& c = make("train1", "stage 1: depth + scene supervision");
    add_string(c, "data", s.data, "dataset manifest");
    add_int(c, s, "epochs", s.epochs, "training epochs");
    add_double(c, "lr", s.lr, "Adam learning rate");
    add_int(c, s, "batch", s.batch, "batch size");
    add_string(c, "ckpt", s.ckpt, "checkpoint path (default out/stage1.ckpt)");
    add_ablations(c, s);
    c.run = [&s] {
      require_set("train1", "data", s.data);
      return run_training(s, 1);
    };
  }
  {
    Command& c = make("train2", "stage 2: depth-guided enhancement");
    add_string(c, "data", s.data, "dataset manifest");
    add_int(c, s, "epochs", s.epochs, "training epochs");
    add_double(c, "lr", s.lr, "Adam learning rate");
    add_int(c, s, "batch", s.batch, "batch size");
    add_string(c, "ckpt", s.ckpt, "checkpoint path (default out/stage2.ckpt)");
    add_string(c, "init_ckpt", s.init_ckpt, "finished stage-1 checkpoint",
               "init-ckpt");
    add_ablations(c, s);
    c.run = [&s] {
      require_set("train2", "data", s.data);
      require_set("train2", "init-ckpt", s.init_ckpt);
      return run_training(s, 2);
    };
  }
  {
    Command& c = make("enhance", "enhance raw images with a trained model");
    add_string(c, "ckpt", s.ckpt, "trained stage-2 checkpoint");
    add_string(c, "input", s.input, "input image file or glob");
    c.run = [&s] {
      require_set("enhance", "ckpt", s.ckpt);
      require_set("enhance", "input", s.input);
      return cmd_enhance(s, false);
    };
  }
  {
    Command& c = make("depth", "predict depth maps for raw images");
    add_string(c, "ckpt", s.ckpt, "trained checkpoint");
    add_string(c, "input", s.input, "input image file or glob");
    c.run = [&s] {
      require_set("depth", "ckpt", s.ckpt);
      require_set("depth", "input", s.input);
      return cmd_enhance(s, true);
    };
  }
  {
    Command& c = make("eval", "run metrics over a manifest's test entries");
    add_string(c, "ckpt", s.ckpt, "trained stage-2 checkpoint");
    add_string(c, "data", s.data, "dataset manifest");
    add_string(c, "report", s.report, "report path (default out/report.csv)");
    c.run = [&s] {
      require_set("eval", "ckpt", s.ckpt);
      require_set("eval", "data", s.data);
      return cmd_eval(s);
    };
  }
  {
    Command& c = make("gradcheck", "finite-difference sweep over all ops");
    c.run = [&s] { return cmd_gradcheck(s); };
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    for (auto& [name, cmd] : commands) {
      if (!cmd.app->parsed()) continue;
      if (!s.config.empty()) apply_config_file(cmd, s.config);
      print_resolved(cmd, name);
      return cmd.run();
    }
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const uvz::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return 2;
  }
}
