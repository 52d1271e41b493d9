#include "uvz/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace uvz {
namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw ConfigError("read failed for '" + path + "'");
  return std::move(ss).str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  out.flush();
  if (!out) throw ConfigError("write failed for '" + path + "'");
}

// Netpbm header scanner: whitespace-separated decimal tokens with '#'
// comments, one whitespace byte between the maxval and the raster.
class PnmParser {
 public:
  PnmParser(std::string bytes, std::string path)
      : buf_(std::move(bytes)), path_(std::move(path)) {}

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw FormatError(path_ + ": " + msg + " at byte " + std::to_string(at));
  }

  std::string magic() {
    if (buf_.size() < 2) fail("truncated header", 0);
    pos_ = 2;
    return buf_.substr(0, 2);
  }

  std::int64_t number(const char* what) {
    skip_separators();
    token_at_ = pos_;
    if (pos_ >= buf_.size() || !is_digit(buf_[pos_]))
      fail(std::string("expected ") + what, pos_);
    std::int64_t v = 0;
    while (pos_ < buf_.size() && is_digit(buf_[pos_])) {
      v = v * 10 + (buf_[pos_] - '0');
      if (v > 1000000000) fail(std::string("implausible ") + what, token_at_);
      ++pos_;
    }
    return v;
  }

  std::size_t token_at() const { return token_at_; }

  const unsigned char* raster(std::int64_t bytes, const char* what) {
    if (pos_ >= buf_.size() || !is_space(buf_[pos_]))
      fail("expected whitespace before raster", pos_);
    ++pos_;
    if (std::int64_t(buf_.size() - pos_) < bytes)
      fail(std::string("truncated ") + what, buf_.size());
    if (std::int64_t(buf_.size() - pos_) > bytes)
      fail("trailing data after raster", pos_ + std::size_t(bytes));
    return reinterpret_cast<const unsigned char*>(buf_.data()) + pos_;
  }

 private:
  static bool is_space(char ch) {
    return ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n';
  }
  static bool is_digit(char ch) { return ch >= '0' && ch <= '9'; }

  void skip_separators() {
    for (;;) {
      while (pos_ < buf_.size() && is_space(buf_[pos_])) ++pos_;
      if (pos_ < buf_.size() && buf_[pos_] == '#') {
        while (pos_ < buf_.size() && buf_[pos_] != '\n') ++pos_;
        continue;
      }
      return;
    }
  }

  std::string buf_;
  std::string path_;
  std::size_t pos_ = 0;
  std::size_t token_at_ = 0;
};

int read_dim(PnmParser& p, const char* what) {
  const std::int64_t v = p.number(what);
  if (v < 1 || v > 65535)
    p.fail("bad " + std::string(what) + " " + std::to_string(v), p.token_at());
  return int(v);
}

unsigned char quant8(Real v) {
  return (unsigned char)(std::lround(std::clamp(double(v), 0.0, 1.0) * 255.0));
}

int quant16(Real v) {
  return int(std::lround(std::clamp(double(v), 0.0, 1.0) * 65535.0));
}

}  // namespace

void validate(const DegradationParams& p) {
  for (int c = 0; c < 3; ++c) {
    if (!(p.beta[c] >= 0.0))
      throw ConfigError("degradation: attenuation coefficients must be nonnegative");
    if (!(p.backscatter[c] >= 0.0 && p.backscatter[c] <= 1.0))
      throw ConfigError("degradation: backscatter color must lie in [0,1]");
  }
  if (!(p.beta[0] > p.beta[1] && p.beta[1] >= p.beta[2]))
    throw ConfigError("degradation: attenuation must satisfy red > green >= blue");
  if (!(p.noise_sigma >= 0.0))
    throw ConfigError("degradation: noise sigma must be nonnegative");
}

Scene synth_scene(std::uint64_t seed, int h, int w) {
  if (h < 16 || w < 16)
    throw ConfigError("synth_scene: smallest supported scene is 16x16, got " +
                      std::to_string(h) + "x" + std::to_string(w));
  Rng rng(seed);
  Scene sc;
  sc.j = Tensor(Shape(1, 3, h, w));
  sc.d = Tensor::full(Shape(1, 1, h, w), Real(0.9));

  constexpr double kTau = 6.283185307179586476925287;

  // Far plane texture: two low-frequency waves per channel over a random
  // base color plus a diagonal ripple shared across channels.
  double base[3], amp[3], fx[3], fy[3], px[3], py[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.35, 0.65);
    amp[c] = rng.uniform(0.08, 0.18);
    fx[c] = double(1 + rng.uniform_int(3));
    fy[c] = double(1 + rng.uniform_int(3));
    px[c] = rng.uniform(0.0, kTau);
    py[c] = rng.uniform(0.0, kTau);
  }
  const double fine = rng.uniform(0.02, 0.05);
  const double fph = rng.uniform(0.0, kTau);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v =
            base[c] +
            amp[c] * std::sin(kTau * fx[c] * x / w + px[c]) *
                std::sin(kTau * fy[c] * y / h + py[c]) +
            fine * std::sin(kTau * double(3 * y + 5 * x) / 16.0 + fph);
        sc.j.at(0, c, y, x) = Real(std::clamp(v, 0.1, 0.95));
      }

  const int m = std::min(h, w);
  const int nprim = 3 + rng.uniform_int(4);

  // Distinct constant depths, kept clear of each other and of the far
  // plane. The last primitive gets the near plane 0.1 and, painted last,
  // stays fully visible, so d always spans [0.1, 0.9]. Primitive extents
  // are capped at a third of the short side, so at most two thirds of the
  // far plane can ever be covered.
  for (int k = 0; k < nprim; ++k) {
    double dep = 0.1;
    if (k + 1 < nprim) {
      for (int tries = 0;; ++tries) {
        dep = rng.uniform(0.12, 0.85);
        bool clear = std::abs(dep - 0.9) > 0.005 && std::abs(dep - 0.1) > 0.005;
        for (Real prev : sc.depths)
          clear = clear && std::abs(dep - double(prev)) > 0.005;
        if (clear) break;
        if (tries > 1000) throw ContractError("synth_scene: depth sampling stalled");
      }
    }
    sc.depths.push_back(Real(dep));
    sc.masks.emplace_back(Shape(1, 1, h, w));
  }

  auto paint = [&](int k, int y, int x, Real r, Real g, Real b) {
    sc.j.at(0, 0, y, x) = r;
    sc.j.at(0, 1, y, x) = g;
    sc.j.at(0, 2, y, x) = b;
    sc.d.at(0, 0, y, x) = sc.depths[std::size_t(k)];
    for (int q = 0; q < k; ++q) sc.masks[std::size_t(q)].at(0, 0, y, x) = Real(0);
    sc.masks[std::size_t(k)].at(0, 0, y, x) = Real(1);
  };
  auto color = [&] { return Real(rng.uniform(0.1, 0.95)); };

  for (int k = 0; k < nprim; ++k) {
    const int kind = rng.uniform_int(3);
    if (kind == 0 || kind == 2) {
      // Flat (kind 0) or gradient-filled (kind 2) rectangle.
      const int pw = 3 + rng.uniform_int(std::max(1, m / 3 - 2));
      const int ph = 3 + rng.uniform_int(std::max(1, m / 3 - 2));
      const int x0 = rng.uniform_int(w - pw + 1);
      const int y0 = rng.uniform_int(h - ph + 1);
      Real c0[3] = {color(), color(), color()};
      Real c1[3] = {c0[0], c0[1], c0[2]};
      bool horizontal = true;
      if (kind == 2) {
        for (Real& v : c1) v = color();
        horizontal = rng.uniform_int(2) == 0;
      }
      for (int y = y0; y < y0 + ph; ++y)
        for (int x = x0; x < x0 + pw; ++x) {
          const double t = horizontal ? double(x - x0) / double(pw - 1)
                                      : double(y - y0) / double(ph - 1);
          paint(k, y, x, Real((1.0 - t) * double(c0[0]) + t * double(c1[0])),
                Real((1.0 - t) * double(c0[1]) + t * double(c1[1])),
                Real((1.0 - t) * double(c0[2]) + t * double(c1[2])));
        }
    } else {
      const int r = 2 + rng.uniform_int(std::max(1, m / 6 - 1));
      const int cy = r + rng.uniform_int(h - 2 * r);
      const int cx = r + rng.uniform_int(w - 2 * r);
      const Real cr = color(), cg = color(), cb = color();
      for (int y = cy - r; y <= cy + r; ++y)
        for (int x = cx - r; x <= cx + r; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
            paint(k, y, x, cr, cg, cb);
    }
  }
  return sc;
}

Tensor degrade(const Tensor& j, const Tensor& d, const DegradationParams& p) {
  validate(p);
  const Shape js = j.shape(), ds = d.shape();
  if (js.n < 1 || js.c != 3)
    throw ShapeError("degrade: image must be (n,3,h,w), got " + js.str());
  if (!(ds.n == js.n && ds.c == 1 && ds.h == js.h && ds.w == js.w))
    throw ShapeError("degrade: depth " + ds.str() + " does not match image " + js.str());
  Tensor x(js);
  Rng rng(p.seed);
  const std::int64_t hw = std::int64_t(js.h) * js.w;
  for (int n = 0; n < js.n; ++n)
    for (int c = 0; c < 3; ++c) {
      const Real* jc = j.data() + (std::int64_t(n) * 3 + c) * hw;
      const Real* dn = d.data() + std::int64_t(n) * hw;
      Real* xc = x.data() + (std::int64_t(n) * 3 + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const double t = std::exp(-p.beta[c] * double(dn[i]));
        double v = double(jc[i]) * t + p.backscatter[c] * (1.0 - t);
        if (p.noise_sigma > 0.0) v += p.noise_sigma * rng.normal();
        xc[i] = Real(std::clamp(v, 0.0, 1.0));
      }
    }
  return x;
}

void save_image(const std::string& path, const Tensor& img) {
  const Shape s = img.shape();
  if (s.n != 1 || s.c != 3)
    throw ShapeError("save_image: expected (1,3,h,w), got " + s.str());
  std::string out = "P6\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
  out.reserve(out.size() + std::size_t(3 * s.h * s.w));
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c) out.push_back(char(quant8(img.at(0, c, y, x))));
  write_file(path, out);
}

Tensor load_image(const std::string& path) {
  PnmParser p(read_file(path), path);
  const std::string m = p.magic();
  if (m == "P3") p.fail("binary PPM required, got ASCII P3", 0);
  if (m != "P6") p.fail("bad magic '" + m + "', expected P6", 0);
  const int w = read_dim(p, "width");
  const int h = read_dim(p, "height");
  const std::int64_t maxval = p.number("maxval");
  if (maxval != 255)
    p.fail("unsupported maxval " + std::to_string(maxval) + ", expected 255",
           p.token_at());
  const unsigned char* r = p.raster(std::int64_t(3) * h * w, "pixel data");
  Tensor t(Shape(1, 3, h, w));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(0, c, y, x) = Real(double(r[(std::int64_t(y) * w + x) * 3 + c]) / 255.0);
  return t;
}

void save_depth(const std::string& path, const Tensor& depth) {
  const Shape s = depth.shape();
  if (s.n != 1 || s.c != 1)
    throw ShapeError("save_depth: expected (1,1,h,w), got " + s.str());
  std::string out = "P5\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n65535\n";
  out.reserve(out.size() + std::size_t(2 * s.h * s.w));
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const int q = quant16(depth.at(0, 0, y, x));
      out.push_back(char((q >> 8) & 0xff));
      out.push_back(char(q & 0xff));
    }
  write_file(path, out);
}

Tensor load_depth(const std::string& path) {
  PnmParser p(read_file(path), path);
  const std::string m = p.magic();
  if (m == "P2") p.fail("binary PGM required, got ASCII P2", 0);
  if (m != "P5") p.fail("bad magic '" + m + "', expected P5", 0);
  const int w = read_dim(p, "width");
  const int h = read_dim(p, "height");
  const std::int64_t maxval = p.number("maxval");
  if (maxval != 65535)
    p.fail("unsupported maxval " + std::to_string(maxval) + ", expected 65535",
           p.token_at());
  const unsigned char* r = p.raster(std::int64_t(2) * h * w, "depth data");
  Tensor t(Shape(1, 1, h, w));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::int64_t i = (std::int64_t(y) * w + x) * 2;
      const int v = (int(r[i]) << 8) | int(r[i + 1]);
      t.at(0, 0, y, x) = Real(double(v) / 65535.0);
    }
  return t;
}

std::string make_dataset(const DatagenOptions& opt, const std::string& out_dir) {
  if (opt.count < 1) throw ConfigError("datagen: count must be at least 1");
  if (!(opt.split_ratio >= 0.0 && opt.split_ratio <= 1.0))
    throw ConfigError("datagen: split ratio must lie in [0,1]");
  validate(opt.params);

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw ConfigError("cannot create '" + out_dir + "': " + ec.message());

  // A seeded shuffle picks the train subset; scene content only depends on
  // the image index, not on the split.
  std::vector<int> order(std::size_t(opt.count));
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(opt.seed ^ 0x73706c6974ULL);
  split_rng.shuffle(order);
  const int n_train = int(std::floor(opt.split_ratio * double(opt.count)));
  std::vector<bool> train(std::size_t(opt.count), false);
  for (int i = 0; i < n_train; ++i) train[std::size_t(order[std::size_t(i)])] = true;

  Rng master(opt.seed);
  std::string manifest;
  for (int i = 0; i < opt.count; ++i) {
    const std::uint64_t scene_seed = master.next_u64();
    const std::uint64_t noise_seed = master.next_u64();
    Scene sc = synth_scene(scene_seed, opt.height, opt.width);
    DegradationParams p = opt.params;
    p.seed = noise_seed;
    const Tensor x = degrade(sc.j, sc.d, p);

    char stem[16];
    std::snprintf(stem, sizeof stem, "img%04d", i);
    const std::string raw = std::string(stem) + "_raw.ppm";
    const std::string clean = std::string(stem) + "_clean.ppm";
    const std::string depth = std::string(stem) + "_depth.pgm";
    save_image(out_dir + "/" + raw, x);
    save_image(out_dir + "/" + clean, sc.j);
    save_depth(out_dir + "/" + depth, sc.d);
    manifest += train[std::size_t(i)] ? "train\t" : "test\t";
    manifest += raw + "\t" + clean + "\t" + depth + "\n";
  }
  const std::string mpath = out_dir + "/manifest.tsv";
  write_file(mpath, manifest);
  return mpath;
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  const std::string text = read_file(path);
  const std::filesystem::path dir = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path q(p);
    return q.is_absolute() ? q.string() : (dir / q).string();
  };

  std::vector<ManifestEntry> out;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    ++line_no;
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;

    std::vector<std::string> f;
    std::size_t s = 0;
    for (;;) {
      const std::size_t t = line.find('\t', s);
      if (t == std::string::npos) {
        f.push_back(line.substr(s));
        break;
      }
      f.push_back(line.substr(s, t - s));
      s = t + 1;
    }
    if (f.size() != 4)
      throw FormatError(path + " line " + std::to_string(line_no) +
                        ": expected 4 tab-separated fields, got " +
                        std::to_string(f.size()));
    if (f[0] != "train" && f[0] != "test")
      throw FormatError(path + " line " + std::to_string(line_no) +
                        ": unknown split '" + f[0] + "'");
    out.push_back({f[0], resolve(f[1]), resolve(f[2]), resolve(f[3])});
  }
  if (out.empty()) throw FormatError(path + ": empty manifest");
  return out;
}

}  // namespace uvz
