#include "uvz/networks.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "uvz/common.hpp"

namespace uvz {

namespace {

std::string lvl(const std::string& base, int i) {
  return base + std::to_string(i);
}

BlockConfig site_config(const NetConfig& cfg, int channels) {
  BlockConfig b = cfg.block;
  b.channels = channels;
  return b;
}

// Shape gate run before any compute. dpm_site pins the bottleneck to the
// attention window grid, dam_site pins every skip level to the pooling
// factor.
void check_image(const NetConfig& cfg, const Shape& s, const std::string& who,
                 bool dpm_site, bool dam_site) {
  if (s.n < 1) throw ShapeError(who + ": empty batch, got " + s.str());
  if (s.c != 3)
    throw ShapeError(who + ": expected (n,3,h,w), got " + s.str());
  const int div = 1 << (cfg.depth_levels - 1);
  if (s.h < div || s.w < div || s.h % div != 0 || s.w % div != 0)
    throw ConfigError(who + ": spatial dims of " + s.str() +
                      " must be positive multiples of " + std::to_string(div));
  if (dpm_site) {
    const int ws = cfg.block.window_size;
    if ((s.h / div) % ws != 0 || (s.w / div) % ws != 0)
      throw ConfigError(who + ": bottleneck " + std::to_string(s.h / div) +
                        "x" + std::to_string(s.w / div) +
                        " not tileable by window size " + std::to_string(ws));
  }
  if (dam_site) {
    const int pf = cfg.block.dam_pool_factor;
    for (int i = 0; i + 1 < cfg.depth_levels; ++i) {
      const int h = s.h >> i, w = s.w >> i;
      if (h % pf != 0 || w % pf != 0)
        throw ConfigError(who + ": skip level " + std::to_string(i) + " (" +
                          std::to_string(h) + "x" + std::to_string(w) +
                          ") not poolable by factor " + std::to_string(pf));
    }
  }
}

void register_encoder(ParamStore& ps, const std::string& p,
                      const NetConfig& cfg, int in_ch, Rng& rng) {
  int prev = in_ch;
  for (int i = 0; i < cfg.depth_levels; ++i) {
    const int c = cfg.base_channels << i;
    if (i > 0) {
      add_conv_param(ps, p + lvl(".down", i - 1), c, prev, 3, rng);
      prev = c;
    }
    add_conv_param(ps, p + lvl(".enc", i) + "a", c, prev, 3, rng);
    add_conv_param(ps, p + lvl(".enc", i) + "b", c, c, 3, rng);
    prev = c;
  }
}

void register_decoder_level(ParamStore& ps, const std::string& p, int i,
                            int c, Rng& rng) {
  add_tconv_param(ps, p + lvl(".up", i), 2 * c, c, 2, rng);
  add_conv_param(ps, p + lvl(".dec", i) + "a", c, 2 * c, 3, rng);
  add_conv_param(ps, p + lvl(".dec", i) + "b", c, c, 3, rng);
}

void register_den(ParamStore& ps, const NetConfig& cfg, Rng& rng) {
  register_encoder(ps, "den", cfg, 3, rng);
  for (int i = cfg.depth_levels - 2; i >= 0; --i) {
    const int c = cfg.base_channels << i;
    if (cfg.use_dam)
      register_dam(ps, "den" + lvl(".dam", i), c, site_config(cfg, c), rng);
    register_decoder_level(ps, "den", i, c, rng);
  }
  add_conv_param(ps, "den.head", 1, cfg.base_channels, 3, rng);
}

void register_asn(ParamStore& ps, const NetConfig& cfg, Rng& rng) {
  const int L = cfg.depth_levels;
  register_encoder(ps, "asn", cfg, 3, rng);
  if (cfg.use_rsb) {
    const int cb = cfg.base_channels << (L - 1);
    register_rsb(ps, "asn" + lvl(".rsb", L - 1), cb, cb, rng);
  }
  for (int i = L - 2; i >= 0; --i) {
    const int c = cfg.base_channels << i;
    register_decoder_level(ps, "asn", i, c, rng);
    if (cfg.use_rsb) register_rsb(ps, "asn" + lvl(".rsb", i), c, c, rng);
  }
  add_conv_param(ps, "asn.head", 3, cfg.base_channels, 3, rng);
}

void register_dgen(ParamStore& ps, const NetConfig& cfg, Rng& rng) {
  const int L = cfg.depth_levels;
  register_encoder(ps, "dgen", cfg, 3, rng);
  if (cfg.use_dpm)
    register_dpm(ps, "dgen.dpm",
                 site_config(cfg, cfg.base_channels << (L - 1)), rng);
  for (int i = L - 2; i >= 0; --i) {
    const int c = cfg.base_channels << i;
    if (cfg.use_rb) register_rb(ps, "dgen" + lvl(".rb", i), c, rng);
    register_decoder_level(ps, "dgen", i, c, rng);
  }
  add_conv_param(ps, "dgen.head", 3, cfg.base_channels, 3, rng);
}

struct Enc {
  std::vector<Tensor> skips;  // levels 0 .. depth_levels-2, finest first
  Tensor bott;
};

Enc encode(Tape* tape, ParamStore& ps, const std::string& p,
           const NetConfig& cfg, const Tensor& x) {
  Enc e;
  Tensor f = x;
  for (int i = 0; i < cfg.depth_levels; ++i) {
    if (i > 0)
      f = leaky_relu(conv_fwd(tape, ps, p + lvl(".down", i - 1), f, 2, 1));
    f = leaky_relu(conv_fwd(tape, ps, p + lvl(".enc", i) + "a", f, 1, 1));
    f = leaky_relu(conv_fwd(tape, ps, p + lvl(".enc", i) + "b", f, 1, 1));
    if (i < cfg.depth_levels - 1) e.skips.push_back(f);
  }
  e.bott = f;
  return e;
}

struct DecodeSpec {
  std::string p;
  bool dam_skips = false;
  bool rb_skips = false;
  const std::vector<Tensor>* inject = nullptr;  // rsb-fused, deepest first
  std::vector<Tensor>* feats = nullptr;         // collected pre-head
};

Tensor decode(Tape* tape, ParamStore& ps, const NetConfig& cfg,
              const DecodeSpec& spec, const Enc& enc) {
  const int L = cfg.depth_levels;
  Tensor f = enc.bott;
  if (spec.inject)
    f = rsb_forward(tape, ps, spec.p + lvl(".rsb", L - 1), f,
                    (*spec.inject)[0]);
  if (spec.feats) spec.feats->push_back(f);
  for (int i = L - 2; i >= 0; --i) {
    const int c = cfg.base_channels << i;
    Tensor u = leaky_relu(tconv_fwd(tape, ps, spec.p + lvl(".up", i), f, 2));
    Tensor s = enc.skips[std::size_t(i)];
    if (spec.dam_skips)
      s = dam_forward(tape, ps, spec.p + lvl(".dam", i), s,
                      site_config(cfg, c));
    if (spec.rb_skips) s = rb_forward(tape, ps, spec.p + lvl(".rb", i), s);
    Tensor g = leaky_relu(conv_fwd(tape, ps, spec.p + lvl(".dec", i) + "a",
                                   concat_channels({u, s}), 1, 1));
    f = leaky_relu(conv_fwd(tape, ps, spec.p + lvl(".dec", i) + "b", g, 1, 1));
    if (spec.inject)
      f = rsb_forward(tape, ps, spec.p + lvl(".rsb", i), f,
                      (*spec.inject)[std::size_t(L - 1 - i)]);
    if (spec.feats) spec.feats->push_back(f);
  }
  return sigmoid(conv_fwd(tape, ps, spec.p + ".head", f, 1, 1));
}

DepthMaps bottleneck_maps(const NetConfig& cfg, const Tensor& d, int n, int h,
                          int w) {
  if (!cfg.use_depth) {
    Tensor one = Tensor::full(Shape(n, 1, h, w), Real(1));
    return DepthMaps{one, one, one, one};
  }
  DepthMaps m = r3s(d, h, w);
  if (!cfg.use_reverse) m.d_rev = m.d1;
  if (!cfg.use_rs) {
    m.d3 = m.d1;
    m.d5 = m.d1;
  }
  return m;
}

}  // namespace

void validate(const NetConfig& cfg) {
  if (cfg.base_channels < 1)
    throw ConfigError("base_channels must be positive");
  if (cfg.depth_levels < 2 || cfg.depth_levels > 8)
    throw ConfigError("depth_levels must be in [2, 8]");
  if (cfg.block.window_size < 2)
    throw ConfigError("window_size must be at least 2");
  if (cfg.block.heads < 1) throw ConfigError("heads must be positive");
  if (cfg.block.dam_pool_factor < 1)
    throw ConfigError("dam_pool_factor must be positive");
  if (!(cfg.block.mlp_ratio > Real(0)))
    throw ConfigError("mlp_ratio must be positive");
  if (cfg.use_dam && cfg.base_channels < kSeReduction)
    throw ConfigError("base_channels must be at least " +
                      std::to_string(kSeReduction) +
                      " for the channel attention squeeze");
  const int cb = cfg.base_channels << (cfg.depth_levels - 1);
  if (cfg.use_dpm && cb % cfg.block.heads != 0)
    throw ConfigError("bottleneck channels " + std::to_string(cb) +
                      " not divisible by " + std::to_string(cfg.block.heads) +
                      " heads");
}

ParamStore init_params(const NetConfig& cfg) {
  validate(cfg);
  ParamStore ps;
  Rng rng(cfg.seed);
  register_den(ps, cfg, rng);
  if (cfg.use_asn) register_asn(ps, cfg, rng);
  register_dgen(ps, cfg, rng);
  return ps;
}

DenOut den_forward(Tape* tape, ParamStore& ps, const NetConfig& cfg,
                   const Tensor& x) {
  validate(cfg);
  check_image(cfg, x.shape(), "den_forward", false, cfg.use_dam);
  const Enc enc = encode(tape, ps, "den", cfg, x);
  DenOut out;
  DecodeSpec spec;
  spec.p = "den";
  spec.dam_skips = cfg.use_dam;
  spec.feats = &out.feats;
  out.d = decode(tape, ps, cfg, spec, enc);
  return out;
}

Tensor asn_forward(Tape* tape, ParamStore& ps, const NetConfig& cfg,
                   const Tensor& x, const std::vector<Tensor>& den_feats) {
  validate(cfg);
  if (!cfg.use_asn)
    throw ConfigError("asn_forward: regression branch is disabled");
  if (int(den_feats.size()) != cfg.depth_levels)
    throw ConfigError("asn_forward: expected " +
                      std::to_string(cfg.depth_levels) +
                      " decoder features, got " +
                      std::to_string(den_feats.size()));
  check_image(cfg, x.shape(), "asn_forward", false, false);
  const Enc enc = encode(tape, ps, "asn", cfg, x);
  DecodeSpec spec;
  spec.p = "asn";
  if (cfg.use_rsb) spec.inject = &den_feats;
  return decode(tape, ps, cfg, spec, enc);
}

Tensor dgen_forward(Tape* tape, ParamStore& ps, const NetConfig& cfg,
                    const Tensor& x, const Tensor& d) {
  validate(cfg);
  check_image(cfg, x.shape(), "dgen_forward", cfg.use_dpm, false);
  const Shape xs = x.shape(), ds = d.shape();
  if (ds.n != xs.n || ds.c != 1 || ds.h != xs.h || ds.w != xs.w)
    throw ShapeError("dgen_forward: depth " + ds.str() +
                     " does not match image " + xs.str());
  Enc enc = encode(tape, ps, "dgen", cfg, x);
  if (cfg.use_dpm) {
    const Shape bs = enc.bott.shape();
    const DepthMaps maps = bottleneck_maps(cfg, d, xs.n, bs.h, bs.w);
    enc.bott = dpm_forward(tape, ps, "dgen.dpm", enc.bott, maps,
                           site_config(cfg, bs.c));
  }
  DecodeSpec spec;
  spec.p = "dgen";
  spec.rb_skips = cfg.use_rb;
  return decode(tape, ps, cfg, spec, enc);
}

// Checkpoint serialization. Everything is little endian regardless of
// host; values are stored as 32-bit floats.
namespace {

void put_u16(std::string& b, std::uint32_t v) {
  b.push_back(char(v & 0xff));
  b.push_back(char((v >> 8) & 0xff));
}

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& b, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(b, u);
}

void put_array(std::string& b, const std::string& name, const Shape& s,
               const Real* v) {
  if (name.empty() || name.size() > 0xffff)
    throw ContractError("checkpoint: bad array name '" + name + "'");
  put_u16(b, std::uint32_t(name.size()));
  b += name;
  b.push_back(char(4));
  put_u32(b, std::uint32_t(s.n));
  put_u32(b, std::uint32_t(s.c));
  put_u32(b, std::uint32_t(s.h));
  put_u32(b, std::uint32_t(s.w));
  const std::int64_t numel = s.numel();
  for (std::int64_t i = 0; i < numel; ++i) put_f32(b, float(v[i]));
}

struct Reader {
  const std::string& b;
  std::size_t pos = 0;

  explicit Reader(const std::string& buf) : b(buf) {}

  void need(std::size_t n, const std::string& what) {
    if (pos + n > b.size())
      throw FormatError("checkpoint: truncated while reading " + what +
                        " at byte " + std::to_string(pos));
  }
  std::uint32_t u8(const std::string& what) {
    need(1, what);
    return std::uint32_t(std::uint8_t(b[pos++]));
  }
  std::uint32_t u16(const std::string& what) {
    need(2, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 2; ++i)
      v |= std::uint32_t(std::uint8_t(b[pos + std::size_t(i)])) << (8 * i);
    pos += 2;
    return v;
  }
  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(std::uint8_t(b[pos + std::size_t(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32(const std::string& what) {
    const std::uint32_t u = u32(what);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  std::string bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string out = b.substr(pos, n);
    pos += n;
    return out;
  }
};

std::string config_text(const NetConfig& c, std::int64_t epoch,
                        std::int64_t step) {
  char mlp[64];
  std::snprintf(mlp, sizeof mlp, "%.17g", double(c.block.mlp_ratio));
  std::string t;
  auto line = [&t](const char* k, const std::string& v) {
    t += k;
    t += '=';
    t += v;
    t += '\n';
  };
  line("base_channels", std::to_string(c.base_channels));
  line("depth_levels", std::to_string(c.depth_levels));
  line("window_size", std::to_string(c.block.window_size));
  line("heads", std::to_string(c.block.heads));
  line("mlp_ratio", mlp);
  line("dam_pool_factor", std::to_string(c.block.dam_pool_factor));
  line("use_dam", c.use_dam ? "1" : "0");
  line("use_rsb", c.use_rsb ? "1" : "0");
  line("use_asn", c.use_asn ? "1" : "0");
  line("use_rb", c.use_rb ? "1" : "0");
  line("use_depth", c.use_depth ? "1" : "0");
  line("use_reverse", c.use_reverse ? "1" : "0");
  line("use_rs", c.use_rs ? "1" : "0");
  line("use_dpm", c.use_dpm ? "1" : "0");
  line("seed", std::to_string(c.seed));
  line("epoch", std::to_string(epoch));
  line("adam_step", std::to_string(step));
  return t;
}

// Offset of the config text inside the file: magic + version + length.
constexpr std::size_t kConfigOffset = 12;

void parse_config(const std::string& text, NetConfig& cfg,
                  std::int64_t& epoch, std::int64_t& step) {
  const std::string where =
      "checkpoint config at byte " + std::to_string(kConfigOffset);
  std::map<std::string, std::string> kv;
  std::size_t start = 0;
  while (start < text.size()) {
    const std::size_t end = text.find('\n', start);
    if (end == std::string::npos)
      throw FormatError(where + ": unterminated line");
    const std::string fullline = text.substr(start, end - start);
    start = end + 1;
    const std::size_t eq = fullline.find('=');
    if (eq == std::string::npos || eq == 0)
      throw FormatError(where + ": malformed line '" + fullline + "'");
    if (!kv.emplace(fullline.substr(0, eq), fullline.substr(eq + 1)).second)
      throw FormatError(where + ": duplicate key '" + fullline.substr(0, eq) +
                        "'");
  }
  auto take = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end())
      throw FormatError(where + ": missing key '" + std::string(key) + "'");
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto to_i64 = [&](const char* key) {
    const std::string v = take(key);
    try {
      std::size_t used = 0;
      const long long x = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return std::int64_t(x);
    } catch (const std::exception&) {
      throw FormatError(where + ": bad value '" + v + "' for " + key);
    }
  };
  auto to_int = [&](const char* key) { return int(to_i64(key)); };
  auto to_bool = [&](const char* key) {
    const std::string v = take(key);
    if (v == "0") return false;
    if (v == "1") return true;
    throw FormatError(where + ": bad value '" + v + "' for " + key);
  };
  auto to_u64 = [&](const char* key) {
    const std::string v = take(key);
    try {
      std::size_t used = 0;
      const unsigned long long x = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return std::uint64_t(x);
    } catch (const std::exception&) {
      throw FormatError(where + ": bad value '" + v + "' for " + key);
    }
  };
  auto to_real = [&](const char* key) {
    const std::string v = take(key);
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return Real(x);
    } catch (const std::exception&) {
      throw FormatError(where + ": bad value '" + v + "' for " + key);
    }
  };

  cfg.base_channels = to_int("base_channels");
  cfg.depth_levels = to_int("depth_levels");
  cfg.block.window_size = to_int("window_size");
  cfg.block.heads = to_int("heads");
  cfg.block.mlp_ratio = to_real("mlp_ratio");
  cfg.block.dam_pool_factor = to_int("dam_pool_factor");
  cfg.use_dam = to_bool("use_dam");
  cfg.use_rsb = to_bool("use_rsb");
  cfg.use_asn = to_bool("use_asn");
  cfg.use_rb = to_bool("use_rb");
  cfg.use_depth = to_bool("use_depth");
  cfg.use_reverse = to_bool("use_reverse");
  cfg.use_rs = to_bool("use_rs");
  cfg.use_dpm = to_bool("use_dpm");
  cfg.seed = to_u64("seed");
  epoch = to_i64("epoch");
  step = to_i64("adam_step");
  if (!kv.empty())
    throw FormatError(where + ": unknown key '" + kv.begin()->first + "'");
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& ps,
                     const NetConfig& cfg, std::int64_t epoch) {
  std::string out;
  out += "UVZC";
  put_u32(out, 1);
  const std::string cfgtext = config_text(cfg, epoch, ps.step_counter());
  put_u32(out, std::uint32_t(cfgtext.size()));
  out += cfgtext;

  std::uint32_t count = std::uint32_t(ps.size());
  for (int h = 0; h < ps.size(); ++h)
    if (ps.has_adam_state(h)) count += 2;
  put_u32(out, count);
  for (int h = 0; h < ps.size(); ++h)
    put_array(out, ps.name(h), ps.value(h).shape(), ps.value(h).data());
  for (int h = 0; h < ps.size(); ++h) {
    if (!ps.has_adam_state(h)) continue;
    const Shape s = ps.value(h).shape();
    put_array(out, ps.name(h) + ".m", s, ps.adam_m(h).data());
    put_array(out, ps.name(h) + ".v", s, ps.adam_v(h).data());
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  f.write(out.data(), std::streamsize(out.size()));
  f.flush();
  if (!f.good()) throw ConfigError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  Reader r(buf);

  const std::string magic = r.bytes(4, "magic");
  if (magic != "UVZC")
    throw FormatError("checkpoint: bad magic at byte 0");
  const std::uint32_t version = r.u32("version");
  if (version != 1)
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version) + " at byte 4");

  const std::uint32_t cfg_len = r.u32("config length");
  const std::string cfgtext = r.bytes(cfg_len, "config text");

  Checkpoint ck;
  parse_config(cfgtext, ck.config, ck.epoch, ck.adam_step);
  validate(ck.config);

  const std::uint32_t count = r.u32("array count");
  ck.arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t array_pos = r.pos;
    const std::uint32_t name_len = r.u16("name length");
    if (name_len == 0)
      throw FormatError("checkpoint: empty array name at byte " +
                        std::to_string(array_pos));
    const std::string name = r.bytes(name_len, "array name");
    const std::uint32_t rank = r.u8("rank of '" + name + "'");
    if (rank != 4)
      throw FormatError("checkpoint: array '" + name + "' has rank " +
                        std::to_string(rank) + " at byte " +
                        std::to_string(array_pos) + ", expected 4");
    std::uint32_t dims[4];
    std::uint64_t numel = 1;
    for (int k = 0; k < 4; ++k) {
      dims[k] = r.u32("dims of '" + name + "'");
      if (dims[k] == 0 || dims[k] > (1u << 28))
        throw FormatError("checkpoint: array '" + name +
                          "' has implausible dims at byte " +
                          std::to_string(array_pos));
      numel *= dims[k];
    }
    if (numel > (1ull << 28))
      throw FormatError("checkpoint: array '" + name +
                        "' has implausible size at byte " +
                        std::to_string(array_pos));
    r.need(4 * std::size_t(numel), "data of '" + name + "'");
    Tensor t{Shape(int(dims[0]), int(dims[1]), int(dims[2]), int(dims[3]))};
    Real* v = t.data();
    for (std::uint64_t k = 0; k < numel; ++k)
      v[k] = Real(r.f32("data of '" + name + "'"));
    ck.arrays.emplace_back(name, t);
  }
  if (r.pos != buf.size())
    throw FormatError("checkpoint: " + std::to_string(buf.size() - r.pos) +
                      " trailing bytes at byte " + std::to_string(r.pos));
  return ck;
}

void restore_params(ParamStore& ps, const Checkpoint& ck) {
  const int n = ps.size();
  std::vector<char> got_value(std::size_t(n), 0);
  std::vector<char> got_m(std::size_t(n), 0), got_v(std::size_t(n), 0);

  auto check_shape = [&](const std::string& name, int h, const Tensor& t) {
    const Shape want = ps.value(h).shape(), got = t.shape();
    if (want.n != got.n || want.c != got.c || want.h != got.h ||
        want.w != got.w)
      throw ShapeError("checkpoint parameter '" + name + "': stored shape " +
                       got.str() + " does not match model shape " +
                       want.str());
  };

  for (const auto& [name, t] : ck.arrays) {
    int h = ps.find(name);
    if (h >= 0) {
      if (got_value[std::size_t(h)])
        throw FormatError("checkpoint: duplicate array '" + name + "'");
      check_shape(name, h, t);
      std::copy(t.data(), t.data() + t.numel(), ps.value(h).data());
      got_value[std::size_t(h)] = 1;
      continue;
    }
    const bool is_m = name.ends_with(".m"), is_v = name.ends_with(".v");
    if (is_m || is_v) {
      const std::string base = name.substr(0, name.size() - 2);
      h = ps.find(base);
      if (h >= 0) {
        std::vector<char>& got = is_m ? got_m : got_v;
        if (got[std::size_t(h)])
          throw FormatError("checkpoint: duplicate array '" + name + "'");
        check_shape(name, h, t);
        std::vector<Real>& slot = is_m ? ps.adam_m(h) : ps.adam_v(h);
        slot.assign(t.data(), t.data() + t.numel());
        got[std::size_t(h)] = 1;
        continue;
      }
    }
    throw ShapeError("checkpoint parameter '" + name +
                     "' does not exist in the model");
  }

  for (int h = 0; h < n; ++h) {
    if (!got_value[std::size_t(h)])
      throw ShapeError("checkpoint is missing parameter '" + ps.name(h) +
                       "'");
    if (got_m[std::size_t(h)] != got_v[std::size_t(h)])
      throw FormatError("checkpoint: parameter '" + ps.name(h) +
                        "' has half an optimizer moment pair");
  }
  ps.step_counter() = ck.adam_step;
}

}  // namespace uvz
