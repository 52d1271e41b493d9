#include "uvz/blocks.hpp"

#include <cmath>
#include <string>

#include "uvz/common.hpp"

namespace uvz {

namespace {

Tensor kaiming_uniform(const Shape& s, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / ((1.0 + 0.2 * 0.2) * double(fan_in)));
  return Tensor::uniform(s, rng, -bound, bound);
}

}  // namespace

void add_conv_param(ParamStore& ps, const std::string& name, int c_out,
                    int c_in, int k, Rng& rng) {
  if (c_out <= 0 || c_in <= 0 || k <= 0)
    throw ConfigError("add_conv_param: bad dims for " + name);
  ps.add(name + ".w",
         kaiming_uniform(Shape(c_out, c_in, k, k), c_in * k * k, rng));
  ps.add(name + ".b", Tensor(Shape(1, c_out, 1, 1)));
}

void add_tconv_param(ParamStore& ps, const std::string& name, int c_in,
                     int c_out, int k, Rng& rng) {
  if (c_out <= 0 || c_in <= 0 || k <= 0)
    throw ConfigError("add_tconv_param: bad dims for " + name);
  ps.add(name + ".w",
         kaiming_uniform(Shape(c_in, c_out, k, k), c_in * k * k, rng));
  ps.add(name + ".b", Tensor(Shape(1, c_out, 1, 1)));
}

void add_layer_norm_param(ParamStore& ps, const std::string& name, int c) {
  ps.add(name + ".g", Tensor::full(Shape(1, c, 1, 1), Real(1)));
  ps.add(name + ".b", Tensor(Shape(1, c, 1, 1)));
}

void add_scalar_param(ParamStore& ps, const std::string& name, Real value) {
  ps.add(name, Tensor::scalar(value));
}

Tensor param(Tape* tape, ParamStore& ps, const std::string& name) {
  const int h = ps.handle(name);
  return tape ? tape->param(ps, h) : ps.value(h);
}

Tensor conv_fwd(Tape* tape, ParamStore& ps, const std::string& name,
                const Tensor& x, int stride, int padding) {
  Tensor w = param(tape, ps, name + ".w");
  Tensor b = param(tape, ps, name + ".b");
  return conv2d(x, w, &b, stride, padding);
}

Tensor tconv_fwd(Tape* tape, ParamStore& ps, const std::string& name,
                 const Tensor& x, int stride) {
  Tensor w = param(tape, ps, name + ".w");
  Tensor b = param(tape, ps, name + ".b");
  return transposed_conv2d(x, w, &b, stride);
}

void register_rb(ParamStore& ps, const std::string& p, int c, Rng& rng) {
  add_conv_param(ps, p + ".conv1", c, c, 3, rng);
  add_conv_param(ps, p + ".conv2", c, c, 3, rng);
}

Tensor rb_forward(Tape* tape, ParamStore& ps, const std::string& p,
                  const Tensor& f) {
  Tensor h = leaky_relu(conv_fwd(tape, ps, p + ".conv1", f, 1, 1));
  return add(f, conv_fwd(tape, ps, p + ".conv2", h, 1, 1));
}

void register_rsb(ParamStore& ps, const std::string& p, int c_dec, int c_skip,
                  Rng& rng) {
  add_conv_param(ps, p + ".fuse", c_dec, c_dec + c_skip, 1, rng);
  add_conv_param(ps, p + ".conv1", c_dec, c_dec, 3, rng);
  add_conv_param(ps, p + ".conv2", c_dec, c_dec, 3, rng);
}

Tensor rsb_forward(Tape* tape, ParamStore& ps, const std::string& p,
                   const Tensor& f_dec, const Tensor& f_skip) {
  if (f_dec.shape().h != f_skip.shape().h ||
      f_dec.shape().w != f_skip.shape().w)
    throw ShapeError("rsb: spatial dims differ, " + f_dec.shape().str() +
                     " vs " + f_skip.shape().str());
  Tensor g = conv_fwd(tape, ps, p + ".fuse",
                      concat_channels({f_dec, f_skip}), 1, 0);
  Tensor h = leaky_relu(conv_fwd(tape, ps, p + ".conv1", g, 1, 1));
  return add(g, conv_fwd(tape, ps, p + ".conv2", h, 1, 1));
}

namespace {

void register_swin_block(ParamStore& ps, const std::string& p,
                         const BlockConfig& cfg, Rng& rng) {
  const int c = cfg.channels;
  const int hidden = int(std::lround(double(c) * double(cfg.mlp_ratio)));
  if (hidden < 1) throw ConfigError("swin: mlp hidden size must be >= 1");
  add_layer_norm_param(ps, p + ".ln1", c);
  add_conv_param(ps, p + ".q", c, c, 1, rng);
  add_conv_param(ps, p + ".k", c, c, 1, rng);
  add_conv_param(ps, p + ".v", c, c, 1, rng);
  add_conv_param(ps, p + ".proj", c, c, 1, rng);
  add_layer_norm_param(ps, p + ".ln2", c);
  add_conv_param(ps, p + ".mlp1", hidden, c, 1, rng);
  add_conv_param(ps, p + ".mlp2", c, hidden, 1, rng);
}

Tensor swin_block_forward(Tape* tape, ParamStore& ps, const std::string& p,
                          const Tensor& f, const BlockConfig& cfg,
                          bool shifted) {
  const Shape s = f.shape();
  const int ws = cfg.window_size;
  const int heads = cfg.heads;
  const int dh = cfg.channels / heads;
  const int shift = ws / 2;

  Tensor h0 = layer_norm(f, param(tape, ps, p + ".ln1.g"),
                         param(tape, ps, p + ".ln1.b"));
  if (shifted) h0 = roll2d(h0, -shift, -shift);
  Tensor wp = window_partition(h0, ws);
  const int nw = wp.shape().n;
  const int tokens = ws * ws;

  Tensor q = conv_fwd(tape, ps, p + ".q", wp, 1, 0);
  Tensor k = conv_fwd(tape, ps, p + ".k", wp, 1, 0);
  Tensor v = conv_fwd(tape, ps, p + ".v", wp, 1, 0);
  const Shape headed(nw, heads, dh, tokens);
  Tensor qh = permute(reshape(q, headed), {0, 1, 3, 2});
  Tensor kh = reshape(k, headed);
  Tensor vh = permute(reshape(v, headed), {0, 1, 3, 2});

  Tensor scores = scale(matmul(qh, kh), Real(1.0 / std::sqrt(double(dh))));
  Tensor attn = softmax_lastdim(scores);
  Tensor out = matmul(attn, vh);  // (nw, heads, tokens, dh)
  Tensor merged = window_merge(
      reshape(permute(out, {0, 1, 3, 2}), Shape(nw, cfg.channels, ws, ws)),
      ws, s.h, s.w);
  merged = conv_fwd(tape, ps, p + ".proj", merged, 1, 0);
  if (shifted) merged = roll2d(merged, shift, shift);
  Tensor fhat = add(merged, f);

  Tensor h1 = layer_norm(fhat, param(tape, ps, p + ".ln2.g"),
                         param(tape, ps, p + ".ln2.b"));
  Tensor m = conv_fwd(tape, ps, p + ".mlp2",
                      leaky_relu(conv_fwd(tape, ps, p + ".mlp1", h1, 1, 0)),
                      1, 0);
  return add(m, fhat);
}

}  // namespace

void register_swin_pair(ParamStore& ps, const std::string& p,
                        const BlockConfig& cfg, Rng& rng) {
  if (cfg.channels % cfg.heads != 0)
    throw ConfigError("swin: channels must be divisible by heads");
  if (cfg.window_size < 2)
    throw ConfigError("swin: window_size must be at least 2");
  register_swin_block(ps, p + ".b1", cfg, rng);
  register_swin_block(ps, p + ".b2", cfg, rng);
}

Tensor swin_pair_forward(Tape* tape, ParamStore& ps, const std::string& p,
                         const Tensor& f, const BlockConfig& cfg) {
  const Shape s = f.shape();
  if (s.c != cfg.channels)
    throw ShapeError("swin: expected " + std::to_string(cfg.channels) +
                     " channels, got " + s.str());
  if (s.h % cfg.window_size != 0 || s.w % cfg.window_size != 0)
    throw ConfigError("swin: window_size must divide the feature dims");
  Tensor a = swin_block_forward(tape, ps, p + ".b1", f, cfg, false);
  return swin_block_forward(tape, ps, p + ".b2", a, cfg, true);
}

void register_dam(ParamStore& ps, const std::string& p, int c,
                  const BlockConfig& cfg, Rng& rng) {
  if (c < kSeReduction)
    throw ConfigError("dam: channels must be at least the reduction ratio");
  add_conv_param(ps, p + ".se1", c / kSeReduction, c, 1, rng);
  add_conv_param(ps, p + ".se2", c, c / kSeReduction, 1, rng);
  add_conv_param(ps, p + ".sp", c, c, 1, rng);
  add_scalar_param(ps, p + ".gamma", Real(0));
  add_tconv_param(ps, p + ".up", c, c, cfg.dam_pool_factor, rng);
}

Tensor channel_attention(Tape* tape, ParamStore& ps, const std::string& p,
                         const Tensor& f) {
  auto se = [&](const Tensor& x) {
    return conv_fwd(tape, ps, p + ".se2",
                    leaky_relu(conv_fwd(tape, ps, p + ".se1", x, 1, 0)), 1,
                    0);
  };
  Tensor w = sigmoid(add(se(global_pool(f, PoolMode::kAvg)),
                         se(global_pool(f, PoolMode::kMax))));
  return mul(f, nearest_resize(w, f.shape().h, f.shape().w));
}

Tensor spatial_attention(Tape* tape, ParamStore& ps, const std::string& p,
                         const Tensor& f_c, const BlockConfig& cfg) {
  const Shape s = f_c.shape();
  const int pf = cfg.dam_pool_factor;
  if (s.h < pf || s.w < pf)
    throw ConfigError("spatial_attention: feature smaller than the pool");
  if (s.h % pf != 0 || s.w % pf != 0)
    throw ConfigError("spatial_attention: pool factor must divide the dims");

  Tensor pooled = pool2d(f_c, PoolMode::kAvg, pf, pf);
  const int hp = pooled.shape().h, wp = pooled.shape().w;
  const int tokens = hp * wp;
  Tensor t = conv_fwd(tape, ps, p + ".sp", pooled, 1, 0);
  Tensor tok = reshape(permute(t, {0, 2, 3, 1}), Shape(s.n, 1, tokens, s.c));
  Tensor attn = softmax_lastdim(matmul(tok, permute(tok, {0, 1, 3, 2})));
  Tensor out = matmul(attn, tok);  // (n, 1, tokens, c)
  Tensor spatial =
      permute(reshape(out, Shape(s.n, hp, wp, s.c)), {0, 3, 1, 2});
  return add(pooled, mul(spatial, param(tape, ps, p + ".gamma")));
}

Tensor dam_forward(Tape* tape, ParamStore& ps, const std::string& p,
                   const Tensor& f, const BlockConfig& cfg) {
  Tensor f_c = channel_attention(tape, ps, p, f);
  Tensor f_s = spatial_attention(tape, ps, p, f_c, cfg);
  Tensor up = tconv_fwd(tape, ps, p + ".up", f_s, cfg.dam_pool_factor);
  return add(f, mul(f_c, up));
}

void register_dpm(ParamStore& ps, const std::string& p, const BlockConfig& cfg,
                  Rng& rng) {
  const int c = cfg.channels;
  register_swin_pair(ps, p + ".swin", cfg, rng);
  for (int i = 0; i < 4; ++i) {
    add_conv_param(ps, p + ".t" + std::to_string(i), c, c, 3, rng);
    register_rb(ps, p + ".rb" + std::to_string(i), c, rng);
  }
  add_conv_param(ps, p + ".k1", c, c, 1, rng);
  add_conv_param(ps, p + ".k3", c, c, 3, rng);
  add_conv_param(ps, p + ".k5", c, c, 5, rng);
  add_conv_param(ps, p + ".clc1", c, 3 * c, 3, rng);
  add_conv_param(ps, p + ".clc2", c, c, 3, rng);
  add_scalar_param(ps, p + ".beta1", Real(1));
  add_scalar_param(ps, p + ".beta3", Real(1));
  add_scalar_param(ps, p + ".beta5", Real(1));
}

Tensor nonlocal_branch(Tape* tape, ParamStore& ps, const std::string& p,
                       const Tensor& f_enc, const Tensor& d_rev,
                       const BlockConfig& cfg) {
  if (d_rev.shape().h != f_enc.shape().h ||
      d_rev.shape().w != f_enc.shape().w)
    throw ShapeError("nonlocal_branch: depth map resolution mismatch");
  Tensor f_t = swin_pair_forward(tape, ps, p + ".swin", f_enc, cfg);
  return mul(f_t, d_rev);
}

Tensor local_branch(Tape* tape, ParamStore& ps, const std::string& p,
                    const Tensor& f_enc, const Tensor& d1, const Tensor& d3,
                    const Tensor& d5) {
  for (const Tensor* d : {&d1, &d3, &d5})
    if (d->shape().h != f_enc.shape().h || d->shape().w != f_enc.shape().w)
      throw ShapeError("local_branch: depth map resolution mismatch");
  Tensor t = f_enc;
  for (int i = 0; i < 4; ++i) {
    t = leaky_relu(conv_fwd(tape, ps, p + ".t" + std::to_string(i), t, 1, 1));
    t = rb_forward(tape, ps, p + ".rb" + std::to_string(i), t);
  }
  auto weighted = [&](const char* conv, int pad, const Tensor& d,
                      const char* beta) {
    Tensor fc = conv_fwd(tape, ps, p + conv, t, 1, pad);
    return mul(mul(fc, d), param(tape, ps, p + beta));
  };
  Tensor cat = concat_channels({weighted(".k1", 0, d1, ".beta1"),
                                weighted(".k3", 1, d3, ".beta3"),
                                weighted(".k5", 2, d5, ".beta5")});
  Tensor h = leaky_relu(conv_fwd(tape, ps, p + ".clc1", cat, 1, 1));
  return conv_fwd(tape, ps, p + ".clc2", h, 1, 1);
}

Tensor dpm_forward(Tape* tape, ParamStore& ps, const std::string& p,
                   const Tensor& f_enc, const DepthMaps& maps,
                   const BlockConfig& cfg) {
  Tensor f_r = nonlocal_branch(tape, ps, p, f_enc, maps.d_rev, cfg);
  return add(f_r,
             local_branch(tape, ps, p, f_enc, maps.d1, maps.d3, maps.d5));
}

}  // namespace uvz
