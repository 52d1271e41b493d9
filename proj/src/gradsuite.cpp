#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "uvz/blocks.hpp"
#include "uvz/depthops.hpp"
#include "uvz/gradcheck.hpp"
#include "uvz/losses.hpp"
#include "uvz/networks.hpp"

namespace uvz {

namespace {

Tensor rand_t(const Shape& s, std::uint64_t seed, double lo = -1.0,
              double hi = 1.0) {
  Rng rng(seed);
  return Tensor::uniform(s, rng, lo, hi);
}

// Fixed random weighting so the scalar objective exercises every output
// element with a distinct coefficient. The mean keeps the objective near
// unit scale regardless of tensor size, and the +1 offset keeps |f|
// representative of the activations inside the forward pass even when the
// weighted mean cancels toward zero; the rounding-noise allowance is
// proportional to max|f|, so an objective far smaller than the
// intermediate values it is computed from would understate that noise.
Tensor mix(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed ^ 0x51ed2701ULL);
  Tensor w = Tensor::uniform(y.shape(), rng, 0.5, 1.5);
  return add_const(mean_all(mul(y, w)), Real(1));
}

FdOpts op_opts(std::uint64_t rs) {
  FdOpts o;
  o.seed = rs;
  o.max_probes = 96;
  return o;
}

// Composite forwards are several dozen rounding stages deep, so the
// 32-bit probes use a shorter step than single ops: the truncation bias of
// the central difference shrinks quadratically while the rounding-noise
// allowance grows as 1/h, which is exactly the term those pipelines need.
FdOpts block_opts(std::uint64_t rs, std::int64_t probes) {
  FdOpts o;
  o.tol = 1e-2;
  o.h = sizeof(Real) == 8 ? 1e-5 : 1e-4;
  o.max_probes = probes;
  o.seed = rs;
  return o;
}

// The losses are shallow smooth pipelines; the default step is the better
// regime for them.
FdOpts loss_opts(std::uint64_t rs) {
  FdOpts o;
  o.tol = 1e-2;
  o.max_probes = 64;
  o.seed = rs;
  return o;
}

using InputFn = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

GradCheckReport input_case(const std::string& name, const InputFn& f,
                           std::vector<Tensor> inputs, std::uint64_t rs) {
  return check_gradients(name, f, std::move(inputs), op_opts(rs));
}

void merge(GradCheckReport& into, const GradCheckReport& r) {
  into.pass = into.pass && r.pass;
  into.checked += r.checked;
  into.flagged += r.flagged;
  into.worst = std::max(into.worst, r.worst);
  into.max_abs_err = std::max(into.max_abs_err, r.max_abs_err);
  into.max_rel_err = std::max(into.max_rel_err, r.max_rel_err);
  if (into.detail.empty()) into.detail = r.detail;
}

struct Entry {
  std::string name;
  std::function<GradCheckReport(std::uint64_t)> run;
};

std::vector<Entry> make_entries() {
  std::vector<Entry> es;
  auto push = [&es](const std::string& name,
                    std::function<GradCheckReport(std::uint64_t)> run) {
    es.push_back({name, std::move(run)});
  };

  // -- single ops ---------------------------------------------------------

  push("conv2d", [](std::uint64_t rs) {
    return input_case(
        "conv2d",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(conv2d(in[0], in[1], &in[2], 1, 1), rs);
        },
        {rand_t(Shape(2, 3, 6, 6), rs * 7 + 1),
         rand_t(Shape(4, 3, 3, 3), rs * 7 + 2, -0.5, 0.5),
         rand_t(Shape(1, 4, 1, 1), rs * 7 + 3, -0.2, 0.2)},
        rs);
  });

  push("conv2d_stride2", [](std::uint64_t rs) {
    return input_case(
        "conv2d_stride2",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(conv2d(in[0], in[1], &in[2], 2, 1), rs);
        },
        {rand_t(Shape(1, 2, 7, 9), rs * 7 + 1),
         rand_t(Shape(3, 2, 3, 3), rs * 7 + 2, -0.5, 0.5),
         rand_t(Shape(1, 3, 1, 1), rs * 7 + 3, -0.2, 0.2)},
        rs);
  });

  push("transposed_conv2d", [](std::uint64_t rs) {
    return input_case(
        "transposed_conv2d",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(transposed_conv2d(in[0], in[1], &in[2], 2), rs);
        },
        {rand_t(Shape(2, 3, 4, 4), rs * 7 + 1),
         rand_t(Shape(3, 2, 2, 2), rs * 7 + 2, -0.5, 0.5),
         rand_t(Shape(1, 2, 1, 1), rs * 7 + 3, -0.2, 0.2)},
        rs);
  });

  push("avg_pool2d", [](std::uint64_t rs) {
    return input_case(
        "avg_pool2d",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(pool2d(in[0], PoolMode::kAvg, 2, 2), rs);
        },
        {rand_t(Shape(2, 3, 6, 6), rs * 7 + 1)}, rs);
  });

  push("max_pool2d", [](std::uint64_t rs) {
    return input_case(
        "max_pool2d",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(pool2d(in[0], PoolMode::kMax, 3, 2), rs);
        },
        {rand_t(Shape(1, 2, 7, 7), rs * 7 + 1)}, rs);
  });

  push("global_avg_pool", [](std::uint64_t rs) {
    return input_case(
        "global_avg_pool",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(global_pool(in[0], PoolMode::kAvg), rs);
        },
        {rand_t(Shape(2, 5, 4, 6), rs * 7 + 1)}, rs);
  });

  push("global_max_pool", [](std::uint64_t rs) {
    return input_case(
        "global_max_pool",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(global_pool(in[0], PoolMode::kMax), rs);
        },
        {rand_t(Shape(2, 5, 4, 6), rs * 7 + 1)}, rs);
  });

  push("add", [](std::uint64_t rs) {
    return input_case(
        "add",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(add(in[0], in[1]), rs);
        },
        {rand_t(Shape(2, 3, 4, 5), rs * 7 + 1),
         rand_t(Shape(2, 3, 4, 5), rs * 7 + 2)},
        rs);
  });

  push("sub", [](std::uint64_t rs) {
    return input_case(
        "sub",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(sub(in[0], in[1]), rs);
        },
        {rand_t(Shape(2, 3, 4, 5), rs * 7 + 1),
         rand_t(Shape(2, 3, 4, 5), rs * 7 + 2)},
        rs);
  });

  push("mul", [](std::uint64_t rs) {
    return input_case(
        "mul",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(mul(in[0], in[1]), rs);
        },
        {rand_t(Shape(2, 3, 4, 5), rs * 7 + 1),
         rand_t(Shape(2, 3, 4, 5), rs * 7 + 2)},
        rs);
  });

  push("div", [](std::uint64_t rs) {
    return input_case(
        "div",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(div(in[0], in[1]), rs);
        },
        {rand_t(Shape(2, 3, 4, 5), rs * 7 + 1),
         rand_t(Shape(2, 3, 4, 5), rs * 7 + 2, 0.5, 1.5)},
        rs);
  });

  push("broadcast_map", [](std::uint64_t rs) {
    return input_case(
        "broadcast_map",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(add(mul(in[0], in[1]), in[1]), rs);
        },
        {rand_t(Shape(2, 4, 5, 5), rs * 7 + 1),
         rand_t(Shape(2, 1, 5, 5), rs * 7 + 2)},
        rs);
  });

  push("broadcast_scalar", [](std::uint64_t rs) {
    return input_case(
        "broadcast_scalar",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(mul(in[0], in[1]), rs);
        },
        {rand_t(Shape(2, 3, 4, 4), rs * 7 + 1),
         rand_t(Shape(1, 1, 1, 1), rs * 7 + 2, 0.3, 1.7)},
        rs);
  });

  push("concat_slice_channels", [](std::uint64_t rs) {
    return input_case(
        "concat_slice_channels",
        [rs](Tape&, std::vector<Tensor>& in) {
          Tensor c = concat_channels({in[0], in[1]});
          return mix(slice_channels(c, 1, 4), rs);
        },
        {rand_t(Shape(1, 3, 4, 4), rs * 7 + 1),
         rand_t(Shape(1, 2, 4, 4), rs * 7 + 2)},
        rs);
  });

  push("sigmoid", [](std::uint64_t rs) {
    return input_case(
        "sigmoid",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(sigmoid(in[0]), rs);
        },
        {rand_t(Shape(2, 3, 4, 4), rs * 7 + 1, -3.0, 3.0)}, rs);
  });

  push("leaky_relu", [](std::uint64_t rs) {
    return input_case(
        "leaky_relu",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(leaky_relu(in[0]), rs);
        },
        {rand_t(Shape(2, 3, 4, 4), rs * 7 + 1)}, rs);
  });

  push("softmax_lastdim", [](std::uint64_t rs) {
    return input_case(
        "softmax_lastdim",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(softmax_lastdim(in[0]), rs);
        },
        {rand_t(Shape(2, 2, 3, 5), rs * 7 + 1, -2.0, 2.0)}, rs);
  });

  push("layer_norm", [](std::uint64_t rs) {
    return input_case(
        "layer_norm",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(layer_norm(in[0], in[1], in[2]), rs);
        },
        {rand_t(Shape(2, 8, 4, 4), rs * 7 + 1),
         rand_t(Shape(1, 8, 1, 1), rs * 7 + 2, 0.5, 1.5),
         rand_t(Shape(1, 8, 1, 1), rs * 7 + 3, -0.3, 0.3)},
        rs);
  });

  push("matmul", [](std::uint64_t rs) {
    return input_case(
        "matmul",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(matmul(in[0], in[1]), rs);
        },
        {rand_t(Shape(2, 3, 4, 5), rs * 7 + 1),
         rand_t(Shape(2, 3, 5, 6), rs * 7 + 2)},
        rs);
  });

  push("nearest_resize_up", [](std::uint64_t rs) {
    return input_case(
        "nearest_resize_up",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(nearest_resize(in[0], 9, 11), rs);
        },
        {rand_t(Shape(1, 3, 5, 7), rs * 7 + 1)}, rs);
  });

  push("nearest_resize_down", [](std::uint64_t rs) {
    return input_case(
        "nearest_resize_down",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(nearest_resize(in[0], 3, 4), rs);
        },
        {rand_t(Shape(1, 3, 8, 8), rs * 7 + 1)}, rs);
  });

  push("reshape_permute", [](std::uint64_t rs) {
    return input_case(
        "reshape_permute",
        [rs](Tape&, std::vector<Tensor>& in) {
          Tensor r = reshape(in[0], Shape(2, 4, 3, 5));
          return mix(permute(r, {0, 2, 3, 1}), rs);
        },
        {rand_t(Shape(2, 3, 4, 5), rs * 7 + 1)}, rs);
  });

  push("roll2d", [](std::uint64_t rs) {
    return input_case(
        "roll2d",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(roll2d(in[0], 2, -3), rs);
        },
        {rand_t(Shape(1, 3, 5, 7), rs * 7 + 1)}, rs);
  });

  push("window_partition_merge", [](std::uint64_t rs) {
    return input_case(
        "window_partition_merge",
        [rs](Tape&, std::vector<Tensor>& in) {
          Tensor w = window_partition(in[0], 2);
          Tensor back = window_merge(w, 2, 4, 6);
          return add(mix(w, rs), mix(back, rs + 1));
        },
        {rand_t(Shape(1, 3, 4, 6), rs * 7 + 1)}, rs);
  });

  push("reductions", [](std::uint64_t rs) {
    return input_case(
        "reductions",
        [](Tape&, std::vector<Tensor>& in) {
          Tensor s = scale(sum_all(in[0]), Real(0.3));
          Tensor m = add_const(mean_all(in[0]), Real(0.7));
          return add(s, m);
        },
        {rand_t(Shape(2, 3, 4, 5), rs * 7 + 1)}, rs);
  });

  push("abs_val", [](std::uint64_t rs) {
    return input_case(
        "abs_val",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(abs_val(in[0]), rs);
        },
        {rand_t(Shape(2, 3, 4, 4), rs * 7 + 1)}, rs);
  });

  push("sqrt_val", [](std::uint64_t rs) {
    return input_case(
        "sqrt_val",
        [rs](Tape&, std::vector<Tensor>& in) {
          return mix(sqrt_val(in[0]), rs);
        },
        {rand_t(Shape(2, 3, 4, 4), rs * 7 + 1, 0.5, 2.0)}, rs);
  });

  // -- composite blocks ---------------------------------------------------

  push("residual_block", [](std::uint64_t rs) {
    ParamStore ps;
    Rng rng(rs * 7 + 1);
    register_rb(ps, "rb", 8, rng);
    Tensor f = rand_t(Shape(1, 8, 6, 6), rs * 7 + 2);
    GradCheckReport rep = check_param_gradients(
        "residual_block",
        [&f, rs](Tape& tape, ParamStore& s) {
          return mix(rb_forward(&tape, s, "rb", f), rs);
        },
        ps, block_opts(rs, 24));
    merge(rep, check_gradients(
                   "residual_block_input",
                   [&ps, rs](Tape& tape, std::vector<Tensor>& in) {
                     return mix(rb_forward(&tape, ps, "rb", in[0]), rs);
                   },
                   {f}, block_opts(rs, 24)));
    return rep;
  });

  push("residual_skip_block", [](std::uint64_t rs) {
    ParamStore ps;
    Rng rng(rs * 7 + 1);
    register_rsb(ps, "rsb", 8, 8, rng);
    Tensor fd = rand_t(Shape(1, 8, 6, 6), rs * 7 + 2);
    Tensor fs = rand_t(Shape(1, 8, 6, 6), rs * 7 + 3);
    GradCheckReport rep = check_param_gradients(
        "residual_skip_block",
        [&fd, &fs, rs](Tape& tape, ParamStore& s) {
          return mix(rsb_forward(&tape, s, "rsb", fd, fs), rs);
        },
        ps, block_opts(rs, 24));
    merge(rep, check_gradients(
                   "residual_skip_block_input",
                   [&ps, rs](Tape& tape, std::vector<Tensor>& in) {
                     return mix(rsb_forward(&tape, ps, "rsb", in[0], in[1]),
                                rs);
                   },
                   {fd, fs}, block_opts(rs, 24)));
    return rep;
  });

  push("swin_pair", [](std::uint64_t rs) {
    BlockConfig cfg;
    cfg.channels = 8;
    cfg.window_size = 4;
    ParamStore ps;
    Rng rng(rs * 7 + 1);
    register_swin_pair(ps, "swin", cfg, rng);
    Tensor f = rand_t(Shape(1, 8, 8, 8), rs * 7 + 2);
    return check_param_gradients(
        "swin_pair",
        [&f, &cfg, rs](Tape& tape, ParamStore& s) {
          return mix(swin_pair_forward(&tape, s, "swin", f, cfg), rs);
        },
        ps, block_opts(rs, 48));
  });

  push("dual_attention", [](std::uint64_t rs) {
    BlockConfig cfg;
    cfg.channels = 8;
    ParamStore ps;
    Rng rng(rs * 7 + 1);
    register_dam(ps, "dam", 8, cfg, rng);
    ps.value(ps.handle("dam.gamma")).data()[0] = Real(0.3);
    Tensor f = rand_t(Shape(1, 8, 8, 8), rs * 7 + 2);
    GradCheckReport rep = check_param_gradients(
        "dual_attention",
        [&f, &cfg, rs](Tape& tape, ParamStore& s) {
          return mix(dam_forward(&tape, s, "dam", f, cfg), rs);
        },
        ps, block_opts(rs, 48));
    merge(rep, check_gradients(
                   "dual_attention_input",
                   [&ps, &cfg, rs](Tape& tape, std::vector<Tensor>& in) {
                     return mix(dam_forward(&tape, ps, "dam", in[0], cfg),
                                rs);
                   },
                   {f}, block_opts(rs, 24)));
    return rep;
  });

  push("depth_perception", [](std::uint64_t rs) {
    BlockConfig cfg;
    cfg.channels = 8;
    cfg.window_size = 4;
    ParamStore ps;
    Rng rng(rs * 7 + 1);
    register_dpm(ps, "dpm", cfg, rng);
    Tensor f = rand_t(Shape(1, 8, 8, 8), rs * 7 + 2);
    DepthMaps maps =
        r3s(rand_t(Shape(1, 1, 16, 16), rs * 7 + 3, 0.0, 1.0), 8, 8);
    GradCheckReport rep = check_param_gradients(
        "depth_perception",
        [&f, &maps, &cfg, rs](Tape& tape, ParamStore& s) {
          return mix(dpm_forward(&tape, s, "dpm", f, maps, cfg), rs);
        },
        ps, block_opts(rs, 24));
    merge(rep, check_gradients(
                   "depth_perception_input",
                   [&ps, &maps, &cfg, rs](Tape& tape, std::vector<Tensor>& in) {
                     return mix(
                         dpm_forward(&tape, ps, "dpm", in[0], maps, cfg), rs);
                   },
                   {f}, block_opts(rs, 24)));
    return rep;
  });

  // -- losses -------------------------------------------------------------

  push("ssim_loss", [](std::uint64_t rs) {
    // ssim of two unrelated random images sits near zero, so the raw score
    // would understate the rounding noise of its unit-scale internals; the
    // offset has zero gradient and restores a representative |f|.
    FdOpts o = loss_opts(rs);
    return check_gradients(
        "ssim_loss",
        [](Tape&, std::vector<Tensor>& in) {
          return add_const(ssim(in[0], in[1]), Real(1));
        },
        {rand_t(Shape(1, 3, 16, 16), rs * 7 + 1, 0.1, 0.9),
         rand_t(Shape(1, 3, 16, 16), rs * 7 + 2, 0.1, 0.9)},
        o);
  });

  push("stage1_loss", [](std::uint64_t rs) {
    // Residuals bounded away from zero so probes never straddle the
    // absolute-value kink.
    FdOpts o = loss_opts(rs);
    Tensor d_gt = Tensor::full(Shape(1, 1, 8, 8), Real(0));
    Tensor x = Tensor::full(Shape(1, 3, 8, 8), Real(0));
    return check_gradients(
        "stage1_loss",
        [&d_gt, &x](Tape&, std::vector<Tensor>& in) {
          return stage1_loss(in[0], d_gt, in[1], x);
        },
        {rand_t(Shape(1, 1, 8, 8), rs * 7 + 1, 0.2, 0.8),
         rand_t(Shape(1, 3, 8, 8), rs * 7 + 2, 0.2, 0.8)},
        o);
  });

  push("stage2_loss", [](std::uint64_t rs) {
    FdOpts o = loss_opts(rs);
    return check_gradients(
        "stage2_loss",
        [](Tape&, std::vector<Tensor>& in) {
          return stage2_loss(in[0], in[1]);
        },
        {rand_t(Shape(1, 3, 16, 16), rs * 7 + 1, 0.1, 0.9),
         rand_t(Shape(1, 3, 16, 16), rs * 7 + 2, 0.1, 0.9)},
        o);
  });

  // -- full networks ------------------------------------------------------

  auto net_cfg = [](std::uint64_t rs) {
    NetConfig cfg;
    cfg.base_channels = 4;
    cfg.seed = rs * 7 + 1;
    return cfg;
  };
  auto net_opts = [](std::uint64_t rs) {
    FdOpts o;
    o.tol = 1e-2;
    o.max_probes = 2;
    o.seed = rs;
    return o;
  };

  push("depth_estimator", [net_cfg, net_opts](std::uint64_t rs) {
    NetConfig cfg = net_cfg(rs);
    ParamStore ps = init_params(cfg);
    Tensor x = rand_t(Shape(1, 3, 16, 16), rs * 7 + 2, 0.0, 1.0);
    return check_param_gradients(
        "depth_estimator",
        [&x, &cfg, rs](Tape& tape, ParamStore& s) {
          DenOut out = den_forward(&tape, s, cfg, x);
          Tensor obj = mix(out.d, rs);
          for (std::size_t i = 0; i < out.feats.size(); ++i)
            obj = add(obj, mix(out.feats[i], rs + 10 + i));
          return obj;
        },
        ps, net_opts(rs));
  });

  push("scene_regressor", [net_cfg, net_opts](std::uint64_t rs) {
    NetConfig cfg = net_cfg(rs);
    ParamStore ps = init_params(cfg);
    Tensor x = rand_t(Shape(1, 3, 16, 16), rs * 7 + 2, 0.0, 1.0);
    return check_param_gradients(
        "scene_regressor",
        [&x, &cfg, rs](Tape& tape, ParamStore& s) {
          DenOut den = den_forward(&tape, s, cfg, x);
          return mix(asn_forward(&tape, s, cfg, x, den.feats), rs);
        },
        ps, net_opts(rs));
  });

  push("depth_guided_enhancer", [net_cfg, net_opts](std::uint64_t rs) {
    NetConfig cfg = net_cfg(rs);
    ParamStore ps = init_params(cfg);
    Tensor x = rand_t(Shape(1, 3, 16, 16), rs * 7 + 2, 0.0, 1.0);
    Tensor d = rand_t(Shape(1, 1, 16, 16), rs * 7 + 3, 0.0, 1.0);
    return check_param_gradients(
        "depth_guided_enhancer",
        [&x, &d, &cfg, rs](Tape& tape, ParamStore& s) {
          return mix(dgen_forward(&tape, s, cfg, x, d), rs);
        },
        ps, net_opts(rs));
  });

  return es;
}

}  // namespace

std::vector<GradCheckReport> gradcheck_suite(std::uint64_t seed, int rounds) {
  if (rounds < 1) throw ConfigError("gradcheck: rounds must be at least 1");
  std::vector<Entry> entries = make_entries();
  std::vector<GradCheckReport> out;
  out.reserve(entries.size());
  for (const Entry& e : entries) {
    GradCheckReport total;
    total.name = e.name;
    for (int r = 0; r < rounds; ++r) {
      const std::uint64_t rs =
          seed + 0x9e3779b97f4a7c15ULL * std::uint64_t(r + 1);
      GradCheckReport rep = e.run(rs);
      merge(total, rep);
    }
    out.push_back(std::move(total));
  }
  return out;
}

}  // namespace uvz
