#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "uvz/blocks.hpp"
#include "uvz/depthops.hpp"
#include "uvz/params.hpp"
#include "uvz/tensor.hpp"

namespace uvz {

// Shared topology and toggles for the three U-shaped networks. Each flag
// controls one attachment: absent means the corresponding parameters are
// never registered, so an ablated model carries no dead weights.
struct NetConfig {
  int base_channels = 16;
  int depth_levels = 3;  // resolution scales; depth_levels - 1 stride-2 steps
  BlockConfig block;     // channels field is overridden per attachment site
  bool use_dam = true;
  bool use_rsb = true;
  bool use_asn = true;
  bool use_rb = true;
  bool use_depth = true;
  bool use_reverse = true;
  bool use_rs = true;
  bool use_dpm = true;
  std::uint64_t seed = 0;
};

void validate(const NetConfig& cfg);

// Builds one store holding den.*, asn.* (when use_asn) and dgen.* weights,
// deterministically from cfg.seed.
ParamStore init_params(const NetConfig& cfg);

struct DenOut {
  Tensor d;                   // (n,1,H,W) depth in [0,1]
  std::vector<Tensor> feats;  // decoder features, deepest first
};

// Depth estimation: image -> depth map plus the decoder features the
// regression branch fuses during stage 1. Pass tape = nullptr for frozen
// inference; no gradient buffer is touched then.
DenOut den_forward(Tape* tape, ParamStore& ps, const NetConfig& cfg,
                   const Tensor& x);

// Scene regression head used only while training stage 1.
Tensor asn_forward(Tape* tape, ParamStore& ps, const NetConfig& cfg,
                   const Tensor& x, const std::vector<Tensor>& den_feats);

// Enhancement network guided by a depth map at input resolution.
Tensor dgen_forward(Tape* tape, ParamStore& ps, const NetConfig& cfg,
                    const Tensor& x, const Tensor& d);

struct Checkpoint {
  NetConfig config;
  std::int64_t epoch = 0;
  std::int64_t adam_step = 0;
  // parameter arrays in store order, optimizer moments appended as
  // name.m / name.v pairs
  std::vector<std::pair<std::string, Tensor>> arrays;
};

void save_checkpoint(const std::string& path, const ParamStore& ps,
                     const NetConfig& cfg, std::int64_t epoch);
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint arrays into a store built from the same config. Any
// unknown, missing or reshaped parameter raises a shape error naming it.
void restore_params(ParamStore& ps, const Checkpoint& ck);

}  // namespace uvz
