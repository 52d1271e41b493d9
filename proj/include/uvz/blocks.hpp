#pragma once

#include <string>

#include "uvz/depthops.hpp"
#include "uvz/params.hpp"
#include "uvz/tensor.hpp"

namespace uvz {

struct BlockConfig {
  int channels = 64;
  int window_size = 4;   // tokens per window side
  int heads = 2;
  Real mlp_ratio = Real(2);
  int dam_pool_factor = 4;
};

// Squeeze-excitation reduction used by the channel-attention branch.
inline constexpr int kSeReduction = 4;

// Registration helpers. Conv weights use Kaiming-uniform fan-in bounds for
// the 0.2-slope activation; biases start at zero.
void add_conv_param(ParamStore& ps, const std::string& name, int c_out,
                    int c_in, int k, Rng& rng);
// Transposed-conv weights are (c_in, c_out, k, k); the same fan-in rule is
// applied with fan_in = c_in * k * k.
void add_tconv_param(ParamStore& ps, const std::string& name, int c_in,
                     int c_out, int k, Rng& rng);
void add_layer_norm_param(ParamStore& ps, const std::string& name, int c);
void add_scalar_param(ParamStore& ps, const std::string& name, Real value);

// Fetches a parameter by name, registering it on the tape when one is given
// so gradients accumulate into the store.
Tensor param(Tape* tape, ParamStore& ps, const std::string& name);

Tensor conv_fwd(Tape* tape, ParamStore& ps, const std::string& name,
                const Tensor& x, int stride, int padding);
Tensor tconv_fwd(Tape* tape, ParamStore& ps, const std::string& name,
                 const Tensor& x, int stride);

// conv-activation-conv with a residual connection, channel preserving
void register_rb(ParamStore& ps, const std::string& p, int c, Rng& rng);
Tensor rb_forward(Tape* tape, ParamStore& ps, const std::string& p,
                  const Tensor& f);

// skip fusion: 1x1 conv merges decoder and skip channels, then a residual
// conv-activation-conv refines the fused map
void register_rsb(ParamStore& ps, const std::string& p, int c_dec, int c_skip,
                  Rng& rng);
Tensor rsb_forward(Tape* tape, ParamStore& ps, const std::string& p,
                   const Tensor& f_dec, const Tensor& f_skip);

// two windowed self-attention blocks, the second with a cyclic half-window
// shift; layer norm + MLP per block
void register_swin_pair(ParamStore& ps, const std::string& p,
                        const BlockConfig& cfg, Rng& rng);
Tensor swin_pair_forward(Tape* tape, ParamStore& ps, const std::string& p,
                         const Tensor& f, const BlockConfig& cfg);

// dual attention over channels then space
void register_dam(ParamStore& ps, const std::string& p, int c,
                  const BlockConfig& cfg, Rng& rng);
Tensor channel_attention(Tape* tape, ParamStore& ps, const std::string& p,
                         const Tensor& f);
Tensor spatial_attention(Tape* tape, ParamStore& ps, const std::string& p,
                         const Tensor& f_c, const BlockConfig& cfg);
Tensor dam_forward(Tape* tape, ParamStore& ps, const std::string& p,
                   const Tensor& f, const BlockConfig& cfg);

// depth-guided perception: a windowed-attention branch weighted by the
// reversed depth plus a multi-kernel local branch weighted by the smoothed
// depths
void register_dpm(ParamStore& ps, const std::string& p, const BlockConfig& cfg,
                  Rng& rng);
Tensor nonlocal_branch(Tape* tape, ParamStore& ps, const std::string& p,
                       const Tensor& f_enc, const Tensor& d_rev,
                       const BlockConfig& cfg);
Tensor local_branch(Tape* tape, ParamStore& ps, const std::string& p,
                    const Tensor& f_enc, const Tensor& d1, const Tensor& d3,
                    const Tensor& d5);
Tensor dpm_forward(Tape* tape, ParamStore& ps, const std::string& p,
                   const Tensor& f_enc, const DepthMaps& maps,
                   const BlockConfig& cfg);

}  // namespace uvz
