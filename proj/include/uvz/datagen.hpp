#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uvz/tensor.hpp"

namespace uvz {

// Channel-wise attenuation + backscatter degradation. Red must attenuate
// fastest (beta_R > beta_G >= beta_B); the backscatter color sits in [0,1].
struct DegradationParams {
  double beta[3] = {0.8, 0.35, 0.30};
  double backscatter[3] = {0.05, 0.35, 0.45};
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;
};

void validate(const DegradationParams& p);

// A clean scene: flat or gradient-filled primitives painted over a
// textured far plane at depth 0.9, each with its own constant depth. The
// visible masks and depths are kept so geometric consistency between j
// and d stays checkable.
struct Scene {
  Tensor j;                   // (1,3,h,w) colors in [0.1, 0.95]
  Tensor d;                   // (1,1,h,w) depth, 0 near / 1 far
  std::vector<Tensor> masks;  // visible per-primitive masks, (1,1,h,w) 0/1
  std::vector<Real> depths;   // constant depth per primitive
};

// Deterministic in seed. The last primitive is forced to depth 0.1 so the
// depth range always spans [0.1, 0.9].
Scene synth_scene(std::uint64_t seed, int h, int w);

// X_c = J_c * exp(-beta_c d) + B_c (1 - exp(-beta_c d)) + N(0, sigma),
// clamped to [0,1]. Deterministic in p.seed.
Tensor degrade(const Tensor& j, const Tensor& d, const DegradationParams& p);

// Binary 8-bit PPM (P6, maxval 255) for images, binary 16-bit PGM (P5,
// maxval 65535, big-endian samples) for depth maps. Loads map linearly to
// [0,1]; malformed files raise format errors with byte offsets.
void save_image(const std::string& path, const Tensor& img);
Tensor load_image(const std::string& path);
void save_depth(const std::string& path, const Tensor& depth);
Tensor load_depth(const std::string& path);

struct ManifestEntry {
  std::string split;  // "train" or "test"
  std::string raw, clean, depth;
};

struct DatagenOptions {
  int count = 64;
  int height = 64;
  int width = 64;
  double split_ratio = 0.75;
  DegradationParams params;
  std::uint64_t seed = 0;
};

// Writes (raw, clean, depth) triples plus manifest.tsv into out_dir and
// returns the manifest path. floor(count * split_ratio) images go to the
// train split via a seeded shuffle.
std::string make_dataset(const DatagenOptions& opt, const std::string& out_dir);

// Parses a manifest and resolves its paths against the manifest location.
std::vector<ManifestEntry> load_manifest(const std::string& path);

}  // namespace uvz
