#pragma once

#include <string>

#include "demtg/nn.hpp"

namespace demtg {

// Per-task deformable mixer encoder: channel reduction, then d repetitions of
// channel-aware mixing followed by the spatial-aware deformable operator.
struct MixerConfig {
  int c_in = 0;      // aggregated channels C
  int c_prime = 32;  // reduced channels C'
  int depth = 1;     // repetition count d
};

inline void init_mixer_params(ParamStore& ps, Prng& rng, const std::string& prefix,
                              const MixerConfig& cfg) {
  if (cfg.c_prime > cfg.c_in) {
    throw ConfigError("mixer c_prime " + std::to_string(cfg.c_prime) + " exceeds input channels " +
                      std::to_string(cfg.c_in));
  }
  if (cfg.depth < 1) throw ConfigError("mixer depth must be >=1, got " + std::to_string(cfg.depth));
  init_ln_params(ps, prefix + ".reduce.ln", cfg.c_in);
  ps.create(prefix + ".reduce.w",
            Tensor::random_normal({cfg.c_in, cfg.c_prime}, rng, 0.0, 0.02));
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string lv = prefix + ".d" + std::to_string(l);
    init_linear_params(ps, rng, lv + ".mix", cfg.c_prime, cfg.c_prime);
    init_bn_params(ps, lv + ".mix.bn", cfg.c_prime);
    // Offset predictor starts at zero so training begins in the plain-conv regime.
    init_conv2d_params(ps, rng, lv + ".off", 3, 3, cfg.c_prime, 2, /*zero_init=*/true);
    ps.create(lv + ".def.w", Tensor::random_normal({cfg.c_prime, cfg.c_prime}, rng, 0.0, 0.02));
    init_bn_params(ps, lv + ".def.bn", cfg.c_prime);
  }
}

// Per-position LayerNorm over C channels, then a bias-free linear map C -> C'.
inline Tensor linear_reduce(BoundParams& bp, const std::string& prefix, const Tensor& x,
                            int c_prime) {
  if (c_prime > x.dim(2)) {
    throw ConfigError("linear_reduce c_prime " + std::to_string(c_prime) +
                      " exceeds input channels " + std::to_string(x.dim(2)));
  }
  return bp.tape().linear(ln_fw(bp, prefix + ".reduce.ln", x), bp(prefix + ".reduce.w"));
}

// Point-wise conv W1*x + b, then BN(GELU(x)) in that order.
inline Tensor channel_mixing(BoundParams& bp, const std::string& prefix, const Tensor& x,
                             Mode mode) {
  Tensor y = bp.tape().linear(x, bp(prefix + ".mix.w"), bp(prefix + ".mix.b"));
  return bn_fw(bp, prefix + ".mix.bn", bp.tape().gelu(y), mode);
}

// Learns one (dy, dx) offset per position from a 3x3 conv, samples the input
// bilinearly at the displaced locations, applies a point-wise conv at each
// sampled vector, and closes with x + BN(GELU(.)).
inline Tensor spatial_deformable(BoundParams& bp, const std::string& prefix, const Tensor& x,
                                 Mode mode) {
  if (x.dim(0) < 3 || x.dim(1) < 3) {
    throw DimError("spatial_deformable needs h,w >= 3, got " + shape_str(x.shape()));
  }
  Tape& t = bp.tape();
  Tensor offsets = conv2d_fw(bp, prefix + ".off", x, 1, 1);
  Tensor sampled = t.deform_sample(x, offsets);
  Tensor mixed = t.linear(sampled, bp(prefix + ".def.w"));
  return t.add(x, bn_fw(bp, prefix + ".def.bn", t.gelu(mixed), mode));
}

struct EncodedTask {
  Tensor tokens;   // [N, C'], N = (H/4)(W/4), row-major flatten
  Tensor spatial;  // [H/4, W/4, C']
};

inline EncodedTask encode_task(BoundParams& bp, const std::string& prefix, const Tensor& x,
                               const MixerConfig& cfg, Mode mode) {
  if (cfg.depth < 1) throw ConfigError("encode_task depth must be >=1, got " + std::to_string(cfg.depth));
  Tensor y = linear_reduce(bp, prefix, x, cfg.c_prime);
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string lv = prefix + ".d" + std::to_string(l);
    y = channel_mixing(bp, lv, y, mode);
    y = spatial_deformable(bp, lv, y, mode);
  }
  EncodedTask out;
  out.spatial = y;
  out.tokens = bp.tape().reshape(y, {y.dim(0) * y.dim(1), y.dim(2)});
  return out;
}

}  // namespace demtg
