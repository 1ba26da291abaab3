#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "demtg/nn.hpp"

namespace demtg {

// Four per-scale feature maps at 1/4, 1/8, 1/16, 1/32 of the input, with
// channel counts c, 2c, 4c, 8c.
struct FeaturePyramid {
  Tensor stage1, stage2, stage3, stage4;

  const Tensor& stage(int k) const {
    const Tensor* s = nullptr;
    switch (k) {
      case 1: s = &stage1; break;
      case 2: s = &stage2; break;
      case 3: s = &stage3; break;
      case 4: s = &stage4; break;
      default: throw ConfigError("pyramid stage must be 1..4, got " + std::to_string(k));
    }
    if (!s->defined()) throw ContractError("pyramid stage " + std::to_string(k) + " was not computed");
    return *s;
  }
};

// Toy strided backbone: a stride-4 stem (two stride-2 3x3 convs) to c
// channels, then three stride-2 3x3 blocks doubling channels; every conv is
// followed by GELU and BatchNorm.
inline void init_backbone_params(ParamStore& ps, Prng& rng, int c) {
  init_conv2d_params(ps, rng, "backbone.stem1.conv", 3, 3, 3, c);
  init_bn_params(ps, "backbone.stem1.bn", c);
  init_conv2d_params(ps, rng, "backbone.stem2.conv", 3, 3, c, c);
  init_bn_params(ps, "backbone.stem2.bn", c);
  init_conv2d_params(ps, rng, "backbone.block2.conv", 3, 3, c, 2 * c);
  init_bn_params(ps, "backbone.block2.bn", 2 * c);
  init_conv2d_params(ps, rng, "backbone.block3.conv", 3, 3, 2 * c, 4 * c);
  init_bn_params(ps, "backbone.block3.bn", 4 * c);
  init_conv2d_params(ps, rng, "backbone.block4.conv", 3, 3, 4 * c, 8 * c);
  init_bn_params(ps, "backbone.block4.bn", 8 * c);
}

// Stages beyond max_stage stay unmaterialized; a scale subset that skips the
// deepest stages neither pays for them nor hits their train-mode BatchNorm
// preconditions on small inputs.
inline FeaturePyramid backbone_forward(BoundParams& bp, const Tensor& image, Mode mode,
                                       int max_stage = 4) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw DimError("backbone expects [H,W,3] image, got " + shape_str(image.shape()));
  }
  if (image.dim(0) % 32 != 0 || image.dim(1) % 32 != 0) {
    throw ConfigError("backbone input dims must be divisible by 32, got " +
                      shape_str(image.shape()));
  }
  if (max_stage < 1 || max_stage > 4) throw ConfigError("backbone max_stage must be 1..4");
  Tape& t = bp.tape();
  auto block = [&](const std::string& name, const Tensor& x) {
    return bn_fw(bp, "backbone." + name + ".bn",
                 t.gelu(conv2d_fw(bp, "backbone." + name + ".conv", x, 2, 1)), mode);
  };
  FeaturePyramid p;
  Tensor x = block("stem1", image);
  p.stage1 = block("stem2", x);
  if (max_stage >= 2) p.stage2 = block("block2", p.stage1);
  if (max_stage >= 3) p.stage3 = block("block3", p.stage2);
  if (max_stage >= 4) p.stage4 = block("block4", p.stage3);
  return p;
}

// Upsamples the selected stages to the 1/4 grid and concatenates them along
// channels in fixed stage order; use_scales has set semantics.
inline Tensor aggregate_scales(Tape& t, const FeaturePyramid& p, std::vector<int> use_scales) {
  std::sort(use_scales.begin(), use_scales.end());
  use_scales.erase(std::unique(use_scales.begin(), use_scales.end()), use_scales.end());
  if (use_scales.empty()) throw ConfigError("aggregate_scales: empty scale selection");
  for (int k : use_scales) {
    if (k < 1 || k > 4) throw ConfigError("aggregate_scales: scale " + std::to_string(k) + " not in {1,2,3,4}");
  }
  const int h4 = p.stage1.dim(0), w4 = p.stage1.dim(1);
  std::vector<Tensor> parts;
  for (int k : use_scales) {
    const Tensor& s = p.stage(k);
    Tensor up = t.upsample_bilinear(s, 1 << (k - 1));
    parts.push_back(t.reshape(up, {h4 * w4, up.dim(2)}));
  }
  Tensor cat = parts.size() == 1 ? parts[0] : t.concat_cols(parts);
  return t.reshape(cat, {h4, w4, cat.dim(1)});
}

// Aggregated channel count for a scale subset (stage k carries c * 2^(k-1)).
inline int aggregated_channels(int c, const std::vector<int>& use_scales) {
  std::vector<int> scales = use_scales;
  std::sort(scales.begin(), scales.end());
  scales.erase(std::unique(scales.begin(), scales.end()), scales.end());
  int total = 0;
  for (int k : scales) total += c * (1 << (k - 1));
  return total;
}

}  // namespace demtg
