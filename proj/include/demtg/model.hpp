#pragma once

#include <string>
#include <vector>

#include "demtg/backbone.hpp"
#include "demtg/decoder.hpp"
#include "demtg/deformable_mixer.hpp"
#include "demtg/task_spec.hpp"

namespace demtg {

struct ModelConfig {
  int c = 8;  // toy backbone width; aggregated C = c * sum(2^(k-1))
  std::vector<int> scales = {1, 2, 3, 4};
  int c_prime = 32;
  int depth_d = 1;
  int heads = 4;
  int ssg_depth = 1;
  int ssg_kernel = 3;
  std::vector<int> task_out_channels;

  int aggregated_c() const { return aggregated_channels(c, scales); }

  MixerConfig mixer() const { return {aggregated_c(), c_prime, depth_d}; }

  DecoderConfig decoder() const { return {c_prime, heads, ssg_depth, ssg_kernel}; }

  void validate() const {
    if (task_out_channels.empty()) throw ConfigError("model needs at least one task");
    if (c < 1) throw ConfigError("backbone width c must be >=1");
    if (c_prime < 1) throw ConfigError("c_prime must be >=1");
    if (c_prime > aggregated_c()) {
      throw ConfigError("c_prime " + std::to_string(c_prime) + " exceeds aggregated channels " +
                        std::to_string(aggregated_c()));
    }
    if (heads < 1 || c_prime % heads != 0) {
      throw ConfigError("c_prime " + std::to_string(c_prime) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (depth_d < 1) throw ConfigError("depth_d must be >=1");
  }
};

// The whole network: toy backbone -> scale aggregation -> per-task deformable
// mixer encoders -> task-aware gating decoder -> per-task heads.
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  void init_params(Prng& rng) {
    init_backbone_params(params_, rng, cfg_.c);
    for (std::size_t t = 0; t < cfg_.task_out_channels.size(); ++t) {
      init_mixer_params(params_, rng, "enc.t" + std::to_string(t), cfg_.mixer());
    }
    init_decoder_params(params_, rng, cfg_.decoder(), cfg_.task_out_channels);
  }

  // Per-task full-resolution predictions, in task order.
  std::vector<Tensor> forward(BoundParams& bp, const Tensor& image, Mode mode) const {
    int max_stage = 1;
    for (int k : cfg_.scales) max_stage = std::max(max_stage, k);
    FeaturePyramid pyramid = backbone_forward(bp, image, mode, max_stage);
    Tensor shared = aggregate_scales(bp.tape(), pyramid, cfg_.scales);
    std::vector<EncodedTask> encoded;
    encoded.reserve(cfg_.task_out_channels.size());
    for (std::size_t t = 0; t < cfg_.task_out_channels.size(); ++t) {
      encoded.push_back(encode_task(bp, "enc.t" + std::to_string(t), shared, cfg_.mixer(), mode));
    }
    return decode_all(bp, encoded, cfg_.decoder(), cfg_.task_out_channels);
  }

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace demtg
