#pragma once

#include <string>
#include <vector>

#include "demtg/deformable_mixer.hpp"
#include "demtg/nn.hpp"

namespace demtg {

struct DecoderConfig {
  int c_prime = 32;
  int heads = 4;
  int ssg_depth = 1;
  int ssg_kernel = 3;
};

// ---- task interaction block (shared across tasks) ----

inline void init_interaction_params(ParamStore& ps, Prng& rng, const std::string& prefix,
                                    int c_prime) {
  init_ln_params(ps, prefix + ".ln", c_prime);
  init_mhsa_params(ps, rng, prefix + ".attn", c_prime);
  init_smlp_params(ps, rng, prefix + ".smlp", c_prime);
}

// Concatenates the tasks' deformed-feature tokens task-major into [TN, C'],
// runs self-attention over the fused sequence, then sMLP.
inline Tensor task_interaction(BoundParams& bp, const std::string& prefix,
                               const std::vector<Tensor>& tokens, int heads) {
  if (tokens.empty()) throw ContractError("task_interaction needs at least one task");
  const int n = tokens[0].dim(0), c = tokens[0].dim(1);
  for (const Tensor& tk : tokens) {
    if (tk.rank() != 2 || tk.dim(0) != n || tk.dim(1) != c) {
      throw ContractError("task_interaction token shape mismatch: " + shape_str(tk.shape()) +
                          " vs " + shape_str(tokens[0].shape()));
    }
  }
  Tape& t = bp.tape();
  Tensor fused = tokens.size() == 1 ? tokens[0] : t.concat_rows(tokens);
  Tensor normed = ln_fw(bp, prefix + ".ln", fused);
  Tensor attended = mhsa_fw(bp, prefix + ".attn", normed, normed, heads);
  return smlp_fw(bp, prefix + ".smlp", attended);
}

// ---- shared spatial gating layer ----

inline void init_ssg_params(ParamStore& ps, Prng& rng, const std::string& prefix,
                            const DecoderConfig& cfg) {
  if (cfg.ssg_depth < 1) throw ConfigError("ssg_depth must be >=1");
  if (cfg.ssg_kernel % 2 == 0) {
    throw ConfigError("ssg_kernel must be odd, got " + std::to_string(cfg.ssg_kernel));
  }
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.c_prime));
  for (int l = 0; l < cfg.ssg_depth; ++l) {
    const std::string lv = prefix + ".d" + std::to_string(l);
    init_ln_params(ps, lv + ".ln1", cfg.c_prime);
    init_linear_params(ps, rng, lv + ".expand", cfg.c_prime, 2 * cfg.c_prime, true, sd);
    init_ln_params(ps, lv + ".ln2", cfg.c_prime);
    ps.create(lv + ".conv.w",
              Tensor::random_normal({cfg.ssg_kernel, cfg.c_prime}, rng, 0.0,
                                    1.0 / std::sqrt(static_cast<double>(cfg.ssg_kernel))));
    ps.create(lv + ".conv.b", Tensor::zeros({cfg.c_prime}));
    init_linear_params(ps, rng, lv + ".exit", cfg.c_prime, cfg.c_prime, true, sd);
  }
}

// One gating layer: expand to 2C', split, gate the first half by a depthwise
// 1D conv of the normalized second half, project back to C'.
inline Tensor ssg_layer(BoundParams& bp, const std::string& prefix, const Tensor& x) {
  Tape& t = bp.tape();
  const int c = x.dim(1);
  Tensor expanded = t.gelu(linear_fw(bp, prefix + ".expand", ln_fw(bp, prefix + ".ln1", x)));
  Tensor first = t.slice_cols(expanded, 0, c);
  Tensor second = t.slice_cols(expanded, c, 2 * c);
  Tensor gate = t.conv1d_depthwise(ln_fw(bp, prefix + ".ln2", second), bp(prefix + ".conv.w"),
                                   bp(prefix + ".conv.b"));
  return linear_fw(bp, prefix + ".exit", t.mul(first, gate));
}

// Applies the shared gating layer ssg_depth times to [N, C'] tokens and
// reshapes the result to [H/4, W/4, C'].
inline Tensor apply_ssg(BoundParams& bp, const std::string& prefix, const Tensor& x, int h4,
                        int w4, const DecoderConfig& cfg) {
  if (x.dim(0) != h4 * w4) {
    throw ContractError("apply_ssg token count " + std::to_string(x.dim(0)) +
                        " != " + std::to_string(h4) + "*" + std::to_string(w4));
  }
  Tensor y = x;
  for (int l = 0; l < cfg.ssg_depth; ++l) {
    y = ssg_layer(bp, prefix + ".d" + std::to_string(l), y);
  }
  return bp.tape().reshape(y, {h4, w4, y.dim(1)});
}

// ---- task query gating block (per task; SSG parameters shared) ----

inline void init_task_gating_params(ParamStore& ps, Prng& rng, const std::string& prefix,
                                    int c_prime) {
  init_ln_params(ps, prefix + ".lnq", c_prime);
  init_ln_params(ps, prefix + ".lnkv", c_prime);
  init_mhsa_params(ps, rng, prefix + ".attn", c_prime);
  init_smlp_params(ps, rng, prefix + ".smlp", c_prime);
}

// The task's deformed feature is the query; the task-interacted feature is
// key and value. Residual from the flattened deformed feature, then the
// shared spatial gating.
inline Tensor task_query_gating(BoundParams& bp, const std::string& prefix,
                                const std::string& ssg_prefix, const Tensor& x_q,
                                const Tensor& x_spatial, const Tensor& interacted,
                                const DecoderConfig& cfg) {
  if (interacted.dim(1) != x_q.dim(1) || interacted.dim(0) % x_q.dim(0) != 0) {
    throw ContractError("task_query_gating token mismatch: query " + shape_str(x_q.shape()) +
                        ", interacted " + shape_str(interacted.shape()));
  }
  Tape& t = bp.tape();
  Tensor q = ln_fw(bp, prefix + ".lnq", x_q);
  Tensor kv = ln_fw(bp, prefix + ".lnkv", interacted);
  Tensor attended = mhsa_fw(bp, prefix + ".attn", q, kv, cfg.heads);
  Tensor awareness = t.add(x_q, smlp_fw(bp, prefix + ".smlp", attended));
  return apply_ssg(bp, ssg_prefix, awareness, x_spatial.dim(0), x_spatial.dim(1), cfg);
}

// ---- prediction heads ----

inline void init_head_params(ParamStore& ps, Prng& rng, const std::string& prefix, int c_prime,
                             int out_channels) {
  init_linear_params(ps, rng, prefix, c_prime, out_channels, true,
                     1.0 / std::sqrt(static_cast<double>(c_prime)));
}

// 1x1 conv C' -> out_channels, then bilinear x4 back to input resolution.
// Raw logits; losses apply softmax/sigmoid.
inline Tensor prediction_head(BoundParams& bp, const std::string& prefix, const Tensor& x,
                              int out_channels) {
  Tensor logits = linear_fw(bp, prefix, x);
  (void)out_channels;
  return bp.tape().upsample_bilinear(logits, 4);
}

// ---- whole decoder ----

inline void init_decoder_params(ParamStore& ps, Prng& rng, const DecoderConfig& cfg,
                                const std::vector<int>& task_out_channels) {
  init_interaction_params(ps, rng, "dec.inter", cfg.c_prime);
  init_ssg_params(ps, rng, "ssg", cfg);
  for (std::size_t t = 0; t < task_out_channels.size(); ++t) {
    init_task_gating_params(ps, rng, "dec.t" + std::to_string(t), cfg.c_prime);
    init_head_params(ps, rng, "head.t" + std::to_string(t), cfg.c_prime, task_out_channels[t]);
  }
}

// One shared task_interaction pass, then per-task query gating and heads;
// returns per-task predictions at full resolution, in task order.
inline std::vector<Tensor> decode_all(BoundParams& bp, const std::vector<EncodedTask>& encoded,
                                      const DecoderConfig& cfg,
                                      const std::vector<int>& task_out_channels) {
  if (encoded.empty()) throw ContractError("decode_all needs at least one task");
  if (encoded.size() != task_out_channels.size()) {
    throw ContractError("decode_all: task count mismatch between features and heads");
  }
  std::vector<Tensor> tokens;
  tokens.reserve(encoded.size());
  for (const auto& e : encoded) tokens.push_back(e.tokens);
  Tensor interacted = task_interaction(bp, "dec.inter", tokens, cfg.heads);
  std::vector<Tensor> preds;
  preds.reserve(encoded.size());
  for (std::size_t t = 0; t < encoded.size(); ++t) {
    Tensor gated = task_query_gating(bp, "dec.t" + std::to_string(t), "ssg", encoded[t].tokens,
                                     encoded[t].spatial, interacted, cfg);
    preds.push_back(prediction_head(bp, "head.t" + std::to_string(t), gated,
                                    task_out_channels[t]));
  }
  return preds;
}

}  // namespace demtg
