#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "demtg/param_store.hpp"
#include "demtg/prng.hpp"
#include "demtg/tape.hpp"

namespace demtg {

// Parameter initializers. Weights are zero-mean normal with deviation 0.02,
// biases zero; norm gains/biases are excluded from weight decay; running
// stats are non-trainable buffers.

inline void init_linear_params(ParamStore& ps, Prng& rng, const std::string& prefix, int in,
                               int out, bool bias = true, double stddev = 0.02) {
  ps.create(prefix + ".w", Tensor::random_normal({in, out}, rng, 0.0, stddev));
  if (bias) ps.create(prefix + ".b", Tensor::zeros({out}));
}

inline void init_ln_params(ParamStore& ps, const std::string& prefix, int c) {
  ps.create(prefix + ".gain", Tensor::full({c}, 1.0), true, false);
  ps.create(prefix + ".bias", Tensor::zeros({c}), true, false);
}

inline void init_bn_params(ParamStore& ps, const std::string& prefix, int c) {
  ps.create(prefix + ".gain", Tensor::full({c}, 1.0), true, false);
  ps.create(prefix + ".bias", Tensor::zeros({c}), true, false);
  ps.create(prefix + ".running_mean", Tensor::zeros({c}), false, false);
  ps.create(prefix + ".running_var", Tensor::full({c}, 1.0), false, false);
}

inline void init_conv2d_params(ParamStore& ps, Prng& rng, const std::string& prefix, int kh,
                               int kw, int ci, int co, bool zero_init = false,
                               double stddev = 0.02) {
  ps.create(prefix + ".w", zero_init ? Tensor::zeros({kh, kw, ci, co})
                                     : Tensor::random_normal({kh, kw, ci, co}, rng, 0.0, stddev));
  ps.create(prefix + ".b", Tensor::zeros({co}));
}

// Forward helpers, all parameterized by a path prefix into the store.

inline Tensor ln_fw(BoundParams& bp, const std::string& prefix, const Tensor& x) {
  return bp.tape().layer_norm(x, bp(prefix + ".gain"), bp(prefix + ".bias"));
}

// Train mode writes the blended running stats back into the store.
inline Tensor bn_fw(BoundParams& bp, const std::string& prefix, const Tensor& x, Mode mode) {
  const Tensor& rm = bp.store().value(prefix + ".running_mean");
  const Tensor& rv = bp.store().value(prefix + ".running_var");
  Tensor new_mean, new_var;
  Tensor y = bp.tape().batch_norm(x, bp(prefix + ".gain"), bp(prefix + ".bias"), rm, rv, mode,
                                  &new_mean, &new_var);
  if (mode == Mode::kTrain) {
    bp.store().set_value(prefix + ".running_mean", new_mean);
    bp.store().set_value(prefix + ".running_var", new_var);
  }
  return y;
}

inline Tensor linear_fw(BoundParams& bp, const std::string& prefix, const Tensor& x,
                        bool bias = true) {
  if (bias) return bp.tape().linear(x, bp(prefix + ".w"), bp(prefix + ".b"));
  return bp.tape().linear(x, bp(prefix + ".w"));
}

inline Tensor conv2d_fw(BoundParams& bp, const std::string& prefix, const Tensor& x, int stride,
                        int pad) {
  return bp.tape().conv2d(x, bp(prefix + ".w"), bp(prefix + ".b"), stride, pad);
}

// Projections at 1/sqrt(fan_in); at the small widths this library runs at, a
// flat 0.02 leaves downstream LayerNorms with variance below their epsilon.
inline void init_mhsa_params(ParamStore& ps, Prng& rng, const std::string& prefix, int c_prime,
                             double stddev = 0.0) {
  if (stddev <= 0.0) stddev = 1.0 / std::sqrt(static_cast<double>(c_prime));
  ps.create(prefix + ".wq", Tensor::random_normal({c_prime, c_prime}, rng, 0.0, stddev));
  ps.create(prefix + ".wk", Tensor::random_normal({c_prime, c_prime}, rng, 0.0, stddev));
  ps.create(prefix + ".wv", Tensor::random_normal({c_prime, c_prime}, rng, 0.0, stddev));
  ps.create(prefix + ".wo", Tensor::random_normal({c_prime, c_prime}, rng, 0.0, stddev));
}

// Multi-head self/cross attention: softmax(QK^T / sqrt(d_k)) V per head,
// heads concatenated, output-projected. No positions, no dropout.
inline Tensor mhsa_fw(BoundParams& bp, const std::string& prefix, const Tensor& q_in,
                      const Tensor& kv_in, int heads) {
  Tape& t = bp.tape();
  const int c = q_in.dim(1);
  if (kv_in.dim(1) != c) {
    throw ContractError("mhsa query/key width mismatch: " + shape_str(q_in.shape()) + " vs " +
                        shape_str(kv_in.shape()));
  }
  if (heads < 1 || c % heads != 0) {
    throw ConfigError("mhsa channel count " + std::to_string(c) + " not divisible by heads " +
                      std::to_string(heads));
  }
  const int dk = c / heads;
  Tensor q = t.matmul(q_in, bp(prefix + ".wq"));
  Tensor k = t.matmul(kv_in, bp(prefix + ".wk"));
  Tensor v = t.matmul(kv_in, bp(prefix + ".wv"));
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = t.slice_cols(q, h * dk, (h + 1) * dk);
    Tensor kh = t.slice_cols(k, h * dk, (h + 1) * dk);
    Tensor vh = t.slice_cols(v, h * dk, (h + 1) * dk);
    Tensor logits = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt_dk);
    Tensor attn = t.softmax_lastdim(logits);
    outs.push_back(t.matmul(attn, vh));
  }
  return t.matmul(t.concat_cols(outs), bp(prefix + ".wo"));
}

inline void init_smlp_params(ParamStore& ps, Prng& rng, const std::string& prefix, int c_prime) {
  init_linear_params(ps, rng, prefix, c_prime, c_prime, true,
                     1.0 / std::sqrt(static_cast<double>(c_prime)));
  init_ln_params(ps, prefix + ".ln", c_prime);
}

// sMLP: one linear layer followed by a LayerNorm.
inline Tensor smlp_fw(BoundParams& bp, const std::string& prefix, const Tensor& x) {
  return ln_fw(bp, prefix + ".ln", linear_fw(bp, prefix, x));
}

// Sets every BatchNorm's running stats to the batch statistics observed in
// one train-mode forward (inverting the momentum blend). Used before
// eval-mode runs on an untrained model, whose identity running stats would
// otherwise leave activations far from the train-mode scale.
inline void calibrate_bn_stats(ParamStore& ps, const std::function<void()>& train_forward,
                               double momentum = 0.1) {
  std::map<std::string, Tensor> before;
  for (const auto& [path, p] : ps) {
    if (path.ends_with(".running_mean") || path.ends_with(".running_var")) {
      before.emplace(path, p.value);
    }
  }
  train_forward();
  for (const auto& [path, b] : before) {
    const Tensor& after = ps.value(path);
    std::vector<double> batch(static_cast<std::size_t>(after.size()));
    for (long long i = 0; i < after.size(); ++i) {
      batch[static_cast<std::size_t>(i)] = (after[i] - (1.0 - momentum) * b[i]) / momentum;
    }
    ps.set_value(path, Tensor::from_data(after.shape(), std::move(batch)));
  }
}

}  // namespace demtg
