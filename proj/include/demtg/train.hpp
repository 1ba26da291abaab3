#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "demtg/config.hpp"
#include "demtg/losses.hpp"
#include "demtg/model.hpp"

namespace demtg {

// ---- checkpoint format ----
// magic "DMTGCKPT" | u32 version=1 | u32 n_records |
// records (u32 name_len, name, u8 rank, u32 dims..., f64 data, little-endian) |
// u32 config_len | config text.

inline std::string encode_checkpoint(const ParamStore& store, const std::string& config_text) {
  std::string out = "DMTGCKPT";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(store.count()));
  for (const auto& [path, p] : store) {
    detail::put_u32(out, static_cast<std::uint32_t>(path.size()));
    out += path;
    detail::put_u8(out, static_cast<std::uint8_t>(p.value.rank()));
    for (int d : p.value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (long long i = 0; i < p.value.size(); ++i) detail::put_f64(out, p.value[i]);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(config_text.size()));
  out += config_text;
  return out;
}

struct Checkpoint {
  std::map<std::string, Tensor> values;
  std::string config_text;
};

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  if (r.str(8) != "DMTGCKPT") throw FormatError("checkpoint: bad magic", 0);
  const std::uint32_t version = r.u32();
  if (version != 1) throw FormatError("checkpoint: unsupported version " + std::to_string(version), 8);
  Checkpoint ck;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name = r.str(name_len);
    const std::uint8_t rank = r.u8();
    if (rank < 1 || rank > 4) throw FormatError("checkpoint: bad rank for " + name, r.offset() - 1);
    std::vector<int> shape;
    for (int d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.u32()));
    std::vector<double> data(static_cast<std::size_t>(shape_size(shape)));
    for (double& v : data) v = r.f64();
    ck.values.emplace(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  const std::uint32_t cfg_len = r.u32();
  ck.config_text = r.str(cfg_len);
  r.expect_end();
  return ck;
}

inline void save_checkpoint(const std::string& path, const ParamStore& store,
                            const std::string& config_text) {
  detail::write_file_bytes(path, encode_checkpoint(store, config_text));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

// Installs checkpoint values into a freshly built model; the path sets must
// match exactly.
inline void apply_checkpoint(ParamStore& store, const Checkpoint& ck) {
  if (ck.values.size() != store.count()) {
    throw ContractError("checkpoint has " + std::to_string(ck.values.size()) +
                        " parameters, model expects " + std::to_string(store.count()));
  }
  for (const auto& [path, value] : ck.values) {
    if (!store.has(path)) throw ContractError("checkpoint parameter not in model: " + path);
    store.set_value(path, value);
  }
}

// ---- training ----

inline ModelConfig model_config_from(const RunConfig& cfg, const std::vector<TaskSpec>& specs) {
  ModelConfig mc;
  mc.c = cfg.backbone_c;
  mc.scales = cfg.scales;
  mc.c_prime = cfg.c_prime;
  mc.depth_d = cfg.depth_d;
  mc.heads = cfg.heads;
  mc.ssg_depth = cfg.ssg_depth;
  mc.ssg_kernel = cfg.ssg_kernel;
  for (const TaskSpec& s : specs) mc.task_out_channels.push_back(s.out_channels);
  return mc;
}

struct TrainResult {
  double first_total = 0.0;
  double final_total = 0.0;
  long steps_run = 0;
};

// Replaces every BatchNorm's running stats with population statistics over
// the dataset at the current parameters (mean of per-sample batch means,
// within- plus between-sample variance). The momentum EMA kept during
// training lags the final parameters; this refresh is what eval-mode should
// normalize with.
inline void refresh_bn_population_stats(Model& model, const Dataset& data) {
  std::map<std::string, Tensor> before;
  for (const auto& [path, p] : model.params()) {
    if (path.ends_with(".running_mean") || path.ends_with(".running_var")) {
      before.emplace(path, p.value);
    }
  }
  if (before.empty() || data.samples.empty()) return;
  std::map<std::string, std::vector<double>> mean_acc, var_acc, mean_sq_acc;
  const double n = static_cast<double>(data.samples.size());
  for (const Sample& s : data.samples) {
    for (const auto& [path, v] : before) model.params().set_value(path, v);
    Tape t;
    BoundParams bp(t, model.params());
    model.forward(bp, s.image, Mode::kTrain);
    for (const auto& [path, v] : before) {
      const Tensor& after = model.params().value(path);
      std::vector<double> batch(static_cast<std::size_t>(after.size()));
      // Invert the momentum blend to recover this sample's batch statistic.
      for (long long i = 0; i < after.size(); ++i) {
        batch[static_cast<std::size_t>(i)] = (after[i] - 0.9 * v[i]) / 0.1;
      }
      auto& dst = path.ends_with(".running_mean") ? mean_acc[path] : var_acc[path];
      if (dst.empty()) dst.assign(batch.size(), 0.0);
      if (path.ends_with(".running_mean")) {
        auto& sq = mean_sq_acc[path];
        if (sq.empty()) sq.assign(batch.size(), 0.0);
        for (std::size_t i = 0; i < batch.size(); ++i) sq[i] += batch[i] * batch[i];
      }
      for (std::size_t i = 0; i < batch.size(); ++i) dst[i] += batch[i];
    }
  }
  for (const auto& [path, v] : before) {
    if (path.ends_with(".running_mean")) {
      std::vector<double> mu = mean_acc[path];
      for (double& x : mu) x /= n;
      model.params().set_value(path, Tensor::from_data(v.shape(), std::move(mu)));
    }
  }
  for (const auto& [path, v] : before) {
    if (!path.ends_with(".running_var")) continue;
    const std::string mpath =
        path.substr(0, path.size() - std::string("running_var").size()) + "running_mean";
    std::vector<double> var = var_acc[path];
    const auto& musum = mean_acc[mpath];
    const auto& musq = mean_sq_acc[mpath];
    for (std::size_t i = 0; i < var.size(); ++i) {
      const double mu = musum[i] / n;
      var[i] = var[i] / n + musq[i] / n - mu * mu;  // E[var_i] + Var(mu_i)
      var[i] = std::max(var[i], 0.0);
    }
    model.params().set_value(path, Tensor::from_data(v.shape(), std::move(var)));
  }
}

// Plain SGD, batch size 1, fixed per-epoch sample order drawn from the seed.
// Weight decay skips norm gains/biases; running stats are not optimized.
// Logs one JSON line per step; throws DataError naming the step on NaN loss.
inline TrainResult train_model(Model& model, const Dataset& data,
                               const std::vector<TaskSpec>& specs, const RunConfig& cfg,
                               std::ostream& log) {
  if (data.samples.empty()) throw ContractError("training needs at least one sample");
  TrainResult res;
  Prng order_rng(cfg.seed ^ 0xe9a3c4d17b5f0a2dULL);
  std::vector<std::size_t> order(data.samples.size());
  const std::size_t n = data.samples.size();
  char buf[160];
  for (long step = 1; step <= cfg.steps; ++step) {
    const std::size_t pos = static_cast<std::size_t>((step - 1) % static_cast<long>(n));
    if (pos == 0) {
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      order_rng.shuffle(order);
    }
    const Sample& sample = data.samples[order[pos]];

    model.params().zero_grads();
    Tape tape;
    BoundParams bp(tape, model.params());
    std::vector<Tensor> preds = model.forward(bp, sample.image, Mode::kTrain);
    LossBreakdown loss = total_loss(tape, preds, sample, specs);
    const double total = loss.total.value();
    if (!std::isfinite(total)) {
      throw DataError("NaN/Inf loss at step " + std::to_string(step));
    }
    tape.backward(loss.total);
    bp.pull_grads();

    for (auto& [path, p] : model.params()) {
      if (!p.trainable) continue;
      std::vector<double> v = p.value.data();
      for (std::size_t i = 0; i < v.size(); ++i) {
        double g = p.grad[i];
        if (p.weight_decay) g += cfg.weight_decay * v[i];
        v[i] -= cfg.lr * g;
      }
      model.params().set_value(path, Tensor::from_data(p.value.shape(), std::move(v)));
    }

    std::snprintf(buf, sizeof(buf), "{\"step\": %ld, \"sample\": %zu, \"l_total\": %.10g",
                  step, order[pos], total);
    log << buf;
    for (std::size_t i = 0; i < specs.size(); ++i) {
      std::snprintf(buf, sizeof(buf), ", \"l_%s\": %.10g", specs[i].name.c_str(),
                    loss.per_task[i].value());
      log << buf;
    }
    log << "}\n";

    if (step == 1) res.first_total = total;
    res.final_total = total;
    res.steps_run = step;
  }
  refresh_bn_population_stats(model, data);
  return res;
}

}  // namespace demtg
