#pragma once

#include <vector>

#include "demtg/data.hpp"
#include "demtg/tape.hpp"
#include "demtg/task_spec.hpp"

namespace demtg {

struct LossBreakdown {
  Tensor total;                  // scalar, sum of alpha_t * L_t
  std::vector<Tensor> per_task;  // unweighted L_t, task order
};

// Dispatches the per-task loss by kind: cross-entropy for multiclass maps,
// logit BCE for binary maps, L1 for regression maps.
inline Tensor task_loss(Tape& t, const Tensor& pred, const Sample& sample, const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::kMulticlassSeg: {
      auto it = sample.int_labels.find(spec.name);
      if (it == sample.int_labels.end()) throw ContractError("sample lacks labels for " + spec.name);
      std::vector<int> labels(it->second.begin(), it->second.end());
      return t.cross_entropy(pred, labels, spec.ignore_label);
    }
    case TaskKind::kBinaryMap: {
      auto it = sample.int_labels.find(spec.name);
      if (it == sample.int_labels.end()) throw ContractError("sample lacks labels for " + spec.name);
      std::vector<std::uint8_t> target(it->second.size());
      for (std::size_t i = 0; i < target.size(); ++i) {
        if (it->second[i] > 1) throw DataError("binary label > 1 for task " + spec.name);
        target[i] = static_cast<std::uint8_t>(it->second[i]);
      }
      return t.bce_logits(pred, target);
    }
    case TaskKind::kRegression1:
    case TaskKind::kRegression3: {
      auto it = sample.real_labels.find(spec.name);
      if (it == sample.real_labels.end()) throw ContractError("sample lacks labels for " + spec.name);
      auto mk = sample.masks.find(spec.name);
      if (mk != sample.masks.end() && !mk->second.empty()) {
        // Per-pixel mask broadcast over the task's channels.
        std::vector<std::uint8_t> full(static_cast<std::size_t>(pred.size()));
        const int ch = pred.dim(pred.rank() - 1);
        for (std::size_t i = 0; i < full.size(); ++i) full[i] = mk->second[i / static_cast<std::size_t>(ch)];
        return t.l1_loss(pred, it->second, full);
      }
      return t.l1_loss(pred, it->second);
    }
  }
  throw ContractError("unhandled task kind");
}

// L_total = sum_t alpha_t * L_t.
inline LossBreakdown total_loss(Tape& t, const std::vector<Tensor>& predictions,
                                const Sample& sample, const std::vector<TaskSpec>& specs) {
  if (predictions.size() != specs.size() || specs.empty()) {
    throw ContractError("total_loss: predictions and task specs misaligned (" +
                        std::to_string(predictions.size()) + " vs " +
                        std::to_string(specs.size()) + ")");
  }
  LossBreakdown out;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Tensor lt = task_loss(t, predictions[i], sample, specs[i]);
    out.per_task.push_back(lt);
    Tensor weighted = t.scale(lt, specs[i].alpha);
    out.total = i == 0 ? weighted : t.add(out.total, weighted);
  }
  return out;
}

}  // namespace demtg
