#pragma once

#include <string>
#include <vector>

#include "demtg/common.hpp"

namespace demtg {

enum class TaskKind : std::uint8_t {
  kMulticlassSeg = 0,
  kBinaryMap = 1,
  kRegression1 = 2,
  kRegression3 = 3,
};

enum class MetricKind { kMiou, kRmse, kAErr, kMErr, kOdsF, kMaxF };

inline const char* metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::kMiou: return "miou";
    case MetricKind::kRmse: return "rmse";
    case MetricKind::kAErr: return "aerr";
    case MetricKind::kMErr: return "merr";
    case MetricKind::kOdsF: return "odsf";
    case MetricKind::kMaxF: return "maxf";
  }
  return "?";
}

// Higher-is-better follows from the metric kind; keeping it derived makes the
// pairing impossible to misconfigure.
inline bool metric_higher_better(MetricKind m) {
  return m == MetricKind::kMiou || m == MetricKind::kOdsF || m == MetricKind::kMaxF;
}

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::kMulticlassSeg;
  int out_channels = 1;
  double alpha = 1.0;
  MetricKind metric = MetricKind::kMiou;
  int ignore_label = -1;

  bool higher_better() const { return metric_higher_better(metric); }

  void validate() const {
    if (alpha <= 0.0) throw ConfigError("task " + name + ": alpha must be positive");
    if (out_channels < 1) throw ConfigError("task " + name + ": out_channels must be >=1");
    const bool seg_like = kind == TaskKind::kMulticlassSeg;
    if (seg_like && metric != MetricKind::kMiou) {
      throw ConfigError("task " + name + ": segmentation uses miou");
    }
    if (kind == TaskKind::kRegression3 && out_channels != 3) {
      throw ConfigError("task " + name + ": 3-channel regression needs out_channels 3");
    }
    if (kind == TaskKind::kRegression1 && out_channels != 1) {
      throw ConfigError("task " + name + ": 1-channel regression needs out_channels 1");
    }
    if (kind == TaskKind::kBinaryMap && out_channels != 1) {
      throw ConfigError("task " + name + ": binary map needs out_channels 1");
    }
  }
};

// Built-in task registry with the default loss weights: seg 1.0, partseg 2.0,
// sal 5.0, normal 10.0, bound 50.0, depth 1.0.
inline TaskSpec default_task_spec(const std::string& name, int channels_hint = 0) {
  TaskSpec s;
  s.name = name;
  if (name == "semseg") {
    s.kind = TaskKind::kMulticlassSeg;
    s.out_channels = channels_hint > 0 ? channels_hint : 3;
    s.alpha = 1.0;
    s.metric = MetricKind::kMiou;
  } else if (name == "partseg") {
    s.kind = TaskKind::kMulticlassSeg;
    s.out_channels = channels_hint > 0 ? channels_hint : 7;
    s.alpha = 2.0;
    s.metric = MetricKind::kMiou;
  } else if (name == "sal") {
    s.kind = TaskKind::kBinaryMap;
    s.out_channels = 1;
    s.alpha = 5.0;
    s.metric = MetricKind::kMaxF;
  } else if (name == "depth") {
    s.kind = TaskKind::kRegression1;
    s.out_channels = 1;
    s.alpha = 1.0;
    s.metric = MetricKind::kRmse;
  } else if (name == "normal") {
    s.kind = TaskKind::kRegression3;
    s.out_channels = 3;
    s.alpha = 10.0;
    s.metric = MetricKind::kMErr;
  } else if (name == "bound") {
    s.kind = TaskKind::kBinaryMap;
    s.out_channels = 1;
    s.alpha = 50.0;
    s.metric = MetricKind::kOdsF;
  } else {
    throw ConfigError("unknown task name: " + name);
  }
  s.validate();
  return s;
}

// Fallback spec for task names outside the registry, derived from the kind
// recorded in a dataset file.
inline TaskSpec task_spec_from_kind(const std::string& name, TaskKind kind, int channels) {
  TaskSpec s;
  s.name = name;
  s.kind = kind;
  s.out_channels = channels;
  switch (kind) {
    case TaskKind::kMulticlassSeg: s.metric = MetricKind::kMiou; break;
    case TaskKind::kBinaryMap: s.metric = MetricKind::kMaxF; break;
    case TaskKind::kRegression1: s.metric = MetricKind::kRmse; break;
    case TaskKind::kRegression3: s.metric = MetricKind::kMErr; break;
  }
  s.validate();
  return s;
}

}  // namespace demtg
