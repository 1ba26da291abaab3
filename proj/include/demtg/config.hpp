#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "demtg/common.hpp"
#include "demtg/data.hpp"
#include "demtg/task_spec.hpp"

namespace demtg {

// Run configuration. Every key has a default; the parser rejects unknown keys.
struct RunConfig {
  std::uint64_t seed = 7;
  int backbone_c = 8;
  std::vector<int> scales = {1, 2, 3, 4};
  int c_prime = 32;
  int depth_d = 1;
  int heads = 4;
  int ssg_depth = 1;
  int ssg_kernel = 3;
  double lr = 1e-3;
  double weight_decay = 5e-4;
  long steps = 500;
  std::string data_path;
  std::string out_path = "out/model.ckpt";
  // Task list used when no dataset supplies one (gradcheck micro runs).
  std::vector<std::string> tasks = {"semseg", "depth"};
  std::map<std::string, double> task_alpha;  // per-task overrides
  std::map<std::string, int> task_channels;
  std::map<std::string, int> task_ignore;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

inline long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long r = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not an integer: '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not a number: '" + v + "'");
  }
}

}  // namespace detail

// Line-based "section.key = value" text; '#' starts a comment.
inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    lineno++;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key == "seed") {
      cfg.seed = static_cast<std::uint64_t>(detail::parse_long(key, val));
    } else if (key == "backbone.c") {
      cfg.backbone_c = static_cast<int>(detail::parse_long(key, val));
    } else if (key == "backbone.scales") {
      cfg.scales.clear();
      for (const std::string& s : detail::split(val, ',')) {
        if (!s.empty()) cfg.scales.push_back(static_cast<int>(detail::parse_long(key, s)));
      }
      if (cfg.scales.empty()) throw ConfigError("backbone.scales: empty selection");
    } else if (key == "model.c_prime") {
      cfg.c_prime = static_cast<int>(detail::parse_long(key, val));
    } else if (key == "model.depth_d") {
      cfg.depth_d = static_cast<int>(detail::parse_long(key, val));
    } else if (key == "model.heads") {
      cfg.heads = static_cast<int>(detail::parse_long(key, val));
    } else if (key == "model.ssg_depth") {
      cfg.ssg_depth = static_cast<int>(detail::parse_long(key, val));
    } else if (key == "model.ssg_kernel") {
      cfg.ssg_kernel = static_cast<int>(detail::parse_long(key, val));
    } else if (key == "optim.lr") {
      cfg.lr = detail::parse_double(key, val);
    } else if (key == "optim.weight_decay") {
      cfg.weight_decay = detail::parse_double(key, val);
    } else if (key == "optim.steps") {
      cfg.steps = detail::parse_long(key, val);
    } else if (key == "data.path") {
      cfg.data_path = val;
    } else if (key == "out.path") {
      cfg.out_path = val;
    } else if (key == "tasks") {
      cfg.tasks.clear();
      for (const std::string& s : detail::split(val, ',')) {
        if (!s.empty()) cfg.tasks.push_back(s);
      }
    } else if (key.rfind("task.", 0) == 0) {
      const std::vector<std::string> parts = detail::split(key, '.');
      if (parts.size() != 3) throw ConfigError("config key " + key + ": expected task.<name>.<field>");
      const std::string& name = parts[1];
      const std::string& field = parts[2];
      if (field == "alpha") {
        cfg.task_alpha[name] = detail::parse_double(key, val);
      } else if (field == "channels") {
        cfg.task_channels[name] = static_cast<int>(detail::parse_long(key, val));
      } else if (field == "ignore") {
        cfg.task_ignore[name] = static_cast<int>(detail::parse_long(key, val));
      } else {
        throw ConfigError("unknown config key: " + key);
      }
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }
  return cfg;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Canonical dump; parse_config_text(serialize_config(c)) reproduces c.
inline std::string serialize_config(const RunConfig& c) {
  std::ostringstream out;
  out << "seed = " << c.seed << "\n";
  out << "backbone.c = " << c.backbone_c << "\n";
  out << "backbone.scales = ";
  for (std::size_t i = 0; i < c.scales.size(); ++i) out << (i ? "," : "") << c.scales[i];
  out << "\n";
  out << "model.c_prime = " << c.c_prime << "\n";
  out << "model.depth_d = " << c.depth_d << "\n";
  out << "model.heads = " << c.heads << "\n";
  out << "model.ssg_depth = " << c.ssg_depth << "\n";
  out << "model.ssg_kernel = " << c.ssg_kernel << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", c.lr);
  out << "optim.lr = " << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", c.weight_decay);
  out << "optim.weight_decay = " << buf << "\n";
  out << "optim.steps = " << c.steps << "\n";
  if (!c.data_path.empty()) out << "data.path = " << c.data_path << "\n";
  out << "out.path = " << c.out_path << "\n";
  out << "tasks = ";
  for (std::size_t i = 0; i < c.tasks.size(); ++i) out << (i ? "," : "") << c.tasks[i];
  out << "\n";
  for (const auto& [name, v] : c.task_alpha) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << "task." << name << ".alpha = " << buf << "\n";
  }
  for (const auto& [name, v] : c.task_channels) out << "task." << name << ".channels = " << v << "\n";
  for (const auto& [name, v] : c.task_ignore) out << "task." << name << ".ignore = " << v << "\n";
  return out.str();
}

// Task specs for a dataset's task table: registry defaults by name (kind from
// the file wins on conflict), then per-task config overrides.
inline std::vector<TaskSpec> build_task_specs(const std::vector<TaskInfo>& table,
                                              const RunConfig& cfg) {
  std::vector<TaskSpec> specs;
  for (const TaskInfo& t : table) {
    TaskSpec s;
    try {
      s = default_task_spec(t.name, t.channels);
      if (s.kind != t.kind) s = task_spec_from_kind(t.name, t.kind, t.channels);
    } catch (const ConfigError&) {
      s = task_spec_from_kind(t.name, t.kind, t.channels);
    }
    s.out_channels = t.channels;
    if (auto it = cfg.task_alpha.find(t.name); it != cfg.task_alpha.end()) s.alpha = it->second;
    if (auto it = cfg.task_ignore.find(t.name); it != cfg.task_ignore.end()) s.ignore_label = it->second;
    s.validate();
    specs.push_back(std::move(s));
  }
  return specs;
}

// Task specs straight from the config's task list (no dataset), for gradcheck.
inline std::vector<TaskSpec> build_task_specs(const RunConfig& cfg) {
  std::vector<TaskSpec> specs;
  for (const std::string& name : cfg.tasks) {
    int ch = 0;
    if (auto it = cfg.task_channels.find(name); it != cfg.task_channels.end()) ch = it->second;
    TaskSpec s = default_task_spec(name, ch);
    if (auto it = cfg.task_alpha.find(name); it != cfg.task_alpha.end()) s.alpha = it->second;
    if (auto it = cfg.task_ignore.find(name); it != cfg.task_ignore.end()) s.ignore_label = it->second;
    s.validate();
    specs.push_back(std::move(s));
  }
  return specs;
}

}  // namespace demtg
