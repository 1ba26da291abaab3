#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "demtg/config.hpp"
#include "demtg/eval.hpp"
#include "demtg/gradcheck_suite.hpp"
#include "demtg/train.hpp"

namespace demtg {

// "score:dir,score:dir,..." with dir in {hi,lo}; used by --baseline/--multi.
inline std::vector<BaselineScore> parse_score_list(const std::string& text) {
  std::vector<BaselineScore> out;
  for (const std::string& item : detail::split(text, ',')) {
    if (item.empty()) continue;
    const std::size_t colon = item.find(':');
    if (colon == std::string::npos) {
      throw ConfigError("score list entry '" + item + "': expected score:hi or score:lo");
    }
    BaselineScore b;
    b.score = detail::parse_double("score list", detail::trim(item.substr(0, colon)));
    const std::string dir = detail::trim(item.substr(colon + 1));
    if (dir == "hi") b.higher_better = true;
    else if (dir == "lo") b.higher_better = false;
    else throw ConfigError("score list direction '" + dir + "': expected hi or lo");
    out.push_back(b);
  }
  if (out.empty()) throw ConfigError("score list is empty");
  return out;
}

struct SynthOpts {
  std::uint64_t seed = 7;
  int n = 8;
  int hw = 32;
  int classes = 3;
  int shapes = -1;  // <0: seeded 1..K-1
  double shape_scale = 0.375;
  std::string out = "train.dmtg";
};

inline int cmd_synth(const SynthOpts& o, std::ostream& out, std::ostream& err) {
  try {
    Dataset d = synth_dataset(o.seed, o.n, o.hw, o.hw, o.classes, o.shapes, o.shape_scale);
    if (!o.out.empty()) {
      std::filesystem::path p(o.out);
      if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    }
    write_dataset(d, o.out);
    out << "wrote " << d.samples.size() << " samples (" << o.hw << "x" << o.hw << ", "
        << o.classes << " classes) to " << o.out << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "synth: " << e.what() << "\n";
    return 1;
  }
}

struct TrainOpts {
  std::string config_path;  // empty: defaults
  std::string data_path;    // overrides config
  std::string out_path;     // overrides config
  long steps = -1;          // overrides config when >=0
  long long seed = -1;      // overrides config when >=0
};

inline int cmd_train(const TrainOpts& o, std::ostream& out, std::ostream& err) {
  try {
    RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config_file(o.config_path);
    if (!o.data_path.empty()) cfg.data_path = o.data_path;
    if (!o.out_path.empty()) cfg.out_path = o.out_path;
    if (o.steps >= 0) cfg.steps = o.steps;
    if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
    if (cfg.data_path.empty()) throw ConfigError("train: no dataset (set data.path or --data)");

    Dataset data = read_dataset(cfg.data_path);
    std::vector<TaskSpec> specs = build_task_specs(data.tasks, cfg);
    cfg.tasks.clear();
    for (const TaskSpec& s : specs) cfg.tasks.push_back(s.name);

    Model model(model_config_from(cfg, specs));
    Prng rng(cfg.seed);
    model.init_params(rng);

    std::filesystem::path ckpt(cfg.out_path);
    if (ckpt.has_parent_path()) std::filesystem::create_directories(ckpt.parent_path());
    std::ofstream log_file(cfg.out_path + ".log", std::ios::trunc);
    if (!log_file) throw DataError("cannot open log file " + cfg.out_path + ".log");
    std::ostringstream log;
    TrainResult res = train_model(model, data, specs, cfg, log);
    log_file << log.str();
    out << log.str();

    save_checkpoint(cfg.out_path, model.params(), serialize_config(cfg));
    out << "checkpoint: " << cfg.out_path << " (" << model.params().count() << " tensors), l_total "
        << res.first_total << " -> " << res.final_total << " over " << res.steps_run << " steps\n";
    return 0;
  } catch (const std::exception& e) {
    err << "train: " << e.what() << "\n";
    return 1;
  }
}

struct EvalOpts {
  std::string checkpoint;
  std::string data_path;
  std::string baseline;  // single-task scores, "score:dir,..."
  std::string multi;     // when set: pure delta_m arithmetic, no model run
  std::string out_path;  // report destination; empty = stdout only
};

inline int cmd_eval(const EvalOpts& o, std::ostream& out, std::ostream& err) {
  try {
    MetricReport report;
    if (!o.multi.empty()) {
      // Delta_m from two score vectors alone.
      if (o.baseline.empty()) throw ConfigError("eval --multi needs --baseline");
      std::vector<BaselineScore> multi = parse_score_list(o.multi);
      std::vector<BaselineScore> single = parse_score_list(o.baseline);
      if (multi.size() != single.size()) {
        throw ConfigError("eval: --multi and --baseline lengths differ");
      }
      std::vector<double> m, s;
      std::vector<bool> dirs;
      for (std::size_t i = 0; i < multi.size(); ++i) {
        if (multi[i].higher_better != single[i].higher_better) {
          throw ConfigError("eval: direction mismatch at entry " + std::to_string(i));
        }
        m.push_back(multi[i].score);
        s.push_back(single[i].score);
        dirs.push_back(multi[i].higher_better);
      }
      for (std::size_t i = 0; i < m.size(); ++i) {
        report.entries.push_back({"task" + std::to_string(i), dirs[i] ? "hi" : "lo", m[i]});
      }
      report.delta_m = delta_m(m, s, dirs);
    } else {
      if (o.checkpoint.empty() || o.data_path.empty()) {
        throw ConfigError("eval needs --checkpoint and --data (or --multi/--baseline)");
      }
      Checkpoint ck = load_checkpoint(o.checkpoint);
      RunConfig cfg = parse_config_text(ck.config_text);
      Dataset data = read_dataset(o.data_path);
      std::vector<TaskSpec> specs = build_task_specs(data.tasks, cfg);
      Model model(model_config_from(cfg, specs));
      Prng rng(cfg.seed);
      model.init_params(rng);
      apply_checkpoint(model.params(), ck);
      std::vector<BaselineScore> baseline;
      if (!o.baseline.empty()) baseline = parse_score_list(o.baseline);
      report = evaluate_model(model, data, specs, o.baseline.empty() ? nullptr : &baseline);
    }
    const std::string json = report.to_json();
    out << json;
    if (!o.out_path.empty()) {
      std::filesystem::path p(o.out_path);
      if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
      std::ofstream f(o.out_path, std::ios::trunc);
      if (!f) throw DataError("cannot open report file " + o.out_path);
      f << json;
    }
    return 0;
  } catch (const std::exception& e) {
    err << "eval: " << e.what() << "\n";
    return 1;
  }
}

struct GradcheckOpts {
  std::string config_path;  // empty: the micro defaults below
  std::string break_op;     // debug: corrupt one VJP rule
};

// Defaults for the gradient-oracle run: T=2 (semseg K=3, depth), c=8, C'=8,
// heads 4, d=1.
inline RunConfig gradcheck_default_config() {
  RunConfig cfg;
  cfg.c_prime = 8;
  cfg.tasks = {"semseg", "depth"};
  return cfg;
}

inline int cmd_gradcheck(const GradcheckOpts& o, std::ostream& out, std::ostream& err) {
  try {
    RunConfig cfg = o.config_path.empty() ? gradcheck_default_config() : load_config_file(o.config_path);
    std::string break_op = o.break_op;
    if (break_op == "mhsa") break_op = "softmax";  // mhsa's core primitive
    std::vector<ComponentCheck> checks = run_grad_check_suite(cfg, break_op);
    int failures = 0;
    for (const ComponentCheck& c : checks) {
      if (c.result.pass) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-18s pass   max_rel_err %.3g (tol %.0e, %lld coords)\n",
                      c.name.c_str(), c.result.max_rel_err, c.tol, c.result.coords_checked);
        out << buf;
      } else {
        failures++;
        out << c.name << " FAIL   " << c.result.describe() << " (tol " << c.tol << ")\n";
      }
    }
    if (failures) {
      err << "gradcheck: " << failures << " component(s) failed\n";
      return 1;
    }
    return 0;
  } catch (const std::exception& e) {
    err << "gradcheck: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace demtg
