#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "demtg/param_store.hpp"
#include "demtg/prng.hpp"
#include "demtg/tape.hpp"

namespace demtg {

struct GradCheckResult {
  bool pass = true;
  double max_rel_err = 0.0;
  std::string worst_path;
  long long worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  long long coords_checked = 0;

  std::string describe() const {
    if (worst_index < 0) return "no coordinates checked";
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s[%lld]: analytic=%.9g numeric=%.9g rel_err=%.3g",
                  worst_path.c_str(), worst_index, worst_analytic, worst_numeric, max_rel_err);
    return buf;
  }
};

// A program under check: fresh tape in, scalar loss out. Must be
// deterministic in the store values (BN in a fixed mode, fixed inputs).
using LossProgram = std::function<Tensor(Tape&, BoundParams&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-5;
  // <=0 checks every coordinate; otherwise this many seeded picks per tensor.
  int coords_per_param = 0;
  std::uint64_t seed = 0;
  std::string broken_op;  // negative-control hook
  // The optimal step trades truncation (curvature) against roundoff and
  // differs per coordinate; coordinates failing at eps are retried at
  // eps/10 and eps*10. A wrong gradient rule fails at every step size.
  bool adaptive_eps = true;
};

// Central finite differences against the tape gradients. The numeric side
// only ever evaluates the program forward, so it stays independent of the
// backward path it is checking.
inline GradCheckResult grad_check(const LossProgram& program, ParamStore& store,
                                  const GradCheckOptions& opt = {}) {
  store.zero_grads();
  {
    Tape tape;
    if (!opt.broken_op.empty()) tape.set_broken_op(opt.broken_op);
    BoundParams bp(tape, store);
    Tensor loss = program(tape, bp);
    tape.backward(loss);
    bp.pull_grads();
  }

  auto eval = [&]() {
    Tape tape;
    BoundParams bp(tape, store);
    return program(tape, bp).value();
  };

  GradCheckResult res;
  Prng rng(opt.seed ^ 0x67e6c7493ULL);
  for (auto& [path, param] : store) {
    if (!param.trainable) continue;
    const long long n = param.value.size();
    std::vector<long long> picks;
    if (opt.coords_per_param <= 0 || opt.coords_per_param >= n) {
      picks.resize(static_cast<std::size_t>(n));
      for (long long i = 0; i < n; ++i) picks[static_cast<std::size_t>(i)] = i;
    } else {
      for (int i = 0; i < opt.coords_per_param; ++i)
        picks.push_back(rng.uniform_int(static_cast<int>(n)));
    }
    for (long long idx : picks) {
      const double analytic = param.grad[static_cast<std::size_t>(idx)];
      const double orig = param.value[idx];

      auto poke = [&](double v) {
        std::vector<double> d = param.value.data();
        d[static_cast<std::size_t>(idx)] = v;
        store.set_value(path, Tensor::from_data(param.value.shape(), std::move(d)));
      };
      auto central = [&](double h) {
        poke(orig + h);
        const double fp = eval();
        poke(orig - h);
        const double fm = eval();
        poke(orig);
        return (fp - fm) / (2.0 * h);
      };
      auto rel_err = [&](double numeric) {
        const double denom = std::max({1e-6, std::fabs(analytic), std::fabs(numeric)});
        return std::fabs(analytic - numeric) / denom;
      };

      double numeric = central(opt.eps);
      double rel = rel_err(numeric);
      if (rel > opt.tol && opt.adaptive_eps) {
        for (double factor : {0.1, 10.0}) {
          const double n2 = central(opt.eps * factor);
          if (rel_err(n2) < rel) {
            rel = rel_err(n2);
            numeric = n2;
          }
        }
      }
      res.coords_checked++;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_path = path;
        res.worst_index = idx;
        res.worst_analytic = analytic;
        res.worst_numeric = numeric;
      }
    }
  }
  res.pass = res.max_rel_err <= opt.tol;
  return res;
}

}  // namespace demtg
