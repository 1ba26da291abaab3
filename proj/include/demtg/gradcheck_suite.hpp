#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "demtg/config.hpp"
#include "demtg/decoder.hpp"
#include "demtg/grad_check.hpp"
#include "demtg/losses.hpp"
#include "demtg/model.hpp"
#include "demtg/train.hpp"

namespace demtg {

struct ComponentCheck {
  std::string name;
  double tol = 1e-5;
  GradCheckResult result;
};

namespace detail {

// Weighted sum against a fixed untracked tensor, so every output coordinate
// gets a distinct gradient.
inline Tensor probe_loss(Tape& t, const Tensor& out, std::uint64_t salt) {
  Prng rng(0xabcddcba0000ULL + salt);
  Tensor w = Tensor::random_normal(out.shape(), rng);
  return t.sum(t.mul(out, w));
}

// Minimum distance of all deformable sampling coordinates to the integer
// lattice (where the bilinear gradient kinks).
inline double min_lattice_clearance(ParamStore& ps, const ModelConfig& mc, const Tensor& image) {
  double clearance = 1e9;
  Tape tape;
  BoundParams bp(tape, ps);
  FeaturePyramid pyr = backbone_forward(bp, image, Mode::kEval);
  Tensor shared = aggregate_scales(tape, pyr, mc.scales);
  for (std::size_t t = 0; t < mc.task_out_channels.size(); ++t) {
    const std::string prefix = "enc.t" + std::to_string(t);
    Tensor y = linear_reduce(bp, prefix, shared, mc.c_prime);
    for (int l = 0; l < mc.depth_d; ++l) {
      const std::string lv = prefix + ".d" + std::to_string(l);
      y = channel_mixing(bp, lv, y, Mode::kEval);
      Tensor off = conv2d_fw(bp, lv + ".off", y, 1, 1);
      const int h = off.dim(0), w = off.dim(1);
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const double py = i + off.at(i, j, 0);
          const double px = j + off.at(i, j, 1);
          for (double v : {py, px}) {
            const double d = std::fabs(v - std::round(v));
            clearance = std::min(clearance, d);
          }
        }
      y = spatial_deformable(bp, lv, y, Mode::kEval);
    }
  }
  return clearance;
}

// Gives the offset convs a small random init and nudges their biases until
// every sampled point sits clear of the lattice; the zero training init would
// put every point exactly on it.
inline void randomize_offsets_clear_of_lattice(ParamStore& ps, const ModelConfig& mc,
                                               const Tensor& image, Prng& rng,
                                               double min_clear = 2e-2) {
  for (std::size_t t = 0; t < mc.task_out_channels.size(); ++t) {
    for (int l = 0; l < mc.depth_d; ++l) {
      const std::string lv = "enc.t" + std::to_string(t) + ".d" + std::to_string(l);
      ps.set_value(lv + ".off.w",
                   Tensor::random_normal({3, 3, mc.c_prime, 2}, rng, 0.0, 0.005));
      ps.set_value(lv + ".off.b", Tensor::from_data({2}, {0.37, -0.23}));
    }
  }
  for (int tries = 0; tries < 64; ++tries) {
    if (min_lattice_clearance(ps, mc, image) >= min_clear) return;
    for (std::size_t t = 0; t < mc.task_out_channels.size(); ++t) {
      for (int l = 0; l < mc.depth_d; ++l) {
        const std::string lv = "enc.t" + std::to_string(t) + ".d" + std::to_string(l);
        const Tensor& b = ps.value(lv + ".off.b");
        ps.set_value(lv + ".off.b", Tensor::from_data({2}, {b[0] + 0.0137, b[1] + 0.0113}));
      }
    }
  }
  throw ContractError("could not clear deformable sampling points off the lattice");
}

}  // namespace detail

// Finite-difference checks for every differentiable primitive and the
// composite blocks, each on its own small seeded program.
inline std::vector<ComponentCheck> run_grad_check_suite(const RunConfig& cfg,
                                                        const std::string& broken_op = "") {
  std::vector<ComponentCheck> checks;
  std::uint64_t salt = 0;

  auto run = [&](const std::string& name, double tol, double eps, int coords,
                 const std::function<void(ParamStore&, Prng&)>& setup,
                 const LossProgram& program) {
    ParamStore ps;
    Prng rng(cfg.seed * 1000003ULL + 17ULL * (salt++));
    setup(ps, rng);
    GradCheckOptions opt;
    opt.eps = eps;
    opt.tol = tol;
    opt.coords_per_param = coords;
    opt.seed = cfg.seed + salt;
    opt.broken_op = broken_op;
    ComponentCheck c;
    c.name = name;
    c.tol = tol;
    c.result = grad_check(program, ps, opt);
    checks.push_back(std::move(c));
  };

  run("matmul", 1e-6, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) {
        ps.create("a", Tensor::random_normal({3, 4}, rng));
        ps.create("b", Tensor::random_normal({4, 2}, rng));
      },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, t.matmul(bp("a"), bp("b")), 1);
      });

  run("elementwise_mul", 1e-6, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) {
        ps.create("a", Tensor::random_normal({2, 3}, rng));
        ps.create("b", Tensor::random_normal({2, 3}, rng));
      },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, t.mul(bp("a"), bp("b")), 2);
      });

  run("softmax", 1e-5, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) { ps.create("x", Tensor::random_normal({4, 5}, rng)); },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, t.softmax_lastdim(bp("x")), 3);
      });

  run("gelu", 1e-5, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) { ps.create("x", Tensor::random_normal({3, 4}, rng)); },
      [](Tape& t, BoundParams& bp) { return detail::probe_loss(t, t.gelu(bp("x")), 4); });

  run("layer_norm", 1e-5, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) {
        ps.create("x", Tensor::random_normal({4, 8}, rng));
        ps.create("gain", Tensor::random_normal({8}, rng, 1.0, 0.1));
        ps.create("bias", Tensor::random_normal({8}, rng, 0.0, 0.1));
      },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, t.layer_norm(bp("x"), bp("gain"), bp("bias")), 5);
      });

  run("batch_norm_eval", 1e-5, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) {
        ps.create("x", Tensor::random_normal({4, 4, 3}, rng));
        ps.create("gain", Tensor::random_normal({3}, rng, 1.0, 0.1));
        ps.create("bias", Tensor::random_normal({3}, rng, 0.0, 0.1));
        ps.create("rm", Tensor::random_normal({3}, rng, 0.0, 0.3), false);
        ps.create("rv", Tensor::random_uniform({3}, rng, 0.5, 1.5), false);
      },
      [](Tape& t, BoundParams& bp) {
        Tensor y = t.batch_norm(bp("x"), bp("gain"), bp("bias"), bp.store().value("rm"),
                                bp.store().value("rv"), Mode::kEval);
        return detail::probe_loss(t, y, 6);
      });

  run("batch_norm_train", 1e-5, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) {
        ps.create("x", Tensor::random_normal({4, 4, 3}, rng));
        ps.create("gain", Tensor::random_normal({3}, rng, 1.0, 0.1));
        ps.create("bias", Tensor::random_normal({3}, rng, 0.0, 0.1));
        ps.create("rm", Tensor::zeros({3}), false);
        ps.create("rv", Tensor::full({3}, 1.0), false);
      },
      [](Tape& t, BoundParams& bp) {
        // Output depends only on batch stats; the running-stat side effect is
        // not exercised here.
        Tensor y = t.batch_norm(bp("x"), bp("gain"), bp("bias"), bp.store().value("rm"),
                                bp.store().value("rv"), Mode::kTrain);
        return detail::probe_loss(t, y, 7);
      });

  run("conv2d", 1e-5, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) {
        ps.create("x", Tensor::random_normal({5, 5, 2}, rng));
        ps.create("w", Tensor::random_normal({3, 3, 2, 3}, rng, 0.0, 0.3));
        ps.create("b", Tensor::random_normal({3}, rng, 0.0, 0.1));
      },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, t.conv2d(bp("x"), bp("w"), bp("b"), 1, 1), 8);
      });

  run("conv1d_depthwise", 1e-5, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) {
        ps.create("x", Tensor::random_normal({6, 3}, rng));
        ps.create("w", Tensor::random_normal({3, 3}, rng, 0.0, 0.3));
        ps.create("b", Tensor::random_normal({3}, rng, 0.0, 0.1));
      },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, t.conv1d_depthwise(bp("x"), bp("w"), bp("b")), 9);
      });

  run("linear", 1e-5, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) {
        ps.create("x", Tensor::random_normal({5, 4}, rng));
        ps.create("w", Tensor::random_normal({4, 3}, rng, 0.0, 0.3));
        ps.create("b", Tensor::random_normal({3}, rng, 0.0, 0.1));
      },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, t.linear(bp("x"), bp("w"), bp("b")), 10);
      });

  run("bilinear_sample", 1e-5, 1e-6, 0,
      [](ParamStore& ps, Prng& rng) {
        ps.create("x", Tensor::random_normal({6, 6, 2}, rng));
        // Fractional offsets well clear of the lattice.
        std::vector<double> off(6 * 6 * 2);
        for (double& v : off) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.15, 0.45);
        ps.create("off", Tensor::from_data({6, 6, 2}, std::move(off)));
      },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, t.deform_sample(bp("x"), bp("off")), 11);
      });

  run("upsample_bilinear", 1e-5, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) { ps.create("x", Tensor::random_normal({3, 4, 2}, rng)); },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, t.upsample_bilinear(bp("x"), 2), 12);
      });

  run("cross_entropy", 1e-6, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) { ps.create("logits", Tensor::random_normal({3, 3, 4}, rng)); },
      [](Tape& t, BoundParams& bp) {
        const std::vector<int> labels = {0, 1, 2, 3, 0, 1, -1, 3, 2};
        return t.cross_entropy(bp("logits"), labels, -1);
      });

  run("l1_loss", 1e-6, 1e-6, 0,
      [](ParamStore& ps, Prng& rng) {
        Tensor pred = Tensor::random_normal({4, 4, 1}, rng);
        // Keep the evaluation away from the |.| kink.
        std::vector<double> tgt(static_cast<std::size_t>(pred.size()));
        for (std::size_t i = 0; i < tgt.size(); ++i) {
          tgt[i] = pred[static_cast<long long>(i)] + (i % 2 ? 0.2 : -0.3);
        }
        ps.create("pred", pred);
        ps.create("target", Tensor::from_data({4, 4, 1}, std::move(tgt)), false);
      },
      [](Tape& t, BoundParams& bp) {
        return t.l1_loss(bp("pred"), bp.store().value("target"));
      });

  run("bce_logits", 1e-6, 1e-5, 0,
      [](ParamStore& ps, Prng& rng) { ps.create("logits", Tensor::random_normal({4, 4, 1}, rng)); },
      [](Tape& t, BoundParams& bp) {
        std::vector<std::uint8_t> target(16);
        for (std::size_t i = 0; i < 16; ++i) target[i] = i % 3 == 0 ? 1 : 0;
        return t.bce_logits(bp("logits"), target);
      });

  const int cp = 8;  // micro C' for the composite checks

  run("mhsa", 1e-5, 1e-6, 0,
      [cp](ParamStore& ps, Prng& rng) {
        ps.create("q_in", Tensor::random_normal({6, cp}, rng));
        ps.create("kv_in", Tensor::random_normal({9, cp}, rng));
        init_mhsa_params(ps, rng, "attn", cp, 0.3);
      },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, mhsa_fw(bp, "attn", bp("q_in"), bp("kv_in"), 4), 13);
      });

  run("smlp", 1e-5, 1e-6, 0,
      [cp](ParamStore& ps, Prng& rng) {
        ps.create("x", Tensor::random_normal({5, cp}, rng));
        init_smlp_params(ps, rng, "smlp", cp);
      },
      [](Tape& t, BoundParams& bp) {
        return detail::probe_loss(t, smlp_fw(bp, "smlp", bp("x")), 14);
      });

  run("ssg", 1e-5, 1e-6, 0,
      [cp, &cfg](ParamStore& ps, Prng& rng) {
        ps.create("x", Tensor::random_normal({16, cp}, rng));
        DecoderConfig dc{cp, cfg.heads, cfg.ssg_depth, cfg.ssg_kernel};
        init_ssg_params(ps, rng, "ssg", dc);
      },
      [cp, &cfg](Tape& t, BoundParams& bp) {
        DecoderConfig dc{cp, cfg.heads, cfg.ssg_depth, cfg.ssg_kernel};
        return detail::probe_loss(t, apply_ssg(bp, "ssg", bp("x"), 4, 4, dc), 15);
      });

  run("task_interaction", 1e-5, 1e-6, 0,
      [cp](ParamStore& ps, Prng& rng) {
        ps.create("xq0", Tensor::random_normal({16, cp}, rng));
        ps.create("xq1", Tensor::random_normal({16, cp}, rng));
        init_interaction_params(ps, rng, "inter", cp);
      },
      [](Tape& t, BoundParams& bp) {
        Tensor f = task_interaction(bp, "inter", {bp("xq0"), bp("xq1")}, 4);
        return detail::probe_loss(t, f, 16);
      });

  run("task_query_gating", 1e-4, 1e-6, 0,
      [cp, &cfg](ParamStore& ps, Prng& rng) {
        ps.create("xq", Tensor::random_normal({16, cp}, rng));
        ps.create("f", Tensor::random_normal({32, cp}, rng));
        init_task_gating_params(ps, rng, "tq", cp);
        DecoderConfig dc{cp, 4, cfg.ssg_depth, cfg.ssg_kernel};
        init_ssg_params(ps, rng, "ssg", dc);
      },
      [cp, &cfg](Tape& t, BoundParams& bp) {
        DecoderConfig dc{cp, 4, cfg.ssg_depth, cfg.ssg_kernel};
        Tensor xsp = t.reshape(bp("xq"), {4, 4, cp});
        Tensor y = task_query_gating(bp, "tq", "ssg", bp("xq"), xsp, bp("f"), dc);
        return detail::probe_loss(t, y, 17);
      });

  // Composite paths through the deformable sampler use eps 1e-3 and tol 1e-4;
  // sampling points are pushed clear of the bilinear kinks first.

  run("deformable_mixer", 1e-4, 1e-6, 0,
      [&cfg](ParamStore& ps, Prng& rng) {
        const int c_in = 12, cp2 = 8;
        ps.create("x", Tensor::random_normal({6, 6, c_in}, rng, 0.0, 0.5));
        init_mixer_params(ps, rng, "enc", {c_in, cp2, 1});
        ps.set_value("enc.d0.off.w", Tensor::random_normal({3, 3, cp2, 2}, rng, 0.0, 0.005));
        ps.set_value("enc.d0.off.b", Tensor::from_data({2}, {0.37, -0.23}));
        // Nudge until the sampled points are clear of the lattice.
        for (int tries = 0; tries < 64; ++tries) {
          Tape t;
          BoundParams bp(t, ps);
          Tensor y = channel_mixing(bp, "enc.d0", linear_reduce(bp, "enc", bp.store().value("x"), cp2),
                                    Mode::kEval);
          Tensor off = conv2d_fw(bp, "enc.d0.off", y, 1, 1);
          double clearance = 1e9;
          for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) {
              const double py = i + off.at(i, j, 0), px = j + off.at(i, j, 1);
              clearance = std::min(clearance, std::fabs(py - std::round(py)));
              clearance = std::min(clearance, std::fabs(px - std::round(px)));
            }
          if (clearance >= 2e-2) break;
          const Tensor& b = ps.value("enc.d0.off.b");
          ps.set_value("enc.d0.off.b", Tensor::from_data({2}, {b[0] + 0.0137, b[1] + 0.0113}));
        }
        (void)cfg;
      },
      [](Tape& t, BoundParams& bp) {
        EncodedTask e = encode_task(bp, "enc", bp("x"), {12, 8, 1}, Mode::kEval);
        return detail::probe_loss(t, e.tokens, 18);
      });

  run("backbone", 1e-4, 1e-6, 2,
      [](ParamStore& ps, Prng& rng) {
        init_backbone_params(ps, rng, 4);
        ps.create("img", Tensor::random_uniform({32, 32, 3}, rng));
      },
      [](Tape& t, BoundParams& bp) {
        FeaturePyramid p = backbone_forward(bp, bp("img"), Mode::kEval);
        Tensor agg = aggregate_scales(t, p, {1, 2, 3, 4});
        return detail::probe_loss(t, agg, 19);
      });

  // Encoder + decoder end to end on a T=2, 16x16 feature grid with C'=8:
  // two mixers, task interaction, per-task query gating, shared SSG, heads.
  run("encoder_decoder", 1e-4, 1e-6, 4,
      [&cfg](ParamStore& ps, Prng& rng) {
        const int c_in = 12, cp2 = 8;
        ps.create("x", Tensor::random_normal({16, 16, c_in}, rng, 0.0, 0.5));
        MixerConfig mcfg{c_in, cp2, 1};
        init_mixer_params(ps, rng, "enc.t0", mcfg);
        init_mixer_params(ps, rng, "enc.t1", mcfg);
        DecoderConfig dc{cp2, 4, cfg.ssg_depth, cfg.ssg_kernel};
        init_decoder_params(ps, rng, dc, {3, 1});
        calibrate_bn_stats(ps, [&ps, mcfg]() {
          Tape t;
          BoundParams bp(t, ps);
          encode_task(bp, "enc.t0", ps.value("x"), mcfg, Mode::kTrain);
          encode_task(bp, "enc.t1", ps.value("x"), mcfg, Mode::kTrain);
        });
        for (const char* enc : {"enc.t0", "enc.t1"}) {
          const std::string lv = std::string(enc) + ".d0";
          ps.set_value(lv + ".off.w", Tensor::random_normal({3, 3, cp2, 2}, rng, 0.0, 0.005));
          ps.set_value(lv + ".off.b", Tensor::from_data({2}, {0.37, -0.23}));
          for (int tries = 0; tries < 64; ++tries) {
            Tape t;
            BoundParams bp(t, ps);
            Tensor y = channel_mixing(bp, lv, linear_reduce(bp, enc, ps.value("x"), cp2),
                                      Mode::kEval);
            Tensor off = conv2d_fw(bp, lv + ".off", y, 1, 1);
            double clearance = 1e9;
            for (int i = 0; i < 16; ++i)
              for (int j = 0; j < 16; ++j) {
                const double py = i + off.at(i, j, 0), px = j + off.at(i, j, 1);
                clearance = std::min(clearance, std::fabs(py - std::round(py)));
                clearance = std::min(clearance, std::fabs(px - std::round(px)));
              }
            if (clearance >= 2e-2) break;
            const Tensor& b = ps.value(lv + ".off.b");
            ps.set_value(lv + ".off.b", Tensor::from_data({2}, {b[0] + 0.0137, b[1] + 0.0113}));
          }
        }
      },
      [&cfg](Tape& t, BoundParams& bp) {
        const int cp2 = 8;
        MixerConfig mcfg{12, cp2, 1};
        DecoderConfig dc{cp2, 4, cfg.ssg_depth, cfg.ssg_kernel};
        std::vector<EncodedTask> enc;
        enc.push_back(encode_task(bp, "enc.t0", bp("x"), mcfg, Mode::kEval));
        enc.push_back(encode_task(bp, "enc.t1", bp("x"), mcfg, Mode::kEval));
        std::vector<Tensor> preds = decode_all(bp, enc, dc, {3, 1});
        return t.add(detail::probe_loss(t, preds[0], 20), detail::probe_loss(t, preds[1], 21));
      });

  // The full architecture and weighted loss on one synthetic sample, BN
  // frozen in eval mode. 32x32 image: the smallest extent the backbone's
  // divisibility contract admits.
  {
    std::vector<TaskSpec> specs = build_task_specs(cfg);
    ModelConfig mc = model_config_from(cfg, specs);
    Model model(mc);
    Prng rng(cfg.seed * 77777ULL + 5);
    model.init_params(rng);
    const int k_classes = specs[0].kind == TaskKind::kMulticlassSeg ? specs[0].out_channels : 3;
    Sample sample = synth_scene(cfg.seed + 100, 32, 32, k_classes);
    // Stats calibration needs a train-mode pass, and train-mode BN needs >=2
    // elements per channel, which stage4 of a 32px image cannot give; use a
    // 64px image for the calibration pass only.
    Sample calib = synth_scene(cfg.seed + 101, 64, 64, k_classes);
    calibrate_bn_stats(model.params(), [&model, &calib]() {
      Tape t;
      BoundParams bp(t, model.params());
      model.forward(bp, calib.image, Mode::kTrain);
    });
    detail::randomize_offsets_clear_of_lattice(model.params(), mc, sample.image, rng);

    GradCheckOptions opt;
    opt.eps = 1e-6;
    opt.tol = 1e-4;
    opt.coords_per_param = 4;
    opt.seed = cfg.seed + 999;
    opt.broken_op = broken_op;
    ComponentCheck c;
    c.name = "full_model";
    c.tol = opt.tol;
    c.result = grad_check(
        [&](Tape& t, BoundParams& bp) {
          std::vector<Tensor> preds = model.forward(bp, sample.image, Mode::kEval);
          return total_loss(t, preds, sample, specs).total;
        },
        model.params(), opt);
    checks.push_back(std::move(c));
  }

  return checks;
}

}  // namespace demtg
