#include "castformer/grad_suite.hpp"

#include <chrono>
#include <functional>

#include "castformer/objective.hpp"

namespace castformer {

namespace {

struct Probe {
  std::vector<Tensor> weights;
  // sum_i <outputs_i, weights_i>; weights drawn once per output shape.
  Tensor operator()(const std::vector<Tensor>& outs) {
    if (weights.empty()) {
      Rng rng(0xfeed);
      for (const auto& o : outs) weights.push_back(Tensor::normal(o.shape(), 1.0, rng));
    }
    Tensor acc;
    for (std::size_t i = 0; i < outs.size(); ++i) {
      Tensor t = sum(mul(outs[i], weights[i]));
      acc = acc.defined() ? add(acc, t) : t;
    }
    return acc;
  }
};

std::vector<int> random_labels(std::size_t B, std::size_t M, Rng& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(M) - 1);
  std::vector<int> y(B);
  for (auto& v : y) v = d(rng);
  return y;
}

void jitter(ParamStore& store, double stddev, std::uint64_t seed) {
  if (stddev == 0.0) return;
  Rng rng(seed ^ 0x1177e4);
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& [name, e] : store.entries()) {
    if (name.rfind("input.", 0) == 0) continue;
    for (auto& v : e.value.mutable_data()) v += n(rng);
  }
}

ModuleCheck run(const std::string& name, const LossFn& f, ParamStore& store, double h,
                double jitter_std, std::uint64_t seed) {
  jitter(store, jitter_std, seed);
  const auto t0 = std::chrono::steady_clock::now();
  ModuleCheck c;
  c.module = name;
  c.report = check_gradients(f, store, h);
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return c;
}

}  // namespace

std::vector<ModuleCheck> gradient_suite(const GradSuiteOptions& opt) {
  const std::size_t B = opt.batch, T = opt.frames, D = opt.d_model, M = opt.num_classes;
  const double drop = opt.dropout_train ? 0.1 : 0.0;
  Rng train_rng(opt.seed ^ 0xd20f);
  const ForwardContext ctx = opt.dropout_train ? ForwardContext{Mode::Train, &train_rng}
                                               : ForwardContext{Mode::Eval, nullptr};
  std::vector<ModuleCheck> out;

  EncoderConfig ecfg;
  ecfg.d_model = D;
  ecfg.heads = opt.heads;
  ecfg.layers = 2;
  ecfg.ffn_dim = 2 * D;
  ecfg.dropout_rate = drop;
  ecfg.use_speed = false;
  ecfg.d_in_interior = opt.d_in_interior;
  ecfg.d_in_exterior = opt.d_in_exterior;

  {
    Rng rng(opt.seed);
    ParamStore store;
    StreamEncoder enc(store, ecfg, Stream::Interior, rng);
    Tensor raw = store.add("input.raw", Tensor::normal({B, T, opt.d_in_interior}, 1.0, rng));
    Probe probe;
    out.push_back(run("encoder", [&](const ParamStore&) { return probe({enc.forward(raw, ctx)}); },
                      store, opt.h, opt.jitter, opt.seed));
  }
  {
    Rng rng(opt.seed + 101);
    ParamStore store;
    RsfConfig cfg;
    cfg.heads = opt.heads;
    cfg.dropout_rate = drop;
    ReciprocalShiftFusion rsf(store, D, cfg, rng);
    Tensor fi = store.add("input.f_in", Tensor::normal({B, T, D}, 1.0, rng));
    Tensor fo = store.add("input.f_out", Tensor::normal({B, T, D}, 1.0, rng));
    Probe probe;
    out.push_back(run("rsf",
                      [&](const ParamStore&) {
                        auto r = rsf.forward(fi, fo, ctx);
                        return probe({r.x_in, r.x_out});
                      },
                      store, opt.h, opt.jitter, opt.seed));
  }
  for (bool all_steps : {false, true}) {
    Rng rng(opt.seed + (all_steps ? 303 : 202));
    ParamStore store;
    CpeConfig cfg;
    cfg.heads = opt.heads;
    cfg.num_classes = M;
    CausalPatternExtraction cpe(store, D, cfg, rng);
    Tensor xi = store.add("input.x_in", Tensor::normal({B, T, D}, 1.0, rng));
    Tensor xo = store.add("input.x_out", Tensor::normal({B, T, D}, 1.0, rng));
    const auto y = random_labels(B, M, rng);
    Probe probe;
    out.push_back(run(all_steps ? "cpe-all-steps" : "cpe",
                      [&](const ParamStore&) {
                        auto r = cpe.forward(xi, xo, ctx, all_steps);
                        std::vector<Tensor> outs = {r.h_in, r.h_out, r.z_intent};
                        if (all_steps) {
                          outs.push_back(r.seq_in);
                          outs.push_back(r.seq_out);
                        }
                        return add(probe(outs), cross_entropy(r.intent_logits, y, {}));
                      },
                      store, opt.h, opt.jitter, opt.seed));
  }
  {
    Rng rng(opt.seed + 404);
    ParamStore store;
    FsnConfig cfg;
    cfg.num_classes = M;
    FeatureSynthesis fsn(store, D, cfg, rng);
    Tensor hi = store.add("input.h_in", Tensor::normal({B, D}, 1.0, rng));
    Tensor ho = store.add("input.h_out", Tensor::normal({B, D}, 1.0, rng));
    Tensor z = store.add("input.z_intent", Tensor::normal({B, D}, 1.0, rng));
    Tensor sp = store.add("input.speed", Tensor::normal({B, 1}, 1.0, rng));
    const auto y = random_labels(B, M, rng);
    Probe probe;
    out.push_back(run("fsn",
                      [&](const ParamStore&) {
                        auto r = fsn.forward(hi, ho, z, sp);
                        return add(probe({r.r_in, r.r_out, r.r_ctx, r.weights}),
                                   cross_entropy(r.joint_logits, y, {}));
                      },
                      store, opt.h, opt.jitter, opt.seed));
  }
  {
    Rng rng(opt.seed + 505);
    ParamStore store;
    LossInputs in;
    std::array<Tensor, 3> branches;
    for (std::size_t b = 0; b < 3; ++b) {
      branches[b] = store.add(std::string("input.logits_") + kBranchNames[b],
                              Tensor::normal({B, M}, 1.0, rng));
    }
    in.branch_logits = branches;
    in.joint_logits = store.add("input.logits_joint", Tensor::normal({B, M}, 1.0, rng));
    in.intent_logits = store.add("input.logits_intent", Tensor::normal({B, M}, 1.0, rng));
    const auto y = random_labels(B, M, rng);
    LossOptions lopt;
    out.push_back(run("loss", [&](const ParamStore&) { return unified_loss(in, y, lopt).total; },
                      store, opt.h, opt.jitter, opt.seed));
  }
  {
    ModelConfig mcfg = opt.model;
    mcfg.encoder = ecfg;
    mcfg.encoder.use_speed = true;
    mcfg.rsf.heads = opt.heads;
    mcfg.rsf.dropout_rate = drop;
    mcfg.cpe.heads = opt.heads;
    mcfg.num_classes = mcfg.cpe.num_classes = mcfg.fsn.num_classes = M;
    CaSTFormer model(mcfg, opt.seed + 606);
    Rng rng(opt.seed + 707);
    DualStreamBatch batch;
    batch.interior = Tensor::normal({B, T, opt.d_in_interior + 1}, 1.0, rng);
    batch.exterior = Tensor::normal({B, T, opt.d_in_exterior + 1}, 1.0, rng);
    if (mcfg.fsn.use_speed) batch.speed = Tensor::normal({B, 1}, 1.0, rng);
    batch.labels = random_labels(B, M, rng);
    LossOptions lopt;
    out.push_back(run("end-to-end",
                      [&](const ParamStore&) {
                        return unified_loss(model.forward(batch, ctx), batch.labels, lopt).total;
                      },
                      model.params(), opt.h, opt.jitter, opt.seed));
  }
  return out;
}

}  // namespace castformer
