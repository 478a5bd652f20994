// End-to-end acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--expect-fail ID,...] [--skip-training]
//
// Exits 1 if any criterion fails that is not listed in --expect-fail. Listed
// criteria are still run and still print FAIL; the summary names them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "castformer/cli.hpp"
#include "castformer/config.hpp"
#include "castformer/cpe.hpp"
#include "castformer/errors.hpp"
#include "castformer/fsn.hpp"
#include "castformer/grad_suite.hpp"
#include "castformer/metrics.hpp"
#include "castformer/objective.hpp"
#include "castformer/rsf.hpp"
#include "castformer/trainer.hpp"

using namespace castformer;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- 1

Verdict gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checks = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    GradSuiteOptions o;
    o.seed = seed;
    for (const auto& m : gradient_suite(o)) {
      ++checks;
      if (m.report.worst.error >= worst) {
        worst = m.report.worst.error;
        where = m.module + " seed " + std::to_string(seed) + " " + m.report.worst.param;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && secs < 120.0,
          std::to_string(checks) + " module checks, worst rel err " + sci(worst) + " (" + where + "), " +
              std::to_string(int(secs)) + " s"};
}

// ---------------------------------------------------------------- 2

Verdict delay_precedence() {
  const std::size_t B = 2, T = 5, D = 8;
  RsfConfig cfg;
  cfg.heads = 2;
  cfg.dropout_rate = 0.0;
  ParamStore ps;
  Rng rng(101);
  ReciprocalShiftFusion rsf(ps, D, cfg, rng);
  for (auto& [name, e] : ps.entries())
    for (auto& v : e.value.mutable_data()) v += std::normal_distribution<double>(0.0, 0.1)(rng);
  auto fi = Tensor::normal({B, T, D}, 1.0, rng), fo = Tensor::normal({B, T, D}, 1.0, rng);
  auto perturb = [&](const Tensor& x, std::size_t s) {
    auto y = x.clone();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d) y.mutable_data()[(b * T + s) * D + d] += 2.0 + double(d);
    return y;
  };
  const auto base = rsf.forward(fi, fo, {});
  double leak = 0.0, min_reach = 1e300;
  for (std::size_t s = 0; s < T; ++s) {
    const auto po = rsf.forward(fi, perturb(fo, s), {});
    const auto pi = rsf.forward(perturb(fi, s), fo, {});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t) {
        double d_in = 0.0, d_out = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
          d_in = std::max(d_in, std::abs(po.x_in.at({b, t, d}) - base.x_in.at({b, t, d})));
          d_out = std::max(d_out, std::abs(pi.x_out.at({b, t, d}) - base.x_out.at({b, t, d})));
        }
        if (t <= s) {
          leak = std::max({leak, d_in, d_out});
        } else {
          min_reach = std::min({min_reach, d_in, d_out});
        }
      }
  }
  return {leak <= 1e-12 && min_reach > 1e-9,
          "max change at t <= t' " + sci(leak) + ", min change at t > t' " + sci(min_reach)};
}

// ---------------------------------------------------------------- 3

Verdict counterfactual_null() {
  const std::size_t B = 3, T = 6, D = 8;
  CpeConfig cfg;
  cfg.heads = 2;
  double delta = 0.0, skip = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore ps;
    Rng rng(200 + trial);
    CausalPatternExtraction cpe(ps, D, cfg, rng);
    auto xi = Tensor::normal({B, T, D}, 1.0, rng);
    // Exterior constant over time and batch.
    auto row = Tensor::normal({1, 1, D}, 1.0, rng);
    auto xo = broadcast_to(row, {B, T, D});
    for (Mode mode : {Mode::Eval, Mode::Train}) {
      Rng drop(1);
      const auto out = cpe.forward(xi, xo, ForwardContext{mode, &drop});
      for (double v : out.delta_in_raw.data()) delta = std::max(delta, std::abs(v));
      for (double v : out.delta_in.data()) delta = std::max(delta, std::abs(v));
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d)
          skip = std::max(skip, std::abs(out.h_in.at({b, d}) - xi.at({b, T - 1, d})));
    }
  }
  return {delta <= 1e-10 && skip <= 1e-10, "max |delta| " + sci(delta) + ", max |h_in - x_in[T]| " + sci(skip)};
}

// ---------------------------------------------------------------- 4

Verdict orthogonality() {
  const std::size_t B = 2, T = 5, D = 8;
  CpeConfig cfg;
  cfg.heads = 2;
  cfg.eps_orth = 0.0;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ParamStore ps;
    Rng rng(300 + trial);
    CausalPatternExtraction cpe(ps, D, cfg, rng);
    auto xi = Tensor::normal({B, T, D}, 1.0, rng), xo = Tensor::normal({B, T, D}, 1.0, rng);
    const auto out = cpe.forward(xi, xo, {});
    auto cosine = [&](const Tensor& delta, const Tensor& base, std::size_t b) {
      double dot = 0, nd = 0, nb = 0;
      for (std::size_t d = 0; d < D; ++d) {
        const double x = delta.at({b, d}), y = base.at({b, d});
        dot += x * y;
        nd += x * x;
        nb += y * y;
      }
      return std::abs(dot) / std::sqrt(nd * nb);
    };
    for (std::size_t b = 0; b < B; ++b) {
      worst = std::max(worst, cosine(out.delta_in, out.baseline_out, b));
      worst = std::max(worst, cosine(out.delta_out, out.baseline_in, b));
    }
  }
  return {worst <= 1e-5, "100 instances, worst normalized inner product " + sci(worst)};
}

// ---------------------------------------------------------------- 5

Verdict fusion_contract() {
  const std::size_t B = 4, D = 6;
  FsnConfig cfg;
  cfg.use_speed = false;
  double row_sum = 0.0, ident = 0.0, shift = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore ps;
    Rng rng(400 + trial);
    FeatureSynthesis fsn(ps, D, cfg, rng);
    auto ri = Tensor::normal({B, D}, 1.0, rng), ro = Tensor::normal({B, D}, 1.0, rng),
         rc = Tensor::normal({B, D}, 1.0, rng);
    const auto a = fsn.fuse(ri, ro, rc);
    for (std::size_t b = 0; b < B; ++b) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += a.weights.at({b, k});
      row_sum = std::max(row_sum, std::abs(s - 1.0));
    }

    // The same constant added to every branch score leaves w unchanged.
    const auto scores = concat({fsn.score(kBranchIn)(ri), fsn.score(kBranchOut)(ro), fsn.score(kBranchCtx)(rc)}, 1);
    for (double c : {-40.0, 7.5, 300.0}) {
      const auto w = softmax(add(scores, Tensor::full({B, 3}, c)));
      for (std::size_t i = 0; i < B * 3; ++i)
        shift = std::max(shift, std::abs(w.data()[i] - a.weights.data()[i]));
    }

    for (const char* kind : {".weight", ".bias"}) {
      const auto w = ps.get(std::string("fsn.cls_in") + kind).to_vector();
      for (const char* n : {"fsn.cls_out", "fsn.cls_ctx"}) {
        auto d = ps.entries().at(n + std::string(kind)).value.mutable_data();
        std::copy(w.begin(), w.end(), d.begin());
      }
    }
    const auto same = fsn.fuse(ri, ri, ri);
    for (std::size_t i = 0; i < same.joint_logits.size(); ++i)
      ident = std::max(ident, std::abs(same.joint_logits.data()[i] - same.branch_logits[0].data()[i]));
  }
  return {row_sum <= 1e-6 && ident <= 1e-10 && shift <= 1e-12,
          "row sum err " + sci(row_sum) + ", identical-branch err " + sci(ident) + ", score shift err " +
              sci(shift)};
}

// ---------------------------------------------------------------- 6

Verdict loss_arithmetic() {
  LossInputs in;
  std::array<Tensor, 3> br;
  for (auto& t : br) t = Tensor::full({3, 5}, 0.25, true);
  in.branch_logits = br;
  in.joint_logits = Tensor::full({3, 5}, 0.25, true);
  in.intent_logits = Tensor::full({3, 5}, 0.25, true);
  const int y[] = {0, 2, 4};
  const double uniform = unified_loss(in, y, LossOptions{}).total.item();
  const double uniform_err = std::abs(uniform - 1.1 * std::log(5.0));

  ModelConfig m;
  m.encoder.d_model = 8;
  m.encoder.heads = m.rsf.heads = m.cpe.heads = 2;
  m.encoder.layers = 1;
  m.encoder.ffn_dim = 16;
  CaSTFormer model(m, 5);
  SynthSpec s;
  s.samples = 4;
  s.frames = 8;
  const auto data = generate_synthetic(s);
  std::vector<std::size_t> idx = {0, 1, 2, 3};
  std::vector<std::vector<std::size_t>> frames(4, sample_chunk(8, 4, Mode::Eval, nullptr));
  const auto batch = build_batch(data, idx, frames, m, {});
  // The gradient W_int receives with alpha = 0 must be exactly what the four
  // main CE terms give it through the intention token.
  auto w_int_grad = [&](bool main_only, double alpha) {
    model.params().zero_grad();
    auto trace = model.forward(batch, {});
    Tensor loss;
    if (main_only) {
      loss = cross_entropy(trace.joint_logits, batch.labels);
      for (const auto& l : trace.fsn->branch_logits) loss = add(loss, cross_entropy(l, batch.labels));
      loss = scale(loss, 0.25);
    } else {
      LossOptions o;
      o.alpha = alpha;
      loss = unified_loss(trace, batch.labels, o).total;
    }
    loss.backward();
    return model.params().grads().at("cpe.intent.weight").to_vector();
  };
  const auto g_main = w_int_grad(true, 0.0);
  const auto g_zero = w_int_grad(false, 0.0);
  const auto g_alpha = w_int_grad(false, 0.1);
  double probe = 0.0, reach = 0.0;
  for (std::size_t i = 0; i < g_main.size(); ++i) {
    probe = std::max(probe, std::abs(g_zero[i] - g_main[i]));
    reach = std::max(reach, std::abs(g_alpha[i] - g_main[i]));
  }
  return {uniform_err <= 1e-9 && probe <= 1e-12 && reach > 1e-8,
          "uniform loss " + std::to_string(uniform) + " (err " + sci(uniform_err) + "), alpha=0 probe " +
              sci(probe) + ", alpha=0.1 direct path " + sci(reach)};
}

// ---------------------------------------------------------------- 7

Verdict metrics_oracle() {
  std::mt19937_64 rng(777);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int M = 2 + trial % 6, bg = trial % M;
    std::uniform_int_distribution<int> len(0, 80), cls(0, M - 1);
    std::vector<EventOutcome> xs(len(rng));
    for (auto& x : xs) x = {cls(rng), cls(rng)};
    std::vector<std::uint64_t> tp(M), fp(M), fpp(M), mp(M);
    for (int c = 0; c < M; ++c) {
      if (c == bg) continue;
      for (const auto& x : xs) {
        tp[c] += x.truth == c && x.predicted == c;
        fp[c] += x.predicted == c && x.truth != bg && x.truth != c;
        fpp[c] += x.predicted == c && x.truth == bg;
        mp[c] += x.truth == c && x.predicted != c;
      }
    }
    double pr = 0, re = 0;
    for (int c = 0; c < M; ++c) {
      if (c == bg) continue;
      const auto pd = tp[c] + fp[c] + fpp[c], rd = tp[c] + mp[c];
      pr += pd ? double(tp[c]) / double(pd) : 0.0;
      re += rd ? double(tp[c]) / double(rd) : 0.0;
    }
    pr /= M - 1;
    re /= M - 1;
    const double f1 = pr + re > 0 ? 2 * pr * re / (pr + re) : 0.0;
    const auto t = tally(xs, M, bg);
    const auto sc = pr_re_f1(t.counts);
    const bool same = t.counts.tp == tp && t.counts.fp == fp && t.counts.fpp == fpp && t.counts.mp == mp &&
                      sc.precision == pr && sc.recall == re && sc.f1 == f1;
    mismatches += !same;
  }
  ClassCounts hand;
  hand.tp.assign(5, 1);
  hand.tp[0] = 0;
  hand.fp.assign(5, 0);
  hand.fpp.assign(5, 0);
  hand.mp.assign(5, 0);
  hand.fp[1] = 1;
  hand.mp[1] = 1;
  const double macro = pr_re_f1(hand).precision;
  return {mismatches == 0 && macro == 0.875,
          std::to_string(mismatches) + "/1000 lists disagree with the oracle, hand macro Pr " + std::to_string(macro)};
}

// ---------------------------------------------------------------- 8, 9

struct Trained {
  RunConfig cfg;
  std::unique_ptr<CaSTFormer> model;
  TrainResult result;
  double seconds = 0.0;
};

SynthSpec synthetic_spec() {
  SynthSpec s;
  s.samples = 600;
  s.frames = 20;
  s.fps = 4.0;
  s.fold_count = 6;
  s.spurious_strength = 1.0;
  s.seed = 1;
  return s;
}

RunConfig scaled_config(const std::string& pipeline, std::uint64_t seed) {
  RunConfig c;
  c.set("encoder.d_model", "32");
  c.set("encoder.ffn_dim", "64");
  c.set("train.chunk_len", "8");
  c.set("train.epochs", "60");
  c.set("train.fold_count", "6");
  c.set("metrics.fps", "4");
  c.set("model.pipeline", pipeline);
  c.set("train.seed", std::to_string(seed));
  c.validate();
  return c;
}

Trained train_on(const Dataset& data, const FoldSplit& split, const std::string& pipeline, std::uint64_t seed) {
  Trained t;
  t.cfg = scaled_config(pipeline, seed);
  t.model = std::make_unique<CaSTFormer>(t.cfg.model, t.cfg.train.seed);
  const auto t0 = Clock::now();
  t.result = fit(*t.model, data, split.train, {}, t.cfg.train);
  t.seconds = seconds_since(t0);
  return t;
}

double accuracy(const Trained& t, const Dataset& data, const std::vector<std::size_t>& idx) {
  PredictOptions po;
  po.chunk_len = t.cfg.train.chunk_len;
  const auto pred = predict(*t.model, data, idx, t.result.speed, po);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) hit += pred[i] == data.samples[idx[i]].label;
  return 100.0 * double(hit) / double(idx.size());
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << v;
  return os.str();
}

Verdict truncation(const Trained& t, const Dataset& data, const std::vector<std::size_t>& idx) {
  TruncationSpec ts;
  ts.horizons = {0, 1, 2, 3};
  ts.fps = t.cfg.metrics.fps;
  ts.window_s = t.cfg.metrics.window_seconds;
  ts.chunk_len = t.cfg.train.chunk_len;
  ts.frames = data.samples[idx.front()].frames;
  PredictOptions po;
  po.chunk_len = t.cfg.train.chunk_len;
  const auto report = truncated_eval(
      [&](const FrameWindow& w) {
        PredictOptions o = po;
        o.window = w;
        return evaluate_outcomes(*t.model, data, idx, t.result.speed, o);
      },
      ts, {"straight", "lt", "rt", "llc", "rlc"});
  const auto plain = make_block("all", evaluate_outcomes(*t.model, data, idx, t.result.speed, po),
                                t.cfg.model.num_classes, 0);
  const auto& k0 = report.horizons.front().metrics;
  const bool identical = k0.confusion == plain.confusion && k0.counts == plain.counts &&
                         k0.accuracy == plain.accuracy && k0.scores.precision == plain.scores.precision &&
                         k0.scores.recall == plain.scores.recall && k0.scores.f1 == plain.scores.f1;
  std::string f1s;
  for (const auto& h : report.horizons) f1s += (f1s.empty() ? "" : " ") + std::to_string(h.seconds) + "s:" + pct(100 * h.metrics.scores.f1);
  return {report.horizons.size() == 4 && identical,
          std::to_string(report.horizons.size()) + " horizon blocks, k=0 " +
              (identical ? "bit-identical to" : "differs from") + " plain eval, F1 " + f1s};
}

// ---------------------------------------------------------------- 10

std::vector<std::string> log_without_wall_clock(const fs::path& p) {
  std::vector<std::string> out;
  std::istringstream is(read_bytes(p));
  std::string line;
  while (std::getline(is, line)) out.push_back(line.substr(0, line.rfind('\t')));
  return out;
}

Verdict determinism() {
  const fs::path dir = fs::temp_directory_path() / "castformer_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ostringstream sink;
  auto run = [&](std::vector<std::string> args) {
    const int code = run_cli(args, sink, sink);
    if (code != 0) throw std::runtime_error("cli failed: " + sink.str());
  };
  std::vector<std::string> gen = {"gen-data", "--samples", "120", "--frames", "20", "--fps", "4",
                                  "--seed", "9", "--spurious", "0.5"};
  std::vector<std::string> train = {"train", "--quiet", "--set", "encoder.d_model=16", "--set", "encoder.ffn_dim=32",
                                    "--set", "train.chunk_len=8", "--set", "train.epochs=4", "--set",
                                    "train.seed=3", "--set", "metrics.fps=4"};
  for (const char* r : {"a", "b"}) {
    auto g = gen;
    g.insert(g.end(), {"--out", (dir / (std::string(r) + ".jsonl")).string()});
    run(g);
    auto t = train;
    t.insert(t.end(), {"--data", (dir / (std::string(r) + ".jsonl")).string(), "--out", (dir / r).string()});
    run(t);
  }
  const bool data_same = read_bytes(dir / "a.jsonl") == read_bytes(dir / "b.jsonl");
  const auto la = log_without_wall_clock(dir / "a" / "train.log");
  const bool log_same = la.size() == 5 && la == log_without_wall_clock(dir / "b" / "train.log");
  const auto ca = read_bytes(dir / "a" / "checkpoint.bin");
  const bool ckpt_same = !ca.empty() && ca == read_bytes(dir / "b" / "checkpoint.bin");
  fs::remove_all(dir);
  return {data_same && log_same && ckpt_same,
          std::string("dataset bytes ") + (data_same ? "equal" : "DIFFER") + ", train.log " +
              (log_same ? "equal" : "DIFFERS") + ", checkpoint (" + std::to_string(ca.size()) + " bytes) " +
              (ckpt_same ? "equal" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> expect_fail;
  bool skip_training = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--expect-fail" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string id; std::getline(ss, id, ',');) expect_fail.insert(id);
    } else if (a == "--skip-training") {
      skip_training = true;
    } else {
      std::cerr << "usage: acceptance [--expect-fail ID,...] [--skip-training]\n";
      return 2;
    }
  }

  std::vector<std::string> failed;
  auto report = [&](const std::string& id, const std::string& name, const std::function<Verdict()>& f) {
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    std::cout << (v.pass ? "PASS" : "FAIL") << "  [" << id << "] " << name << ": " << v.detail << std::endl;
    if (!v.pass) failed.push_back(id);
  };

  report("1", "gradient correctness", gradients);
  report("2", "delay precedence", delay_precedence);
  report("3", "counterfactual null", counterfactual_null);
  report("4", "orthogonality", orthogonality);
  report("5", "fusion contract", fusion_contract);
  report("6", "loss arithmetic", loss_arithmetic);
  report("7", "metrics oracle", metrics_oracle);

  if (skip_training) {
    std::cout << "SKIP  [8a] [8b] [9] training-based criteria\n";
  } else {
    const auto spec = synthetic_spec();
    const Dataset data = generate_synthetic(spec);
    const Dataset shifted = make_shifted(data, spec);
    const auto split = split_by_fold(data, 0);

    std::optional<Trained> full;
    report("8a", "synthetic trainability", [&] {
      full = train_on(data, split, "rsf,cpe,fsn", 1);
      const double acc = accuracy(*full, data, split.held_out);
      return Verdict{acc >= 90.0 && full->seconds < 600.0,
                     std::to_string(split.train.size()) + " train / " + std::to_string(split.held_out.size()) +
                         " test, test acc " + pct(acc) + "%, " + std::to_string(int(full->seconds)) + " s"};
    });

    report("8b", "shifted-split robustness vs T-Base", [&] {
      std::string per_seed;
      double sum_full = 0, sum_base = 0;
      bool every_seed = true;
      for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const double a = seed == 1 && full ? accuracy(*full, shifted, split.held_out)
                                           : accuracy(train_on(data, split, "rsf,cpe,fsn", seed), shifted, split.held_out);
        const double b = accuracy(train_on(data, split, "none", seed), shifted, split.held_out);
        every_seed = every_seed && a >= b - 2.0;
        sum_full += a;
        sum_base += b;
        per_seed += " seed " + std::to_string(seed) + " " + pct(a) + "/" + pct(b) + ";";
      }
      return Verdict{every_seed, "full/T-Base shifted acc:" + per_seed + " mean " + pct(sum_full / 3) + "/" +
                                     pct(sum_base / 3)};
    });

    report("9", "truncation harness", [&] {
      if (!full) throw std::runtime_error("no trained model");
      return truncation(*full, data, split.held_out);
    });
  }

  report("10", "determinism", determinism);

  std::vector<std::string> unexpected;
  for (const auto& id : failed)
    if (!expect_fail.count(id)) unexpected.push_back(id);
  std::cout << "\n" << failed.size() << " criteria failed";
  for (const auto& id : failed) std::cout << " [" << id << (expect_fail.count(id) ? ", known" : "") << "]";
  std::cout << std::endl;
  return unexpected.empty() ? 0 : 1;
}
