#include "castformer/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "castformer/errors.hpp"
#include "castformer/grad_suite.hpp"

namespace castformer {

using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DivergenceError*>(&e) || dynamic_cast<const NumericError*>(&e)) {
    return kExitDivergence;
  }
  if (dynamic_cast<const VerificationError*>(&e) || dynamic_cast<const UnreliableCheckError*>(&e)) {
    return kExitVerification;
  }
  if (dynamic_cast<const Error*>(&e)) return kExitUsage;
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return kExitUsage;
  return 1;
}

namespace {

std::vector<std::string> class_names(std::size_t M) {
  std::vector<std::string> names;
  for (std::size_t m = 0; m < M; ++m) {
    names.push_back(M == kNumManeuvers ? maneuver_name(static_cast<int>(m)) : "class" + std::to_string(m));
  }
  return names;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

DatasetLimits limits_for(const RunConfig& cfg) {
  DatasetLimits l;
  l.interior_dim = cfg.model.encoder.d_in_interior;
  l.exterior_dim = cfg.model.encoder.d_in_exterior;
  l.num_classes = cfg.model.num_classes;
  l.fold_count = cfg.train.fold_count;
  return l;
}

std::size_t shared_frames(const Dataset& d, std::span<const std::size_t> idx) {
  if (idx.empty()) throw DataError("no samples selected for evaluation");
  const std::size_t T = d.samples[idx.front()].frames;
  for (std::size_t i : idx) {
    if (d.samples[i].frames != T) {
      throw ConfigError("truncated evaluation needs equal-length sequences; '" + d.samples[i].id +
                        "' has " + std::to_string(d.samples[i].frames) + " frames, expected " +
                        std::to_string(T));
    }
  }
  return T;
}

std::vector<std::size_t> select_samples(const Dataset& d, std::optional<std::size_t> fold) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    if (!fold || static_cast<std::size_t>(d.samples[i].fold) == *fold) idx.push_back(i);
  }
  return idx;
}

void write_report(const MetricsReport& r, const std::string& base) {
  std::filesystem::path p(base);
  if (p.extension() == ".json" || p.extension() == ".txt") p.replace_extension();
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream js(p.string() + ".json", std::ios::trunc), tx(p.string() + ".txt", std::ios::trunc);
  if (!js || !tx) throw DataError("cannot write report " + p.string());
  js << r.to_json() << '\n';
  tx << r.to_table();
}

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  std::string out;
  SynthSpec spec;
  bool shifted = false;
};

int cmd_gen_data(const GenArgs& a, std::ostream& out) {
  Dataset d = generate_synthetic(a.spec);
  write_dataset(d, a.out);
  out << "wrote " << d.size() << " samples to " << a.out << '\n';
  if (a.shifted) {
    std::filesystem::path p(a.out);
    const auto shifted_path = p.parent_path() / (p.stem().string() + ".shifted" + p.extension().string());
    Dataset s = make_shifted(d, a.spec);
    write_dataset(s, shifted_path);
    out << "wrote " << s.size() << " samples to " << shifted_path.string() << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, resume;
  std::vector<std::string> sets;
  std::optional<std::size_t> fold;
  std::size_t stop_after = 0;
  bool quiet = false;
};

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg;
  if (!path.empty()) cfg.merge_file(path);
  apply_overrides(cfg, sets);
  return cfg;
}

int cmd_train(const TrainArgs& a, const std::string& usage, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve_config(a.config, a.sets);
  if (!a.data.empty()) cfg.data_path = a.data;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.fold) cfg.train.fold = *a.fold;
  if (cfg.data_path.empty()) {
    err << "train: no dataset given (--data or data.path)\n" << usage;
    return kExitUsage;
  }
  if (cfg.out_dir.empty()) cfg.out_dir = "run";
  cfg.validate();
  const Dataset data = load_dataset(cfg.data_path, limits_for(cfg));
  CaSTFormer model(cfg.model, cfg.train.seed);
  std::filesystem::create_directories(cfg.out_dir);
  write_run_config(cfg, std::filesystem::path(cfg.out_dir) / "config.txt");

  TrainOptions opt;
  opt.out_dir = cfg.out_dir;
  if (!a.resume.empty()) opt.resume_from = a.resume;
  opt.stop_after_epoch = a.stop_after;
  opt.eval_workers = cfg.workers;
  opt.echo = a.quiet ? nullptr : &out;
  opt.manifest = cfg.items();
  opt.dataset_hash = data.manifest.content_hash;
  const auto res = train(model, data, cfg.train, opt);
  out << "trained " << res.epochs_completed << " epochs; checkpoint in " << cfg.out_dir << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string model, data, report, horizons = "0";
  std::optional<std::size_t> fold;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  LoadedRun run = load_run(a.model);
  const RunConfig& cfg = run.config;
  const std::string data_path = a.data.empty() ? cfg.data_path : a.data;
  if (data_path.empty()) throw ConfigError("eval: no dataset given (--data)");
  const Dataset data = load_dataset(data_path, limits_for(cfg));
  const auto idx = select_samples(data, a.fold);

  TruncationSpec ts;
  ts.horizons = parse_int_list(a.horizons);
  ts.fps = cfg.metrics.fps;
  ts.window_s = cfg.metrics.window_seconds;
  ts.chunk_len = cfg.train.chunk_len;
  ts.frames = shared_frames(data, idx);
  PredictOptions popt;
  popt.chunk_len = cfg.train.chunk_len;
  popt.batch_size = cfg.train.batch_size;
  popt.workers = cfg.workers;
  const auto report = truncated_eval(
      [&](const FrameWindow& w) {
        PredictOptions o = popt;
        o.window = w;
        return evaluate_outcomes(*run.model, data, idx, run.speed, o);
      },
      ts, class_names(cfg.model.num_classes));
  out << report.to_table();
  if (!a.report.empty()) write_report(report, a.report);
  return kExitOk;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  std::string variants = "modules", config, data, out;
  std::vector<std::string> sets;
  std::optional<std::size_t> fold;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  const auto variants = expand_variants(a.variants);
  RunConfig base = resolve_config(a.config, a.sets);
  if (!a.data.empty()) base.data_path = a.data;
  if (a.fold) base.train.fold = *a.fold;
  if (base.data_path.empty()) throw ConfigError("ablate: no dataset given (--data or data.path)");
  const Dataset data = load_dataset(base.data_path, limits_for(base));
  const auto split = split_by_fold(data, base.train.fold);

  json rows = json::array();
  std::ostringstream table;
  table << std::left << std::setw(26) << "variant" << std::setw(16) << "pipeline" << std::right
        << std::setw(8) << "acc" << std::setw(8) << "Pr" << std::setw(8) << "Re" << std::setw(8)
        << "F1" << '\n';
  for (const auto& v : variants) {
    RunConfig cfg = base;
    v.apply(cfg);
    cfg.validate();
    CaSTFormer model(cfg.model, cfg.train.seed);
    const auto res = fit(model, data, split.train, split.held_out, cfg.train, {});
    PredictOptions popt;
    popt.chunk_len = cfg.train.chunk_len;
    popt.batch_size = cfg.train.batch_size;
    popt.workers = cfg.workers;
    const auto outcomes = evaluate_outcomes(model, data, split.held_out, res.speed, popt);
    const auto block = make_block(v.name, outcomes, cfg.model.num_classes, 0);
    auto pct = [](double x) {
      std::ostringstream os;
      os << std::fixed << std::setprecision(1) << 100.0 * x;
      return os.str();
    };
    table << std::left << std::setw(26) << v.name << std::setw(16) << pipeline_string(cfg.model.pipeline)
          << std::right << std::setw(8) << pct(block.accuracy) << std::setw(8)
          << pct(block.scores.precision) << std::setw(8) << pct(block.scores.recall) << std::setw(8)
          << pct(block.scores.f1) << '\n';
    rows.push_back({{"variant", v.name},
                    {"pipeline", pipeline_string(cfg.model.pipeline)},
                    {"rsf.attention", to_string(cfg.model.rsf.attention)},
                    {"alpha", cfg.train.alpha},
                    {"accuracy", block.accuracy},
                    {"precision", block.scores.precision},
                    {"recall", block.scores.recall},
                    {"f1", block.scores.f1}});
    out << table.str();
    table.str("");
  }
  if (!a.out.empty()) {
    std::filesystem::path p(a.out);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream js(p.string() + ".json", std::ios::trunc);
    if (!js) throw DataError("cannot write " + p.string() + ".json");
    js << rows.dump(2) << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------- grad-check

struct GradArgs {
  std::string config;
  std::uint64_t seed = 1;
  std::size_t seeds = 1;
  double tol = 1e-4;
  std::string fault;
  bool dropout_train = false;
};

int cmd_grad_check(const GradArgs& a, std::ostream& out) {
  GradSuiteOptions opt;
  if (!a.config.empty()) opt.model = load_run_config(a.config).model;
  opt.dropout_train = a.dropout_train;
  std::optional<BackwardFaultGuard> fault;
  if (!a.fault.empty()) {
    const auto colon = a.fault.find(':');
    const std::string op = a.fault.substr(0, colon);
    const double factor = colon == std::string::npos ? 2.0 : std::stod(a.fault.substr(colon + 1));
    fault.emplace(op, factor);
  }
  GradCheckReport::Worst worst;
  std::string worst_module;
  out << std::scientific << std::setprecision(3);
  for (std::size_t s = 0; s < a.seeds; ++s) {
    opt.seed = a.seed + s;
    const auto checks = gradient_suite(opt);
    for (const auto& c : checks) {
      out << "seed " << opt.seed << "  " << c.module << "  max rel err " << c.report.worst.error
          << (c.report.passed(a.tol) ? "  ok" : "  FAIL") << '\n';
      for (const auto& [group, w] : c.report.groups) {
        out << "    " << std::left << std::setw(32) << group << std::right << w.error << '\n';
      }
      if (c.report.worst.error >= worst.error) {
        worst = c.report.worst;
        worst_module = c.module;
      }
    }
  }
  if (worst.error > a.tol) {
    std::ostringstream msg;
    msg << std::scientific << std::setprecision(3) << "gradient check failed: worst parameter "
        << worst.param << "[" << worst.index << "] in " << worst_module << " (group "
        << param_group(worst.param) << "), rel err " << worst.error << " > " << a.tol
        << " (analytic " << worst.analytic << ", numeric " << worst.numeric << ")";
    throw VerificationError(msg.str());
  }
  out << "gradient check passed, worst rel err " << worst.error << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- inspect-trace

struct TraceArgs {
  std::string model, data, out;
  std::size_t count = 4;
  std::optional<std::size_t> fold;
};

json rows_of(const Tensor& t, std::size_t b) {
  // Slice sample b of a batched tensor into nested arrays.
  const auto& s = t.shape();
  std::size_t inner = 1;
  for (std::size_t i = 1; i < s.size(); ++i) inner *= s[i];
  const auto d = t.data().subspan(b * inner, inner);
  std::function<json(std::size_t, std::size_t)> nest = [&](std::size_t axis, std::size_t off) -> json {
    if (axis == s.size()) return d[off];
    std::size_t stride = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) stride *= s[i];
    json a = json::array();
    for (std::size_t k = 0; k < s[axis]; ++k) a.push_back(nest(axis + 1, off + k * stride));
    return a;
  };
  if (s.size() == 1) return d[0];
  return nest(1, 0);
}

double row_norm(const Tensor& t, std::size_t b) {
  const std::size_t D = t.dim(t.rank() - 1);
  double s = 0.0;
  for (double v : t.data().subspan(b * D, D)) s += v * v;
  return std::sqrt(s);
}

int cmd_inspect_trace(const TraceArgs& a, std::ostream& out) {
  LoadedRun run = load_run(a.model);
  const RunConfig& cfg = run.config;
  const std::string data_path = a.data.empty() ? cfg.data_path : a.data;
  if (data_path.empty()) throw ConfigError("inspect-trace: no dataset given (--data)");
  const Dataset data = load_dataset(data_path, limits_for(cfg));
  auto idx = select_samples(data, a.fold);
  if (idx.size() > a.count) idx.resize(a.count);
  if (idx.empty()) throw DataError("no samples to trace");

  NoGradGuard no_grad;
  std::vector<std::vector<std::size_t>> frames;
  for (std::size_t i : idx) {
    frames.push_back(sample_chunk(data.samples[i].frames, cfg.train.chunk_len, Mode::Eval, nullptr));
  }
  const auto batch = build_batch(data, idx, frames, cfg.model, run.speed);
  const auto tr = run.model->forward(batch, ForwardContext{Mode::Eval, nullptr});
  json samples = json::array();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& s = data.samples[idx[b]];
    json j;
    j["id"] = s.id;
    j["label"] = s.label;
    j["frames"] = frames[b];
    j["joint_logits"] = rows_of(tr.joint_logits, b);
    const auto logits = tr.joint_logits.data().subspan(b * cfg.model.num_classes, cfg.model.num_classes);
    j["predicted"] = std::max_element(logits.begin(), logits.end()) - logits.begin();
    if (tr.rsf) {
      j["rsf"] = {{"attention_in", rows_of(tr.rsf->attn_in, b)},
                  {"attention_out", rows_of(tr.rsf->attn_out, b)},
                  {"gates_in", rows_of(tr.rsf->gates_in, b)},
                  {"gates_out", rows_of(tr.rsf->gates_out, b)}};
    }
    if (tr.cpe) {
      j["cpe"] = {{"delta_in_norm", row_norm(tr.cpe->delta_in, b)},
                  {"delta_out_norm", row_norm(tr.cpe->delta_out, b)},
                  {"delta_in_raw_norm", row_norm(tr.cpe->delta_in_raw, b)},
                  {"delta_out_raw_norm", row_norm(tr.cpe->delta_out_raw, b)},
                  {"gate_in", rows_of(tr.cpe->gate_in, b)},
                  {"gate_out", rows_of(tr.cpe->gate_out, b)},
                  {"xi", rows_of(tr.cpe->xi, b)}};
    }
    if (tr.fsn) j["fsn"] = {{"weights", rows_of(tr.fsn->weights, b)}};
    samples.push_back(std::move(j));
  }
  const std::string text = samples.dump(2);
  if (a.out.empty()) {
    out << text << '\n';
  } else {
    std::ofstream os(a.out, std::ios::trunc);
    if (!os) throw DataError("cannot write trace " + a.out);
    os << text << '\n';
    out << "wrote trace of " << idx.size() << " samples to " << a.out << '\n';
  }
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------- helpers

LoadedRun load_run(const std::filesystem::path& model_path) {
  const auto dir = std::filesystem::is_directory(model_path) ? model_path : model_path.parent_path();
  const auto ckpt = std::filesystem::is_directory(model_path) ? dir / "checkpoint.bin" : model_path;
  LoadedRun r;
  r.config = load_run_config(dir / "config.txt");
  r.config.validate();
  std::ifstream man(dir / "run.manifest");
  if (!man) throw ConfigError("missing run manifest in " + dir.string());
  std::string line;
  bool have_mean = false, have_std = false;
  while (std::getline(man, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = line.substr(0, eq);
    if (key == "run.speed_mean") r.speed.mean = std::stod(line.substr(eq + 1)), have_mean = true;
    if (key == "run.speed_std") r.speed.std = std::stod(line.substr(eq + 1)), have_std = true;
  }
  if (!have_mean || !have_std) throw ConfigError("run manifest lacks speed normalization constants");
  r.model = std::make_unique<CaSTFormer>(r.config.model, r.config.train.seed);
  load_checkpoint(r.model->params(), ckpt);
  return r;
}

namespace {

const std::vector<std::pair<std::string, std::vector<Stage>>>& module_variants() {
  static const std::vector<std::pair<std::string, std::vector<Stage>>> v = {
      {"tbase", {}},
      {"rsf", {Stage::Rsf}},
      {"cpe", {Stage::Cpe}},
      {"fsn", {Stage::Fsn}},
      {"rsf+cpe", {Stage::Rsf, Stage::Cpe}},
      {"rsf+fsn", {Stage::Rsf, Stage::Fsn}},
      {"cpe+fsn", {Stage::Cpe, Stage::Fsn}},
      {"full", {Stage::Rsf, Stage::Cpe, Stage::Fsn}},
  };
  return v;
}

const std::vector<std::string>& order_names() {
  static const std::vector<std::string> v = {"rsf-cpe-fsn", "rsf-fsn-cpe", "cpe-rsf-fsn",
                                             "cpe-fsn-rsf", "fsn-rsf-cpe", "fsn-cpe-rsf"};
  return v;
}

const std::vector<std::string>& alpha_values() {
  static const std::vector<std::string> v = {"0", "0.05", "0.1", "0.2", "0.5"};
  return v;
}

void expand_one(const std::string& name, std::vector<AblationVariant>& out) {
  if (name == "modules") {
    for (const auto& [n, _] : module_variants()) expand_one(n, out);
    return;
  }
  if (name == "orders") {
    for (const auto& o : order_names()) expand_one("order:" + o, out);
    return;
  }
  if (name == "attention") {
    for (const char* a : {"bda", "plain", "single-key"}) expand_one(std::string("attn:") + a, out);
    return;
  }
  if (name == "alpha-sweep") {
    for (const auto& a : alpha_values()) expand_one("alpha:" + a, out);
    return;
  }
  for (const auto& [n, stages] : module_variants()) {
    if (n == name) {
      out.push_back({name, [p = stages](RunConfig& c) { c.model.pipeline = p; }});
      return;
    }
  }
  if (name.rfind("order:", 0) == 0) {
    const auto order = name.substr(6);
    if (std::find(order_names().begin(), order_names().end(), order) == order_names().end()) {
      throw ConfigError("unknown variant '" + name + "'; valid: " + valid_variant_names());
    }
    const auto p = parse_pipeline(order);
    out.push_back({name, [p](RunConfig& c) { c.model.pipeline = p; }});
    return;
  }
  if (name.rfind("attn:", 0) == 0) {
    RsfAttention att;
    try {
      att = parse_rsf_attention(name.substr(5));
    } catch (const ConfigError&) {
      throw ConfigError("unknown variant '" + name + "'; valid: " + valid_variant_names());
    }
    out.push_back({name, [att](RunConfig& c) { c.model.rsf.attention = att; }});
    return;
  }
  if (name.rfind("alpha:", 0) == 0) {
    RunConfig probe;
    try {
      probe.set("train.alpha", name.substr(6));
      probe.train.validate();
    } catch (const ConfigError&) {
      throw ConfigError("unknown variant '" + name + "'; valid: " + valid_variant_names());
    }
    const double alpha = probe.train.alpha;
    out.push_back({name, [alpha](RunConfig& c) { c.train.alpha = alpha; }});
    return;
  }
  throw ConfigError("unknown variant '" + name + "'; valid: " + valid_variant_names());
}

}  // namespace

std::string valid_variant_names() {
  std::string s = "modules, orders, attention, alpha-sweep";
  for (const auto& [n, _] : module_variants()) s += ", " + n;
  for (const auto& o : order_names()) s += ", order:" + o;
  s += ", attn:bda, attn:plain, attn:single-key, alpha:<value>";
  return s;
}

std::vector<AblationVariant> expand_variants(const std::string& spec) {
  std::vector<AblationVariant> out;
  std::istringstream is(spec);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (item.empty()) continue;
    expand_one(item, out);
  }
  if (out.empty()) throw ConfigError("no variants given; valid: " + valid_variant_names());
  return out;
}

// ---------------------------------------------------------------- entry point

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-stream maneuver anticipation: data generation, training, evaluation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Write a synthetic dataset (+ manifest)");
  g->add_option("--out", gen.out, "Output file (.jsonl, or .fsb for packed)")->required();
  g->add_option("--samples", gen.spec.samples, "Number of sequences");
  g->add_option("--frames", gen.spec.frames, "Frames per sequence");
  g->add_option("--seed", gen.spec.seed, "RNG seed");
  g->add_option("--spurious", gen.spec.spurious_strength, "Label-aligned nuisance channel strength");
  g->add_flag("--shifted-test", gen.shifted, "Also write <stem>.shifted<ext> with the nuisance channel permuted");
  g->add_option("--noise", gen.spec.noise_std, "Gaussian noise std");
  g->add_option("--amplitude", gen.spec.signal_amplitude, "Class cue amplitude");
  g->add_option("--lag", gen.spec.lag, "Frames by which the interior response trails the exterior cue");
  g->add_option("--folds", gen.spec.fold_count, "Fold count for stratified assignment");
  g->add_option("--fps", gen.spec.fps, "Frame rate recorded in the manifest");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one fold");
  t->add_option("--config", tr.config, "key=value config file");
  t->add_option("--data", tr.data, "Dataset file");
  t->add_option("--fold", tr.fold, "Held-out fold");
  t->add_option("--out", tr.out, "Run directory");
  t->add_option("--resume", tr.resume, "Checkpoint to resume from");
  t->add_option("--stop-after", tr.stop_after, "Stop once this many epochs are complete");
  t->add_option("--set", tr.sets, "Override a config key (key=value), repeatable");
  t->add_flag("--quiet", tr.quiet, "Do not echo the epoch log");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a trained run, optionally at truncated horizons");
  e->add_option("--model", ev.model, "Run directory or checkpoint")->required();
  e->add_option("--data", ev.data, "Dataset file (default: the training dataset)");
  e->add_option("--truncate-seconds", ev.horizons, "Comma-separated horizons k (seconds before onset)");
  e->add_option("--report", ev.report, "Write <report>.json and <report>.txt");
  e->add_option("--fold", ev.fold, "Evaluate only this fold");

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "Train and compare a grid of variants");
  b->add_option("--variants", ab.variants, "Variants or groups: " + valid_variant_names());
  b->add_option("--config", ab.config, "key=value config file");
  b->add_option("--data", ab.data, "Dataset file");
  b->add_option("--fold", ab.fold, "Held-out fold");
  b->add_option("--out", ab.out, "Write <out>.json");
  b->add_option("--set", ab.sets, "Override a config key (key=value), repeatable");

  GradArgs gc;
  auto* c = app.add_subcommand("grad-check", "Finite-difference gradient verification");
  c->add_option("--config", gc.config, "key=value config file (model template)");
  c->add_option("--seed", gc.seed, "First seed");
  c->add_option("--seeds", gc.seeds, "Number of consecutive seeds");
  c->add_option("--tol", gc.tol, "Max relative error");
  c->add_option("--inject-fault", gc.fault, "op[:factor]")->group("");
  c->add_flag("--dropout-train", gc.dropout_train, "Run with dropout active (the check must refuse)")->group("");

  TraceArgs ts;
  auto* x = app.add_subcommand("inspect-trace", "Export per-sample attention maps, residuals, gates, weights");
  x->add_option("--model", ts.model, "Run directory or checkpoint")->required();
  x->add_option("--data", ts.data, "Dataset file (default: the training dataset)");
  x->add_option("--out", ts.out, "Trace JSON file (default stdout)");
  x->add_option("--samples", ts.count, "Number of samples");
  x->add_option("--fold", ts.fold, "Take samples from this fold");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (t->parsed()) return cmd_train(tr, t->help(), out, err);
    if (e->parsed()) return cmd_eval(ev, out);
    if (b->parsed()) return cmd_ablate(ab, out);
    if (c->parsed()) return cmd_grad_check(gc, out);
    if (x->parsed()) return cmd_inspect_trace(ts, out);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return exit_code_for(ex);
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace castformer
