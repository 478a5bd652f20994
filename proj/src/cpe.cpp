#include "castformer/cpe.hpp"

#include "castformer/errors.hpp"

namespace castformer {

BaselineScope parse_baseline_scope(const std::string& s) {
  if (s == "auto") return BaselineScope::Auto;
  if (s == "batch-and-time") return BaselineScope::BatchAndTime;
  if (s == "per-sample-time") return BaselineScope::PerSampleTime;
  throw ConfigError("unknown baseline scope '" + s +
                    "' (auto, batch-and-time, per-sample-time)");
}

const char* to_string(BaselineScope s) {
  switch (s) {
    case BaselineScope::Auto: return "auto";
    case BaselineScope::BatchAndTime: return "batch-and-time";
    case BaselineScope::PerSampleTime: return "per-sample-time";
  }
  return "?";
}

CausalGateMode parse_gate_mode(const std::string& s) {
  if (s == "elementwise") return CausalGateMode::Elementwise;
  if (s == "scalar") return CausalGateMode::Scalar;
  throw ConfigError("unknown causal gate mode '" + s + "' (elementwise, scalar)");
}

const char* to_string(CausalGateMode m) {
  return m == CausalGateMode::Elementwise ? "elementwise" : "scalar";
}

OrthBaseline parse_orth_baseline(const std::string& s) {
  if (s == "cross") return OrthBaseline::Cross;
  if (s == "pooled") return OrthBaseline::Pooled;
  throw ConfigError("unknown orthogonalization baseline '" + s + "' (cross, pooled)");
}

const char* to_string(OrthBaseline b) { return b == OrthBaseline::Cross ? "cross" : "pooled"; }

void CpeConfig::validate(std::size_t d_model) const {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("cpe: d_model " + std::to_string(d_model) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (num_classes < 2) throw ConfigError("cpe: num_classes must be >= 2");
  if (eps_orth < 0.0) throw ConfigError("cpe: eps_orth must be >= 0");
}

BaselineScope CpeConfig::resolve_scope(Mode mode) const {
  if (baseline_scope != BaselineScope::Auto) return baseline_scope;
  return mode == Mode::Train ? BaselineScope::BatchAndTime : BaselineScope::PerSampleTime;
}

Tensor baseline_mean(const Tensor& x, BaselineScope scope) {
  if (x.rank() != 3) throw ShapeError("baseline_mean: expected (B,T,D), got " + shape_str(x.shape()));
  if (x.dim(0) == 0 || x.dim(1) == 0) throw SequenceTooShortError("baseline_mean: empty input");
  if (scope == BaselineScope::Auto) throw ConfigError("baseline_mean: scope must be resolved");
  Tensor per_sample = mean_axis(x, 1);
  return scope == BaselineScope::PerSampleTime ? per_sample : mean_axis(per_sample, 0);
}

namespace {

// Baseline as a length-1 key sequence (B,1,D).
Tensor as_single_key(const Tensor& baseline, std::size_t batch) {
  const std::size_t D = baseline.shape().back();
  if (baseline.rank() == 1) return broadcast_to(reshape(baseline, {1, 1, D}), {batch, 1, D});
  return reshape(baseline, {batch, 1, D});
}

// Orthogonalize a (B,T,D) residual sequence against a (D) or (B,D) baseline.
Tensor orthogonalize_steps(const Tensor& steps, const Tensor& baseline, double eps) {
  const std::size_t B = steps.dim(0), T = steps.dim(1), D = steps.dim(2);
  Tensor base = baseline;
  if (baseline.rank() == 2) {
    base = reshape(broadcast_to(reshape(baseline, {B, 1, D}), {B, T, D}), {B * T, D});
  }
  return reshape(orthogonalize(reshape(steps, {B * T, D}), base, eps), {B, T, D});
}

}  // namespace

CausalPatternExtraction::CausalPatternExtraction(ParamStore& store, std::size_t d_model,
                                                 const CpeConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  cfg.validate(d_model);
  attn_in_ = MultiHeadAttention(store, "cpe.attn_in", d_model, cfg.heads, rng);
  attn_out_ = MultiHeadAttention(store, "cpe.attn_out", d_model, cfg.heads, rng);
  const std::size_t gate_width = cfg.gate_mode == CausalGateMode::Elementwise ? d_model : 1;
  gate_in_ = Linear::create(store, "cpe.gate_in", d_model, gate_width, true, rng);
  gate_out_ = Linear::create(store, "cpe.gate_out", d_model, gate_width, true, rng);
  w_int_ = Linear::create(store, "cpe.intent", d_model, cfg.num_classes, false, rng);
  w_proj_ = Linear::create(store, "cpe.proj", cfg.num_classes, d_model, false, rng);
}

CausalPatternExtraction::Residual CausalPatternExtraction::causal_residual(
    const Tensor& queries, const Tensor& keys, const Tensor& baseline,
    const MultiHeadAttention& attn, bool all_steps) const {
  if (queries.rank() != 3 || queries.shape() != keys.shape()) {
    throw ShapeError("causal_residual: stream shapes " + shape_str(queries.shape()) + " and " +
                     shape_str(keys.shape()) + " must match as (B,T,D)");
  }
  const std::size_t B = queries.dim(0), T = queries.dim(1), D = queries.dim(2);
  if (T < 2) {
    throw SequenceTooShortError("causal_residual needs T >= 2 (non-empty prefix), got T=" +
                                std::to_string(T));
  }
  const Tensor cf_key = as_single_key(baseline, B);
  const Tensor prefix = narrow(keys, 1, 0, T - 1);
  Residual r;
  if (all_steps) {
    // Query frame t (t >= 1) sees key frames 0..t-1.
    const Tensor q = narrow(queries, 1, 1, T - 1);
    const AttentionMask mask = AttentionMask::lower(T - 1, T - 1);
    Tensor obs = attn(q, prefix, prefix, &mask).output;
    Tensor cf = attn(q, cf_key, cf_key).output;
    Tensor delta = sub(obs, cf);
    r.steps = concat({Tensor::zeros({B, 1, D}), delta}, 1);
    r.final_step = select(delta, 1, T - 2);
  } else {
    const Tensor q = narrow(queries, 1, T - 1, 1);
    Tensor obs = attn(q, prefix, prefix).output;
    Tensor cf = attn(q, cf_key, cf_key).output;
    r.final_step = reshape(sub(obs, cf), {B, D});
  }
  return r;
}

CausalPatternExtraction::Gated CausalPatternExtraction::causal_gate(const Tensor& x,
                                                                   const Tensor& delta,
                                                                   const Linear& gate) {
  Tensor g = sigmoid(gate(delta));
  return {add(x, mul(g, delta)), g};
}

CausalPatternExtraction::Intention CausalPatternExtraction::intention_head(
    const Tensor& h_out) const {
  Tensor logits = w_int_(h_out);
  Tensor xi = softmax(logits);
  return {xi, w_proj_(xi), logits};
}

CpeOutput CausalPatternExtraction::forward(const Tensor& x_in, const Tensor& x_out,
                                           const ForwardContext& ctx, bool all_steps) const {
  const bool steps = all_steps || !cfg_.final_step_only;
  const BaselineScope scope = cfg_.resolve_scope(ctx.mode);
  CpeOutput out;
  out.baseline_in = baseline_mean(x_in, scope);
  out.baseline_out = baseline_mean(x_out, scope);

  auto res_in = causal_residual(x_in, x_out, out.baseline_out, attn_in_, steps);
  auto res_out = causal_residual(x_out, x_in, out.baseline_in, attn_out_, steps);
  out.delta_in_raw = res_in.final_step;
  out.delta_out_raw = res_out.final_step;

  Tensor orth_for_in = out.baseline_out;
  Tensor orth_for_out = out.baseline_in;
  if (cfg_.orth_baseline == OrthBaseline::Pooled) {
    orth_for_in = orth_for_out = scale(add(out.baseline_in, out.baseline_out), 0.5);
  }

  const std::size_t T = x_in.dim(1);
  const Tensor last_in = select(x_in, 1, T - 1);
  const Tensor last_out = select(x_out, 1, T - 1);
  if (steps) {
    out.delta_in_steps = orthogonalize_steps(res_in.steps, orth_for_in, cfg_.eps_orth);
    out.delta_out_steps = orthogonalize_steps(res_out.steps, orth_for_out, cfg_.eps_orth);
    auto gi = causal_gate(x_in, out.delta_in_steps, gate_in_);
    auto go = causal_gate(x_out, out.delta_out_steps, gate_out_);
    out.seq_in = gi.h;
    out.seq_out = go.h;
    out.delta_in = select(out.delta_in_steps, 1, T - 1);
    out.delta_out = select(out.delta_out_steps, 1, T - 1);
    out.h_in = select(gi.h, 1, T - 1);
    out.h_out = select(go.h, 1, T - 1);
    out.gate_in = select(gi.gate, 1, T - 1);
    out.gate_out = select(go.gate, 1, T - 1);
  } else {
    out.delta_in = orthogonalize(res_in.final_step, orth_for_in, cfg_.eps_orth);
    out.delta_out = orthogonalize(res_out.final_step, orth_for_out, cfg_.eps_orth);
    auto gi = causal_gate(last_in, out.delta_in, gate_in_);
    auto go = causal_gate(last_out, out.delta_out, gate_out_);
    out.h_in = gi.h;
    out.h_out = go.h;
    out.gate_in = gi.gate;
    out.gate_out = go.gate;
  }

  auto intent = intention_head(out.h_out);
  out.xi = intent.xi;
  out.z_intent = intent.z_intent;
  out.intent_logits = intent.logits;
  return out;
}

}  // namespace castformer
