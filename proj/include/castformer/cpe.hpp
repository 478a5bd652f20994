#pragma once

#include <string>

#include "castformer/layers.hpp"

namespace castformer {

enum class BaselineScope {
  Auto,           // batch-and-time when training, per-sample-time otherwise
  BatchAndTime,   // one D-vector averaged over every frame of every sample
  PerSampleTime,  // one D-vector per sample
};

enum class CausalGateMode { Elementwise, Scalar };

// Which baseline each residual is orthogonalized against.
enum class OrthBaseline {
  Cross,   // the baseline of the stream that produced the counterfactual
  Pooled,  // mean of both streams' baselines
};

BaselineScope parse_baseline_scope(const std::string& s);
const char* to_string(BaselineScope s);
CausalGateMode parse_gate_mode(const std::string& s);
const char* to_string(CausalGateMode m);
OrthBaseline parse_orth_baseline(const std::string& s);
const char* to_string(OrthBaseline b);

struct CpeConfig {
  std::size_t heads = 4;
  double eps_orth = 1e-6;
  BaselineScope baseline_scope = BaselineScope::Auto;
  bool final_step_only = true;
  std::size_t num_classes = 5;
  CausalGateMode gate_mode = CausalGateMode::Elementwise;
  OrthBaseline orth_baseline = OrthBaseline::Cross;

  void validate(std::size_t d_model) const;
  BaselineScope resolve_scope(Mode mode) const;
};

// (D) for batch-and-time, (B,D) for per-sample-time.
Tensor baseline_mean(const Tensor& x, BaselineScope scope);

struct CpeOutput {
  Tensor h_in;            // (B,D)
  Tensor h_out;
  Tensor delta_in_raw;    // observed minus counterfactual, final step
  Tensor delta_out_raw;
  Tensor delta_in;        // orthogonalized, final step
  Tensor delta_out;
  Tensor gate_in;         // (B,D) or (B,1)
  Tensor gate_out;
  Tensor baseline_in;     // mean of the interior stream
  Tensor baseline_out;    // mean of the exterior stream
  Tensor xi;              // (B,M)
  Tensor z_intent;        // (B,D)
  Tensor intent_logits;   // (B,M)
  // Only when every step is refined: X_t + g_t * delta_t for t >= 2, frame 1
  // unchanged, final frame equal to h.
  Tensor seq_in;
  Tensor seq_out;
  Tensor delta_in_steps;  // (B,T,D) orthogonalized residuals, zero at t=1
  Tensor delta_out_steps;
};

// Causal Pattern Extraction. Parameters under "cpe.*".
class CausalPatternExtraction {
 public:
  CausalPatternExtraction() = default;
  CausalPatternExtraction(ParamStore& store, std::size_t d_model, const CpeConfig& cfg, Rng& rng);

  struct Residual {
    Tensor final_step;  // (B,D)
    Tensor steps;       // (B,T,D), zero at frame 0; undefined unless requested
  };
  // Observed attention over the query stream's prefix of the key stream minus
  // counterfactual attention against the baseline as a single key.
  Residual causal_residual(const Tensor& queries, const Tensor& keys, const Tensor& baseline,
                           const MultiHeadAttention& attn, bool all_steps) const;

  struct Gated {
    Tensor h;
    Tensor gate;
  };
  // h = x + sigmoid(W delta + b) * delta.
  static Gated causal_gate(const Tensor& x, const Tensor& delta, const Linear& gate);

  struct Intention {
    Tensor xi;
    Tensor z_intent;
    Tensor logits;
  };
  Intention intention_head(const Tensor& h_out) const;

  CpeOutput forward(const Tensor& x_in, const Tensor& x_out, const ForwardContext& ctx,
                    bool all_steps = false) const;

  const CpeConfig& config() const { return cfg_; }
  const MultiHeadAttention& attention_in() const { return attn_in_; }
  const MultiHeadAttention& attention_out() const { return attn_out_; }
  const Linear& gate_in() const { return gate_in_; }
  const Linear& gate_out() const { return gate_out_; }
  const Linear& intent() const { return w_int_; }
  const Linear& projection() const { return w_proj_; }

 private:
  CpeConfig cfg_;
  MultiHeadAttention attn_in_, attn_out_;
  Linear gate_in_, gate_out_;
  Linear w_int_, w_proj_;
};

}  // namespace castformer
