#pragma once

#include <string>

#include "castformer/layers.hpp"

namespace castformer {

// How each stream's queries see the other stream.
enum class RsfAttention {
  Bda,        // one-frame-delayed keys, optionally causally masked
  Plain,      // undelayed keys, no mask
  SingleKey,  // only the delayed frame t (i.e. original frame t-1)
};

RsfAttention parse_rsf_attention(const std::string& s);
const char* to_string(RsfAttention a);

struct RsfConfig {
  std::size_t heads = 4;
  std::size_t gate_reduction = 4;
  double dropout_rate = 0.1;
  bool causal_mask = true;
  RsfAttention attention = RsfAttention::Bda;
  double norm_eps = 1e-6;

  void validate(std::size_t d_model) const;
  std::size_t gate_hidden(std::size_t d_model) const;
};

struct RsfOutput {
  Tensor x_in;       // (B,T,D)
  Tensor x_out;      // (B,T,D)
  Tensor h_in;       // BDA outputs before gating
  Tensor h_out;
  Tensor gates_in;   // (B,T,D)
  Tensor gates_out;
  Tensor attn_in;    // (B,H,T,T), interior queries over delayed exterior
  Tensor attn_out;   // (B,H,T,T), exterior queries over delayed interior
};

// Key visibility for a length-T sequence under the configured attention mode.
AttentionMask rsf_mask(std::size_t frames, const RsfConfig& cfg);

// g = sigmoid(W2 ReLU(W1 H + b1) + b2), H~ = g * H.
class ChannelGate {
 public:
  ChannelGate() = default;
  ChannelGate(ParamStore& store, const std::string& name, std::size_t d_model,
              std::size_t hidden, Rng& rng);

  struct Result {
    Tensor gated;
    Tensor gate;
  };
  Result operator()(const Tensor& h) const;

  const FeedForward& layers() const { return ffn_; }

 private:
  FeedForward ffn_;
};

// Reciprocal Shift Fusion. Parameters under "rsf.*".
class ReciprocalShiftFusion {
 public:
  ReciprocalShiftFusion() = default;
  ReciprocalShiftFusion(ParamStore& store, std::size_t d_model, const RsfConfig& cfg, Rng& rng);

  struct BdaResult {
    Tensor h_in;
    Tensor h_out;
    Tensor attn_in;
    Tensor attn_out;
  };
  // H_in = MHA(F_in, shift(F_out)), H_out = MHA(F_out, shift(F_in)).
  BdaResult bda(const Tensor& f_in, const Tensor& f_out) const;

  RsfOutput forward(const Tensor& f_in, const Tensor& f_out, const ForwardContext& ctx) const;

  const RsfConfig& config() const { return cfg_; }
  const MultiHeadAttention& attention_in() const { return bda_in_; }
  const MultiHeadAttention& attention_out() const { return bda_out_; }
  const ChannelGate& gate_in() const { return gate_in_; }
  const ChannelGate& gate_out() const { return gate_out_; }
  const Tensor& norm_scale_in() const { return scale_in_; }
  const Tensor& norm_scale_out() const { return scale_out_; }

 private:
  RsfConfig cfg_;
  MultiHeadAttention bda_in_, bda_out_;
  ChannelGate gate_in_, gate_out_;
  Tensor scale_in_, scale_out_;
};

}  // namespace castformer
