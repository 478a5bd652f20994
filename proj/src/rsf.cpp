#include "castformer/rsf.hpp"

#include <algorithm>

#include "castformer/errors.hpp"

namespace castformer {

RsfAttention parse_rsf_attention(const std::string& s) {
  if (s == "bda") return RsfAttention::Bda;
  if (s == "plain") return RsfAttention::Plain;
  if (s == "single-key") return RsfAttention::SingleKey;
  throw ConfigError("unknown rsf attention mode '" + s + "' (bda, plain, single-key)");
}

const char* to_string(RsfAttention a) {
  switch (a) {
    case RsfAttention::Bda: return "bda";
    case RsfAttention::Plain: return "plain";
    case RsfAttention::SingleKey: return "single-key";
  }
  return "?";
}

void RsfConfig::validate(std::size_t d_model) const {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("rsf: d_model " + std::to_string(d_model) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (gate_reduction < 1) throw ConfigError("rsf: gate_reduction must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("rsf: dropout rate must be in [0,1)");
  }
}

std::size_t RsfConfig::gate_hidden(std::size_t d_model) const {
  return std::max<std::size_t>(1, d_model / gate_reduction);
}

AttentionMask rsf_mask(std::size_t frames, const RsfConfig& cfg) {
  switch (cfg.attention) {
    case RsfAttention::Plain:
      return AttentionMask::full(frames, frames);
    case RsfAttention::SingleKey: {
      AttentionMask m{frames, frames, std::vector<std::uint8_t>(frames * frames, 0)};
      for (std::size_t t = 0; t < frames; ++t) m.allowed[t * frames + t] = 1;
      return m;
    }
    case RsfAttention::Bda:
      break;
  }
  // Delayed position u carries frame u-1, so u <= t exposes frames < t.
  return cfg.causal_mask ? AttentionMask::lower(frames, frames)
                         : AttentionMask::full(frames, frames);
}

ChannelGate::ChannelGate(ParamStore& store, const std::string& name, std::size_t d_model,
                         std::size_t hidden, Rng& rng)
    : ffn_(FeedForward::create(store, name, d_model, hidden, d_model, rng)) {}

ChannelGate::Result ChannelGate::operator()(const Tensor& h) const {
  Tensor g = sigmoid(ffn_(h));
  return {mul(g, h), g};
}

ReciprocalShiftFusion::ReciprocalShiftFusion(ParamStore& store, std::size_t d_model,
                                             const RsfConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  cfg.validate(d_model);
  bda_in_ = MultiHeadAttention(store, "rsf.bda_in", d_model, cfg.heads, rng);
  bda_out_ = MultiHeadAttention(store, "rsf.bda_out", d_model, cfg.heads, rng);
  const std::size_t hidden = cfg.gate_hidden(d_model);
  gate_in_ = ChannelGate(store, "rsf.gate_in", d_model, hidden, rng);
  gate_out_ = ChannelGate(store, "rsf.gate_out", d_model, hidden, rng);
  scale_in_ = store.add("rsf.norm_in.scale", Tensor::scalar(1.0));
  scale_out_ = store.add("rsf.norm_out.scale", Tensor::scalar(1.0));
}

ReciprocalShiftFusion::BdaResult ReciprocalShiftFusion::bda(const Tensor& f_in,
                                                            const Tensor& f_out) const {
  if (f_in.rank() != 3 || f_in.shape() != f_out.shape()) {
    throw ShapeError("bda: stream shapes " + shape_str(f_in.shape()) + " and " +
                     shape_str(f_out.shape()) + " must match as (B,T,D)");
  }
  const std::size_t T = f_in.dim(1);
  if (T == 0) throw SequenceTooShortError("bda: empty sequence");
  const AttentionMask mask = rsf_mask(T, cfg_);
  const bool delayed = cfg_.attention != RsfAttention::Plain;
  const Tensor kv_out = delayed ? delay_shift(f_out) : f_out;
  const Tensor kv_in = delayed ? delay_shift(f_in) : f_in;
  auto a_in = bda_in_(f_in, kv_out, kv_out, &mask);
  auto a_out = bda_out_(f_out, kv_in, kv_in, &mask);
  return {a_in.output, a_out.output, a_in.weights, a_out.weights};
}

RsfOutput ReciprocalShiftFusion::forward(const Tensor& f_in, const Tensor& f_out,
                                         const ForwardContext& ctx) const {
  auto h = bda(f_in, f_out);
  auto gi = gate_in_(h.h_in);
  auto go = gate_out_(h.h_out);
  RsfOutput out;
  out.x_in = dropout(rms_norm(gi.gated, scale_in_, cfg_.norm_eps), cfg_.dropout_rate, ctx.mode, ctx.rng);
  out.x_out = dropout(rms_norm(go.gated, scale_out_, cfg_.norm_eps), cfg_.dropout_rate, ctx.mode, ctx.rng);
  out.h_in = h.h_in;
  out.h_out = h.h_out;
  out.gates_in = gi.gate;
  out.gates_out = go.gate;
  out.attn_in = h.attn_in;
  out.attn_out = h.attn_out;
  return out;
}

}  // namespace castformer
