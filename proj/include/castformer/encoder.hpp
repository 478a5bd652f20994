#pragma once

#include <string>
#include <vector>

#include "castformer/layers.hpp"

namespace castformer {

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ffn_dim = 128;
  double dropout_rate = 0.1;
  bool use_speed = true;
  std::size_t d_in_interior = 64;
  std::size_t d_in_exterior = 32;
  double norm_eps = 1e-6;

  void validate() const;
};

enum class Stream { Interior, Exterior };

const char* stream_name(Stream s);

// Sinusoid table: pe[t,2i] = sin(t / 10000^(2i/D)), pe[t,2i+1] = cos(...).
Tensor positional_encoding(std::size_t frames, std::size_t d_model);

// Per-stream front end: linear projection to D, positional encoding, then
// pre-norm transformer blocks with full self-attention over the chunk.
// Parameters live under "enc.in.*" / "enc.out.*".
class StreamEncoder {
 public:
  StreamEncoder() = default;
  StreamEncoder(ParamStore& store, const EncoderConfig& cfg, Stream stream, Rng& rng);

  // raw: (B, T, d_in) with d_in = feature width (+1 when use_speed).
  Tensor forward(const Tensor& raw, const ForwardContext& ctx) const;

  std::size_t input_width() const { return input_width_; }

 private:
  struct Block {
    Tensor norm1;
    MultiHeadAttention attn;
    Tensor norm2;
    FeedForward ffn;
  };

  EncoderConfig cfg_;
  std::size_t input_width_ = 0;
  Linear input_proj_;
  std::vector<Block> blocks_;
  Tensor final_norm_;
};

}  // namespace castformer
