#include "castformer/encoder.hpp"

#include <cmath>

#include "castformer/errors.hpp"

namespace castformer {

void EncoderConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw ConfigError("encoder: d_model " + std::to_string(d_model) +
                      " must be divisible by heads " + std::to_string(heads));
  }
  if (d_model % 2 != 0) throw ConfigError("encoder: d_model must be even for the sinusoid table");
  if (layers < 1) throw ConfigError("encoder: layers must be >= 1");
  if (ffn_dim < d_model) throw ConfigError("encoder: ffn_dim must be >= d_model");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("encoder: dropout rate must be in [0,1)");
  }
}

const char* stream_name(Stream s) { return s == Stream::Interior ? "in" : "out"; }

Tensor positional_encoding(std::size_t frames, std::size_t d_model) {
  if (d_model % 2 != 0) {
    throw ConfigError("positional_encoding: odd d_model " + std::to_string(d_model));
  }
  std::vector<double> pe(frames * d_model);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double freq =
          std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      const double a = static_cast<double>(t) / freq;
      pe[t * d_model + 2 * i] = std::sin(a);
      pe[t * d_model + 2 * i + 1] = std::cos(a);
    }
  }
  return Tensor::from({frames, d_model}, std::move(pe));
}

StreamEncoder::StreamEncoder(ParamStore& store, const EncoderConfig& cfg, Stream stream,
                             Rng& rng)
    : cfg_(cfg) {
  cfg.validate();
  const std::string prefix = std::string("enc.") + stream_name(stream);
  input_width_ = (stream == Stream::Interior ? cfg.d_in_interior : cfg.d_in_exterior) +
                 (cfg.use_speed ? 1 : 0);
  input_proj_ = Linear::create(store, prefix + ".proj", input_width_, cfg.d_model, true, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string bp = prefix + ".layer" + std::to_string(l);
    Block b;
    b.norm1 = store.add(bp + ".norm1.scale", Tensor::full({cfg.d_model}, 1.0));
    b.attn = MultiHeadAttention(store, bp + ".attn", cfg.d_model, cfg.heads, rng);
    b.norm2 = store.add(bp + ".norm2.scale", Tensor::full({cfg.d_model}, 1.0));
    b.ffn = FeedForward::create(store, bp + ".ffn", cfg.d_model, cfg.ffn_dim, cfg.d_model, rng);
    blocks_.push_back(std::move(b));
  }
  final_norm_ = store.add(prefix + ".norm.scale", Tensor::full({cfg.d_model}, 1.0));
}

Tensor StreamEncoder::forward(const Tensor& raw, const ForwardContext& ctx) const {
  if (raw.rank() != 3) throw ShapeError("encode_stream: expected (B,T,d_in), got " + shape_str(raw.shape()));
  const std::size_t T = raw.dim(1);
  if (T == 0) throw SequenceTooShortError("encode_stream: empty sequence");
  if (raw.dim(2) != input_width_) {
    throw ShapeError("encode_stream: input width " + std::to_string(raw.dim(2)) +
                     ", encoder expects " + std::to_string(input_width_));
  }
  Tensor x = add(input_proj_(raw), positional_encoding(T, cfg_.d_model));
  const AttentionMask mask = AttentionMask::full(T, T);
  for (const auto& b : blocks_) {
    Tensor h = rms_norm(x, b.norm1, cfg_.norm_eps);
    h = b.attn(h, h, h, &mask).output;
    x = add(x, dropout(h, cfg_.dropout_rate, ctx.mode, ctx.rng));
    h = b.ffn(rms_norm(x, b.norm2, cfg_.norm_eps));
    x = add(x, dropout(h, cfg_.dropout_rate, ctx.mode, ctx.rng));
  }
  return rms_norm(x, final_norm_, cfg_.norm_eps);
}

}  // namespace castformer
