#include "castformer/layers.hpp"

#include <cmath>

#include "castformer/errors.hpp"

namespace castformer {

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t d_in,
                      std::size_t d_out, bool with_bias, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
  Linear l;
  l.weight = store.add(name + ".weight", Tensor::uniform({d_out, d_in}, -bound, bound, rng));
  if (with_bias) l.bias = store.add(name + ".bias", Tensor::zeros({d_out}));
  return l;
}

FeedForward FeedForward::create(ParamStore& store, const std::string& name, std::size_t d_in,
                                std::size_t hidden, std::size_t d_out, Rng& rng) {
  return {Linear::create(store, name + ".fc1", d_in, hidden, true, rng),
          Linear::create(store, name + ".fc2", hidden, d_out, true, rng)};
}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name,
                                       std::size_t d_model, std::size_t heads, Rng& rng)
    : heads_(heads) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError(name + ": d_model " + std::to_string(d_model) +
                      " not divisible by heads " + std::to_string(heads));
  }
  wq_ = Linear::create(store, name + ".wq", d_model, d_model, true, rng);
  wk_ = Linear::create(store, name + ".wk", d_model, d_model, true, rng);
  wv_ = Linear::create(store, name + ".wv", d_model, d_model, true, rng);
  wo_ = Linear::create(store, name + ".wo", d_model, d_model, true, rng);
}

AttentionResult MultiHeadAttention::operator()(const Tensor& query, const Tensor& key,
                                               const Tensor& value,
                                               const AttentionMask* mask) const {
  auto r = scaled_dot_attention(wq_(query), wk_(key), wv_(value), heads_, mask);
  r.output = wo_(r.output);
  return r;
}

}  // namespace castformer
