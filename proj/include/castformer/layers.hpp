#pragma once

#include <string>

#include "castformer/param_store.hpp"
#include "castformer/tensor.hpp"

namespace castformer {

// Threaded through every forward pass. rng may be null in eval mode.
struct ForwardContext {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;
};

struct Linear {
  Tensor weight;  // (d_out, d_in)
  Tensor bias;    // (d_out) or undefined

  // Glorot-uniform weights, zero bias.
  static Linear create(ParamStore& store, const std::string& name, std::size_t d_in,
                       std::size_t d_out, bool with_bias, Rng& rng);

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
};

// FC - ReLU - FC.
struct FeedForward {
  Linear fc1;
  Linear fc2;

  static FeedForward create(ParamStore& store, const std::string& name, std::size_t d_in,
                            std::size_t hidden, std::size_t d_out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
};

// Per-head Q/K/V projections, scaled dot-product attention, output
// projection W^O.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, std::size_t d_model,
                     std::size_t heads, Rng& rng);

  AttentionResult operator()(const Tensor& query, const Tensor& key, const Tensor& value,
                             const AttentionMask* mask = nullptr) const;

  std::size_t heads() const { return heads_; }
  const Linear& wq() const { return wq_; }
  const Linear& wk() const { return wk_; }
  const Linear& wv() const { return wv_; }
  const Linear& wo() const { return wo_; }

 private:
  Linear wq_, wk_, wv_, wo_;
  std::size_t heads_ = 1;
};

}  // namespace castformer
