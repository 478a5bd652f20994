#pragma once

#include <array>

#include "castformer/layers.hpp"

namespace castformer {

struct FsnConfig {
  bool use_speed = true;
  std::size_t hidden_dim = 0;  // 0 selects 2 * d_model
  std::size_t num_classes = 5;
  bool branch_bias = true;

  std::size_t resolved_hidden(std::size_t d_model) const {
    return hidden_dim == 0 ? 2 * d_model : hidden_dim;
  }
};

enum Branch : std::size_t { kBranchIn = 0, kBranchOut = 1, kBranchCtx = 2 };
inline constexpr std::array<const char*, 3> kBranchNames = {"in", "out", "ctx"};

struct FsnOutput {
  Tensor r_in, r_out, r_ctx;                 // (B,D)
  std::array<Tensor, 3> branch_logits;       // (B,M) each, in/out/ctx order
  Tensor weights;                            // (B,3)
  Tensor joint_logits;                       // (B,M)
};

// Feature Synthesis Network. Parameters under "fsn.*".
class FeatureSynthesis {
 public:
  FeatureSynthesis() = default;
  FeatureSynthesis(ParamStore& store, std::size_t d_model, const FsnConfig& cfg, Rng& rng);

  struct Refined {
    Tensor r_in, r_out, r_ctx;
  };
  // speed: (B,1), required iff use_speed.
  Refined refine_branches(const Tensor& h_in, const Tensor& h_out, const Tensor& z_intent,
                          const Tensor& speed) const;

  FsnOutput fuse(const Tensor& r_in, const Tensor& r_out, const Tensor& r_ctx) const;

  FsnOutput forward(const Tensor& h_in, const Tensor& h_out, const Tensor& z_intent,
                    const Tensor& speed) const;

  const FsnConfig& config() const { return cfg_; }
  const FeedForward& f_in() const { return f_in_; }
  const FeedForward& f_out() const { return f_out_; }
  const FeedForward& f_ctx() const { return f_ctx_; }
  const Linear& score(Branch b) const { return score_[b]; }
  const Linear& classifier(Branch b) const { return cls_[b]; }

 private:
  FsnConfig cfg_;
  FeedForward f_in_, f_out_, f_ctx_;
  std::array<Linear, 3> score_;
  std::array<Linear, 3> cls_;
};

}  // namespace castformer
