#include "castformer/fsn.hpp"

#include <string>

#include "castformer/errors.hpp"

namespace castformer {

FeatureSynthesis::FeatureSynthesis(ParamStore& store, std::size_t d_model, const FsnConfig& cfg,
                                   Rng& rng)
    : cfg_(cfg) {
  if (cfg.num_classes < 2) throw ConfigError("fsn: num_classes must be >= 2");
  const std::size_t hidden = cfg.resolved_hidden(d_model);
  const std::size_t s = cfg.use_speed ? 1 : 0;
  f_in_ = FeedForward::create(store, "fsn.f_in", 2 * d_model, hidden, d_model, rng);
  f_out_ = FeedForward::create(store, "fsn.f_out", 2 * d_model + s, hidden, d_model, rng);
  f_ctx_ = FeedForward::create(store, "fsn.f_ctx", 3 * d_model + s, hidden, d_model, rng);
  for (std::size_t b = 0; b < 3; ++b) {
    const std::string n = kBranchNames[b];
    score_[b] = Linear::create(store, "fsn.score_" + n, d_model, 1, false, rng);
    cls_[b] = Linear::create(store, "fsn.cls_" + n, d_model, cfg.num_classes, cfg.branch_bias, rng);
  }
}

FeatureSynthesis::Refined FeatureSynthesis::refine_branches(const Tensor& h_in,
                                                            const Tensor& h_out,
                                                            const Tensor& z_intent,
                                                            const Tensor& speed) const {
  if (cfg_.use_speed && !speed.defined()) {
    throw ConfigError("fsn: speed input required when fsn.use_speed is set");
  }
  if (!cfg_.use_speed && speed.defined()) {
    throw ConfigError("fsn: speed supplied but fsn.use_speed is off");
  }
  std::vector<Tensor> out_parts{h_out, z_intent};
  std::vector<Tensor> ctx_parts{h_in, h_out, z_intent};
  if (cfg_.use_speed) {
    out_parts.push_back(speed);
    ctx_parts.push_back(speed);
  }
  Refined r;
  r.r_in = add(f_in_(concat({h_in, z_intent}, 1)), h_in);
  r.r_out = add(f_out_(concat(out_parts, 1)), h_out);
  r.r_ctx = add(add(f_ctx_(concat(ctx_parts, 1)), h_in), h_out);
  return r;
}

FsnOutput FeatureSynthesis::fuse(const Tensor& r_in, const Tensor& r_out,
                                 const Tensor& r_ctx) const {
  FsnOutput out;
  out.r_in = r_in;
  out.r_out = r_out;
  out.r_ctx = r_ctx;
  const std::array<Tensor, 3> r = {r_in, r_out, r_ctx};
  std::vector<Tensor> scores;
  for (std::size_t b = 0; b < 3; ++b) {
    scores.push_back(score_[b](r[b]));
    out.branch_logits[b] = cls_[b](r[b]);
  }
  out.weights = softmax(concat(scores, 1));
  Tensor joint;
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor term = mul(narrow(out.weights, 1, b, 1), out.branch_logits[b]);
    joint = joint.defined() ? add(joint, term) : term;
  }
  out.joint_logits = joint;
  return out;
}

FsnOutput FeatureSynthesis::forward(const Tensor& h_in, const Tensor& h_out,
                                    const Tensor& z_intent, const Tensor& speed) const {
  auto r = refine_branches(h_in, h_out, z_intent, speed);
  return fuse(r.r_in, r.r_out, r.r_ctx);
}

}  // namespace castformer
