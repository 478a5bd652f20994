#include "castformer/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "castformer/errors.hpp"

namespace castformer {

LossTerms parse_loss_terms(const std::string& s) {
  if (s == "branches+joint") return LossTerms::BranchesAndJoint;
  if (s == "branches") return LossTerms::Branches;
  throw ConfigError("unknown loss terms '" + s + "' (branches+joint, branches)");
}

const char* to_string(LossTerms t) {
  return t == LossTerms::BranchesAndJoint ? "branches+joint" : "branches";
}

LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::Constant;
  if (s == "cosine") return LrSchedule::Cosine;
  throw ConfigError("unknown lr schedule '" + s + "' (constant, cosine)");
}

const char* to_string(LrSchedule s) { return s == LrSchedule::Constant ? "constant" : "cosine"; }

void TrainConfig::validate() const {
  if (alpha < 0.0) throw ConfigError("train.alpha must be >= 0");
  if (chunk_len < 2) throw ConfigError("train.chunk_len must be >= 2 (CPE needs a prefix)");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (fold_count < 2) throw ConfigError("train.fold_count must be >= 2");
  if (fold >= fold_count) throw ConfigError("train.fold must be in [0, fold_count)");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(loss_denominator > 0.0)) throw ConfigError("train.loss_denominator must be > 0");
}

LossResult unified_loss(const LossInputs& in, std::span<const int> labels,
                        const LossOptions& opt) {
  if (opt.alpha < 0.0) throw ConfigError("alpha must be >= 0");
  const std::span<const double> w(opt.class_weights);
  LossResult r;
  Tensor main;
  if (in.branch_logits) {
    Tensor acc;
    for (std::size_t b = 0; b < 3; ++b) {
      Tensor ce = cross_entropy((*in.branch_logits)[b], labels, w);
      r.breakdown.per_branch[kBranchNames[b]] = ce.item();
      acc = acc.defined() ? add(acc, ce) : ce;
    }
    Tensor joint = cross_entropy(in.joint_logits, labels, w);
    r.breakdown.per_branch["joint"] = joint.item();
    if (opt.terms == LossTerms::BranchesAndJoint) acc = add(acc, joint);
    main = scale(acc, 1.0 / opt.denominator);
  } else {
    main = cross_entropy(in.joint_logits, labels, w);
    r.breakdown.per_branch["joint"] = main.item();
  }
  r.breakdown.main = main.item();
  r.total = main;
  if (in.intent_logits.defined()) {
    Tensor intent = cross_entropy(in.intent_logits, labels, w);
    r.breakdown.intention = intent.item();
    if (opt.alpha != 0.0) r.total = add(main, scale(intent, opt.alpha));
  }
  r.breakdown.total = r.total.item();
  return r;
}

LossResult unified_loss(const ForwardTrace& trace, std::span<const int> labels,
                        const LossOptions& opt) {
  LossInputs in;
  if (trace.fsn) in.branch_logits = trace.fsn->branch_logits;
  in.joint_logits = trace.joint_logits;
  if (trace.cpe) in.intent_logits = trace.cpe->intent_logits;
  return unified_loss(in, labels, opt);
}

std::vector<std::size_t> sample_chunk(std::size_t total_frames, std::size_t chunk_len, Mode mode,
                                      Rng* rng) {
  if (chunk_len > total_frames) {
    throw ConfigError("chunk length " + std::to_string(chunk_len) + " exceeds the " +
                      std::to_string(total_frames) + " available frames");
  }
  if (chunk_len == 0) throw ConfigError("chunk length must be >= 1");
  std::vector<std::size_t> idx;
  if (mode == Mode::Train) {
    if (!rng) throw ConfigError("train-mode chunk sampling needs an RNG");
    std::vector<std::size_t> all(total_frames);
    std::iota(all.begin(), all.end(), std::size_t{0});
    // Partial Fisher-Yates; draws are consumed in a fixed order.
    for (std::size_t k = 0; k < chunk_len; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, total_frames - 1);
      std::swap(all[k], all[pick(*rng)]);
    }
    idx.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(chunk_len));
    std::sort(idx.begin(), idx.end());
    return idx;
  }
  if (chunk_len == 1) return {total_frames - 1};
  for (std::size_t k = 0; k < chunk_len; ++k) {
    const double pos = static_cast<double>(k) * static_cast<double>(total_frames - 1) /
                       static_cast<double>(chunk_len - 1);
    idx.push_back(static_cast<std::size_t>(std::llround(pos)));
  }
  return idx;
}

}  // namespace castformer
