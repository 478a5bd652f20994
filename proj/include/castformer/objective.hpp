#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "castformer/model.hpp"

namespace castformer {

enum class LossTerms {
  BranchesAndJoint,  // CE over in/out/ctx/joint
  Branches,          // CE over in/out/ctx only
};

enum class LrSchedule { Constant, Cosine };

LossTerms parse_loss_terms(const std::string& s);
const char* to_string(LossTerms t);
LrSchedule parse_lr_schedule(const std::string& s);
const char* to_string(LrSchedule s);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 160;
  std::size_t batch_size = 16;
  double alpha = 0.1;
  std::size_t chunk_len = 16;
  std::uint64_t seed = 1;
  std::size_t fold_count = 5;
  std::size_t fold = 0;
  double loss_denominator = 4.0;
  LossTerms loss_terms = LossTerms::BranchesAndJoint;
  bool class_weights = false;
  LrSchedule lr_schedule = LrSchedule::Constant;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct LossBreakdown {
  double main = 0.0;
  double intention = 0.0;
  double total = 0.0;
  std::map<std::string, double> per_branch;  // in/out/ctx/joint
};

struct LossResult {
  LossBreakdown breakdown;
  Tensor total;  // differentiable
};

struct LossInputs {
  std::optional<std::array<Tensor, 3>> branch_logits;  // in/out/ctx
  Tensor joint_logits;
  Tensor intent_logits;  // undefined when there is no intention head
};

struct LossOptions {
  double alpha = 0.1;
  double denominator = 4.0;
  LossTerms terms = LossTerms::BranchesAndJoint;
  std::vector<double> class_weights;  // empty = unweighted
};

// main = sum of branch (+ joint) CE / denominator when branch logits exist,
// otherwise CE(joint). total = main + alpha * CE(intent). With alpha == 0 the
// intention term is reported but kept out of the graph.
LossResult unified_loss(const LossInputs& in, std::span<const int> labels,
                        const LossOptions& opt);
LossResult unified_loss(const ForwardTrace& trace, std::span<const int> labels,
                        const LossOptions& opt);

// Train: chunk_len distinct frames drawn without replacement, ascending.
// Eval: round(k (T-1) / (chunk_len-1)) for k = 0..chunk_len-1.
std::vector<std::size_t> sample_chunk(std::size_t total_frames, std::size_t chunk_len, Mode mode,
                                      Rng* rng);

}  // namespace castformer
