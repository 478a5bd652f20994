#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "castformer/grad_check.hpp"
#include "castformer/model.hpp"

namespace castformer {

// Tiny random instances for finite-difference verification of each module
// and of the whole model. Module inputs are registered as "input.*"
// parameters so their gradients are checked too.
struct GradSuiteOptions {
  std::uint64_t seed = 1;
  std::size_t batch = 2;
  std::size_t frames = 4;
  std::size_t d_model = 8;
  std::size_t num_classes = 5;
  std::size_t heads = 2;
  std::size_t d_in_interior = 6;
  std::size_t d_in_exterior = 5;
  double h = 1e-5;
  // Gaussian noise added to every parameter after construction. Fresh init
  // has zero biases, which makes the first delayed-attention frame exactly
  // zero and puts the following RMS norm at its 1/sqrt(eps) slope, a point
  // central differences cannot resolve. 0 checks the fresh init as is.
  double jitter = 0.1;
  // Runs with dropout active and a shared RNG; the checker must refuse.
  bool dropout_train = false;
  // Template for the end-to-end model; widths and class count are overridden.
  ModelConfig model;
};

struct ModuleCheck {
  std::string module;  // encoder, rsf, cpe, fsn, loss, end-to-end
  GradCheckReport report;
  double seconds = 0.0;
};

std::vector<ModuleCheck> gradient_suite(const GradSuiteOptions& opt);

}  // namespace castformer
