#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "castformer/tensor.hpp"

namespace castformer {

using NamedTensors = std::map<std::string, Tensor>;

// Every trainable tensor of a model, keyed by a dotted hierarchical name,
// together with the Adam moment state.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    std::vector<double> m;
    std::vector<double> v;
  };

  // Registers a leaf and marks it trainable. Names must be unique.
  Tensor add(const std::string& name, Tensor value);

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  void zero_grad();
  // Snapshot of the accumulated gradients; zero tensors where none flowed.
  NamedTensors grads() const;

 private:
  std::map<std::string, Entry> entries_;
  std::uint64_t step_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam, in place. grads must name exactly the registered
// parameters.
void adam_step(ParamStore& params, const NamedTensors& grads, const AdamConfig& cfg);

struct CheckpointHeader {
  std::uint32_t version = 1;
  std::uint64_t epochs_completed = 0;
};

// Little-endian flat file: magic, version, adam step, epochs, entry count,
// then per entry name/shape/values/first moment/second moment.
void save_checkpoint(const ParamStore& params, const CheckpointHeader& header,
                     const std::filesystem::path& path);
// Loads into an already-built store; names and shapes must match exactly.
CheckpointHeader load_checkpoint(ParamStore& params, const std::filesystem::path& path);

}  // namespace castformer
