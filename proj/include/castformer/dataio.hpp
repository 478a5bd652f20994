#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "castformer/tensor.hpp"

namespace castformer {

inline constexpr std::size_t kInteriorDim = 64;
inline constexpr std::size_t kExteriorDim = 32;
inline constexpr std::size_t kNumManeuvers = 5;
inline constexpr const char* kSchemaVersion = "v1";

// 0 is the background class.
enum Maneuver : int {
  kStraight = 0,
  kLeftTurn = 1,
  kRightTurn = 2,
  kLeftLaneChange = 3,
  kRightLaneChange = 4,
};

const char* maneuver_name(int label);

// One event: per-frame interior and exterior features plus a speed trace.
struct FeatureSequence {
  std::string id;
  int label = 0;
  int fold = 0;
  std::size_t frames = 0;
  std::vector<double> interior;  // frames x interior_dim, row-major
  std::vector<double> exterior;  // frames x exterior_dim
  std::vector<double> speed;     // frames

  std::span<const double> interior_frame(std::size_t t, std::size_t dim = kInteriorDim) const {
    return std::span<const double>(interior).subspan(t * dim, dim);
  }
  std::span<const double> exterior_frame(std::size_t t, std::size_t dim = kExteriorDim) const {
    return std::span<const double>(exterior).subspan(t * dim, dim);
  }
  bool operator==(const FeatureSequence&) const = default;
};

struct DatasetManifest {
  std::size_t samples = 0;
  std::vector<std::size_t> class_histogram;
  double fps = 30.0;
  std::string speed_unit = "km/h";
  std::string content_hash;
};

struct Dataset {
  std::vector<FeatureSequence> samples;
  DatasetManifest manifest;

  std::size_t size() const { return samples.size(); }
  std::vector<int> labels() const;
};

struct DatasetLimits {
  std::size_t interior_dim = kInteriorDim;
  std::size_t exterior_dim = kExteriorDim;
  std::size_t num_classes = kNumManeuvers;
  std::size_t fold_count = 5;
};

// Throws ValidationError naming the sample on any invariant violation.
void validate_sequence(const FeatureSequence& s, const DatasetLimits& limits);

// 64-bit FNV-1a over the bytes, as 16 lowercase hex digits.
std::string content_hash(std::span<const char> bytes);

// ".fsb" selects the packed binary variant, anything else JSON lines.
Dataset load_dataset(const std::filesystem::path& path, const DatasetLimits& limits = {});
void write_dataset(const Dataset& data, const std::filesystem::path& path);

std::filesystem::path manifest_path(const std::filesystem::path& data_path);
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
// Recomputes histogram and sample count from the samples.
DatasetManifest summarize(const Dataset& data, double fps, const std::string& speed_unit);

// Stratified by label; per-class fold sizes differ by at most one and the
// round-robin continues across classes so overall fold sizes do too. Returns
// warnings for classes with fewer than k samples.
std::vector<std::string> assign_folds(Dataset& data, std::size_t k, std::uint64_t seed);

struct SynthSpec {
  std::size_t samples = 100;
  std::size_t frames = 150;
  std::size_t onset_min = 0;  // 0 selects frames / 4
  std::size_t onset_max = 0;  // 0 selects frames / 2
  std::vector<std::size_t> signal_channels = {0, 1, 2};
  std::size_t lag = 1;
  double noise_std = 0.5;
  double signal_amplitude = 0.5;
  double spurious_strength = 0.0;
  std::size_t spurious_channel = kExteriorDim - 1;
  std::size_t response_channel = 0;  // interior channel driven by the cue channel
  std::size_t fold_count = 5;
  double fps = 30.0;
  std::uint64_t seed = 1;

  std::size_t resolved_onset_min() const { return onset_min ? onset_min : std::max<std::size_t>(1, frames / 4); }
  std::size_t resolved_onset_max() const { return onset_max ? onset_max : std::max<std::size_t>(1, frames / 2); }
  void validate() const;
};

// Class cue on the exterior signal channels from a random onset onwards;
// interior frame t is a fixed linear response to exterior frame t - lag
// (spurious channel excluded) plus noise; optional label-aligned spurious
// exterior channel; speed random walk that slows down for turns.
Dataset generate_synthetic(const SynthSpec& spec);

// Same samples with the spurious channel permuted across samples, breaking
// its alignment with the label while keeping its marginal distribution.
Dataset make_shifted(const Dataset& data, const SynthSpec& spec);

}  // namespace castformer
