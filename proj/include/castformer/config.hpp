#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "castformer/model.hpp"
#include "castformer/objective.hpp"

namespace castformer {

struct MetricsOptions {
  double fps = 30.0;
  double window_seconds = 5.0;
  std::vector<int> horizons = {0};
};

// Everything a run needs, addressable by dotted keys ("rsf.heads",
// "train.lr"). Every key has a default; unknown keys are ConfigError.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  MetricsOptions metrics;
  std::string data_path;
  std::string out_dir;
  std::size_t workers = 1;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  // All keys with their current values, in a stable order.
  std::vector<std::pair<std::string, std::string>> items() const;
  static const std::vector<std::string>& keys();

  // Reads "key=value" lines; '#' starts a comment, blank lines are skipped.
  void merge_file(const std::filesystem::path& path);
  void validate() const;
};

RunConfig load_run_config(const std::filesystem::path& path);
void write_run_config(const RunConfig& cfg, const std::filesystem::path& path);

std::string format_double(double v);
std::vector<int> parse_int_list(const std::string& s);

}  // namespace castformer
