#pragma once

#include <exception>
#include <filesystem>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "castformer/config.hpp"
#include "castformer/trainer.hpp"

namespace castformer {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitDivergence = 3,
  kExitVerification = 4,
};

// Maps a library exception onto the process exit code contract.
int exit_code_for(const std::exception& e);

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// A trained run directory: config.txt, checkpoint.bin, run.manifest.
struct LoadedRun {
  RunConfig config;
  SpeedNorm speed;
  std::unique_ptr<CaSTFormer> model;
};
LoadedRun load_run(const std::filesystem::path& model_path);

struct AblationVariant {
  std::string name;
  std::function<void(RunConfig&)> apply;
};
// Expands a comma-separated list of variant names and groups ("modules",
// "orders", "attention", "alpha-sweep"). ConfigError lists valid names.
std::vector<AblationVariant> expand_variants(const std::string& spec);
std::string valid_variant_names();

}  // namespace castformer
