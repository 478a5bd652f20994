#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "castformer/dataio.hpp"
#include "castformer/metrics.hpp"
#include "castformer/model.hpp"
#include "castformer/objective.hpp"

namespace castformer {

// z-score constants fitted on the training fold, applied to every speed value
// the model sees.
struct SpeedNorm {
  double mean = 0.0;
  double std = 1.0;

  double operator()(double v) const { return (v - mean) / std; }
};

SpeedNorm fit_speed_norm(const Dataset& data, std::span<const std::size_t> samples);

// frames[i] lists the frame indices taken from samples[i]; all lists share
// one length. The FSN speed input is the normalized speed at the last listed
// frame.
DualStreamBatch build_batch(const Dataset& data, std::span<const std::size_t> samples,
                            std::span<const std::vector<std::size_t>> frames,
                            const ModelConfig& cfg, const SpeedNorm& norm);

struct PredictOptions {
  std::size_t chunk_len = 16;
  std::size_t batch_size = 16;
  std::size_t workers = 1;
  // Frames [first, first+count) of every sample; count 0 means all frames.
  FrameWindow window;
};

// Eval-mode argmax of the joint logits. Workers split the batch list; each
// batch is evaluated independently so the result does not depend on workers.
std::vector<int> predict(const CaSTFormer& model, const Dataset& data,
                         std::span<const std::size_t> samples, const SpeedNorm& norm,
                         const PredictOptions& opt);

std::vector<EventOutcome> evaluate_outcomes(const CaSTFormer& model, const Dataset& data,
                                            std::span<const std::size_t> samples,
                                            const SpeedNorm& norm, const PredictOptions& opt);

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double main = 0.0;
  double intention = 0.0;
  double total = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;  // NaN without a validation set
  long long wall_ms = 0;
};

// Tab-separated: epoch, main, intent, total, train_acc, val_acc, wall_ms.
std::string format_log_line(const EpochStats& s);
inline constexpr const char* kLogHeader = "epoch\tmain\tintent\ttotal\ttrain_acc\tval_acc\twall_ms";

struct TrainOptions {
  // When set: <out>/train.log, <out>/checkpoint.bin (rewritten every epoch)
  // and <out>/run.manifest.
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::filesystem::path> resume_from;
  std::size_t stop_after_epoch = 0;  // 0 runs to cfg.epochs
  std::size_t eval_workers = 1;
  std::ostream* echo = nullptr;
  // Extra key=value lines for the run manifest (typically the full config).
  std::vector<std::pair<std::string, std::string>> manifest;
  std::string dataset_hash;
};

struct TrainResult {
  std::vector<EpochStats> log;
  SpeedNorm speed;
  std::size_t epochs_completed = 0;
};

// Trains on train_idx, reports accuracy on val_idx each epoch.
TrainResult fit(CaSTFormer& model, const Dataset& data, std::span<const std::size_t> train_idx,
                std::span<const std::size_t> val_idx, const TrainConfig& cfg,
                const TrainOptions& opt = {});

// Samples with fold == cfg.fold are held out for validation.
TrainResult train(CaSTFormer& model, const Dataset& data, const TrainConfig& cfg,
                  const TrainOptions& opt = {});

struct FoldSplit {
  std::vector<std::size_t> train, held_out;
};
FoldSplit split_by_fold(const Dataset& data, std::size_t fold);

std::vector<double> inverse_frequency_weights(const Dataset& data, std::span<const std::size_t> idx,
                                              std::size_t num_classes);

double learning_rate(const TrainConfig& cfg, std::size_t epoch_index);

}  // namespace castformer
