#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace castformer {

struct EventOutcome {
  int truth = 0;
  int predicted = 0;
  bool operator==(const EventOutcome&) const = default;
};

// How a missed maneuver is counted. AnyMiss: every truth=m event predicted
// as anything but m. BackgroundOnly: only those predicted as background.
enum class MissMode { AnyMiss, BackgroundOnly };

// Per-class counts, indexed by class id. The background entries stay zero.
struct ClassCounts {
  int background = 0;
  std::vector<std::uint64_t> tp, fp, fpp, mp;

  std::size_t num_classes() const { return tp.size(); }
  ClassCounts& operator+=(const ClassCounts& o);
  bool operator==(const ClassCounts&) const = default;
};

using ConfusionMatrix = std::vector<std::vector<std::uint64_t>>;  // [truth][predicted]

struct Tally {
  ClassCounts counts;
  ConfusionMatrix confusion;
};

// Raises LabelError on a class id outside [0, num_classes).
Tally tally(std::span<const EventOutcome> outcomes, std::size_t num_classes, int background = 0,
            MissMode mode = MissMode::AnyMiss);

ClassCounts counts_from_confusion(const ConfusionMatrix& cm, int background, MissMode mode);

struct Scores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<double> class_precision;  // background entry 0, excluded from the mean
  std::vector<double> class_recall;
};

// Macro mean over the non-background classes; a zero denominator gives 0.
Scores pr_re_f1(const ClassCounts& counts);

struct MetricsBlock {
  std::string name;
  std::size_t events = 0;
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  ClassCounts counts;         // any-miss
  ClassCounts strict_counts;  // background-only misses
  Scores scores;
  Scores strict_scores;
};

MetricsBlock make_block(const std::string& name, const ConfusionMatrix& cm, int background);
MetricsBlock make_block(const std::string& name, std::span<const EventOutcome> outcomes,
                        std::size_t num_classes, int background);

struct HorizonBlock {
  int seconds = 0;
  std::size_t first_frame = 0;
  std::size_t frames = 0;
  // F1 went up relative to the previous (shorter) horizon.
  bool f1_increased = false;
  MetricsBlock metrics;
};

struct Dispersion {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single fold
};

struct FoldSummary {
  Dispersion accuracy, precision, recall, f1;
};

struct MetricsReport {
  std::vector<std::string> class_names;
  int background = 0;
  MetricsBlock overall;
  std::vector<HorizonBlock> horizons;
  std::vector<MetricsBlock> folds;
  std::optional<FoldSummary> fold_summary;

  std::string to_json() const;
  std::string to_table() const;
};

// Frames kept when the observation window [-window_s, 0] is cut off k seconds
// before onset: the last window_s*fps frames form the window, of which the
// first fps*(window_s-k) survive.
struct FrameWindow {
  std::size_t first = 0;
  std::size_t count = 0;
};
FrameWindow truncation_window(std::size_t total_frames, double fps, int k, std::size_t chunk_len,
                              double window_s = 5.0);

// Returns the outcomes of evaluating every sample on the given window.
using WindowEvaluator = std::function<std::vector<EventOutcome>(const FrameWindow&)>;

struct TruncationSpec {
  std::vector<int> horizons = {0, 1, 2, 3, 4};
  double fps = 30.0;
  double window_s = 5.0;
  std::size_t chunk_len = 16;
  std::size_t frames = 150;  // sequence length shared by the evaluated set
};

// overall holds the first requested horizon.
MetricsReport truncated_eval(const WindowEvaluator& evaluate, const TruncationSpec& spec,
                             const std::vector<std::string>& class_names, int background = 0);

// Pools the confusion matrices of each fold's overall block and keeps the
// per-fold blocks plus mean/std for dispersion reporting.
MetricsReport kfold_aggregate(const std::vector<MetricsReport>& per_fold);

}  // namespace castformer
