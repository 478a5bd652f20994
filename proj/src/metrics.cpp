#include "castformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "castformer/errors.hpp"

namespace castformer {

using nlohmann::json;

ClassCounts& ClassCounts::operator+=(const ClassCounts& o) {
  if (o.num_classes() != num_classes() || o.background != background) {
    throw ConsistencyError("cannot add counts over different class sets");
  }
  for (std::size_t m = 0; m < tp.size(); ++m) {
    tp[m] += o.tp[m];
    fp[m] += o.fp[m];
    fpp[m] += o.fpp[m];
    mp[m] += o.mp[m];
  }
  return *this;
}

namespace {

ClassCounts empty_counts(std::size_t M, int background) {
  ClassCounts c;
  c.background = background;
  c.tp.assign(M, 0);
  c.fp.assign(M, 0);
  c.fpp.assign(M, 0);
  c.mp.assign(M, 0);
  return c;
}

void check_background(std::size_t M, int background) {
  if (background < 0 || static_cast<std::size_t>(background) >= M) {
    throw LabelError("background class " + std::to_string(background) + " outside [0," +
                     std::to_string(M) + ")");
  }
}

}  // namespace

Tally tally(std::span<const EventOutcome> outcomes, std::size_t M, int background, MissMode mode) {
  check_background(M, background);
  Tally r;
  r.counts = empty_counts(M, background);
  r.confusion.assign(M, std::vector<std::uint64_t>(M, 0));
  for (const auto& o : outcomes) {
    if (o.truth < 0 || static_cast<std::size_t>(o.truth) >= M || o.predicted < 0 ||
        static_cast<std::size_t>(o.predicted) >= M) {
      throw LabelError("outcome (" + std::to_string(o.truth) + "," + std::to_string(o.predicted) +
                       ") outside [0," + std::to_string(M) + ")");
    }
    const auto t = static_cast<std::size_t>(o.truth);
    const auto p = static_cast<std::size_t>(o.predicted);
    ++r.confusion[t][p];
    if (o.predicted != background) {
      if (t == p) ++r.counts.tp[p];
      else if (o.truth == background) ++r.counts.fpp[p];
      else ++r.counts.fp[p];
    }
    if (o.truth != background && t != p) {
      if (mode == MissMode::AnyMiss || o.predicted == background) ++r.counts.mp[t];
    }
  }
  return r;
}

ClassCounts counts_from_confusion(const ConfusionMatrix& cm, int background, MissMode mode) {
  const std::size_t M = cm.size();
  check_background(M, background);
  ClassCounts c = empty_counts(M, background);
  const auto bg = static_cast<std::size_t>(background);
  for (std::size_t t = 0; t < M; ++t) {
    if (cm[t].size() != M) throw ShapeError("confusion matrix must be square");
    for (std::size_t p = 0; p < M; ++p) {
      const auto n = cm[t][p];
      if (p != bg) {
        if (t == p) c.tp[p] += n;
        else if (t == bg) c.fpp[p] += n;
        else c.fp[p] += n;
      }
      if (t != bg && t != p && (mode == MissMode::AnyMiss || p == bg)) c.mp[t] += n;
    }
  }
  return c;
}

Scores pr_re_f1(const ClassCounts& c) {
  const std::size_t M = c.num_classes();
  Scores s;
  s.class_precision.assign(M, 0.0);
  s.class_recall.assign(M, 0.0);
  if (M < 2) return s;
  for (std::size_t m = 0; m < M; ++m) {
    if (static_cast<int>(m) == c.background) continue;
    const auto pd = c.tp[m] + c.fp[m] + c.fpp[m];
    const auto rd = c.tp[m] + c.mp[m];
    if (pd) s.class_precision[m] = static_cast<double>(c.tp[m]) / static_cast<double>(pd);
    if (rd) s.class_recall[m] = static_cast<double>(c.tp[m]) / static_cast<double>(rd);
    s.precision += s.class_precision[m];
    s.recall += s.class_recall[m];
  }
  const double n = static_cast<double>(M - 1);
  s.precision /= n;
  s.recall /= n;
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

MetricsBlock make_block(const std::string& name, const ConfusionMatrix& cm, int background) {
  MetricsBlock b;
  b.name = name;
  b.confusion = cm;
  b.counts = counts_from_confusion(cm, background, MissMode::AnyMiss);
  b.strict_counts = counts_from_confusion(cm, background, MissMode::BackgroundOnly);
  b.scores = pr_re_f1(b.counts);
  b.strict_scores = pr_re_f1(b.strict_counts);
  std::uint64_t total = 0, correct = 0;
  for (std::size_t t = 0; t < cm.size(); ++t) {
    for (std::size_t p = 0; p < cm.size(); ++p) total += cm[t][p];
    correct += cm[t][t];
  }
  b.events = total;
  b.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return b;
}

MetricsBlock make_block(const std::string& name, std::span<const EventOutcome> outcomes,
                        std::size_t num_classes, int background) {
  return make_block(name, tally(outcomes, num_classes, background).confusion, background);
}

FrameWindow truncation_window(std::size_t total_frames, double fps, int k, std::size_t chunk_len,
                              double window_s) {
  if (!(fps > 0.0)) throw ConfigError("fps must be > 0");
  if (k < 0 || k >= window_s) {
    throw ConfigError("truncation horizon " + std::to_string(k) + " s must lie in [0, " +
                      std::to_string(window_s) + ")");
  }
  const auto window = static_cast<std::size_t>(std::llround(fps * window_s));
  if (total_frames < window) {
    throw ConfigError("sequences have " + std::to_string(total_frames) + " frames but the " +
                      std::to_string(window_s) + " s window at " + std::to_string(fps) +
                      " fps needs " + std::to_string(window) + "; set metrics.fps to frames/" +
                      std::to_string(window_s));
  }
  FrameWindow w;
  w.first = total_frames - window;
  w.count = static_cast<std::size_t>(std::llround(fps * (window_s - k)));
  if (w.count < chunk_len) {
    throw ConfigError("horizon " + std::to_string(k) + " s leaves " + std::to_string(w.count) +
                      " frames, fewer than chunk_len " + std::to_string(chunk_len) +
                      "; lower train.chunk_len or drop the horizon");
  }
  return w;
}

MetricsReport truncated_eval(const WindowEvaluator& evaluate, const TruncationSpec& spec,
                             const std::vector<std::string>& class_names, int background) {
  if (spec.horizons.empty()) throw ConfigError("no truncation horizons requested");
  MetricsReport r;
  r.class_names = class_names;
  r.background = background;
  for (std::size_t i = 0; i < spec.horizons.size(); ++i) {
    const int k = spec.horizons[i];
    const FrameWindow w = truncation_window(spec.frames, spec.fps, k, spec.chunk_len, spec.window_s);
    const auto outcomes = evaluate(w);
    HorizonBlock h;
    h.seconds = k;
    h.first_frame = w.first;
    h.frames = w.count;
    h.metrics = make_block("k=" + std::to_string(k), outcomes, class_names.size(), background);
    r.horizons.push_back(std::move(h));
  }
  // Flags are relative to the next-shorter horizon actually evaluated.
  std::vector<std::size_t> order(r.horizons.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return r.horizons[a].seconds < r.horizons[b].seconds; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    auto& cur = r.horizons[order[i]];
    cur.f1_increased = cur.metrics.scores.f1 > r.horizons[order[i - 1]].metrics.scores.f1;
  }
  r.overall = r.horizons.front().metrics;
  return r;
}

namespace {

Dispersion dispersion(const std::vector<double>& xs) {
  Dispersion d;
  if (xs.empty()) return d;
  for (double x : xs) d.mean += x;
  d.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - d.mean) * (x - d.mean);
    d.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return d;
}

}  // namespace

MetricsReport kfold_aggregate(const std::vector<MetricsReport>& per_fold) {
  if (per_fold.empty()) throw ConfigError("kfold_aggregate needs at least one fold");
  MetricsReport r;
  r.class_names = per_fold.front().class_names;
  r.background = per_fold.front().background;
  const std::size_t M = per_fold.front().overall.confusion.size();
  ConfusionMatrix pooled(M, std::vector<std::uint64_t>(M, 0));
  std::vector<double> acc, pr, re, f1;
  for (std::size_t f = 0; f < per_fold.size(); ++f) {
    const auto& b = per_fold[f].overall;
    if (b.confusion.size() != M || per_fold[f].background != r.background) {
      throw ConsistencyError("folds disagree on the class set");
    }
    for (std::size_t t = 0; t < M; ++t) {
      for (std::size_t p = 0; p < M; ++p) pooled[t][p] += b.confusion[t][p];
    }
    MetricsBlock fb = b;
    fb.name = "fold " + std::to_string(f);
    r.folds.push_back(fb);
    acc.push_back(b.accuracy);
    pr.push_back(b.scores.precision);
    re.push_back(b.scores.recall);
    f1.push_back(b.scores.f1);
  }
  r.overall = make_block("pooled", pooled, r.background);
  r.fold_summary = FoldSummary{dispersion(acc), dispersion(pr), dispersion(re), dispersion(f1)};
  return r;
}

// ---------------------------------------------------------------- output

namespace {

json counts_json(const ClassCounts& c, const std::vector<std::string>& names) {
  json a = json::array();
  for (std::size_t m = 0; m < c.num_classes(); ++m) {
    if (static_cast<int>(m) == c.background) continue;
    a.push_back({{"class", m < names.size() ? names[m] : std::to_string(m)},
                 {"tp", c.tp[m]},
                 {"fp", c.fp[m]},
                 {"fpp", c.fpp[m]},
                 {"mp", c.mp[m]}});
  }
  return a;
}

json scores_json(const Scores& s) {
  return {{"precision", s.precision},
          {"recall", s.recall},
          {"f1", s.f1},
          {"class_precision", s.class_precision},
          {"class_recall", s.class_recall}};
}

json block_json(const MetricsBlock& b, const std::vector<std::string>& names) {
  return {{"name", b.name},
          {"events", b.events},
          {"accuracy", b.accuracy},
          {"counts", counts_json(b.counts, names)},
          {"scores", scores_json(b.scores)},
          {"strict_counts", counts_json(b.strict_counts, names)},
          {"strict_scores", scores_json(b.strict_scores)},
          {"confusion", b.confusion}};
}

json dispersion_json(const Dispersion& d) { return {{"mean", d.mean}, {"std", d.std}}; }

std::string pct(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * x;
  return os.str();
}

void block_table(std::ostringstream& os, const MetricsBlock& b, const std::vector<std::string>& names) {
  os << "[" << b.name << "] events=" << b.events << " acc=" << pct(b.accuracy)
     << " Pr=" << pct(b.scores.precision) << " Re=" << pct(b.scores.recall)
     << " F1=" << pct(b.scores.f1) << "  (strict MP: Re=" << pct(b.strict_scores.recall)
     << " F1=" << pct(b.strict_scores.f1) << ")\n";
  os << "  " << std::left << std::setw(20) << "class" << std::right << std::setw(6) << "TP"
     << std::setw(6) << "FP" << std::setw(6) << "FPP" << std::setw(6) << "MP" << std::setw(8)
     << "Pr" << std::setw(8) << "Re" << '\n';
  for (std::size_t m = 0; m < b.counts.num_classes(); ++m) {
    if (static_cast<int>(m) == b.counts.background) continue;
    os << "  " << std::left << std::setw(20) << (m < names.size() ? names[m] : std::to_string(m))
       << std::right << std::setw(6) << b.counts.tp[m] << std::setw(6) << b.counts.fp[m]
       << std::setw(6) << b.counts.fpp[m] << std::setw(6) << b.counts.mp[m] << std::setw(8)
       << pct(b.scores.class_precision[m]) << std::setw(8) << pct(b.scores.class_recall[m]) << '\n';
  }
  os << "  confusion (rows truth, cols predicted):\n";
  for (const auto& row : b.confusion) {
    os << "   ";
    for (auto n : row) os << std::setw(6) << n;
    os << '\n';
  }
}

}  // namespace

std::string MetricsReport::to_json() const {
  json j;
  j["class_names"] = class_names;
  j["background"] = background;
  j["overall"] = block_json(overall, class_names);
  json hs = json::array();
  for (const auto& h : horizons) {
    hs.push_back({{"seconds", h.seconds},
                  {"first_frame", h.first_frame},
                  {"frames", h.frames},
                  {"f1_increased", h.f1_increased},
                  {"metrics", block_json(h.metrics, class_names)}});
  }
  j["horizons"] = hs;
  json fs = json::array();
  for (const auto& f : folds) fs.push_back(block_json(f, class_names));
  j["folds"] = fs;
  if (fold_summary) {
    j["fold_summary"] = {{"accuracy", dispersion_json(fold_summary->accuracy)},
                         {"precision", dispersion_json(fold_summary->precision)},
                         {"recall", dispersion_json(fold_summary->recall)},
                         {"f1", dispersion_json(fold_summary->f1)}};
  }
  return j.dump(2);
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  if (horizons.empty()) {
    block_table(os, overall, class_names);
  } else {
    os << "horizon  window        acc     Pr     Re     F1\n";
    for (const auto& h : horizons) {
      os << "k=" << std::left << std::setw(6) << h.seconds << std::setw(14)
         << ("[" + std::to_string(h.first_frame) + "," + std::to_string(h.first_frame + h.frames) + ")")
         << std::right << std::setw(5) << pct(h.metrics.accuracy) << std::setw(7)
         << pct(h.metrics.scores.precision) << std::setw(7) << pct(h.metrics.scores.recall)
         << std::setw(7) << pct(h.metrics.scores.f1) << (h.f1_increased ? "  (F1 up)" : "") << '\n';
    }
    for (const auto& h : horizons) block_table(os, h.metrics, class_names);
  }
  for (const auto& f : folds) block_table(os, f, class_names);
  if (fold_summary) {
    auto md = [](const Dispersion& d) { return pct(d.mean) + " +- " + pct(d.std); };
    os << "per-fold: acc " << md(fold_summary->accuracy) << "  Pr " << md(fold_summary->precision)
       << "  Re " << md(fold_summary->recall) << "  F1 " << md(fold_summary->f1) << '\n';
  }
  return os.str();
}

}  // namespace castformer
