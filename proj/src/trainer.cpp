#include "castformer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <thread>

#include "castformer/errors.hpp"

namespace castformer {

SpeedNorm fit_speed_norm(const Dataset& data, std::span<const std::size_t> samples) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i : samples) {
    for (double v : data.samples[i].speed) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  SpeedNorm s;
  if (n == 0) return s;
  s.mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sq / static_cast<double>(n) - s.mean * s.mean);
  s.std = var > 1e-12 ? std::sqrt(var) : 1.0;
  return s;
}

DualStreamBatch build_batch(const Dataset& data, std::span<const std::size_t> samples,
                            std::span<const std::vector<std::size_t>> frames,
                            const ModelConfig& cfg, const SpeedNorm& norm) {
  if (samples.empty() || samples.size() != frames.size()) {
    throw ShapeError("build_batch: need one frame list per sample");
  }
  const std::size_t B = samples.size();
  const std::size_t L = frames.front().size();
  const std::size_t di = cfg.encoder.d_in_interior, de = cfg.encoder.d_in_exterior;
  const std::size_t extra = cfg.encoder.use_speed ? 1 : 0;
  const std::size_t wi = di + extra, we = de + extra;
  std::vector<double> in(B * L * wi), out(B * L * we), speed(B);
  DualStreamBatch batch;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = data.samples[samples[b]];
    if (frames[b].size() != L) throw ShapeError("build_batch: ragged frame lists");
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t t = frames[b][l];
      if (t >= s.frames) throw ShapeError("build_batch: frame index past sequence end");
      const auto fi = s.interior_frame(t, di);
      const auto fe = s.exterior_frame(t, de);
      std::copy(fi.begin(), fi.end(), in.begin() + static_cast<std::ptrdiff_t>((b * L + l) * wi));
      std::copy(fe.begin(), fe.end(), out.begin() + static_cast<std::ptrdiff_t>((b * L + l) * we));
      if (extra) {
        const double v = norm(s.speed[t]);
        in[(b * L + l) * wi + di] = v;
        out[(b * L + l) * we + de] = v;
      }
    }
    speed[b] = norm(s.speed[frames[b].back()]);
    batch.labels.push_back(s.label);
  }
  batch.interior = Tensor::from({B, L, wi}, std::move(in));
  batch.exterior = Tensor::from({B, L, we}, std::move(out));
  if (cfg.fsn.use_speed) batch.speed = Tensor::from({B, 1}, std::move(speed));
  return batch;
}

namespace {

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t B = logits.dim(0), M = logits.dim(1);
  const auto d = logits.data();
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto row = d.subspan(b * M, M);
    out[b] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace

std::vector<int> predict(const CaSTFormer& model, const Dataset& data,
                         std::span<const std::size_t> samples, const SpeedNorm& norm,
                         const PredictOptions& opt) {
  std::vector<int> preds(samples.size(), -1);
  if (samples.empty()) return preds;
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  const std::size_t nb = (samples.size() + bs - 1) / bs;

  auto run_batch = [&](std::size_t k) {
    NoGradGuard no_grad;
    const std::size_t lo = k * bs, hi = std::min(samples.size(), lo + bs);
    std::vector<std::vector<std::size_t>> frames;
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& s = data.samples[samples[i]];
      const std::size_t first = opt.window.count ? opt.window.first : 0;
      const std::size_t count = opt.window.count ? opt.window.count : s.frames;
      if (first + count > s.frames) {
        throw ConfigError("sample '" + s.id + "' is shorter than the evaluation window");
      }
      auto idx = sample_chunk(count, opt.chunk_len, Mode::Eval, nullptr);
      for (auto& t : idx) t += first;
      frames.push_back(std::move(idx));
    }
    const auto batch = build_batch(data, samples.subspan(lo, hi - lo), frames, model.config(), norm);
    const auto trace = model.forward(batch, ForwardContext{Mode::Eval, nullptr});
    const auto p = argmax_rows(trace.joint_logits);
    std::copy(p.begin(), p.end(), preds.begin() + static_cast<std::ptrdiff_t>(lo));
  };

  const std::size_t workers = std::min(std::max<std::size_t>(1, opt.workers), nb);
  if (workers == 1) {
    for (std::size_t k = 0; k < nb; ++k) run_batch(k);
    return preds;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < nb; k += workers) run_batch(k);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return preds;
}

std::vector<EventOutcome> evaluate_outcomes(const CaSTFormer& model, const Dataset& data,
                                            std::span<const std::size_t> samples,
                                            const SpeedNorm& norm, const PredictOptions& opt) {
  const auto preds = predict(model, data, samples, norm, opt);
  std::vector<EventOutcome> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.push_back({data.samples[samples[i]].label, preds[i]});
  }
  return out;
}

std::string format_log_line(const EpochStats& s) {
  std::ostringstream os;
  os << std::setprecision(10) << s.epoch << '\t' << s.main << '\t' << s.intention << '\t'
     << s.total << '\t' << s.train_acc << '\t';
  if (std::isnan(s.val_acc)) os << "nan";
  else os << s.val_acc;
  os << '\t' << s.wall_ms;
  return os.str();
}

FoldSplit split_by_fold(const Dataset& data, std::size_t fold) {
  FoldSplit s;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    (static_cast<std::size_t>(data.samples[i].fold) == fold ? s.held_out : s.train).push_back(i);
  }
  return s;
}

std::vector<double> inverse_frequency_weights(const Dataset& data, std::span<const std::size_t> idx,
                                              std::size_t M) {
  std::vector<double> count(M, 0.0);
  for (std::size_t i : idx) count[static_cast<std::size_t>(data.samples[i].label)] += 1.0;
  std::vector<double> w(M, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    if (count[m] > 0.0) w[m] = static_cast<double>(idx.size()) / (static_cast<double>(M) * count[m]);
  }
  return w;
}

double learning_rate(const TrainConfig& cfg, std::size_t epoch_index) {
  if (cfg.lr_schedule == LrSchedule::Constant || cfg.epochs == 0) return cfg.lr;
  const double frac = static_cast<double>(epoch_index) / static_cast<double>(cfg.epochs);
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace {

Rng epoch_rng(std::uint64_t seed, std::size_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  return Rng(seq);
}

void write_run_manifest(const std::filesystem::path& path, const TrainConfig& cfg,
                        const TrainOptions& opt, const SpeedNorm& norm, std::size_t epochs) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write run manifest " + path.string());
  os << std::setprecision(17);
  for (const auto& [k, v] : opt.manifest) os << k << '=' << v << '\n';
  os << "run.seed=" << cfg.seed << '\n';
  os << "run.fold=" << cfg.fold << '\n';
  os << "run.dataset_hash=" << opt.dataset_hash << '\n';
  os << "run.speed_mean=" << norm.mean << '\n';
  os << "run.speed_std=" << norm.std << '\n';
  os << "run.epochs_completed=" << epochs << '\n';
}

}  // namespace

TrainResult fit(CaSTFormer& model, const Dataset& data, std::span<const std::size_t> train_idx,
                std::span<const std::size_t> val_idx, const TrainConfig& cfg,
                const TrainOptions& opt) {
  cfg.validate();
  if (train_idx.empty()) throw DataError("training fold is empty");
  const ModelConfig& mcfg = model.config();
  for (std::size_t i : train_idx) {
    if (data.samples[i].frames < cfg.chunk_len) {
      throw ConfigError("sample '" + data.samples[i].id + "' has fewer frames than train.chunk_len");
    }
  }

  TrainResult result;
  result.speed = fit_speed_norm(data, train_idx);
  LossOptions lopt;
  lopt.alpha = cfg.alpha;
  lopt.denominator = cfg.loss_denominator;
  lopt.terms = cfg.loss_terms;
  if (cfg.class_weights) lopt.class_weights = inverse_frequency_weights(data, train_idx, mcfg.num_classes);

  std::size_t start = 0;
  if (opt.resume_from) start = load_checkpoint(model.params(), *opt.resume_from).epochs_completed;
  const std::size_t stop = opt.stop_after_epoch ? std::min(opt.stop_after_epoch, cfg.epochs) : cfg.epochs;

  std::ofstream log;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    const auto log_path = *opt.out_dir / "train.log";
    if (start > 0 && std::filesystem::exists(log_path)) {
      log.open(log_path, std::ios::app);
    } else {
      log.open(log_path, std::ios::trunc);
      log << kLogHeader << '\n';
    }
    if (!log) throw DataError("cannot write training log in " + opt.out_dir->string());
  }
  if (opt.echo && start == 0) *opt.echo << kLogHeader << '\n';

  PredictOptions popt;
  popt.chunk_len = cfg.chunk_len;
  popt.batch_size = cfg.batch_size;
  popt.workers = opt.eval_workers;

  const std::size_t nb = (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
  for (std::size_t epoch = start; epoch < stop; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng = epoch_rng(cfg.seed, epoch);
    std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
    std::shuffle(order.begin(), order.end(), rng);

    AdamConfig adam{learning_rate(cfg, epoch), cfg.beta1, cfg.beta2, cfg.adam_eps};
    double sum_main = 0.0, sum_intent = 0.0, sum_total = 0.0;
    std::size_t correct = 0;
    for (std::size_t k = 0; k < nb; ++k) {
      const std::size_t batch_id = epoch * nb + k;
      const std::size_t lo = k * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      const std::span<const std::size_t> members(order.data() + lo, hi - lo);
      std::vector<std::vector<std::size_t>> frames;
      for (std::size_t i : members) {
        frames.push_back(sample_chunk(data.samples[i].frames, cfg.chunk_len, Mode::Train, &rng));
      }
      try {
        const auto batch = build_batch(data, members, frames, mcfg, result.speed);
        const auto trace = model.forward(batch, ForwardContext{Mode::Train, &rng});
        const auto loss = unified_loss(trace, batch.labels, lopt);
        if (!std::isfinite(loss.breakdown.total)) {
          throw NumericError("non-finite loss");
        }
        model.params().zero_grad();
        loss.total.backward();
        adam_step(model.params(), model.params().grads(), adam);
        const double w = static_cast<double>(members.size());
        sum_main += w * loss.breakdown.main;
        sum_intent += w * loss.breakdown.intention;
        sum_total += w * loss.breakdown.total;
        const auto p = argmax_rows(trace.joint_logits);
        for (std::size_t b = 0; b < p.size(); ++b) correct += p[b] == batch.labels[b];
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                                  std::to_string(batch_id) + ": " + e.what(),
                              batch_id);
      }
    }
    model.params().zero_grad();

    EpochStats st;
    st.epoch = epoch + 1;
    const double n = static_cast<double>(train_idx.size());
    st.main = sum_main / n;
    st.intention = sum_intent / n;
    st.total = sum_total / n;
    st.train_acc = static_cast<double>(correct) / n;
    if (val_idx.empty()) {
      st.val_acc = std::numeric_limits<double>::quiet_NaN();
    } else {
      const auto out = evaluate_outcomes(model, data, val_idx, result.speed, popt);
      std::size_t ok = 0;
      for (const auto& o : out) ok += o.truth == o.predicted;
      st.val_acc = static_cast<double>(ok) / static_cast<double>(out.size());
    }
    st.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
    result.log.push_back(st);
    const std::string line = format_log_line(st);
    if (log.is_open()) log << line << '\n' << std::flush;
    if (opt.echo) *opt.echo << line << '\n';
    result.epochs_completed = epoch + 1;
    if (opt.out_dir) {
      save_checkpoint(model.params(), CheckpointHeader{1, epoch + 1}, *opt.out_dir / "checkpoint.bin");
    }
  }
  if (result.epochs_completed == 0) result.epochs_completed = start;
  if (opt.out_dir) {
    write_run_manifest(*opt.out_dir / "run.manifest", cfg, opt, result.speed, result.epochs_completed);
  }
  return result;
}

TrainResult train(CaSTFormer& model, const Dataset& data, const TrainConfig& cfg,
                  const TrainOptions& opt) {
  if (cfg.fold >= cfg.fold_count) throw ConfigError("train.fold must be in [0, fold_count)");
  const auto split = split_by_fold(data, cfg.fold);
  return fit(model, data, split.train, split.held_out, cfg, opt);
}

}  // namespace castformer
