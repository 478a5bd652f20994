#include "castformer/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "castformer/errors.hpp"

namespace castformer {

std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) {
    throw ConfigError("bad value '" + v + "' for " + key);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("bad value '" + v + "' for " + key + " (true/false)");
}

std::string list_string(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
};

#define SIZE_FIELD(path)                                                                   \
  Field {                                                                                  \
    [](const RunConfig& c) { return std::to_string(c.path); },                            \
        [](RunConfig& c, const std::string& k, const std::string& v) {                     \
          c.path = parse_number<std::size_t>(k, v);                                        \
        }                                                                                  \
  }
#define DOUBLE_FIELD(path)                                                                 \
  Field {                                                                                  \
    [](const RunConfig& c) { return format_double(c.path); },                             \
        [](RunConfig& c, const std::string& k, const std::string& v) {                     \
          c.path = parse_number<double>(k, v);                                             \
        }                                                                                  \
  }
#define BOOL_FIELD(path)                                                                   \
  Field {                                                                                  \
    [](const RunConfig& c) { return std::string(c.path ? "true" : "false"); },            \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.path = parse_bool(k, v); } \
  }
#define ENUM_FIELD(path, parser)                                                           \
  Field {                                                                                  \
    [](const RunConfig& c) { return std::string(to_string(c.path)); },                    \
        [](RunConfig& c, const std::string&, const std::string& v) { c.path = parser(v); } \
  }

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"data.path", Field{[](const RunConfig& c) { return c.data_path; },
                          [](RunConfig& c, const std::string&, const std::string& v) { c.data_path = v; }}},
      {"run.out", Field{[](const RunConfig& c) { return c.out_dir; },
                        [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }}},
      {"run.workers", SIZE_FIELD(workers)},
      {"model.pipeline",
       Field{[](const RunConfig& c) { return pipeline_string(c.model.pipeline); },
             [](RunConfig& c, const std::string&, const std::string& v) { c.model.pipeline = parse_pipeline(v); }}},
      {"model.num_classes",
       Field{[](const RunConfig& c) { return std::to_string(c.model.num_classes); },
             [](RunConfig& c, const std::string& k, const std::string& v) {
               const auto m = parse_number<std::size_t>(k, v);
               c.model.num_classes = c.model.cpe.num_classes = c.model.fsn.num_classes = m;
             }}},
      {"encoder.d_model", SIZE_FIELD(model.encoder.d_model)},
      {"encoder.heads", SIZE_FIELD(model.encoder.heads)},
      {"encoder.layers", SIZE_FIELD(model.encoder.layers)},
      {"encoder.ffn_dim", SIZE_FIELD(model.encoder.ffn_dim)},
      {"encoder.dropout", DOUBLE_FIELD(model.encoder.dropout_rate)},
      {"encoder.use_speed", BOOL_FIELD(model.encoder.use_speed)},
      {"encoder.norm_eps", DOUBLE_FIELD(model.encoder.norm_eps)},
      {"rsf.heads", SIZE_FIELD(model.rsf.heads)},
      {"rsf.gate_reduction", SIZE_FIELD(model.rsf.gate_reduction)},
      {"rsf.dropout", DOUBLE_FIELD(model.rsf.dropout_rate)},
      {"rsf.causal_mask", BOOL_FIELD(model.rsf.causal_mask)},
      {"rsf.attention", ENUM_FIELD(model.rsf.attention, parse_rsf_attention)},
      {"rsf.norm_eps", DOUBLE_FIELD(model.rsf.norm_eps)},
      {"cpe.heads", SIZE_FIELD(model.cpe.heads)},
      {"cpe.eps_orth", DOUBLE_FIELD(model.cpe.eps_orth)},
      {"cpe.baseline_scope", ENUM_FIELD(model.cpe.baseline_scope, parse_baseline_scope)},
      {"cpe.final_step_only", BOOL_FIELD(model.cpe.final_step_only)},
      {"cpe.gate", ENUM_FIELD(model.cpe.gate_mode, parse_gate_mode)},
      {"cpe.orth_baseline", ENUM_FIELD(model.cpe.orth_baseline, parse_orth_baseline)},
      {"fsn.use_speed", BOOL_FIELD(model.fsn.use_speed)},
      {"fsn.hidden_dim", SIZE_FIELD(model.fsn.hidden_dim)},
      {"fsn.branch_bias", BOOL_FIELD(model.fsn.branch_bias)},
      {"train.lr", DOUBLE_FIELD(train.lr)},
      {"train.epochs", SIZE_FIELD(train.epochs)},
      {"train.batch_size", SIZE_FIELD(train.batch_size)},
      {"train.alpha", DOUBLE_FIELD(train.alpha)},
      {"train.chunk_len", SIZE_FIELD(train.chunk_len)},
      {"train.seed", Field{[](const RunConfig& c) { return std::to_string(c.train.seed); },
                           [](RunConfig& c, const std::string& k, const std::string& v) {
                             c.train.seed = parse_number<std::uint64_t>(k, v);
                           }}},
      {"train.fold_count", SIZE_FIELD(train.fold_count)},
      {"train.fold", SIZE_FIELD(train.fold)},
      {"train.loss_denominator", DOUBLE_FIELD(train.loss_denominator)},
      {"train.loss_terms", ENUM_FIELD(train.loss_terms, parse_loss_terms)},
      {"train.class_weights", BOOL_FIELD(train.class_weights)},
      {"train.lr_schedule", ENUM_FIELD(train.lr_schedule, parse_lr_schedule)},
      {"train.beta1", DOUBLE_FIELD(train.beta1)},
      {"train.beta2", DOUBLE_FIELD(train.beta2)},
      {"train.adam_eps", DOUBLE_FIELD(train.adam_eps)},
      {"metrics.fps", DOUBLE_FIELD(metrics.fps)},
      {"metrics.window_seconds", DOUBLE_FIELD(metrics.window_seconds)},
      {"metrics.horizons",
       Field{[](const RunConfig& c) { return list_string(c.metrics.horizons); },
             [](RunConfig& c, const std::string&, const std::string& v) { c.metrics.horizons = parse_int_list(v); }}},
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD
#undef ENUM_FIELD

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_number<int>("integer list", item));
  }
  if (out.empty()) throw ConfigError("empty integer list '" + s + "'");
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  field(key).set(*this, key, trim(value));
}

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

std::vector<std::pair<std::string, std::string>> RunConfig::items() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, f] : fields()) out.emplace_back(k, f.get(*this));
  return out;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> ks = [] {
    std::vector<std::string> v;
    for (const auto& [k, _] : fields()) v.push_back(k);
    return v;
  }();
  return ks;
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (workers < 1) throw ConfigError("run.workers must be >= 1");
  if (!(metrics.fps > 0.0)) throw ConfigError("metrics.fps must be > 0");
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c;
  c.merge_file(path);
  return c;
}

void write_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write config " + path.string());
  for (const auto& [k, v] : cfg.items()) os << k << '=' << v << '\n';
}

}  // namespace castformer
