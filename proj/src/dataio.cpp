#include "castformer/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "castformer/errors.hpp"

namespace castformer {

using nlohmann::json;

const char* maneuver_name(int label) {
  switch (label) {
    case kStraight: return "straight";
    case kLeftTurn: return "left_turn";
    case kRightTurn: return "right_turn";
    case kLeftLaneChange: return "left_lane_change";
    case kRightLaneChange: return "right_lane_change";
  }
  return "unknown";
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

void validate_sequence(const FeatureSequence& s, const DatasetLimits& lim) {
  auto fail = [&](const std::string& why) {
    throw ValidationError("sample '" + s.id + "': " + why);
  };
  if (s.frames < 2) fail("needs at least 2 frames, has " + std::to_string(s.frames));
  if (s.interior.size() != s.frames * lim.interior_dim) {
    fail("interior must be " + std::to_string(s.frames) + "x" + std::to_string(lim.interior_dim));
  }
  if (s.exterior.size() != s.frames * lim.exterior_dim) {
    fail("exterior must be " + std::to_string(s.frames) + "x" + std::to_string(lim.exterior_dim));
  }
  if (s.speed.size() != s.frames) fail("speed must have one value per frame");
  if (s.label < 0 || static_cast<std::size_t>(s.label) >= lim.num_classes) {
    fail("label " + std::to_string(s.label) + " outside [0," + std::to_string(lim.num_classes) + ")");
  }
  if (s.fold < 0 || static_cast<std::size_t>(s.fold) >= lim.fold_count) {
    fail("fold " + std::to_string(s.fold) + " outside [0," + std::to_string(lim.fold_count) + ")");
  }
  for (const auto* v : {&s.interior, &s.exterior, &s.speed}) {
    for (double x : *v) {
      if (!std::isfinite(x)) fail("non-finite feature value");
    }
  }
}

std::string content_hash(std::span<const char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace {

constexpr char kPackedMagic[8] = {'C', 'S', 'T', 'F', 'D', 'A', 'T', 'A'};

bool is_packed(const std::filesystem::path& p) { return p.extension() == ".fsb"; }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<double> flatten_rows(const json& rows, std::size_t width, const std::string& field,
                                 std::size_t line) {
  if (!rows.is_array()) {
    throw ParseError("line " + std::to_string(line) + ": '" + field + "' must be an array of frames");
  }
  std::vector<double> out;
  out.reserve(rows.size() * width);
  for (const auto& row : rows) {
    if (!row.is_array() || row.size() != width) {
      throw ParseError("line " + std::to_string(line) + ": every '" + field + "' frame must have " +
                       std::to_string(width) + " numbers");
    }
    for (const auto& v : row) {
      if (!v.is_number()) {
        throw ParseError("line " + std::to_string(line) + ": non-numeric value in '" + field + "'");
      }
      out.push_back(v.get<double>());
    }
  }
  return out;
}

FeatureSequence parse_record(const std::string& text, std::size_t line, const DatasetLimits& lim) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("line " + std::to_string(line) + ": " + e.what());
  }
  if (!j.is_object()) throw ParseError("line " + std::to_string(line) + ": record must be an object");
  static const std::set<std::string> kFields = {"version", "id",       "label", "fold",
                                                "interior", "exterior", "speed"};
  for (const auto& [k, _] : j.items()) {
    if (!kFields.count(k)) throw ParseError("line " + std::to_string(line) + ": unknown field '" + k + "'");
  }
  for (const auto& k : kFields) {
    if (!j.contains(k)) throw ParseError("line " + std::to_string(line) + ": missing field '" + k + "'");
  }
  try {
    if (j["version"].get<std::string>() != kSchemaVersion) {
      throw ParseError("line " + std::to_string(line) + ": unsupported version '" +
                       j["version"].get<std::string>() + "'");
    }
    FeatureSequence s;
    s.id = j["id"].get<std::string>();
    s.label = j["label"].get<int>();
    s.fold = j["fold"].get<int>();
    s.interior = flatten_rows(j["interior"], lim.interior_dim, "interior", line);
    s.exterior = flatten_rows(j["exterior"], lim.exterior_dim, "exterior", line);
    s.frames = j["interior"].size();
    if (!j["speed"].is_array()) throw ParseError("line " + std::to_string(line) + ": 'speed' must be an array");
    for (const auto& v : j["speed"]) s.speed.push_back(v.get<double>());
    if (j["exterior"].size() != s.frames || s.speed.size() != s.frames) {
      throw ValidationError("sample '" + s.id + "': interior, exterior and speed frame counts differ");
    }
    return s;
  } catch (const json::exception& e) {
    throw ParseError("line " + std::to_string(line) + ": " + e.what());
  }
}

json record_to_json(const FeatureSequence& s, std::size_t di, std::size_t de) {
  auto rows = [&](const std::vector<double>& v, std::size_t w) {
    json a = json::array();
    for (std::size_t t = 0; t < s.frames; ++t) {
      a.push_back(std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(t * w),
                                      v.begin() + static_cast<std::ptrdiff_t>((t + 1) * w)));
    }
    return a;
  };
  json j;
  j["version"] = kSchemaVersion;
  j["id"] = s.id;
  j["label"] = s.label;
  j["fold"] = s.fold;
  j["interior"] = rows(s.interior, di);
  j["exterior"] = rows(s.exterior, de);
  j["speed"] = s.speed;
  return j;
}

template <typename T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::string_view& in) {
  if (in.size() < sizeof(T)) throw ParseError("packed dataset truncated");
  T v;
  std::memcpy(&v, in.data(), sizeof(T));
  in.remove_prefix(sizeof(T));
  return v;
}

std::vector<double> take_doubles(std::string_view& in, std::size_t n) {
  if (in.size() < n * sizeof(double)) throw ParseError("packed dataset truncated");
  std::vector<double> v(n);
  std::memcpy(v.data(), in.data(), n * sizeof(double));
  in.remove_prefix(n * sizeof(double));
  return v;
}

std::string pack(const Dataset& d) {
  std::string out(kPackedMagic, sizeof kPackedMagic);
  put<std::uint32_t>(out, 1);
  put<std::uint64_t>(out, d.samples.size());
  const std::size_t di = d.samples.empty() || d.samples[0].frames == 0
                             ? kInteriorDim
                             : d.samples[0].interior.size() / d.samples[0].frames;
  const std::size_t de = d.samples.empty() || d.samples[0].frames == 0
                             ? kExteriorDim
                             : d.samples[0].exterior.size() / d.samples[0].frames;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(di));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(de));
  for (const auto& s : d.samples) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.id.size()));
    out += s.id;
    put<std::int32_t>(out, s.label);
    put<std::int32_t>(out, s.fold);
    put<std::uint64_t>(out, s.frames);
    for (const auto* v : {&s.interior, &s.exterior, &s.speed}) {
      out.append(reinterpret_cast<const char*>(v->data()), v->size() * sizeof(double));
    }
  }
  return out;
}

std::vector<FeatureSequence> unpack(std::string_view in, const DatasetLimits& lim) {
  if (in.size() < sizeof kPackedMagic || std::memcmp(in.data(), kPackedMagic, sizeof kPackedMagic) != 0) {
    throw ParseError("not a packed dataset file");
  }
  in.remove_prefix(sizeof kPackedMagic);
  if (take<std::uint32_t>(in) != 1) throw ParseError("unsupported packed dataset version");
  const auto count = take<std::uint64_t>(in);
  const auto di = take<std::uint32_t>(in);
  const auto de = take<std::uint32_t>(in);
  if (di != lim.interior_dim || de != lim.exterior_dim) {
    throw ValidationError("packed dataset has feature widths " + std::to_string(di) + "/" +
                          std::to_string(de) + ", expected " + std::to_string(lim.interior_dim) +
                          "/" + std::to_string(lim.exterior_dim));
  }
  std::vector<FeatureSequence> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    FeatureSequence s;
    const auto len = take<std::uint32_t>(in);
    if (in.size() < len) throw ParseError("packed dataset truncated");
    s.id.assign(in.data(), len);
    in.remove_prefix(len);
    s.label = take<std::int32_t>(in);
    s.fold = take<std::int32_t>(in);
    s.frames = take<std::uint64_t>(in);
    s.interior = take_doubles(in, s.frames * di);
    s.exterior = take_doubles(in, s.frames * de);
    s.speed = take_doubles(in, s.frames);
    out.push_back(std::move(s));
  }
  if (!in.empty()) throw ParseError("trailing bytes after packed dataset");
  return out;
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& p) {
  std::map<std::string, std::string> kv;
  std::ifstream is(p);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path, const DatasetLimits& lim) {
  const std::string bytes = read_file(path);
  Dataset d;
  if (is_packed(path)) {
    d.samples = unpack(bytes, lim);
  } else {
    std::istringstream is(bytes);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      d.samples.push_back(parse_record(line, lineno, lim));
    }
  }
  if (d.samples.empty()) throw ValidationError("no samples in " + path.string());
  std::set<std::string> ids;
  for (const auto& s : d.samples) {
    validate_sequence(s, lim);
    if (!ids.insert(s.id).second) throw ValidationError("duplicate sample id '" + s.id + "'");
  }
  double fps = 30.0;
  std::string unit = "km/h";
  const auto mp = manifest_path(path);
  if (std::filesystem::exists(mp)) {
    auto kv = read_key_values(mp);
    if (kv.count("fps")) fps = std::stod(kv["fps"]);
    if (kv.count("speed_unit")) unit = kv["speed_unit"];
  }
  d.manifest = summarize(d, fps, unit);
  d.manifest.content_hash = content_hash(bytes);
  return d;
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::string bytes;
  if (is_packed(path)) {
    bytes = pack(data);
  } else {
    for (const auto& s : data.samples) {
      const std::size_t di = s.frames ? s.interior.size() / s.frames : kInteriorDim;
      const std::size_t de = s.frames ? s.exterior.size() / s.frames : kExteriorDim;
      bytes += record_to_json(s, di, de).dump();
      bytes += '\n';
    }
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write dataset " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing dataset " + path.string());
  DatasetManifest m = summarize(data, data.manifest.fps, data.manifest.speed_unit);
  m.content_hash = content_hash(bytes);
  write_manifest(m, manifest_path(path));
}

std::filesystem::path manifest_path(const std::filesystem::path& data_path) {
  return std::filesystem::path(data_path.string() + ".manifest");
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write manifest " + path.string());
  os << "samples=" << m.samples << '\n';
  os << "class_histogram=";
  for (std::size_t i = 0; i < m.class_histogram.size(); ++i) {
    os << (i ? "," : "") << m.class_histogram[i];
  }
  os << '\n';
  os << "fps=" << m.fps << '\n';
  os << "speed_unit=" << m.speed_unit << '\n';
  os << "content_hash=" << m.content_hash << '\n';
}

DatasetManifest summarize(const Dataset& data, double fps, const std::string& speed_unit) {
  DatasetManifest m;
  m.samples = data.samples.size();
  m.class_histogram.assign(kNumManeuvers, 0);
  for (const auto& s : data.samples) {
    if (s.label >= 0) {
      if (static_cast<std::size_t>(s.label) >= m.class_histogram.size()) {
        m.class_histogram.resize(static_cast<std::size_t>(s.label) + 1, 0);
      }
      ++m.class_histogram[static_cast<std::size_t>(s.label)];
    }
  }
  m.fps = fps;
  m.speed_unit = speed_unit;
  m.content_hash = data.manifest.content_hash;
  return m;
}

std::vector<std::string> assign_folds(Dataset& data, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("assign_folds: k must be >= 2");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.samples.size(); ++i) by_class[data.samples[i].label].push_back(i);
  Rng rng(seed);
  std::vector<std::string> warnings;
  std::size_t cursor = 0;
  for (auto& [label, idx] : by_class) {
    if (idx.size() < k) {
      warnings.push_back("class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                         " samples, fewer than " + std::to_string(k) + " folds");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx) {
      data.samples[i].fold = static_cast<int>(cursor % k);
      ++cursor;
    }
  }
  return warnings;
}

// ---------------------------------------------------------------- synthetic

void SynthSpec::validate() const {
  if (samples == 0) throw ConfigError("synthetic: samples must be >= 1");
  if (frames < 2) throw ConfigError("synthetic: frames must be >= 2");
  if (lag < 1) throw ConfigError("synthetic: lag must be >= 1");
  const std::size_t lo = resolved_onset_min(), hi = resolved_onset_max();
  if (lo < 1 || hi < lo || hi + lag > frames) {
    throw ConfigError("synthetic: onset range [" + std::to_string(lo) + "," + std::to_string(hi) +
                      "] must lie within [1, frames - lag]");
  }
  if (signal_channels.empty()) throw ConfigError("synthetic: need at least one signal channel");
  for (auto c : signal_channels) {
    if (c >= kExteriorDim) throw ConfigError("synthetic: signal channel out of range");
    if (spurious_strength != 0.0 && c == spurious_channel) {
      throw ConfigError("synthetic: spurious channel overlaps a signal channel");
    }
  }
  if (spurious_channel >= kExteriorDim) throw ConfigError("synthetic: spurious channel out of range");
  if (response_channel >= kInteriorDim) throw ConfigError("synthetic: response channel out of range");
  if (noise_std < 0.0) throw ConfigError("synthetic: noise_std must be >= 0");
  if (fold_count < 2) throw ConfigError("synthetic: fold_count must be >= 2");
}

namespace {

// Per-class cue levels. Channel 0 alone separates every class (levels 0..4);
// the others encode left/right and turn/lane-change.
double cue_code(int label, std::size_t j) {
  static constexpr double kLevel[5] = {0.0, 1.0, 2.0, 3.0, 4.0};
  static constexpr double kSide[5] = {0.0, 1.0, -1.0, 1.0, -1.0};
  static constexpr double kKind[5] = {0.0, 1.0, 1.0, -1.0, -1.0};
  switch (j % 3) {
    case 0: return kLevel[label];
    case 1: return kSide[label];
    default: return kKind[label];
  }
}

double spurious_code(int label) { return (label - 2) * 0.5; }

}  // namespace

Dataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick_label(0, static_cast<int>(kNumManeuvers) - 1);
  std::uniform_int_distribution<std::size_t> pick_onset(spec.resolved_onset_min(),
                                                        spec.resolved_onset_max());

  // Fixed exterior -> interior response; the spurious channel does not drive it.
  std::vector<double> response(kInteriorDim * kExteriorDim);
  const double rs = 1.0 / std::sqrt(static_cast<double>(kExteriorDim));
  for (auto& r : response) r = rs * unit(rng);
  for (std::size_t i = 0; i < kInteriorDim; ++i) {
    response[i * kExteriorDim + spec.spurious_channel] = 0.0;
  }
  const std::size_t cue = spec.signal_channels.front();
  for (std::size_t j = 0; j < kExteriorDim; ++j) {
    response[spec.response_channel * kExteriorDim + j] = j == cue ? 1.0 : 0.0;
  }

  Dataset d;
  const std::size_t T = spec.frames;
  for (std::size_t n = 0; n < spec.samples; ++n) {
    FeatureSequence s;
    std::ostringstream id;
    id << "syn-" << std::setw(5) << std::setfill('0') << n;
    s.id = id.str();
    s.label = pick_label(rng);
    s.frames = T;
    const std::size_t onset = pick_onset(rng);

    s.exterior.assign(T * kExteriorDim, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      double* row = s.exterior.data() + t * kExteriorDim;
      for (std::size_t c = 0; c < kExteriorDim; ++c) row[c] = spec.noise_std * unit(rng);
      if (t >= onset) {
        for (std::size_t j = 0; j < spec.signal_channels.size(); ++j) {
          row[spec.signal_channels[j]] += spec.signal_amplitude * cue_code(s.label, j);
        }
      }
      if (spec.spurious_strength != 0.0) {
        row[spec.spurious_channel] += spec.spurious_strength * spurious_code(s.label);
      }
    }

    s.interior.assign(T * kInteriorDim, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      double* row = s.interior.data() + t * kInteriorDim;
      for (std::size_t i = 0; i < kInteriorDim; ++i) {
        double v = spec.noise_std * unit(rng);
        if (t >= spec.lag) {
          const double* src = s.exterior.data() + (t - spec.lag) * kExteriorDim;
          const double* r = response.data() + i * kExteriorDim;
          for (std::size_t j = 0; j < kExteriorDim; ++j) {
            if (j != spec.spurious_channel) v += r[j] * src[j];
          }
        }
        row[i] = v;
      }
    }

    s.speed.resize(T);
    double v = 60.0 + 5.0 * unit(rng);
    const bool turn = s.label == kLeftTurn || s.label == kRightTurn;
    for (std::size_t t = 0; t < T; ++t) {
      if (t > 0) v += 0.3 * unit(rng) + ((turn && t >= onset) ? -0.8 : 0.0);
      s.speed[t] = v;
    }
    d.samples.push_back(std::move(s));
  }
  assign_folds(d, spec.fold_count, spec.seed ^ 0x9e3779b97f4a7c15ULL);
  d.manifest = summarize(d, spec.fps, "km/h");
  return d;
}

Dataset make_shifted(const Dataset& data, const SynthSpec& spec) {
  Dataset out = data;
  std::vector<std::size_t> perm(data.samples.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(spec.seed ^ 0x5bd1e9955bd1e995ULL);
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t c = spec.spurious_channel;
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    const auto& src = data.samples[perm[i]];
    auto& dst = out.samples[i];
    const std::size_t T = std::min(src.frames, dst.frames);
    for (std::size_t t = 0; t < T; ++t) {
      dst.exterior[t * kExteriorDim + c] = src.exterior[t * kExteriorDim + c];
    }
  }
  for (auto& s : out.samples) s.id += "-shifted";
  out.manifest = summarize(out, data.manifest.fps, data.manifest.speed_unit);
  return out;
}

}  // namespace castformer
