#include "castformer/param_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "castformer/errors.hpp"

namespace castformer {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'S', 'T', 'F', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint truncated");
  return v;
}

void put_doubles(std::ostream& os, std::span<const double> v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void get_doubles(std::istream& is, std::span<double> v) {
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!is) throw DataError("checkpoint truncated");
}

}  // namespace

Tensor ParamStore::add(const std::string& name, Tensor value) {
  if (!value.defined()) throw ConfigError("ParamStore::add: undefined tensor for " + name);
  if (entries_.count(name)) throw ConsistencyError("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  Entry e{value, std::vector<double>(value.size(), 0.0),
          std::vector<double>(value.size(), 0.0)};
  entries_.emplace(name, std::move(e));
  return value;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConsistencyError("unknown parameter: " + name);
  return it->second.value;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, e] : entries_) e.value.zero_grad();
}

NamedTensors ParamStore::grads() const {
  NamedTensors out;
  for (const auto& [name, e] : entries_) {
    auto g = e.value.grad();
    if (g.empty()) {
      out.emplace(name, Tensor::zeros(e.value.shape()));
    } else {
      out.emplace(name, Tensor::from(e.value.shape(), {g.begin(), g.end()}));
    }
  }
  return out;
}

void adam_step(ParamStore& params, const NamedTensors& grads, const AdamConfig& cfg) {
  if (grads.size() != params.size()) {
    throw ConsistencyError("adam_step: " + std::to_string(grads.size()) +
                           " gradients for " + std::to_string(params.size()) + " parameters");
  }
  for (const auto& [name, e] : params.entries()) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ConsistencyError("adam_step: missing gradient for " + name);
    if (it->second.size() != e.value.size()) {
      throw ConsistencyError("adam_step: gradient shape mismatch for " + name);
    }
  }
  const std::uint64_t t = params.step() + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [name, e] : params.entries()) {
    const auto g = grads.at(name).data();
    auto p = e.value.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
      e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = e.m[i] / bc1;
      const double vhat = e.v[i] / bc2;
      p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  params.set_step(t);
}

void save_checkpoint(const ParamStore& params, const CheckpointHeader& header,
                     const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, header.version);
  put<std::uint64_t>(os, params.step());
  put<std::uint64_t>(os, header.epochs_completed);
  put<std::uint64_t>(os, params.size());
  for (const auto& [name, e] : params.entries()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = e.value.shape();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put<std::uint64_t>(os, d);
    put_doubles(os, e.value.data());
    put_doubles(os, e.m);
    put_doubles(os, e.v);
  }
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

CheckpointHeader load_checkpoint(ParamStore& params, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw DataError(path.string() + " is not a checkpoint file");
  }
  CheckpointHeader h;
  h.version = get<std::uint32_t>(is);
  if (h.version != 1) throw DataError("unsupported checkpoint version " + std::to_string(h.version));
  const auto step = get<std::uint64_t>(is);
  h.epochs_completed = get<std::uint64_t>(is);
  const auto count = get<std::uint64_t>(is);
  if (count != params.size()) {
    throw ConsistencyError("checkpoint has " + std::to_string(count) +
                           " parameters, model has " + std::to_string(params.size()));
  }
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw DataError("checkpoint truncated");
    auto it = params.entries().find(name);
    if (it == params.entries().end()) {
      throw ConsistencyError("checkpoint parameter not in model: " + name);
    }
    auto& e = it->second;
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is);
    if (shape != e.value.shape()) {
      throw ConsistencyError("checkpoint shape " + shape_str(shape) + " for " + name +
                             " does not match model " + shape_str(e.value.shape()));
    }
    get_doubles(is, e.value.mutable_data());
    get_doubles(is, e.m);
    get_doubles(is, e.v);
  }
  params.set_step(step);
  return h;
}

}  // namespace castformer
