#include "mdl/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace mdl::ad {
namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw std::runtime_error("truncated archive " + path.string());
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
  for (double v : t.values()) put<double>(os, v);
}

}  // namespace

void ParamStore::add(const std::string& name, Tensor value, OptimizerRule rule) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  ParamEntry e;
  e.accumulator = Tensor::zeros(value.shape());
  e.value = std::move(value);
  e.rule = rule;
  entries_.emplace(name, std::move(e));
}

const ParamEntry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

ParamEntry& ParamStore::mutable_entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::mutable_value(const std::string& name) { return mutable_entry(name).value; }

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (auto ia = a.entries_.begin(), ib = b.entries_.begin(); ia != a.entries_.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.rule != ib->second.rule ||
        !bitwise_equal(ia->second.value, ib->second.value) ||
        !bitwise_equal(ia->second.accumulator, ib->second.accumulator)) {
      return false;
    }
  }
  return true;
}

ParamStore init_params(const std::vector<std::pair<std::string, InitSpec>>& spec, std::uint64_t seed) {
  ParamStore store;
  for (const auto& [name, s] : spec) {
    if (s.shape.empty()) throw std::invalid_argument("parameter '" + name + "' needs a shape");
    switch (s.kind) {
      case InitKind::Zeros:
        store.add(name, Tensor::zeros(s.shape), s.rule);
        break;
      case InitKind::Ones:
        store.add(name, Tensor::full(s.shape, 1.0), s.rule);
        break;
      case InitKind::UniformScaled: {
        const std::size_t r = s.shape.size();
        const double fan_out = static_cast<double>(s.shape[r - 1]);
        const double fan_in = static_cast<double>(r >= 2 ? s.shape[r - 2] : s.shape[r - 1]);
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        const std::uint64_t h = fnv1a(name);
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
        std::mt19937_64 rng(seq);
        Tensor t = Tensor::zeros(s.shape);
        for (double& v : t.values()) {
          // Midpoint of a 2^-53 grid cell: strictly inside (0, 1).
          const double u = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
          v = a * (2.0 * u - 1.0);
        }
        store.add(name, std::move(t), s.rule);
        break;
      }
    }
  }
  return store;
}

void optimizer_step(ParamStore& store, const GradientMap& grads, LearningRates lr) {
  for (const auto& [name, g] : grads) {
    ParamEntry& e = store.mutable_entry(name);
    if (g.shape() != e.value.shape()) {
      throw std::invalid_argument("gradient for '" + name + "' has shape " + shape_str(g.shape()) +
                                  ", parameter has " + shape_str(e.value.shape()));
    }
    const bool adagrad = e.rule == OptimizerRule::Adagrad;
    const double rate = adagrad ? lr.adagrad : lr.rmsprop;
    double* p = e.value.data();
    double* acc = e.accumulator.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      if (adagrad) {
        acc[i] += gi * gi;
      } else {
        acc[i] = kRmsPropDecay * acc[i] + (1.0 - kRmsPropDecay) * gi * gi;
      }
      p[i] -= rate * gi / (std::sqrt(acc[i]) + kOptimizerEps);
    }
  }
}

void write_archive(const ParamStore& store, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write("MDL1", 4);
  put<std::uint64_t>(os, 2 * store.size());
  for (const auto& [name, e] : store.entries()) {
    put_tensor(os, name, e.value);
    put_tensor(os, name + ".acc", e.accumulator);
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<std::pair<std::string, Tensor>> read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MDL1", 4) != 0) {
    throw std::runtime_error(path.string() + " is not an MDL1 archive");
  }
  const auto count = get<std::uint64_t>(is, path);
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("truncated archive " + path.string());
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is, path);
    std::vector<double> values(numel(shape));
    for (double& v : values) v = get<double>(is, path);
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

void load_archive(ParamStore& store, const std::filesystem::path& path) {
  std::map<std::string, Tensor> loaded;
  for (auto& [name, t] : read_archive(path)) loaded.emplace(std::move(name), std::move(t));
  for (const auto& [name, e] : store.entries()) {
    for (const std::string& key : {name, name + ".acc"}) {
      auto it = loaded.find(key);
      if (it == loaded.end()) throw std::runtime_error("archive " + path.string() + " lacks '" + key + "'");
      if (it->second.shape() != e.value.shape()) {
        throw std::runtime_error("archive tensor '" + key + "' has shape " + shape_str(it->second.shape()) +
                                 ", model expects " + shape_str(e.value.shape()));
      }
    }
  }
  for (const auto& [name, e] : store.entries()) {
    ParamEntry& m = store.mutable_entry(name);
    m.value = loaded.at(name);
    m.accumulator = loaded.at(name + ".acc");
  }
}

}  // namespace mdl::ad
