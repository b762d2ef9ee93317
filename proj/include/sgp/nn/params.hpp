#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sgp/rng.hpp"
#include "sgp/sgt_io.hpp"
#include "sgp/tensor.hpp"

namespace sgp::nn {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool trainable;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
Tensor<T> make_param(Shape dims, Rng rng, double stddev, bool trainable) {
  std::vector<T> v(numel(dims));
  if (stddev != 0) {
    for (auto& x : v) x = T(rng.normal() * stddev);
  }
  Tensor<T> t(std::move(dims), std::move(v));
  t.set_requires_grad(trainable);
  return t;
}

template <typename T>
Tensor<T> make_const_param(Shape dims, T value, bool trainable) {
  Tensor<T> t(std::move(dims), value);
  t.set_requires_grad(trainable);
  return t;
}

template <typename T>
void add_param(ParamList<T>& out, const std::string& prefix, const std::string& name, const Tensor<T>& t) {
  if (t.numel() == 0) return;
  out.push_back({prefix.empty() ? name : prefix + "." + name, t, t.requires_grad()});
}

// Copies values between two parameter lists that were built from the same architecture.
template <typename T, typename U>
void copy_params(const ParamList<T>& from, ParamList<U>& to) {
  if (from.size() != to.size()) throw ContractError("copy_params: parameter count mismatch");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].tensor.dims() != to[i].tensor.dims()) {
      throw ContractError("copy_params: mismatch at " + from[i].name);
    }
    auto src = from[i].tensor.data();
    auto dst = to[i].tensor.mutable_data();
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = U(src[k]);
  }
}

inline std::string dims_token(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

// Checkpoint directory: one SGT file per parameter plus manifest.txt ("name file shape").
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamList<T>& params) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  for (const auto& p : params) {
    const std::string file = p.name + ".sgt";
    write_sgt(dir / file, p.tensor);
    manifest << p.name << ' ' << file << ' ' << dims_token(p.tensor.dims()) << '\n';
  }
  const std::string text = manifest.str();
  write_bytes_atomic(dir / "manifest.txt", std::vector<std::uint8_t>(text.begin(), text.end()));
}

template <typename T>
void load_checkpoint(const std::filesystem::path& dir, ParamList<T>& params) {
  const auto mpath = dir / "manifest.txt";
  std::ifstream is(mpath);
  if (!is) throw IoError("cannot read checkpoint manifest " + mpath.string());
  std::map<std::string, std::pair<std::string, std::string>> entries;
  std::string name, file, shape;
  while (is >> name >> file >> shape) entries[name] = {file, shape};
  for (auto& p : params) {
    auto it = entries.find(p.name);
    if (it == entries.end()) throw IoError("checkpoint " + mpath.string() + " lacks parameter " + p.name);
    if (it->second.second != dims_token(p.tensor.dims())) {
      throw IoError("checkpoint parameter " + p.name + " has shape " + it->second.second + ", expected " +
                    dims_token(p.tensor.dims()));
    }
    auto loaded = read_sgt<T>(dir / it->second.first);
    if (loaded.dims() != p.tensor.dims()) throw IoError("shape mismatch in " + (dir / it->second.first).string());
    auto dst = p.tensor.mutable_data();
    std::copy(loaded.data().begin(), loaded.data().end(), dst.begin());
  }
}

}  // namespace sgp::nn
