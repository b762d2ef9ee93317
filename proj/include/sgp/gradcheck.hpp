#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sgp/rng.hpp"
#include "sgp/tensor.hpp"

namespace sgp {

struct GradcheckReport {
  double max_rel_error = 0;
  double max_abs_error = 0;
  double max_grad = 0;
  std::size_t entries = 0;
  std::string worst;  // "<tensor index>:<entry>"
};

// Compares reverse-mode gradients of a scalar function against central differences
// (f(x+h) - f(x-h)) / 2h evaluated in double. Entry error is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3 * max|numeric|, 1e-12).
// At most `max_entries` randomly chosen entries per tensor are probed (0 = all).
template <typename T>
GradcheckReport gradcheck_params(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs,
                                 double h = 1e-5, std::size_t max_entries = 0, std::uint64_t seed = 0) {
  if (!(h >= 1e-6 && h <= 1e-3)) throw ContractError("gradcheck: step must lie in [1e-6, 1e-3]");
  for (auto& x : inputs) {
    if (!x.is_leaf()) throw ContractError("gradcheck: inputs must be leaf tensors");
    x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    Tensor<T> y = f();
    if (y.numel() != 1) throw ContractError("gradcheck: function must be scalar-valued");
    if (y.requires_grad()) backward(y);
  }
  std::vector<std::vector<std::size_t>> probe(inputs.size());
  Rng rng(seed);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const std::size_t n = inputs[t].numel();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (max_entries && n > max_entries) {
      rng.shuffle(idx);
      idx.resize(max_entries);
      std::sort(idx.begin(), idx.end());
    }
    probe[t] = std::move(idx);
  }

  std::vector<std::vector<double>> numeric(inputs.size());
  double gmax = 0;
  {
    NoGradGuard ng;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      auto data = inputs[t].mutable_data();
      for (std::size_t i : probe[t]) {
        const T orig = data[i];
        data[i] = T(double(orig) + h);
        const double fp = double(f().item());
        data[i] = T(double(orig) - h);
        const double fm = double(f().item());
        data[i] = orig;
        const double g = (fp - fm) / (2 * h);
        numeric[t].push_back(g);
        gmax = std::max(gmax, std::abs(g));
      }
    }
  }

  GradcheckReport rep;
  rep.max_grad = gmax;
  const double floor = std::max(1e-12, 1e-3 * gmax);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const auto analytic = inputs[t].grad();
    for (std::size_t k = 0; k < probe[t].size(); ++k) {
      const double a = analytic[probe[t][k]];
      const double n = numeric[t][k];
      const double abs_err = std::abs(a - n);
      const double rel = abs_err / std::max({std::abs(a), std::abs(n), floor});
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > rep.max_rel_error || rep.entries == 0) {
        if (rel >= rep.max_rel_error) rep.worst = std::to_string(t) + ":" + std::to_string(probe[t][k]);
        rep.max_rel_error = std::max(rep.max_rel_error, rel);
      }
      ++rep.entries;
    }
  }
  for (auto& x : inputs) x.zero_grad();
  return rep;
}

// Single-input form: returns the maximum relative error.
template <typename T>
double gradcheck(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, double h = 1e-5) {
  return gradcheck_params<T>([&] { return f(x); }, {x}, h).max_rel_error;
}

}  // namespace sgp
