#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <doctest.h>

#include "rfad/tensor.hpp"

namespace rfad::test {

inline std::vector<double> random_vec(std::size_t n, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

// Central finite differences against reverse-mode gradients. `build` must
// construct the graph from scratch on every call so perturbed leaves are
// re-evaluated; it receives fresh leaf tensors carrying the given values.
inline double grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& build,
    const std::vector<Shape>& shapes, const std::vector<std::vector<double>>& values,
    double step = 1e-5) {
  auto eval = [&](const std::vector<std::vector<double>>& vals, bool with_grad,
                  std::vector<std::vector<double>>* grads) {
    std::vector<Tensor> leaves;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      leaves.push_back(Tensor::from_data(shapes[i], vals[i], with_grad));
    }
    Tensor loss = build(leaves);
    double out = loss.value();
    if (with_grad) {
      backward(loss);
      grads->clear();
      for (auto& l : leaves) grads->push_back(l.grad());
    }
    return out;
  };

  std::vector<std::vector<double>> analytic;
  eval(values, true, &analytic);

  double max_rel = 0.0;
  for (std::size_t li = 0; li < shapes.size(); ++li) {
    for (std::size_t j = 0; j < values[li].size(); ++j) {
      auto vp = values, vm = values;
      vp[li][j] += step;
      vm[li][j] -= step;
      double fd = (eval(vp, false, nullptr) - eval(vm, false, nullptr)) / (2.0 * step);
      double g = analytic[li][j];
      double denom = std::max(std::abs(fd), std::abs(g));
      if (denom < 1e-7) continue;  // both effectively zero
      max_rel = std::max(max_rel, std::abs(fd - g) / denom);
    }
  }
  return max_rel;
}

}  // namespace rfad::test
