#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pclm/tensor.hpp"

namespace pclm {

struct GradCheckReport {
  double max_rel_error = 0.0;    // worst single leaf
  double total_rel_error = 0.0;  // all leaves as one vector
  std::size_t entries_checked = 0;
  std::size_t worst_leaf = 0;
};

// Relative error between two gradient vectors, measured in the 2-norm.
// `floor` keeps the ratio meaningful when both are essentially zero.
inline double relative_error(std::span<const double> analytic,
                             std::span<const double> numeric, double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

// Compares reverse-mode gradients of `loss_fn` w.r.t. `leaves` against central
// finite differences. `loss_fn` must be deterministic (fixed seeds inside).
inline GradCheckReport check_gradients(const std::function<Tensor()>& loss_fn,
                                       std::vector<Tensor> leaves, double h = 1e-5) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  {
    Graph graph;
    Tensor loss;
    {
      GraphScope scope(graph);
      loss = loss_fn();
    }
    backward(loss, graph);
  }

  auto eval = [&] {
    NoGradScope off;
    return loss_fn().item();
  };

  GradCheckReport report;
  std::vector<double> all_analytic, all_numeric;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    std::vector<double> numeric(leaf.numel());
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = eval();
      values[i] = saved - h;
      const double down = eval();
      values[i] = saved;
      numeric[i] = (up - down) / (2.0 * h);
    }
    report.entries_checked += values.size();
    all_analytic.insert(all_analytic.end(), analytic.begin(), analytic.end());
    all_numeric.insert(all_numeric.end(), numeric.begin(), numeric.end());
    const double err = relative_error(analytic, numeric);
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_leaf = li;
    }
  }
  report.total_rel_error = relative_error(all_analytic, all_numeric);
  return report;
}

}  // namespace pclm
