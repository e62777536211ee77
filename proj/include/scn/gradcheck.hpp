#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "scn/error.hpp"
#include "scn/ops.hpp"
#include "scn/tensor.hpp"

namespace scn {

struct GradCheckReport {
  std::vector<double> max_rel_error;  // one entry per parameter tensor
  double tolerance = 0.0;
  std::size_t compared = 0;
  std::size_t skipped = 0;  // steps that moved some relu input across zero
  std::size_t at_noise_floor = 0;  // |a| + |n| below roundoff / tol

  double worst() const {
    return max_rel_error.empty() ? 0.0 : *std::max_element(max_rel_error.begin(), max_rel_error.end());
  }
  bool passed() const { return worst() < tolerance; }
};

/// Compares reverse-mode gradients of a scalar loss against central
/// differences (loss(p+h) - loss(p-h)) / 2h, one coordinate at a time.
/// Relative error per coordinate is |a - n| / max(|a| + |n|, noise / tol),
/// where noise = eps * (|loss(p+h)| + |loss(p-h)|) / 2h is the roundoff of the
/// difference quotient, so gradients smaller than that are compared absolutely.
/// With skip_relu_kinks, coordinates whose +h or -h evaluation flips the sign
/// of any relu input are counted in `skipped` instead of compared, since the
/// loss is not differentiable along that step.
inline GradCheckReport gradient_check(const std::function<Tensor<double>()>& loss_fn,
                                      std::span<Tensor<double>> params, double h, double tol,
                                      bool skip_relu_kinks = false) {
  std::vector<bool> signs;
  auto evaluate = [&] {
    NoGradGuard no_grad;
    signs.clear();
    detail::relu_sign_trace = skip_relu_kinks ? &signs : nullptr;
    double value = 0.0;
    try {
      value = loss_fn().item();
    } catch (...) {
      detail::relu_sign_trace = nullptr;
      throw;
    }
    detail::relu_sign_trace = nullptr;
    if (!std::isfinite(value)) throw NumericError("gradient_check: loss is not finite");
    return value;
  };

  for (auto& p : params) p.zero_grad();
  Tensor<double> loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericError("gradient_check: loss is not finite");
  loss.backward();
  evaluate();
  const std::vector<bool> base_signs = signs;

  GradCheckReport report;
  report.tolerance = tol;
  for (auto& p : params) {
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end()) : std::vector<double>(p.numel(), 0.0);
    auto values = p.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = evaluate();
      bool kink = signs != base_signs;
      values[i] = saved - h;
      const double down = evaluate();
      kink = kink || signs != base_signs;
      values[i] = saved;
      if (kink) {
        ++report.skipped;
        continue;
      }
      ++report.compared;
      const double numeric = (up - down) / (2.0 * h);
      const double noise = std::numeric_limits<double>::epsilon() * (std::abs(up) + std::abs(down)) / (2.0 * h);
      const double magnitude = std::abs(analytic[i]) + std::abs(numeric);
      const double floor = std::max(noise / tol, 1e-300);
      if (magnitude < floor) ++report.at_noise_floor;
      const double err = std::abs(analytic[i] - numeric) / std::max(magnitude, floor);
      worst = std::max(worst, err);
    }
    report.max_rel_error.push_back(worst);
  }
  return report;
}

}  // namespace scn
