#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rmsin/nn/layers.hpp"
#include "rmsin/tensor/tensor.hpp"

namespace rmsin {

/// Outcome of comparing reverse-mode gradients with central differences.
/// Per tensor the error is max|analytic - numeric| / max(max|analytic|,
/// max|numeric|, floor) over the checked elements, floor = 1e-5 * max(1, |L|)
/// for loss value L. The floor stops tensors whose gradient is zero by
/// construction from dividing roundoff by roundoff. The report keeps the
/// worst tensor.
///
/// An element whose one-sided slopes (f(x+h)-f(x))/h and (f(x)-f(x-h))/h
/// differ by more than `kink_tolerance` times the tensor's gradient scale
/// sits on a non-differentiable point (a ReLU or clamp boundary within h).
/// Such an element is counted in `kinks` and the analytic value is compared
/// with whichever of the central and the two one-sided slopes lies nearest.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_input;
  std::size_t checked = 0;
  std::size_t kinks = 0;
};

struct GradCheckInput {
  std::string name;
  Tensor<double> tensor;
  /// Element indices to probe; empty means every element.
  std::vector<std::size_t> indices;
};

/// `loss_fn` rebuilds the scalar loss from the current values of the inputs.
/// Inputs must be leaf tensors; their requires_grad flag is set here.
inline GradCheckReport gradcheck(const std::function<Tensor<double>()>& loss_fn, std::vector<GradCheckInput> inputs,
                                 double h = 1e-5, double kink_tolerance = 1e-4) {
  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.zero_grad();
  }
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    const Tensor<double> loss = loss_fn();
    tape.backward(loss);
  }
  double base = 0.0;
  {
    NoGrad<double> off;
    base = loss_fn().item();
  }
  GradCheckReport report;
  for (auto& in : inputs) {
    const std::vector<double> analytic = in.tensor.grad();
    std::vector<std::size_t> idx = in.indices;
    if (idx.empty()) {
      idx.resize(in.tensor.numel());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    }
    double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
    for (std::size_t i : idx) max_a = std::max(max_a, std::abs(analytic[i]));
    auto values = in.tensor.mutable_data();
    for (std::size_t i : idx) {
      const double orig = values[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGrad<double> off;
        values[i] = orig + h;
        plus = loss_fn().item();
        values[i] = orig - h;
        minus = loss_fn().item();
        values[i] = orig;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double right = (plus - base) / h;
      const double left = (base - minus) / h;
      double diff = std::abs(analytic[i] - numeric);
      if (std::abs(right - left) > kink_tolerance * std::max(max_a, 1e-12)) {
        ++report.kinks;
        diff = std::min({diff, std::abs(analytic[i] - right), std::abs(analytic[i] - left)});
        max_n = std::max(max_n, std::min(std::abs(right), std::abs(left)));
      } else {
        max_n = std::max(max_n, std::abs(numeric));
      }
      max_diff = std::max(max_diff, diff);
    }
    report.checked += idx.size();
    const double rel = max_diff / std::max({max_a, max_n, 1e-5 * std::max(1.0, std::abs(base))});
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_input = in.name;
    }
  }
  return report;
}

/// Probes `fraction` of the elements of every trainable tensor (at least one
/// per tensor), chosen with `rng`.
inline std::vector<GradCheckInput> sample_parameters(const ParamSet<double>& params, double fraction, Rng& rng) {
  std::vector<GradCheckInput> out;
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    const std::size_t n = e.tensor.numel();
    const std::size_t want = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * n)));
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    for (std::size_t i = 0; i < want; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.next() % (n - i));
      std::swap(all[i], all[j]);
    }
    all.resize(want);
    std::sort(all.begin(), all.end());
    out.push_back(GradCheckInput{e.name, e.tensor, std::move(all)});
  }
  return out;
}

}  // namespace rmsin
