#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmsin/nn/layers.hpp"

namespace rmsin {

/// lr0 * (1 - t/T)^power for t < T, zero afterwards.
inline double poly_lr(double lr0, std::uint64_t t, std::uint64_t total, double power = 0.9) {
  if (total == 0 || t >= total) return 0.0;
  return lr0 * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(total), power);
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with decoupled weight decay over the trainable entries of a
/// ParamSet: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
template <typename T>
class AdamW {
 public:
  AdamW(ParamSet<T>& params, AdamWOptions options = {}) : params_(&params), options_(options) {
    for (const auto& e : params.entries()) {
      if (!e.trainable) continue;
      names_.push_back(e.name);
      tensors_.push_back(e.tensor);
      m_.emplace_back(e.tensor.numel(), T(0));
      v_.emplace_back(e.tensor.numel(), T(0));
    }
  }

  const AdamWOptions& options() const { return options_; }
  std::uint64_t steps() const { return t_; }

  /// One update with learning rate `lr`; throws NonFiniteGradient naming the
  /// first parameter whose gradient holds a NaN or infinity, before any
  /// parameter is modified.
  void step(double lr) {
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      for (T g : tensors_[i].grad())
        if (!std::isfinite(static_cast<double>(g))) throw NonFiniteGradient("non-finite gradient in parameter " + names_[i]);
    ++t_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      auto p = tensors_[i].mutable_data();
      const auto g = tensors_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = static_cast<double>(g[k]);
        const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * gk;
        const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update = (mk / c1) / (std::sqrt(vk / c2) + options_.eps) + options_.weight_decay * static_cast<double>(p[k]);
        p[k] = static_cast<T>(static_cast<double>(p[k]) - lr * update);
      }
    }
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  // state access for checkpoints
  const std::vector<std::string>& names() const { return names_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  ParamSet<T>* params_;
  AdamWOptions options_;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace rmsin
