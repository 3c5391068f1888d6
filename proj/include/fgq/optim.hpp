#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fgq/tensor.hpp"

namespace fgq {

/// lr for optimizer step k (0-based) under cosine annealing over t_max steps.
inline double cosine_lr(int64_t k, int64_t t_max, double base, double eta_min) {
  if (t_max <= 0) return base;
  double phase = 3.141592653589793238 * static_cast<double>(k) / static_cast<double>(t_max);
  return eta_min + 0.5 * (base - eta_min) * (1.0 + std::cos(phase));
}

/// AdamW with decoupled weight decay and per-group lr/decay. Weight decay 0
/// and no schedule makes it plain Adam. Deterministic: parameters are
/// updated in group order, params in insertion order.
class AdamW {
 public:
  struct Group {
    std::vector<Tensor> params;
    double lr = 1e-3;
    double weight_decay = 0.0;
  };

  AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& g : groups_) {
      for (auto& p : g.params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
  }

  std::vector<Group>& groups() { return groups_; }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  /// One update from the currently accumulated gradients.
  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    size_t slot = 0;
    for (auto& g : groups_) {
      for (auto& p : g.params) {
        std::vector<double> grad = p.grad();
        auto& m = m_[slot];
        auto& v = v_[slot];
        auto& d = p.data();
        for (size_t i = 0; i < d.size(); ++i) {
          m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
          v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
          double mh = m[i] / bc1;
          double vh = v[i] / bc2;
          d[i] -= g.lr * (mh / (std::sqrt(vh) + eps_) + g.weight_decay * d[i]);
        }
        ++slot;
      }
    }
  }

  /// Full optimizer + parameter state, for step rejection.
  struct Snapshot {
    std::vector<std::vector<double>> params, m, v;
    int64_t t = 0;
  };

  Snapshot snapshot() const {
    Snapshot s;
    for (const auto& g : groups_)
      for (const auto& p : g.params) s.params.push_back(p.data());
    s.m = m_;
    s.v = v_;
    s.t = t_;
    return s;
  }

  void restore(const Snapshot& s) {
    size_t slot = 0;
    for (auto& g : groups_)
      for (auto& p : g.params) p.data() = s.params[slot++];
    m_ = s.m;
    v_ = s.v;
    t_ = s.t;
  }

 private:
  std::vector<Group> groups_;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace fgq
