#pragma once
// Named parameter lists, global-norm clipping and Adam.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "corma/numkit/tensor.hpp"

namespace corma::nk {

struct NamedParam {
  std::string name;
  Tensor value;
};
using ParamList = std::vector<NamedParam>;

inline std::size_t param_count(const ParamList& ps) {
  std::size_t n = 0;
  for (const auto& p : ps) n += p.value.size();
  return n;
}

inline void zero_grads(ParamList& ps) {
  for (auto& p : ps) p.value.zero_grad();
}

/// Scales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParamList& ps, double max_norm) {
  double s = 0;
  for (auto& p : ps)
    if (p.value.has_grad())
      for (double g : p.value.grad()) s += g * g;
  const double norm = std::sqrt(s);
  if (max_norm > 0 && norm > max_norm) {
    const double k = max_norm / (norm + 1e-12);
    for (auto& p : ps)
      if (p.value.has_grad())
        for (double& g : p.value.grad()) g *= k;
  }
  return norm;
}

struct AdamState {
  double lr = 3e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  long step_count = 0;
  std::vector<std::vector<double>> m, v;

  void validate() const {
    require(lr > 0, "adam: lr must be positive");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "adam: betas must be in [0, 1)");
    require(eps > 0 && weight_decay >= 0, "adam: eps must be positive and weight_decay non-negative");
  }
};

/// One bias-corrected Adam update using each parameter's current gradient
/// (missing gradients count as zero).
inline void adam_step(ParamList& ps, AdamState& st) {
  st.validate();
  if (st.m.empty()) {
    for (auto& p : ps) {
      st.m.emplace_back(p.value.size(), 0.0);
      st.v.emplace_back(p.value.size(), 0.0);
    }
  }
  require(st.m.size() == ps.size(), "adam: parameter list changed between steps");
  ++st.step_count;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
  for (std::size_t k = 0; k < ps.size(); ++k) {
    auto& w = ps[k].value.data();
    require(st.m[k].size() == w.size(), "adam: moment buffer shape mismatch for " + ps[k].name);
    const bool has = ps[k].value.has_grad();
    const double* g = has ? ps[k].value.grad().data() : nullptr;
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      if (st.weight_decay > 0) w[i] -= st.lr * st.weight_decay * w[i];
      w[i] -= st.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + st.eps);
    }
  }
}

}  // namespace corma::nk
