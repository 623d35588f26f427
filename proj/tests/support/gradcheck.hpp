#pragma once
// Central finite-difference gradient checks for numkit graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "corma/numkit.hpp"

namespace corma::check {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

inline double rel_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-3}); }

/// Compares the taped gradient of loss() against central differences on up
/// to `samples` randomly chosen entries spread over `params` (all entries
/// when the total is smaller).
inline GradCheckResult grad_check(const std::function<nk::Tensor()>& loss, std::vector<nk::Tensor> params,
                                  std::size_t samples, std::uint64_t seed = 0, double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  nk::backward(loss());
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k].size(); ++i) all.emplace_back(k, i);
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  if (all.size() > samples) all.resize(samples);

  GradCheckResult r;
  for (auto [k, i] : all) {
    auto& x = params[k].data()[i];
    const double x0 = x;
    x = x0 + h;
    double fp, fm;
    {
      nk::NoGradGuard ng;
      fp = loss().item();
      x = x0 - h;
      fm = loss().item();
    }
    x = x0;
    const double num = (fp - fm) / (2.0 * h);
    r.max_rel_error = std::max(r.max_rel_error, rel_error(params[k].grad()[i], num));
    ++r.checked;
  }
  return r;
}

inline nk::Tensor random_tensor(nk::Shape s, std::mt19937_64& rng, double sd = 1.0, bool grad = true) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(nk::numel(s));
  for (auto& x : v) x = n(rng);
  return nk::Tensor::from(std::move(s), std::move(v), grad);
}

/// Random fixed weights so that every output entry contributes to the loss.
inline std::vector<double> random_weights(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> w(n);
  for (auto& x : w) x = d(rng);
  return w;
}

}  // namespace corma::check
