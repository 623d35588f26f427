#pragma once
// Finite-difference check of the full adapter training loss on a tiny model.

#include <random>

#include "corma/trainlab.hpp"
#include "gradcheck.hpp"

namespace corma::check {

struct AdapterGradCheck {
  GradCheckResult result;
  std::size_t param_count = 0;
};

/// d = 16, one layer, H = 8, batch of 4 with two regime labels; loss is
/// L_sem + lambda * L_nce.
inline AdapterGradCheck adapter_loss_gradcheck(adapt::Variant variant, std::uint64_t seed, std::size_t samples = 200,
                                               double lambda_nce = 0.5) {
  adapt::AdapterConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.u_dim = 8;
  cfg.history_len = 8;
  cfg.variant = variant;
  cfg.init_seed = seed;
  adapt::Adapter model(cfg);

  std::mt19937_64 rng(seed + 1000);
  adapt::Batch b;
  b.features = random_tensor({4, 8, data::kFeatureWidth}, rng, 1.0, false);
  b.pad_len = {0, 2, 5, 0};
  for (std::size_t s = 0; s < 4; ++s)
    for (int r = 0; r < b.pad_len[s]; ++r)
      for (std::size_t c = 0; c < data::kFeatureWidth; ++c) b.features.data()[(s * 8 + r) * data::kFeatureWidth + c] = 0;
  const nk::Tensor target = random_tensor({4, data::kZDim}, rng, 1.0, false);
  const std::vector<int> labels{0, 1, 0, 1};

  auto loss = [&] {
    const auto out = model.forward(b);
    return nk::add(train::loss_sem(out.z_hat, target),
                   nk::scale(train::loss_nce(out.u, labels, 0.1).loss, lambda_nce));
  };
  std::vector<nk::Tensor> ps;
  for (auto& p : model.params()) ps.push_back(p.value);
  return {grad_check(loss, ps, samples, seed, 1e-6), model.param_count()};
}

}  // namespace corma::check
