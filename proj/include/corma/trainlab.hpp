#pragma once
// Adapter objectives, the training loop and the ablation grid runner.

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "corma/adapter.hpp"
#include "corma/datakit.hpp"
#include "corma/evallab.hpp"
#include "corma/numkit.hpp"

namespace corma::train {

using json = nlohmann::json;
using nk::Tensor;

struct TrainConfig {
  double lambda_nce = 0.01;
  double tau = 0.1;
  double lambda_smooth = 0.0;
  double lr = 3e-4;
  int batch_size = 256;
  int epochs = 30;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  double grad_clip_norm = 1.0;

  void validate() const {
    require(tau > 0, "TrainConfig: tau must be positive");
    require(lambda_nce >= 0 && lambda_smooth >= 0, "TrainConfig: loss weights must be non-negative");
    require(batch_size >= 2, "TrainConfig: batch_size must be >= 2");
    require(epochs >= 1, "TrainConfig: epochs must be >= 1");
    require(lr > 0 && weight_decay >= 0 && grad_clip_norm >= 0, "TrainConfig: invalid optimizer settings");
  }
  json to_json() const {
    return {{"lambda_nce", lambda_nce}, {"tau", tau},       {"lambda_smooth", lambda_smooth},
            {"lr", lr},                 {"batch_size", batch_size}, {"epochs", epochs},
            {"seed", seed},             {"weight_decay", weight_decay}, {"grad_clip_norm", grad_clip_norm}};
  }
  static TrainConfig from_json(const json& j) {
    TrainConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      if (k == "lambda_nce") c.lambda_nce = it->get<double>();
      else if (k == "tau") c.tau = it->get<double>();
      else if (k == "lambda_smooth") c.lambda_smooth = it->get<double>();
      else if (k == "lr") c.lr = it->get<double>();
      else if (k == "batch_size") c.batch_size = it->get<int>();
      else if (k == "epochs") c.epochs = it->get<int>();
      else if (k == "seed") c.seed = it->get<std::uint64_t>();
      else if (k == "weight_decay") c.weight_decay = it->get<double>();
      else if (k == "grad_clip_norm") c.grad_clip_norm = it->get<double>();
      else throw InvalidArgument("TrainConfig: unknown key '" + k + "'");
    }
    c.validate();
    return c;
  }
  std::string digest() const { return sha256_hex(to_json().dump()); }
};

// ----------------------------------------------------------------- losses

inline Tensor loss_sem(const Tensor& z_hat, const Tensor& z) {
  if (z_hat.shape() != z.shape())
    throw InvalidArgument("loss_sem: prediction " + nk::shape_str(z_hat.shape()) + " vs target " +
                          nk::shape_str(z.shape()));
  return nk::mean(nk::square(nk::sub(z_hat, z)));
}

struct NceResult {
  Tensor loss;
  std::size_t valid_anchors = 0, skipped_anchors = 0;
};

/// Anchors with at least one same-label partner in the batch.
inline std::size_t count_valid_anchors(const std::vector<int>& labels) {
  std::map<int, std::size_t> c;
  for (int l : labels) ++c[l];
  std::size_t v = 0;
  for (const auto& [l, n] : c) v += n >= 2 ? n : 0;
  return v;
}

/// Supervised InfoNCE over unit rows u [B, D]: for each anchor, the mean over
/// its positives p of softplus(logsumexp_{n in negatives} s_in/tau - s_ip/tau),
/// which equals -log(e^{s_ip/tau} / (e^{s_ip/tau} + sum_n e^{s_in/tau})).
/// Anchors without positives are skipped and counted.
inline NceResult loss_nce(const Tensor& u, const std::vector<int>& labels, double tau) {
  require(tau > 0, "loss_nce: tau must be positive");
  if (u.rank() != 2 || u.dim(0) != labels.size())
    throw InvalidArgument("loss_nce: u " + nk::shape_str(u.shape()) + " does not match " +
                          std::to_string(labels.size()) + " labels");
  const std::size_t B = labels.size();
  NceResult r;
  r.valid_anchors = count_valid_anchors(labels);
  r.skipped_anchors = B - r.valid_anchors;
  if (r.valid_anchors == 0) {
    std::map<int, std::size_t> c;
    for (int l : labels) ++c[l];
    std::string comp;
    for (const auto& [l, n] : c) comp += (comp.empty() ? "" : ", ") + std::to_string(l) + ":" + std::to_string(n);
    throw InvalidArgument("loss_nce: no anchor has an in-batch positive (batch of " + std::to_string(B) +
                          ", label counts {" + comp + "})");
  }
  const Tensor s = nk::scale(nk::matmul(u, nk::permute(u, {1, 0})), 1.0 / tau);
  std::vector<std::uint8_t> not_neg(B * B);
  std::vector<double> w(B * B, 0.0);
  std::vector<std::size_t> npos(B, 0);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j) {
      not_neg[i * B + j] = labels[i] == labels[j];
      npos[i] += (i != j && labels[i] == labels[j]);
    }
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j)
      if (i != j && labels[i] == labels[j])
        w[i * B + j] = 1.0 / (static_cast<double>(npos[i]) * static_cast<double>(r.valid_anchors));
  const Tensor lse = nk::reshape(nk::logsumexp(nk::masked_fill(s, not_neg)), {B, 1});
  r.loss = nk::weighted_sum(nk::softplus(nk::sub(lse, s)), w);
  return r;
}

/// Mean squared difference between predictions of consecutive windows.
inline Tensor loss_smooth(const Tensor& z_hat_t, const Tensor& z_hat_prev) {
  if (z_hat_t.shape() != z_hat_prev.shape())
    throw InvalidArgument("loss_smooth: shapes " + nk::shape_str(z_hat_t.shape()) + " and " +
                          nk::shape_str(z_hat_prev.shape()) + " differ");
  return nk::mean(nk::square(nk::sub(z_hat_t, z_hat_prev)));
}

// ------------------------------------------------------------------ train

struct EpochLog {
  int epoch = 0;
  double train_loss = 0, l_sem = 0, l_nce = 0, l_smooth = 0;
  double val_r2_mean = 0, val_mse_mean = 0, val_pearson_mean = 0, val_cos_mean = 0;
  double seconds = 0;
};

inline void write_train_log_csv(std::ostream& os, const std::vector<EpochLog>& log) {
  os << std::setprecision(8)
     << "epoch,train_loss,l_sem,l_nce,l_smooth,val_r2_mean,val_mse_mean,val_pearson_mean,val_cos_mean\n";
  for (const auto& e : log)
    os << e.epoch << ',' << e.train_loss << ',' << e.l_sem << ',' << e.l_nce << ',' << e.l_smooth << ','
       << e.val_r2_mean << ',' << e.val_mse_mean << ',' << e.val_pearson_mean << ',' << e.val_cos_mean << '\n';
}

struct TrainCounters {
  std::size_t skipped_anchors = 0;      // anchors with no in-batch positive
  std::size_t nce_skipped_batches = 0;  // batches with no valid anchor
  std::size_t smooth_pairs = 0;
  std::size_t smooth_empty_batches = 0;
};

struct TrainResult {
  adapt::AdapterConfig adapter_config;
  nk::ParamList best_params;
  int best_epoch = 0;
  eval::MetricsReport best_val;
  std::vector<EpochLog> log;
  TrainCounters counters;
  std::string train_config_digest;

  adapt::Adapter best_adapter() const {
    adapt::Adapter a(adapter_config);
    a.load_params(best_params);
    return a;
  }
};

struct Divergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline nk::ParamList snapshot(const nk::ParamList& ps) {
  nk::ParamList out;
  for (const auto& p : ps) out.push_back({p.name, p.value.detach()});
  return out;
}

/// Validation metrics of an adapter on a window set.
inline eval::MetricsReport evaluate(const adapt::Adapter& a, const data::WindowSet& ws, const data::NormStats& st) {
  const auto p = eval::predict(a, ws, st);
  return eval::metrics(p.z_hat, eval::standardized_targets(ws, st));
}

/// Trains an adapter initialized from tcfg.seed. Keeps the parameters of the
/// epoch with the best mean validation R2.
inline TrainResult train(const data::WindowSet& tr, const data::WindowSet& va, adapt::AdapterConfig acfg,
                         const TrainConfig& tcfg, const EpochCallback& on_epoch = {}) {
  tcfg.validate();
  require(!tr.samples.empty() && va.size() >= 2, "train: need training windows and at least 2 validation windows");
  if (tr.stats.digest() != va.stats.digest())
    throw InvalidArgument("train: train and val sets carry different normalization stats");
  require(tr.H() == acfg.history_len, "train: window length " + std::to_string(tr.H()) +
                                          " differs from adapter history_len " + std::to_string(acfg.history_len));
  nk::tune_allocator();
  acfg.init_seed = tcfg.seed;
  adapt::Adapter model(acfg);
  nk::AdamState adam;
  adam.lr = tcfg.lr;
  adam.weight_decay = tcfg.weight_decay;
  const data::NormStats& st = tr.stats;

  // companion = same episode, one stride earlier
  std::vector<std::ptrdiff_t> companion(tr.size(), -1);
  if (tcfg.lambda_smooth > 0) {
    std::unordered_map<std::uint64_t, std::size_t> at;
    auto key = [](std::uint32_t e, int f) { return (std::uint64_t{e} << 32) | static_cast<std::uint32_t>(f); };
    for (std::size_t i = 0; i < tr.size(); ++i) at[key(tr.samples[i].episode, tr.samples[i].final_step)] = i;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      auto it = at.find(key(tr.samples[i].episode, tr.samples[i].final_step - tr.spec.stride));
      if (it != at.end()) companion[i] = static_cast<std::ptrdiff_t>(it->second);
    }
  }

  TrainResult res;
  res.adapter_config = acfg;
  res.train_config_digest = tcfg.digest();
  std::mt19937_64 shuffle_rng(tcfg.seed), drop_rng(tcfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(tr.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto B = static_cast<std::size_t>(tcfg.batch_size);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t batch_index = 0;

  for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochLog lg;
    lg.epoch = epoch;
    std::size_t nb = 0;
    for (std::size_t s = 0; s < order.size(); s += B, ++batch_index) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + B)));
      if (idx.size() < 2) continue;
      // paired samples first so their predictions are a prefix slice
      std::size_t npair = 0;
      if (tcfg.lambda_smooth > 0) {
        std::stable_partition(idx.begin(), idx.end(), [&](std::size_t i) { return companion[i] >= 0; });
        while (npair < idx.size() && companion[idx[npair]] >= 0) ++npair;
      }
      const std::size_t nb_main = idx.size();
      std::vector<std::size_t> fwd = idx;
      for (std::size_t k = 0; k < npair; ++k) fwd.push_back(static_cast<std::size_t>(companion[idx[k]]));

      const auto out = model.forward(adapt::make_batch(tr, fwd, st), true, &drop_rng);
      const Tensor zh = npair > 0 ? nk::slice(out.z_hat, 0, 0, nb_main) : out.z_hat;
      const Tensor l_sem = loss_sem(zh, adapt::make_targets(tr, idx, st));
      Tensor total = l_sem;
      double v_nce = 0, v_smooth = 0;
      if (tcfg.lambda_nce > 0) {
        std::vector<int> labels;
        for (auto i : idx) labels.push_back(static_cast<int>(tr.samples[i].regime));
        if (count_valid_anchors(labels) == 0) {
          ++res.counters.nce_skipped_batches;
        } else {
          const Tensor u = npair > 0 ? nk::slice(out.u, 0, 0, nb_main) : out.u;
          const auto nce = loss_nce(u, labels, tcfg.tau);
          res.counters.skipped_anchors += nce.skipped_anchors;
          v_nce = nce.loss.item();
          total = nk::add(total, nk::scale(nce.loss, tcfg.lambda_nce));
        }
      }
      if (tcfg.lambda_smooth > 0) {
        if (npair == 0) {
          ++res.counters.smooth_empty_batches;
        } else {
          const Tensor ls = loss_smooth(nk::slice(out.z_hat, 0, 0, npair), nk::slice(out.z_hat, 0, nb_main, npair));
          res.counters.smooth_pairs += npair;
          v_smooth = ls.item();
          total = nk::add(total, nk::scale(ls, tcfg.lambda_smooth));
        }
      }
      const double v_total = total.item();
      if (!std::isfinite(v_total))
        throw Divergence("train: non-finite loss at batch " + std::to_string(batch_index) + " (epoch " +
                         std::to_string(epoch) + ")");
      nk::zero_grads(model.params());
      nk::backward(total);
      nk::clip_grad_norm(model.params(), tcfg.grad_clip_norm);
      nk::adam_step(model.params(), adam);
      lg.train_loss += v_total;
      lg.l_sem += l_sem.item();
      lg.l_nce += v_nce;
      lg.l_smooth += v_smooth;
      ++nb;
    }
    if (nb > 0) {
      const double k = 1.0 / static_cast<double>(nb);
      lg.train_loss *= k;
      lg.l_sem *= k;
      lg.l_nce *= k;
      lg.l_smooth *= k;
    }
    const auto vm = evaluate(model, va, st);
    lg.val_r2_mean = vm.r2_mean;
    lg.val_mse_mean = vm.mse_mean;
    lg.val_pearson_mean = vm.pearson_mean;
    lg.val_cos_mean = vm.cos_mean;
    lg.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(lg);
    if (std::isfinite(vm.r2_mean) && vm.r2_mean > best) {
      best = vm.r2_mean;
      res.best_epoch = epoch;
      res.best_val = vm;
      res.best_params = snapshot(model.params());
    }
    if (on_epoch) on_epoch(lg);
  }
  if (res.best_params.empty()) {  // every epoch undefined; keep the last
    res.best_epoch = tcfg.epochs;
    res.best_params = snapshot(model.params());
  }
  return res;
}

inline std::string checkpoint_bytes(const TrainResult& r, const data::NormStats& st) {
  const json extra{{"best_epoch", r.best_epoch}, {"best_val_r2_mean", r.best_val.r2_mean}};
  return adapt::checkpoint_bytes(r.best_adapter(), st, r.train_config_digest, extra);
}

// --------------------------------------------------------------- ablation

struct AblationCell {
  std::string id;
  std::string description;
  adapt::Variant variant = adapt::Variant::Transformer;
  int d_model = 32, n_layers = 2, n_heads = 4;
  double lambda_nce = 0.01, tau = 0.1, dropout_p = 0.0, lambda_smooth = 0.0;
  bool reserved = false;  // row id kept, never trained

  adapt::AdapterConfig adapter_config(const adapt::AdapterConfig& base) const {
    adapt::AdapterConfig a = base;
    a.variant = variant;
    a.d_model = d_model;
    a.n_layers = n_layers;
    a.n_heads = n_heads;
    a.dropout_p = dropout_p;
    return a;
  }
  TrainConfig train_config(const TrainConfig& base, std::uint64_t seed) const {
    TrainConfig t = base;
    t.lambda_nce = lambda_nce;
    t.tau = tau;
    t.lambda_smooth = lambda_smooth;
    t.seed = seed;
    return t;
  }
  json to_json() const {
    return {{"id", id},           {"description", description}, {"variant", adapt::variant_name(variant)},
            {"d_model", d_model}, {"n_layers", n_layers},       {"n_heads", n_heads},
            {"lambda_nce", lambda_nce}, {"tau", tau},            {"dropout_p", dropout_p},
            {"lambda_smooth", lambda_smooth}, {"reserved", reserved}};
  }
  static AblationCell from_json(const json& j) {
    AblationCell c;
    c.id = j.at("id").get<std::string>();
    c.description = j.value("description", std::string{});
    c.variant = adapt::parse_variant(j.value("variant", std::string("transformer")));
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.lambda_nce = j.value("lambda_nce", c.lambda_nce);
    c.tau = j.value("tau", c.tau);
    c.dropout_p = j.value("dropout_p", c.dropout_p);
    c.lambda_smooth = j.value("lambda_smooth", c.lambda_smooth);
    c.reserved = j.value("reserved", false);
    return c;
  }
};

struct AblationSpec {
  std::vector<AblationCell> cells;
  std::vector<std::uint64_t> seeds{0, 1};
  adapt::AdapterConfig base_adapter{};
  TrainConfig base_train{};

  void validate() const {
    require(!cells.empty(), "AblationSpec: no cells");
    require(!seeds.empty(), "AblationSpec: no seeds");
    std::set<std::string> ids;
    for (const auto& c : cells) {
      require(ids.insert(c.id).second, "AblationSpec: duplicate cell id " + c.id);
      if (c.reserved) continue;
      c.adapter_config(base_adapter).validate();
      c.train_config(base_train, seeds.front()).validate();
    }
  }
  json to_json() const {
    json cs = json::array();
    for (const auto& c : cells) cs.push_back(c.to_json());
    return {{"cells", cs}, {"seeds", seeds}, {"adapter", base_adapter.to_json()}, {"train", base_train.to_json()}};
  }
  static AblationSpec from_json(const json& j) {
    AblationSpec s;
    for (const auto& c : j.at("cells")) s.cells.push_back(AblationCell::from_json(c));
    if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("adapter")) s.base_adapter = adapt::AdapterConfig::from_json(j.at("adapter"));
    if (j.contains("train")) s.base_train = TrainConfig::from_json(j.at("train"));
    s.validate();
    return s;
  }
};

/// Hyperparameter grid with the row ids of the reference ablation, scaled to
/// desk size: "large" is the default adapter (d 32, 2 layers), the base rows
/// use d 24 and "small" d 16 with one layer. Texture rows E1-E3 are reserved.
inline AblationSpec default_grid() {
  auto base = [](std::string id, std::string desc) {
    AblationCell c;
    c.id = std::move(id);
    c.description = std::move(desc);
    c.d_model = 24;
    c.n_layers = 2;
    c.lambda_nce = 0.1;
    return c;
  };
  auto large = [](std::string id, std::string desc) {
    AblationCell c;
    c.id = std::move(id);
    c.description = std::move(desc);
    c.lambda_nce = 0.0;
    return c;
  };
  AblationSpec s;
  AblationCell c;
  c = base("A2", "MSE only"), c.lambda_nce = 0, s.cells.push_back(c);
  c = base("A3", "NCE lambda=0.5"), c.lambda_nce = 0.5, s.cells.push_back(c);
  c = base("A4", "MSE + NCE + smooth lambda=0.05"), c.lambda_smooth = 0.05, s.cells.push_back(c);
  c = base("B1", "NCE temperature=0.5"), c.tau = 0.5, s.cells.push_back(c);
  c = base("B2", "NCE temperature=0.05"), c.tau = 0.05, s.cells.push_back(c);
  c = base("C1", "Small Transformer"), c.d_model = 16, c.n_layers = 1, s.cells.push_back(c);
  c = large("C2", "Large Transformer"), s.cells.push_back(c);
  c = base("C3", "Dropout=0.1"), c.dropout_p = 0.1, s.cells.push_back(c);
  c = large("D2", "Large + NCE lambda=0.01"), c.lambda_nce = 0.01, s.cells.push_back(c);
  c = large("D3", "Large + NCE lambda=0.05"), c.lambda_nce = 0.05, s.cells.push_back(c);
  c = large("D4", "Large + NCE lambda=0.2"), c.lambda_nce = 0.2, s.cells.push_back(c);
  c = large("D6", "Large + NCE lambda=0.5"), c.lambda_nce = 0.5, s.cells.push_back(c);
  c = large("D7", "Large + NCE lambda=0.1, temp=0.05"), c.lambda_nce = 0.1, c.tau = 0.05, s.cells.push_back(c);
  c = large("D8", "Large + NCE lambda=0.1, temp=0.5"), c.lambda_nce = 0.1, c.tau = 0.5, s.cells.push_back(c);
  c = large("D9", "Large + dropout=0.1"), c.dropout_p = 0.1, s.cells.push_back(c);
  for (const char* id : {"E1", "E2", "E3"}) {
    c = large(id, "texture loss (undefined, not run)");
    c.reserved = true;
    s.cells.push_back(c);
  }
  return s;
}

/// CoRMA, Transformer-MSE and the Conv1D baseline at default settings.
inline std::vector<AblationCell> structure_triple() {
  AblationCell corma, mse, conv;
  corma.id = "CoRMA";
  corma.description = "causal Transformer, MSE + NCE";
  mse.id = "Transformer-MSE";
  mse.description = "causal Transformer, MSE only";
  mse.lambda_nce = 0;
  conv.id = "RMA-Conv";
  conv.description = "Conv1D adapter, MSE only";
  conv.variant = adapt::Variant::Conv1D;
  conv.lambda_nce = 0;
  return {corma, mse, conv};
}

/// One train/val dataset (e.g. a task pair).
struct NamedData {
  std::string name;
  const data::WindowSet* train = nullptr;
  const data::WindowSet* val = nullptr;
};

struct CellSeedResult {
  std::uint64_t seed = 0;
  eval::MetricsReport val;
  double probe_u = 0;
  int best_epoch = 0;
};

struct AblationRow {
  std::string id, description, data_name;
  bool ok = false;
  std::string error;
  std::vector<CellSeedResult> seeds;
  double r2 = 0, pearson = 0, cos = 0, mse = 0, probe_u = 0;  // seed means
};

struct AblationOptions {
  bool probe = true;
  std::uint64_t probe_seed = 7;
  std::function<void(const std::string& id, std::uint64_t seed, const EpochLog&)> on_epoch;
};

inline AblationRow run_cell(const AblationCell& cell, const AblationSpec& spec, const NamedData& d,
                            const AblationOptions& opt = {}) {
  AblationRow row;
  row.id = cell.id;
  row.description = cell.description;
  row.data_name = d.name;
  if (cell.reserved) {
    row.error = "reserved";
    return row;
  }
  try {
    for (auto seed : spec.seeds) {
      const auto res = train(*d.train, *d.val, cell.adapter_config(spec.base_adapter),
                             cell.train_config(spec.base_train, seed), [&](const EpochLog& e) {
                               if (opt.on_epoch) opt.on_epoch(cell.id, seed, e);
                             });
      CellSeedResult s;
      s.seed = seed;
      s.val = res.best_val;
      s.best_epoch = res.best_epoch;
      if (opt.probe) {
        const auto p = eval::predict(res.best_adapter(), *d.val, d.val->stats);
        s.probe_u = eval::regime_probe(p.u, p.u_dim, eval::window_labels(*d.val), opt.probe_seed).accuracy;
      }
      row.seeds.push_back(s);
    }
    const double k = 1.0 / static_cast<double>(row.seeds.size());
    for (const auto& s : row.seeds) {
      row.r2 += k * s.val.r2_mean;
      row.pearson += k * s.val.pearson_mean;
      row.cos += k * s.val.cos_mean;
      row.mse += k * s.val.mse_mean;
      row.probe_u += k * s.probe_u;
    }
    row.ok = true;
  } catch (const std::exception& e) {
    row.error = e.what();
  }
  return row;
}

/// Trains every non-reserved cell on every dataset with the spec's seeds.
/// A failing cell is recorded and the grid continues.
inline std::vector<AblationRow> run_ablation(const AblationSpec& spec, const std::vector<NamedData>& datasets,
                                             const AblationOptions& opt = {}) {
  spec.validate();
  require(!datasets.empty(), "run_ablation: no datasets");
  std::vector<AblationRow> rows;
  for (const auto& cell : spec.cells)
    for (const auto& d : datasets) rows.push_back(run_cell(cell, spec, d, opt));
  return rows;
}

/// Mean rows across datasets, one per cell id, in first-seen order.
inline std::vector<AblationRow> mean_rows(const std::vector<AblationRow>& rows) {
  std::vector<AblationRow> out;
  std::map<std::string, std::size_t> at;
  std::map<std::string, std::size_t> n;
  for (const auto& r : rows) {
    if (!r.ok) continue;
    if (!at.count(r.id)) {
      at[r.id] = out.size();
      AblationRow m;
      m.id = r.id;
      m.description = r.description;
      m.data_name = "mean";
      m.ok = true;
      out.push_back(m);
    }
    auto& m = out[at[r.id]];
    m.r2 += r.r2;
    m.pearson += r.pearson;
    m.cos += r.cos;
    m.mse += r.mse;
    m.probe_u += r.probe_u;
    ++n[r.id];
  }
  for (auto& m : out) {
    const double k = 1.0 / static_cast<double>(n[m.id]);
    m.r2 *= k, m.pearson *= k, m.cos *= k, m.mse *= k, m.probe_u *= k;
  }
  return out;
}

/// Columns: ID, config, data, R2, Pearson, Cos-Sim, MSE, probe accuracy on u.
/// Failed and reserved rows keep their id with the cause in `status`.
inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << std::fixed << std::setprecision(4) << "id,config,data,r2,pearson,cos_sim,mse,probe_u,status\n";
  for (const auto& r : rows) {
    os << r.id << ",\"" << r.description << "\"," << r.data_name << ',';
    if (r.ok)
      os << r.r2 << ',' << r.pearson << ',' << r.cos << ',' << r.mse << ',' << r.probe_u << ",ok\n";
    else {
      std::string e = r.error;
      std::replace(e.begin(), e.end(), '"', '\'');
      os << ",,,,,\"" << e << "\"\n";
    }
  }
}

}  // namespace corma::train
