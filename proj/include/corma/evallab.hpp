#pragma once
// Validation metrics, Wilson intervals, run tallies, PCA exports, linear
// regime probes and the closed-loop latent-injection harness.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "corma/adapter.hpp"
#include "corma/common.hpp"
#include "corma/datakit.hpp"
#include "corma/numkit.hpp"
#include "corma/regimekit.hpp"
#include "corma/synthcontact.hpp"

namespace corma::eval {

using json = nlohmann::json;
using data::kZDim;
using regime::kNumRegimes;
using regime::RegimeLabel;

inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------- metrics

struct MetricsReport {
  std::size_t n = 0;
  std::array<double, kZDim> r2{}, pearson{}, mse{}, var{};
  std::array<bool, kZDim> defined{};
  double r2_mean = 0, pearson_mean = 0, mse_mean = 0, cos_mean = 0;
  bool has_undefined = false;  // some target dimension had zero variance

  json to_json() const {
    auto arr = [](const std::array<double, kZDim>& a) {
      json j = json::array();
      for (double v : a) j.push_back(std::isfinite(v) ? json(v) : json(nullptr));
      return j;
    };
    return {{"n", n},           {"r2", arr(r2)},           {"pearson", arr(pearson)},
            {"mse", arr(mse)},  {"var", arr(var)},         {"r2_mean", r2_mean},
            {"pearson_mean", pearson_mean}, {"mse_mean", mse_mean}, {"cos_mean", cos_mean},
            {"has_undefined", has_undefined}};
  }
};

/// Metrics of row-major [n x 6] predictions against targets, both in
/// standardized units. R2 is 1 - mse/var with var taken about the
/// evaluation-set mean, so the identity holds exactly.
inline MetricsReport metrics(const std::vector<double>& z_hat, const std::vector<double>& z) {
  require(z_hat.size() == z.size(), "metrics: prediction and target sizes differ");
  require(z.size() % kZDim == 0, "metrics: sizes must be multiples of 6");
  const std::size_t n = z.size() / kZDim;
  require(n >= 2, "metrics: need at least 2 samples");
  MetricsReport m;
  m.n = n;
  const double nd = static_cast<double>(n);
  std::size_t n_def = 0;
  for (std::size_t k = 0; k < kZDim; ++k) {
    double mt = 0, mp = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mt += z[i * kZDim + k];
      mp += z_hat[i * kZDim + k];
    }
    mt /= nd;
    mp /= nd;
    double sse = 0, sst = 0, spp = 0, spt = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = z[i * kZDim + k], p = z_hat[i * kZDim + k];
      sse += (p - t) * (p - t);
      sst += (t - mt) * (t - mt);
      spp += (p - mp) * (p - mp);
      spt += (p - mp) * (t - mt);
    }
    m.mse[k] = sse / nd;
    m.var[k] = sst / nd;
    m.mse_mean += m.mse[k] / static_cast<double>(kZDim);
    m.defined[k] = sst > 0;
    if (!m.defined[k]) {
      m.r2[k] = m.pearson[k] = kUndefined;
      m.has_undefined = true;
      continue;
    }
    m.r2[k] = 1.0 - m.mse[k] / m.var[k];
    m.pearson[k] = spp > 0 ? std::clamp(spt / std::sqrt(spp * sst), -1.0, 1.0) : 0.0;
    m.r2_mean += m.r2[k];
    m.pearson_mean += m.pearson[k];
    ++n_def;
  }
  if (n_def > 0) {
    m.r2_mean /= static_cast<double>(n_def);
    m.pearson_mean /= static_cast<double>(n_def);
  } else {
    m.r2_mean = m.pearson_mean = kUndefined;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0, a = 0, b = 0;
    for (std::size_t k = 0; k < kZDim; ++k) {
      const double p = z_hat[i * kZDim + k], t = z[i * kZDim + k];
      dot += p * t;
      a += p * p;
      b += t * t;
    }
    double c;
    if (a == 0 && b == 0) c = 1.0;
    else if (a == 0 || b == 0) c = 0.0;
    else c = std::clamp(dot / std::sqrt(a * b), -1.0, 1.0);
    m.cos_mean += c / nd;
  }
  return m;
}

inline void write_metrics_csv(std::ostream& os, const MetricsReport& m) {
  static const char* names[kZDim] = {"onset", "lateral", "guided", "dir_x", "dir_y", "jam"};
  os << std::setprecision(6) << "dim,r2,pearson,mse,var\n";
  auto cell = [&](double v) -> std::ostream& {
    if (std::isfinite(v)) os << v;
    else os << "undefined";
    return os;
  };
  for (std::size_t k = 0; k < kZDim; ++k) {
    os << names[k] << ',';
    cell(m.r2[k]) << ',';
    cell(m.pearson[k]) << ',' << m.mse[k] << ',' << m.var[k] << '\n';
  }
  os << "mean,";
  cell(m.r2_mean) << ',';
  cell(m.pearson_mean) << ',' << m.mse_mean << ",\n";
  os << "cosine," << m.cos_mean << ",,,\n";
}

// ----------------------------------------------------------------- Wilson

inline constexpr double kWilsonZ = 1.959964;

struct WilsonCI {
  long successes = 0, trials = 0;
  double point = 0, lo = 0, hi = 0;

  /// "12.5% [4.3%, 31.0%]"
  std::string str() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << 100 * point << "% [" << 100 * lo << "%, " << 100 * hi << "%]";
    return os.str();
  }
  json to_json() const {
    return {{"successes", successes}, {"trials", trials}, {"point", point}, {"lo", lo}, {"hi", hi}};
  }
};

inline WilsonCI wilson_ci(long successes, long trials) {
  if (trials < 1 || successes < 0 || successes > trials)
    throw InvalidArgument("wilson_ci: need 0 <= successes <= trials and trials >= 1, got " +
                          std::to_string(successes) + "/" + std::to_string(trials));
  const double n = static_cast<double>(trials), p = static_cast<double>(successes) / n, z = kWilsonZ;
  const double den = 1.0 + z * z / n;
  const double centre = (p + z * z / (2.0 * n)) / den;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / den;
  WilsonCI ci{successes, trials, p, std::clamp(centre - half, 0.0, p), std::clamp(centre + half, p, 1.0)};
  return ci;
}

// ------------------------------------------------------------- run tally

struct RunRow {
  std::string run_id;
  bool insertion_verified = false;
};

/// Successes are runs whose flag is ever true; trials are distinct run ids.
inline std::pair<long, long> run_success(const std::vector<RunRow>& rows) {
  std::map<std::string, bool> best;
  for (const auto& r : rows) best[r.run_id] = best[r.run_id] || r.insertion_verified;
  long s = 0;
  for (const auto& [id, ok] : best) s += ok ? 1 : 0;
  return {s, static_cast<long>(best.size())};
}

inline std::vector<RunRow> run_rows(const std::vector<sim::Episode>& eps) {
  std::vector<RunRow> rows;
  for (const auto& ep : eps)
    for (std::size_t t = 0; t < ep.steps.size(); ++t) rows.push_back({ep.run_id, ep.success && t + 1 == ep.steps.size()});
  return rows;
}

// -------------------------------------------------------------------- PCA

struct PcaResult {
  std::size_t n = 0, k = 0;
  std::vector<double> proj;       // n x k
  std::vector<double> explained;  // k fractions of total variance
  std::vector<double> components; // k x D, unit rows
  bool degenerate = false;
};

/// Centred SVD projection onto the top-k components. Each component's
/// largest-magnitude loading is made positive.
inline PcaResult pca_project(const std::vector<double>& x, std::size_t n, std::size_t D, std::size_t k) {
  require(x.size() == n * D, "pca_project: data size does not match n x D");
  require(k >= 1 && n > k && k <= D, "pca_project: need n > k >= 1 and k <= D");
  Eigen::MatrixXd X = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      x.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(D));
  X.rowwise() -= X.colwise().mean();
  PcaResult r;
  r.n = n;
  r.k = k;
  r.proj.assign(n * k, 0.0);
  r.explained.assign(k, 0.0);
  r.components.assign(k * D, 0.0);
  if (X.squaredNorm() == 0.0) {
    r.degenerate = true;
    return r;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinV);
  const Eigen::VectorXd s = svd.singularValues();
  const double total = s.squaredNorm();
  Eigen::MatrixXd V = svd.matrixV().leftCols(static_cast<Eigen::Index>(k));
  for (Eigen::Index c = 0; c < V.cols(); ++c) {
    Eigen::Index arg = 0;
    V.col(c).cwiseAbs().maxCoeff(&arg);
    if (V(arg, c) < 0) V.col(c) *= -1.0;
    r.explained[static_cast<std::size_t>(c)] = s(c) * s(c) / total;
  }
  const Eigen::MatrixXd P = X * V;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) r.proj[i * k + c] = P(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t d = 0; d < D; ++d) r.components[c * D + d] = V(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(c));
  return r;
}

// ------------------------------------------------------------------ probe

struct ProbeResult {
  double accuracy = 0;
  std::array<std::array<long, kNumRegimes>, kNumRegimes> confusion{};  // [true][pred]
  std::size_t n_train = 0, n_test = 0, per_class = 0;
};

struct ProbeOptions {
  int epochs = 200;
  double lr = 0.1;
  bool balance = true;              // downsample every class to the rarest one
  std::size_t max_per_class = 3000; // cap after balancing
};

/// Linear multinomial logistic probe on row-major [n x D] features. Classes
/// are balanced by seeded downsampling, split 80/20 per class, standardized
/// with train statistics and fitted by full-batch gradient descent.
inline ProbeResult regime_probe(const std::vector<double>& feats, std::size_t D, const std::vector<RegimeLabel>& labels,
                                std::uint64_t seed, const ProbeOptions& opt = {}) {
  const std::size_t n = labels.size();
  require(D >= 1 && feats.size() == n * D, "regime_probe: features must be n x D");
  std::array<std::vector<std::size_t>, kNumRegimes> by;
  for (std::size_t i = 0; i < n; ++i) by[static_cast<std::size_t>(labels[i])].push_back(i);
  std::size_t present = 0, minc = n;
  for (const auto& v : by)
    if (!v.empty()) {
      ++present;
      minc = std::min(minc, v.size());
    }
  if (present < 2) throw InvalidArgument("regime_probe: need at least 2 classes, got " + std::to_string(present));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> tr, te;
  std::size_t take_n = opt.balance ? std::min(minc, opt.max_per_class) : 0;
  require(!opt.balance || take_n >= 2, "regime_probe: rarest class has fewer than 2 samples");
  ProbeResult res;
  res.per_class = take_n;
  for (auto& v : by) {
    if (v.empty()) continue;
    std::shuffle(v.begin(), v.end(), rng);
    const std::size_t take = opt.balance ? take_n : v.size();
    const std::size_t nte = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(take))));
    for (std::size_t j = 0; j < take; ++j) (j < nte ? te : tr).push_back(v[j]);
  }
  require(!tr.empty() && !te.empty(), "regime_probe: empty split");
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());

  std::vector<double> mu(D, 0.0), sd(D, 0.0);
  for (auto i : tr)
    for (std::size_t d = 0; d < D; ++d) mu[d] += feats[i * D + d];
  for (auto& v : mu) v /= static_cast<double>(tr.size());
  for (auto i : tr)
    for (std::size_t d = 0; d < D; ++d) sd[d] += std::pow(feats[i * D + d] - mu[d], 2);
  for (auto& v : sd) v = std::max(std::sqrt(v / static_cast<double>(tr.size())), 1e-8);
  auto design = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> x(idx.size() * D);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t d = 0; d < D; ++d) x[r * D + d] = (feats[idx[r] * D + d] - mu[d]) / sd[d];
    return nk::Tensor::from({idx.size(), D}, std::move(x));
  };
  const nk::Tensor xtr = design(tr), xte = design(te);
  const std::size_t C = kNumRegimes;
  std::vector<double> onehot(tr.size() * C, 0.0);
  for (std::size_t r = 0; r < tr.size(); ++r)
    onehot[r * C + static_cast<std::size_t>(labels[tr[r]])] = 1.0 / static_cast<double>(tr.size());

  nk::ParamList ps{{"w", nk::Tensor::zeros({D, C}, true)}, {"b", nk::Tensor::zeros({C}, true)}};
  for (int e = 0; e < opt.epochs; ++e) {
    nk::zero_grads(ps);
    const nk::Tensor logits = nk::add(nk::matmul(xtr, ps[0].value), ps[1].value);
    const nk::Tensor loss = nk::sub(nk::mean(nk::logsumexp(logits)), nk::weighted_sum(logits, onehot));
    nk::backward(loss);
    for (auto& p : ps) {
      auto& w = p.value.data();
      const auto& g = p.value.grad();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= opt.lr * g[i];
    }
  }
  nk::NoGradGuard ng;
  const nk::Tensor logits = nk::add(nk::matmul(xte, ps[0].value), ps[1].value);
  long correct = 0;
  for (std::size_t r = 0; r < te.size(); ++r) {
    const double* l = logits.data().data() + r * C;
    const auto pred = static_cast<std::size_t>(std::max_element(l, l + C) - l);
    const auto truth = static_cast<std::size_t>(labels[te[r]]);
    ++res.confusion[truth][pred];
    correct += pred == truth;
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(te.size());
  res.n_train = tr.size();
  res.n_test = te.size();
  return res;
}

struct ProbeReport {
  ProbeResult on_z, on_zhat, on_u;
  double chance = 0.25;
};

inline void write_probe_csv(std::ostream& os, const ProbeReport& r) {
  os << std::setprecision(6) << "space,accuracy,chance,n_train,n_test,confusion\n";
  auto row = [&](const char* name, const ProbeResult& p) {
    os << name << ',' << p.accuracy << ',' << r.chance << ',' << p.n_train << ',' << p.n_test << ',';
    for (std::size_t i = 0; i < kNumRegimes; ++i)
      for (std::size_t j = 0; j < kNumRegimes; ++j) os << (i + j ? " " : "") << p.confusion[i][j];
    os << '\n';
  };
  row("z", r.on_z);
  row("zhat", r.on_zhat);
  row("u", r.on_u);
}

// ------------------------------------------------------------- silhouette

/// Mean silhouette of labeled points under Euclidean distance. Points whose
/// cluster is a singleton score 0.
inline double silhouette(const std::vector<double>& x, std::size_t D, const std::vector<RegimeLabel>& labels) {
  const std::size_t n = labels.size();
  require(x.size() == n * D, "silhouette: features must be n x D");
  std::array<std::size_t, kNumRegimes> cnt{};
  for (auto l : labels) ++cnt[static_cast<std::size_t>(l)];
  std::size_t present = 0;
  for (auto c : cnt) present += c > 0;
  require(present >= 2, "silhouette: need at least 2 clusters");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, kNumRegimes> s{};
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d2 = 0;
      for (std::size_t d = 0; d < D; ++d) d2 += (x[i * D + d] - x[j * D + d]) * (x[i * D + d] - x[j * D + d]);
      s[static_cast<std::size_t>(labels[j])] += std::sqrt(d2);
    }
    const auto li = static_cast<std::size_t>(labels[i]);
    if (cnt[li] < 2) continue;
    const double a = s[li] / static_cast<double>(cnt[li] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < kNumRegimes; ++c)
      if (c != li && cnt[c] > 0) b = std::min(b, s[c] / static_cast<double>(cnt[c]));
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

/// Seeded class-balanced subsample (at most `per_class` per regime).
inline std::vector<std::size_t> balanced_subsample(const std::vector<RegimeLabel>& labels, std::size_t per_class,
                                                   std::uint64_t seed) {
  std::array<std::vector<std::size_t>, kNumRegimes> by;
  for (std::size_t i = 0; i < labels.size(); ++i) by[static_cast<std::size_t>(labels[i])].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (auto& v : by) {
    std::shuffle(v.begin(), v.end(), rng);
    out.insert(out.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(per_class, v.size())));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// -------------------------------------------------------------- inference

struct Predictions {
  std::vector<double> z_hat;  // n x 6, standardized
  std::vector<double> u;      // n x u_dim
  std::size_t u_dim = 0;
};

/// Eval-mode adapter outputs for every sample of a window set.
inline Predictions predict(const adapt::Adapter& a, const data::WindowSet& ws, const data::NormStats& st,
                           std::size_t chunk = 512) {
  nk::NoGradGuard ng;
  Predictions p;
  p.u_dim = static_cast<std::size_t>(a.config().u_dim);
  p.z_hat.reserve(ws.size() * kZDim);
  p.u.reserve(ws.size() * p.u_dim);
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < ws.size(); s += chunk) {
    idx.clear();
    for (std::size_t i = s; i < std::min(ws.size(), s + chunk); ++i) idx.push_back(i);
    const auto out = a.forward(adapt::make_batch(ws, idx, st));
    p.z_hat.insert(p.z_hat.end(), out.z_hat.data().begin(), out.z_hat.data().end());
    p.u.insert(p.u.end(), out.u.data().begin(), out.u.data().end());
  }
  return p;
}

inline std::vector<double> standardized_targets(const data::WindowSet& ws, const data::NormStats& st) {
  std::vector<double> z;
  z.reserve(ws.size() * kZDim);
  for (const auto& w : ws.samples) {
    const auto s = st.standardize_z(w.z_target);
    z.insert(z.end(), s.begin(), s.end());
  }
  return z;
}

inline std::vector<RegimeLabel> window_labels(const data::WindowSet& ws) {
  std::vector<RegimeLabel> l;
  l.reserve(ws.size());
  for (const auto& w : ws.samples) l.push_back(w.regime);
  return l;
}

/// Probes on oracle z, predicted z-hat and the contrastive embedding u.
inline ProbeReport probe_report(const data::WindowSet& ws, const Predictions& p, const data::NormStats& st,
                                std::uint64_t seed, const ProbeOptions& opt = {}) {
  const auto labels = window_labels(ws);
  ProbeReport r;
  r.on_z = regime_probe(standardized_targets(ws, st), kZDim, labels, seed, opt);
  r.on_zhat = regime_probe(p.z_hat, kZDim, labels, seed, opt);
  r.on_u = regime_probe(p.u, p.u_dim, labels, seed, opt);
  return r;
}

// --------------------------------------------------------- embedding export

struct EmbeddingExport {
  PcaResult zhat, u;
  std::vector<std::size_t> rows;  // window indices plotted
  std::vector<RegimeLabel> regimes;
  std::vector<sim::TaskKind> tasks;
  double silhouette_zhat = 0, silhouette_u = 0;
};

/// PCA of z-hat and u on a class-balanced subsample, with silhouette
/// scores of regime clusters in each full space.
inline EmbeddingExport embed(const data::WindowSet& ws, const Predictions& p, std::uint64_t seed,
                             std::size_t per_class = 400) {
  EmbeddingExport e;
  const auto labels = window_labels(ws);
  e.rows = balanced_subsample(labels, per_class, seed);
  require(e.rows.size() > 2, "embed: too few windows");
  std::vector<double> zs, us;
  for (auto i : e.rows) {
    zs.insert(zs.end(), p.z_hat.begin() + static_cast<std::ptrdiff_t>(i * kZDim),
              p.z_hat.begin() + static_cast<std::ptrdiff_t>((i + 1) * kZDim));
    us.insert(us.end(), p.u.begin() + static_cast<std::ptrdiff_t>(i * p.u_dim),
              p.u.begin() + static_cast<std::ptrdiff_t>((i + 1) * p.u_dim));
    e.regimes.push_back(labels[i]);
    e.tasks.push_back(ws.samples[i].task);
  }
  e.zhat = pca_project(zs, e.rows.size(), kZDim, 2);
  e.u = pca_project(us, e.rows.size(), p.u_dim, 2);
  e.silhouette_zhat = silhouette(zs, kZDim, e.regimes);
  e.silhouette_u = silhouette(us, p.u_dim, e.regimes);
  return e;
}

inline void write_embedding_csv(std::ostream& os, const EmbeddingExport& e) {
  os << std::setprecision(8) << "pc1,pc2,regime,task,space\n";
  for (const auto* sp : {&e.zhat, &e.u}) {
    const char* name = sp == &e.zhat ? "zhat" : "u";
    for (std::size_t i = 0; i < sp->n; ++i)
      os << sp->proj[i * 2] << ',' << sp->proj[i * 2 + 1] << ',' << regime::regime_name(e.regimes[i]) << ','
         << sim::task_name(e.tasks[i]) << ',' << name << '\n';
  }
}

/// Two scatter panels (z-hat left, u right) colored by regime.
inline std::string embedding_svg(const EmbeddingExport& e) {
  static const char* colors[kNumRegimes] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52"};
  const double W = 420, Hh = 420, m = 36;
  std::ostringstream os;
  os << std::setprecision(5);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 2 * W << "\" height=\"" << Hh + 30
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  auto panel = [&](const PcaResult& p, double x0, const std::string& title) {
    double lo[2] = {0, 0}, hi[2] = {0, 0};
    for (std::size_t i = 0; i < p.n; ++i)
      for (int c = 0; c < 2; ++c) {
        lo[c] = std::min(lo[c], p.proj[i * 2 + static_cast<std::size_t>(c)]);
        hi[c] = std::max(hi[c], p.proj[i * 2 + static_cast<std::size_t>(c)]);
      }
    for (int c = 0; c < 2; ++c)
      if (hi[c] - lo[c] < 1e-12) hi[c] = lo[c] + 1.0;
    os << "<g>\n<rect x=\"" << x0 + m << "\" y=\"" << m << "\" width=\"" << W - 2 * m << "\" height=\"" << Hh - 2 * m
       << "\" fill=\"none\" stroke=\"#888\"/>\n";
    os << "<text x=\"" << x0 + W / 2 << "\" y=\"22\" text-anchor=\"middle\">" << title << " (PC1 "
       << std::setprecision(3) << 100 * p.explained[0] << "%, PC2 " << 100 * p.explained[1] << "%)</text>\n"
       << std::setprecision(5);
    for (std::size_t i = 0; i < p.n; ++i) {
      const double px = x0 + m + (p.proj[i * 2] - lo[0]) / (hi[0] - lo[0]) * (W - 2 * m);
      const double py = Hh - m - (p.proj[i * 2 + 1] - lo[1]) / (hi[1] - lo[1]) * (Hh - 2 * m);
      os << "<circle cx=\"" << px << "\" cy=\"" << py << "\" r=\"2\" fill=\""
         << colors[static_cast<std::size_t>(e.regimes[i])] << "\" fill-opacity=\"0.6\"/>\n";
    }
    os << "</g>\n";
  };
  panel(e.zhat, 0, "z-hat");
  panel(e.u, W, "u");
  for (int c = 0; c < kNumRegimes; ++c) {
    const double x = 40 + 150.0 * c;
    os << "<circle cx=\"" << x << "\" cy=\"" << Hh + 12 << "\" r=\"5\" fill=\"" << colors[c] << "\"/>"
       << "<text x=\"" << x + 10 << "\" y=\"" << Hh + 16 << "\">" << regime::regime_name(static_cast<RegimeLabel>(c))
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ------------------------------------------------------------ closed loop

enum class Mode { Oracle, Student, ZeroZ };

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Oracle: return "oracle";
    case Mode::Student: return "student";
    case Mode::ZeroZ: return "zeroz";
  }
  return "?";
}
inline Mode parse_mode(const std::string& s) {
  if (s == "oracle") return Mode::Oracle;
  if (s == "student") return Mode::Student;
  if (s == "zeroz" || s == "zero") return Mode::ZeroZ;
  throw InvalidArgument("unknown mode '" + s + "' (expected oracle|student|zeroz)");
}

/// Online context estimate from the trailing window of deployable
/// features. Re-encodes the whole window every step.
class StudentContext {
 public:
  StudentContext(const adapt::Adapter& a, const data::NormStats& st) : a_(a), st_(st) {}

  sim::PrivilegedZ operator()(const sim::ObservationVec& obs) {
    const auto H = static_cast<std::size_t>(a_.config().history_len);
    hist_.push_back(data::feature_row(obs));
    if (hist_.size() > H) hist_.pop_front();
    std::vector<double> f(H * data::kFeatureWidth, 0.0);
    const int pad = static_cast<int>(H - hist_.size());
    for (std::size_t r = 0; r < hist_.size(); ++r)
      std::copy(hist_[r].begin(), hist_[r].end(), f.begin() + static_cast<std::ptrdiff_t>((pad + r) * data::kFeatureWidth));
    st_.standardize_window(f.data(), static_cast<int>(H), pad);
    adapt::Batch b;
    b.features = nk::Tensor::from({1, H, data::kFeatureWidth}, std::move(f));
    b.pad_len = {pad};
    nk::NoGradGuard ng;
    const auto out = a_.forward(b);
    std::array<double, kZDim> zs{};
    std::copy(out.z_hat.data().begin(), out.z_hat.data().end(), zs.begin());
    return sim::PrivilegedZ::from_array(st_.destandardize_z(zs)).clamped();
  }

 private:
  const adapt::Adapter& a_;
  const data::NormStats& st_;
  std::deque<std::array<double, data::kFeatureWidth>> hist_;
};

struct ClosedLoopConfig {
  sim::SimConfig sim;
  std::vector<sim::TaskKind> tasks{sim::TaskKind::PegLike};
  std::vector<Mode> modes{Mode::Oracle, Mode::Student, Mode::ZeroZ};
  int n_episodes = 200;
  std::uint64_t seed_base = 100000;
  sim::ControllerGains gains{};
};

struct ModeTally {
  Mode mode = Mode::Oracle;
  sim::TaskKind task = sim::TaskKind::PegLike;
  WilsonCI ci;
};

struct ClosedLoopReport {
  std::vector<std::uint64_t> seeds;
  std::vector<ModeTally> rows;  // per (mode, task)
  std::map<Mode, WilsonCI> overall;
  std::vector<sim::Episode> episodes;  // only when traces are kept

  const WilsonCI& of(Mode m) const {
    auto it = overall.find(m);
    if (it == overall.end()) throw InvalidArgument("closed-loop report has no mode " + mode_name(m));
    return it->second;
  }
};

/// Runs every mode on the same seed list per task. Student mode needs an
/// adapter whose normalization digest matches `stats`.
inline ClosedLoopReport closed_loop_eval(const ClosedLoopConfig& cfg, const adapt::Adapter* student,
                                         const data::NormStats* stats, bool keep_traces = false) {
  cfg.sim.validate();
  require(cfg.n_episodes >= 1, "closed_loop_eval: need at least one episode");
  const bool needs_student = std::find(cfg.modes.begin(), cfg.modes.end(), Mode::Student) != cfg.modes.end();
  if (needs_student && (student == nullptr || stats == nullptr))
    throw InvalidArgument("closed_loop_eval: student mode needs an adapter and its normalization stats");
  ClosedLoopReport rep;
  for (int i = 0; i < cfg.n_episodes; ++i) rep.seeds.push_back(cfg.seed_base + static_cast<std::uint64_t>(i));
  std::map<Mode, std::vector<RunRow>> all;
  for (Mode m : cfg.modes) {
    for (auto task : cfg.tasks) {
      std::vector<sim::Episode> eps;
      for (auto seed : rep.seeds) {
        sim::ContextSource src;
        std::optional<StudentContext> sc;
        switch (m) {
          case Mode::Oracle: src = [](const sim::ObservationVec&, const sim::PrivilegedZ& z) { return z; }; break;
          case Mode::ZeroZ: src = [](const sim::ObservationVec&, const sim::PrivilegedZ&) { return sim::PrivilegedZ{}; }; break;
          case Mode::Student:
            sc.emplace(*student, *stats);
            src = [&sc](const sim::ObservationVec& o, const sim::PrivilegedZ&) { return (*sc)(o); };
            break;
        }
        eps.push_back(sim::controller_rollout(cfg.sim, task, seed, src, cfg.gains));
      }
      const auto rows = run_rows(eps);
      const auto [s, n] = run_success(rows);
      rep.rows.push_back({m, task, wilson_ci(s, n)});
      auto& acc = all[m];
      acc.insert(acc.end(), rows.begin(), rows.end());
      if (keep_traces) rep.episodes.insert(rep.episodes.end(), eps.begin(), eps.end());
    }
    const auto [s, n] = run_success(all[m]);
    rep.overall[m] = wilson_ci(s, n);
  }
  return rep;
}

/// One row per (mode, task) and one total per mode: counts, success rate and CI.
inline void write_closed_loop_csv(std::ostream& os, const ClosedLoopReport& r) {
  os << std::fixed << std::setprecision(4) << "mode,task,successes,trials,sim_success,ci_lo,ci_hi,ci\n";
  for (const auto& t : r.rows)
    os << mode_name(t.mode) << ',' << sim::task_name(t.task) << ',' << t.ci.successes << ',' << t.ci.trials << ','
       << t.ci.point << ',' << t.ci.lo << ',' << t.ci.hi << ",\"" << t.ci.str() << "\"\n";
  for (const auto& [m, ci] : r.overall)
    os << mode_name(m) << ",all," << ci.successes << ',' << ci.trials << ',' << ci.point << ',' << ci.lo << ','
       << ci.hi << ",\"" << ci.str() << "\"\n";
}

}  // namespace corma::eval
