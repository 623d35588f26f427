#pragma once
// History windows over episodes, train-split normalization, episode-level
// splits and the binary WindowSet container.

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "corma/common.hpp"
#include "corma/regimekit.hpp"
#include "corma/synthcontact.hpp"

namespace corma::data {

using json = nlohmann::json;
using regime::RegimeLabel;
using sim::Episode;
using sim::TaskKind;

inline constexpr std::size_t kObsWidth = sim::ObservationVec::kSize;
inline constexpr std::size_t kFeatureWidth = kObsWidth + 4;  // obs + previous action
inline constexpr std::size_t kZDim = sim::PrivilegedZ::kSize;
inline constexpr double kStdFloor = 1e-8;

struct WindowSpec {
  int history_len = 32;
  int stride = 4;
  int min_context = 1;  // real steps required in a window

  void validate() const {
    require(history_len >= 1, "WindowSpec: history_len must be >= 1");
    require(stride >= 1, "WindowSpec: stride must be >= 1");
    require(min_context >= 1 && min_context <= history_len, "WindowSpec: min_context must be in [1, H]");
  }
  json to_json() const { return {{"history_len", history_len}, {"stride", stride}, {"min_context", min_context}}; }
  static WindowSpec from_json(const json& j) {
    WindowSpec s{j.at("history_len").get<int>(), j.at("stride").get<int>(), j.value("min_context", 1)};
    s.validate();
    return s;
  }
};

struct WindowSample {
  std::vector<double> features;  // H x F row-major, raw units, pad rows zero
  std::array<double, kZDim> z_target{};
  RegimeLabel regime = RegimeLabel::Free;
  TaskKind task = TaskKind::PegLike;
  int pad_len = 0;
  std::uint32_t episode = 0;  // index into the owning set's run_ids
  int final_step = 0;
};

/// Deployable feature row of step t: the observation followed by the
/// previous action.
inline std::array<double, kFeatureWidth> feature_row(const sim::ObservationVec& obs) {
  std::array<double, kFeatureWidth> row{};
  const auto o = obs.to_array();
  const auto a = obs.prev_action.to_array();
  std::copy(o.begin(), o.end(), row.begin());
  std::copy(a.begin(), a.end(), row.begin() + kObsWidth);
  return row;
}

/// Final steps of the windows of an episode of length L: L-1, L-1-stride, ...
inline std::vector<int> window_finals(int length, const WindowSpec& spec) {
  std::vector<int> out;
  for (int t = length - 1; t >= spec.min_context - 1; t -= spec.stride) out.push_back(t);
  std::reverse(out.begin(), out.end());
  return out;
}

/// Builds the window ending at `final` from a list of per-step rows.
template <typename RowFn>
void fill_window(std::vector<double>& feat, int H, int final, RowFn&& row_of, int& pad_len) {
  feat.assign(static_cast<std::size_t>(H) * kFeatureWidth, 0.0);
  const int first = final - H + 1;
  pad_len = std::max(0, -first);
  for (int r = pad_len; r < H; ++r) {
    const auto row = row_of(first + r);
    std::copy(row.begin(), row.end(), feat.begin() + static_cast<std::ptrdiff_t>(r) * kFeatureWidth);
  }
}

struct WindowCounts {
  std::array<std::size_t, regime::kNumRegimes> per_regime{};
  std::size_t empty_inputs = 0;
  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : per_regime) n += c;
    return n;
  }
};

/// Windows at every stride-th step of each episode, anchored at the episode
/// end. `episode_base` offsets the recorded episode index.
inline std::vector<WindowSample> window_episodes(const std::vector<Episode>& eps, const WindowSpec& spec,
                                                 const regime::RegimeThresholds& th, WindowCounts* counts = nullptr,
                                                 std::uint32_t episode_base = 0) {
  spec.validate();
  std::vector<WindowSample> out;
  if (eps.empty()) {
    if (counts != nullptr) ++counts->empty_inputs;
    return out;
  }
  for (std::size_t e = 0; e < eps.size(); ++e) {
    const auto& ep = eps[e];
    const auto labels = regime::label_episode(ep, th);
    const int L = static_cast<int>(ep.steps.size());
    for (int final : window_finals(L, spec)) {
      WindowSample w;
      fill_window(w.features, spec.history_len, final,
                  [&](int t) { return feature_row(ep.steps[static_cast<std::size_t>(t)].obs); }, w.pad_len);
      w.z_target = ep.steps[static_cast<std::size_t>(final)].priv_z.to_array();
      w.regime = labels[static_cast<std::size_t>(final)];
      w.task = ep.task;
      w.episode = episode_base + static_cast<std::uint32_t>(e);
      w.final_step = final;
      if (counts != nullptr) ++counts->per_regime[static_cast<std::size_t>(w.regime)];
      out.push_back(std::move(w));
    }
  }
  return out;
}

// ------------------------------------------------------------ normalizer

struct NormStats {
  std::array<double, kFeatureWidth> feat_mean{}, feat_std{};
  std::array<double, kZDim> z_mean{}, z_std{};

  json to_json() const {
    return {{"feat_mean", feat_mean}, {"feat_std", feat_std}, {"z_mean", z_mean}, {"z_std", z_std}};
  }
  static NormStats from_json(const json& j) {
    NormStats s;
    s.feat_mean = j.at("feat_mean").get<decltype(s.feat_mean)>();
    s.feat_std = j.at("feat_std").get<decltype(s.feat_std)>();
    s.z_mean = j.at("z_mean").get<decltype(s.z_mean)>();
    s.z_std = j.at("z_std").get<decltype(s.z_std)>();
    return s;
  }
  /// Digest over the exact bit patterns, independent of JSON float printing.
  std::string digest() const {
    std::ostringstream os;
    for (double v : feat_mean) le::put(os, v);
    for (double v : feat_std) le::put(os, v);
    for (double v : z_mean) le::put(os, v);
    for (double v : z_std) le::put(os, v);
    return sha256_hex(os.str());
  }
  bool operator==(const NormStats&) const = default;

  std::array<double, kZDim> standardize_z(const std::array<double, kZDim>& z) const {
    std::array<double, kZDim> o{};
    for (std::size_t k = 0; k < kZDim; ++k) o[k] = (z[k] - z_mean[k]) / z_std[k];
    return o;
  }
  std::array<double, kZDim> destandardize_z(const std::array<double, kZDim>& z) const {
    std::array<double, kZDim> o{};
    for (std::size_t k = 0; k < kZDim; ++k) o[k] = z[k] * z_std[k] + z_mean[k];
    return o;
  }
  /// Standardizes a raw window in place; pad rows stay zero.
  void standardize_window(double* feat, int H, int pad_len) const {
    for (int r = pad_len; r < H; ++r)
      for (std::size_t c = 0; c < kFeatureWidth; ++c) {
        double& v = feat[static_cast<std::size_t>(r) * kFeatureWidth + c];
        v = (v - feat_mean[c]) / feat_std[c];
      }
  }
};

/// Mean and population std over non-pad rows (features) and over targets.
/// Accumulation is two-pass for accuracy.
inline NormStats fit_normalizer(const std::vector<WindowSample>& train, int H) {
  require(!train.empty(), "fit_normalizer: empty training set");
  NormStats s;
  std::array<double, kFeatureWidth> sum{}, sq{};
  std::size_t rows = 0;
  for (const auto& w : train)
    for (int r = w.pad_len; r < H; ++r) {
      ++rows;
      for (std::size_t c = 0; c < kFeatureWidth; ++c) sum[c] += w.features[static_cast<std::size_t>(r) * kFeatureWidth + c];
    }
  require(rows > 0, "fit_normalizer: all rows are padding");
  for (std::size_t c = 0; c < kFeatureWidth; ++c) s.feat_mean[c] = sum[c] / static_cast<double>(rows);
  for (const auto& w : train)
    for (int r = w.pad_len; r < H; ++r)
      for (std::size_t c = 0; c < kFeatureWidth; ++c) {
        const double d = w.features[static_cast<std::size_t>(r) * kFeatureWidth + c] - s.feat_mean[c];
        sq[c] += d * d;
      }
  for (std::size_t c = 0; c < kFeatureWidth; ++c)
    s.feat_std[c] = std::max(kStdFloor, std::sqrt(sq[c] / static_cast<double>(rows)));

  std::array<double, kZDim> zs{}, zq{};
  for (const auto& w : train)
    for (std::size_t k = 0; k < kZDim; ++k) zs[k] += w.z_target[k];
  const double n = static_cast<double>(train.size());
  for (std::size_t k = 0; k < kZDim; ++k) s.z_mean[k] = zs[k] / n;
  for (const auto& w : train)
    for (std::size_t k = 0; k < kZDim; ++k) zq[k] += (w.z_target[k] - s.z_mean[k]) * (w.z_target[k] - s.z_mean[k]);
  for (std::size_t k = 0; k < kZDim; ++k) s.z_std[k] = std::max(kStdFloor, std::sqrt(zq[k] / n));
  return s;
}

// -------------------------------------------------------------- WindowSet

struct WindowSet {
  WindowSpec spec;
  std::vector<WindowSample> samples;
  NormStats stats;
  std::string split_tag;  // "train" | "val"
  std::string source_digest;
  std::vector<std::string> run_ids;  // episode index -> run_id

  int H() const { return spec.history_len; }
  std::size_t size() const { return samples.size(); }

  std::array<std::size_t, regime::kNumRegimes> regime_counts() const {
    std::array<std::size_t, regime::kNumRegimes> c{};
    for (const auto& w : samples) ++c[static_cast<std::size_t>(w.regime)];
    return c;
  }
};

/// Digest of a list of episodes through their canonical JSONL form.
inline std::string episodes_digest(const std::vector<Episode>& eps) {
  std::ostringstream os;
  sim::write_episodes_jsonl(os, eps);
  return sha256_hex(os.str());
}

/// Episode-level split, stratified by task, with both sets normalized by
/// train statistics.
inline std::pair<WindowSet, WindowSet> make_splits(const std::vector<Episode>& eps, double val_fraction,
                                                   std::uint64_t seed, const WindowSpec& spec = {},
                                                   const regime::RegimeThresholds& th = {}) {
  require(val_fraction > 0.0 && val_fraction < 1.0, "make_splits: val_fraction must be in (0, 1)");
  require(eps.size() >= 2, "make_splits: need at least 2 episodes");
  spec.validate();
  std::map<int, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < eps.size(); ++i) by_task[static_cast<int>(eps[i].task)].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> tr_idx, va_idx;
  for (auto& [task, idx] : by_task) {
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(idx[i - 1], idx[pick(rng)]);
    }
    auto nv = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
    if (idx.size() >= 2) nv = std::clamp<std::size_t>(nv, 1, idx.size() - 1);
    for (std::size_t k = 0; k < idx.size(); ++k) (k < nv ? va_idx : tr_idx).push_back(idx[k]);
  }
  require(!tr_idx.empty() && !va_idx.empty(), "make_splits: a split came out empty");
  std::sort(tr_idx.begin(), tr_idx.end());
  std::sort(va_idx.begin(), va_idx.end());

  const std::string digest = episodes_digest(eps);
  auto build = [&](const std::vector<std::size_t>& idx, const char* tag) {
    WindowSet ws;
    ws.spec = spec;
    ws.split_tag = tag;
    ws.source_digest = digest;
    std::vector<Episode> sub;
    sub.reserve(idx.size());
    for (auto i : idx) {
      sub.push_back(eps[i]);
      ws.run_ids.push_back(eps[i].run_id);
    }
    ws.samples = window_episodes(sub, spec, th);
    return ws;
  };
  WindowSet train = build(tr_idx, "train"), val = build(va_idx, "val");
  require(!train.samples.empty(), "make_splits: no training windows");
  train.stats = fit_normalizer(train.samples, spec.history_len);
  val.stats = train.stats;
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------- binary format

inline constexpr std::uint32_t kWindowSetVersion = 1;

inline void write_windowset(std::ostream& os, const WindowSet& ws) {
  const std::size_t n = ws.samples.size();
  const std::size_t cells = static_cast<std::size_t>(ws.H()) * kFeatureWidth;
  os.write("CRMA", 4);
  le::put<std::uint32_t>(os, kWindowSetVersion);
  le::put<std::uint64_t>(os, n);
  le::put<std::uint32_t>(os, static_cast<std::uint32_t>(ws.H()));
  le::put<std::uint32_t>(os, static_cast<std::uint32_t>(kFeatureWidth));
  le::put<std::uint32_t>(os, static_cast<std::uint32_t>(kZDim));
  for (const auto& w : ws.samples) {
    require(w.features.size() == cells, "write_windowset: feature block has wrong size");
    le::put_f64s(os, w.features);
  }
  for (const auto& w : ws.samples)
    for (double v : w.z_target) le::put(os, v);
  for (const auto& w : ws.samples) le::put<std::uint8_t>(os, static_cast<std::uint8_t>(w.regime));
  for (const auto& w : ws.samples) le::put<std::uint8_t>(os, static_cast<std::uint8_t>(w.task));
  for (const auto& w : ws.samples) le::put<std::uint32_t>(os, static_cast<std::uint32_t>(w.pad_len));
  for (const auto& w : ws.samples) le::put<std::uint32_t>(os, w.episode);
  for (const auto& w : ws.samples) le::put<std::uint32_t>(os, static_cast<std::uint32_t>(w.final_step));
  const json trailer{{"stats", ws.stats.to_json()},        {"stats_digest", ws.stats.digest()},
                     {"split_tag", ws.split_tag},          {"source_digest", ws.source_digest},
                     {"spec", ws.spec.to_json()},          {"run_ids", ws.run_ids}};
  const std::string t = trailer.dump();
  le::put<std::uint64_t>(os, t.size());
  os.write(t.data(), static_cast<std::streamsize>(t.size()));
  if (!os) throw FormatError("write_windowset: stream failure");
}

inline WindowSet read_windowset(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CRMA") throw FormatError("windowset: bad magic");
  if (le::get<std::uint32_t>(is) != kWindowSetVersion) throw FormatError("windowset: unsupported version");
  const auto n = le::get<std::uint64_t>(is);
  const auto H = le::get<std::uint32_t>(is);
  const auto F = le::get<std::uint32_t>(is);
  const auto Z = le::get<std::uint32_t>(is);
  if (F != kFeatureWidth || Z != kZDim || H == 0) throw FormatError("windowset: incompatible dimensions");
  if (n > (1ull << 32)) throw FormatError("windowset: implausible sample count");
  WindowSet ws;
  ws.samples.resize(n);
  for (auto& w : ws.samples) {
    w.features.resize(static_cast<std::size_t>(H) * F);
    le::get_f64s(is, w.features);
  }
  for (auto& w : ws.samples)
    for (double& v : w.z_target) v = le::get<double>(is);
  for (auto& w : ws.samples) w.regime = regime::regime_from_code(le::get<std::uint8_t>(is));
  for (auto& w : ws.samples) w.task = sim::task_from_code(le::get<std::uint8_t>(is));
  for (auto& w : ws.samples) w.pad_len = static_cast<int>(le::get<std::uint32_t>(is));
  for (auto& w : ws.samples) w.episode = le::get<std::uint32_t>(is);
  for (auto& w : ws.samples) w.final_step = static_cast<int>(le::get<std::uint32_t>(is));
  const auto len = le::get<std::uint64_t>(is);
  if (len > (1ull << 31)) throw FormatError("windowset: implausible trailer length");
  std::string t(len, '\0');
  is.read(t.data(), static_cast<std::streamsize>(len));
  if (!is) throw FormatError("windowset: truncated trailer");
  json j;
  try {
    j = json::parse(t);
  } catch (const json::exception& e) {
    throw FormatError(std::string("windowset: bad trailer: ") + e.what());
  }
  ws.stats = NormStats::from_json(j.at("stats"));
  if (ws.stats.digest() != j.at("stats_digest").get<std::string>())
    throw FormatError("windowset: normalization stats digest mismatch");
  ws.split_tag = j.at("split_tag").get<std::string>();
  ws.source_digest = j.at("source_digest").get<std::string>();
  ws.spec = WindowSpec::from_json(j.at("spec"));
  ws.run_ids = j.at("run_ids").get<std::vector<std::string>>();
  if (ws.spec.history_len != static_cast<int>(H)) throw FormatError("windowset: H disagrees with trailer");
  for (const auto& w : ws.samples) {
    if (w.pad_len < 0 || w.pad_len >= static_cast<int>(H)) throw FormatError("windowset: bad pad_len");
    if (w.episode >= ws.run_ids.size()) throw FormatError("windowset: episode index out of range");
  }
  return ws;
}

inline void save_windowset(const std::string& path, const WindowSet& ws) {
  std::ostringstream os;
  write_windowset(os, ws);
  write_file(path, os.str());
}

inline WindowSet load_windowset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return read_windowset(in);
}

}  // namespace corma::data
