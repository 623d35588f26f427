#pragma once
// Context adapter: causal Transformer over a history window with a learned
// readout token appended after the last step, plus a temporal-convolution
// baseline sharing the same heads.

#include <json.hpp>

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "corma/common.hpp"
#include "corma/datakit.hpp"
#include "corma/numkit.hpp"

namespace corma::adapt {

using json = nlohmann::json;
using nk::Shape;
using nk::Tensor;

enum class Variant { Transformer, Conv1D };

inline std::string variant_name(Variant v) { return v == Variant::Transformer ? "transformer" : "conv"; }
inline Variant parse_variant(const std::string& s) {
  if (s == "transformer") return Variant::Transformer;
  if (s == "conv" || s == "conv1d") return Variant::Conv1D;
  throw InvalidArgument("unknown adapter variant '" + s + "' (expected transformer|conv)");
}

struct AdapterConfig {
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int mlp_ratio = 4;
  int u_dim = 32;
  double dropout_p = 0.0;
  int history_len = 32;
  int input_width = static_cast<int>(data::kFeatureWidth);
  Variant variant = Variant::Transformer;
  std::uint64_t init_seed = 0;

  void validate() const {
    require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, "AdapterConfig: d_model must be divisible by n_heads");
    require(n_layers >= 1 && mlp_ratio >= 1, "AdapterConfig: need n_layers >= 1 and mlp_ratio >= 1");
    require(u_dim >= 2, "AdapterConfig: u_dim must be >= 2");
    require(dropout_p >= 0 && dropout_p < 1, "AdapterConfig: dropout_p must be in [0, 1)");
    require(history_len >= 1 && input_width >= 1, "AdapterConfig: history_len and input_width must be positive");
    if (variant == Variant::Conv1D) require(history_len >= 8, "AdapterConfig: the conv baseline needs history_len >= 8");
  }

  json to_json() const {
    return {{"d_model", d_model},         {"n_layers", n_layers},   {"n_heads", n_heads},
            {"mlp_ratio", mlp_ratio},     {"u_dim", u_dim},         {"dropout_p", dropout_p},
            {"history_len", history_len}, {"input_width", input_width},
            {"variant", variant_name(variant)}, {"init_seed", init_seed}};
  }
  static AdapterConfig from_json(const json& j) {
    AdapterConfig c;
    const json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.contains(it.key())) throw InvalidArgument("AdapterConfig: unknown key '" + it.key() + "'");
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.u_dim = j.at("u_dim").get<int>();
    c.dropout_p = j.at("dropout_p").get<double>();
    c.history_len = j.at("history_len").get<int>();
    c.input_width = j.at("input_width").get<int>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.init_seed = j.value("init_seed", std::uint64_t{0});
    c.validate();
    return c;
  }
};

/// Batch of standardized windows.
struct Batch {
  Tensor features;           // [B, H, F]
  std::vector<int> pad_len;  // per sample
  std::size_t size() const { return pad_len.size(); }
};

struct AdapterOutput {
  Tensor z_hat;   // [B, 6]
  Tensor u;       // [B, u_dim], unit rows
  Tensor h;       // [B, d_model] readout state
  Tensor states;  // [B, H+1, d_model] per-position outputs (full path only)
};

/// Conv baseline layer lengths for a history of H steps.
inline std::vector<std::size_t> conv_lengths(int H) {
  const std::size_t t1 = (static_cast<std::size_t>(H) - 8) / 4 + 1;
  return {t1, t1, t1};
}

class Adapter {
 public:
  explicit Adapter(const AdapterConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.init_seed);
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model), F = static_cast<std::size_t>(cfg_.input_width);
    const std::size_t H = static_cast<std::size_t>(cfg_.history_len), u = static_cast<std::size_t>(cfg_.u_dim);
    if (cfg_.variant == Variant::Transformer) {
      add_linear(rng, "embed", F, d);
      add_normal(rng, "pos", {H + 1, d}, 0.1);
      add_normal(rng, "readout", {1, d}, 0.1);
      const std::size_t m = d * static_cast<std::size_t>(cfg_.mlp_ratio);
      for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        add_norm(p + "ln1", d);
        add_linear(rng, p + "attn.qkv", d, 3 * d);
        add_linear(rng, p + "attn.out", d, d);
        add_norm(p + "ln2", d);
        add_linear(rng, p + "mlp.fc1", d, m);
        add_linear(rng, p + "mlp.fc2", m, d);
      }
      add_norm("ln_f", d);
    } else {
      const auto T = conv_lengths(cfg_.history_len);
      add_linear(rng, "conv1", 8 * F, d);
      add_linear(rng, "conv2", 5 * d, d);
      add_linear(rng, "conv3", 5 * d, d);
      add_linear(rng, "fc1", T[2] * d, d);
      add_linear(rng, "fc2", d, d);
    }
    add_linear(rng, "sem", d, data::kZDim);
    add_linear(rng, "nce.fc1", d, d);
    add_linear(rng, "nce.fc2", d, u);
  }

  const AdapterConfig& config() const { return cfg_; }
  nk::ParamList& params() { return params_; }
  const nk::ParamList& params() const { return params_; }
  std::size_t param_count() const { return nk::param_count(params_); }

  const Tensor& p(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("adapter: no parameter named " + name);
    return params_[it->second].value;
  }

  /// Replaces parameter values, checking names and shapes.
  void load_params(const nk::ParamList& src) {
    if (src.size() != params_.size()) throw FormatError("adapter: parameter count differs from config");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].name != params_[i].name || src[i].value.shape() != params_[i].value.shape())
        throw FormatError("adapter: parameter " + src[i].name + " " + nk::shape_str(src[i].value.shape()) +
                          " does not match expected " + params_[i].name + " " +
                          nk::shape_str(params_[i].value.shape()));
      params_[i].value.data() = src[i].value.data();
    }
  }

  /// Forward pass. With full = false the last Transformer layer is evaluated
  /// only at the readout position (other positions are not needed by the
  /// heads); full = true also returns every position's final state.
  AdapterOutput forward(const Batch& batch, bool train = false, std::mt19937_64* rng = nullptr,
                        bool full = false) const {
    check_batch(batch);
    if (train && cfg_.dropout_p > 0 && rng == nullptr) throw InvalidArgument("adapter: dropout needs an rng in train mode");
    const bool drop = train && cfg_.dropout_p > 0;
    AdapterOutput out;
    Tensor h = cfg_.variant == Variant::Transformer ? encode_transformer(batch, drop, rng, full, out.states)
                                                    : encode_conv(batch, drop, rng);
    out.h = h;
    out.z_hat = linear(h, "sem");
    Tensor g = nk::gelu(linear(h, "nce.fc1"));
    out.u = nk::l2_normalize(linear(g, "nce.fc2"));
    return out;
  }

 private:
  void check_batch(const Batch& b) const {
    const auto& s = b.features.shape();
    const Shape want{b.size(), static_cast<std::size_t>(cfg_.history_len), static_cast<std::size_t>(cfg_.input_width)};
    if (s != want)
      throw InvalidArgument("adapter: features " + nk::shape_str(s) + " do not match expected " + nk::shape_str(want));
    if (b.size() == 0) throw InvalidArgument("adapter: empty batch");
    for (int p : b.pad_len)
      if (p < 0 || p > cfg_.history_len)
        throw InvalidArgument("adapter: pad_len " + std::to_string(p) + " outside [0, " +
                              std::to_string(cfg_.history_len) + "]");
  }

  Tensor linear(const Tensor& x, const std::string& name) const {
    return nk::add(nk::matmul(x, p(name + ".w")), p(name + ".b"));
  }

  Tensor norm(const Tensor& x, const std::string& name) const {
    return nk::layer_norm(x, p(name + ".g"), p(name + ".b"));
  }

  Tensor maybe_drop(const Tensor& x, bool drop, std::mt19937_64* rng) const {
    return drop ? nk::dropout(x, cfg_.dropout_p, *rng, true) : x;
  }

  /// Mask for queries [q0, q0+nq) over keys [0, T) of every (sample, head).
  std::vector<std::uint8_t> attn_mask(const Batch& b, std::size_t T, std::size_t q0, std::size_t nq) const {
    const std::size_t nh = static_cast<std::size_t>(cfg_.n_heads);
    std::vector<std::uint8_t> m(b.size() * nh * nq * T, 0);
    std::size_t o = 0;
    for (std::size_t s = 0; s < b.size(); ++s) {
      const std::size_t pad = static_cast<std::size_t>(b.pad_len[s]);
      for (std::size_t h = 0; h < nh; ++h)
        for (std::size_t i = q0; i < q0 + nq; ++i)
          for (std::size_t j = 0; j < T; ++j, ++o) m[o] = !(j <= i && (j >= pad || j == i));
    }
    return m;
  }

  /// [B, T, d] -> [B*heads, T, d/heads]
  Tensor split_heads(const Tensor& x) const {
    const std::size_t B = x.dim(0), T = x.dim(1), nh = static_cast<std::size_t>(cfg_.n_heads);
    const std::size_t dh = x.dim(2) / nh;
    return nk::reshape(nk::permute(nk::reshape(x, {B, T, nh, dh}), {0, 2, 1, 3}), {B * nh, T, dh});
  }

  Tensor merge_heads(const Tensor& x, std::size_t B) const {
    const std::size_t nh = static_cast<std::size_t>(cfg_.n_heads), T = x.dim(1), dh = x.dim(2);
    return nk::reshape(nk::permute(nk::reshape(x, {B, nh, T, dh}), {0, 2, 1, 3}), {B, T, nh * dh});
  }

  Tensor attention(const Batch& b, const Tensor& a, const std::string& pfx, std::size_t q0, std::size_t nq) const {
    const std::size_t B = b.size(), T = a.dim(1), d = static_cast<std::size_t>(cfg_.d_model);
    const Tensor qkv = linear(a, pfx + "attn.qkv");
    Tensor q = nk::slice(qkv, 2, 0, d);
    if (nq != T) q = nk::slice(q, 1, q0, nq);
    const Tensor k = nk::slice(qkv, 2, d, d), v = nk::slice(qkv, 2, 2 * d, d);
    const double inv = 1.0 / std::sqrt(static_cast<double>(d / static_cast<std::size_t>(cfg_.n_heads)));
    Tensor sc = nk::scale(nk::bmm(split_heads(q), split_heads(k), true), inv);
    sc = nk::masked_fill(sc, attn_mask(b, T, q0, nq));
    const Tensor att = nk::softmax(sc);
    return merge_heads(nk::bmm(att, split_heads(v)), B);
  }

  Tensor encode_transformer(const Batch& b, bool drop, std::mt19937_64* rng, bool full, Tensor& states) const {
    const std::size_t B = b.size(), H = static_cast<std::size_t>(cfg_.history_len), T = H + 1;
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    Tensor x = linear(b.features, "embed");
    x = nk::concat({x, nk::broadcast_to(nk::reshape(p("readout"), {1, 1, d}), {B, 1, d})}, 1);
    x = maybe_drop(nk::add(x, p("pos")), drop, rng);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string pfx = "layer" + std::to_string(l) + ".";
      const bool last = l + 1 == cfg_.n_layers;
      const std::size_t q0 = (last && !full) ? T - 1 : 0, nq = T - q0;
      Tensor a = norm(x, pfx + "ln1");
      Tensor att = maybe_drop(linear(attention(b, a, pfx, q0, nq), pfx + "attn.out"), drop, rng);
      if (nq != T) x = nk::slice(x, 1, q0, nq);
      x = nk::add(x, att);
      Tensor m = nk::gelu(linear(norm(x, pfx + "ln2"), pfx + "mlp.fc1"));
      x = nk::add(x, maybe_drop(linear(m, pfx + "mlp.fc2"), drop, rng));
    }
    if (full) states = x;
    Tensor r = nk::reshape(nk::slice(x, 1, x.dim(1) - 1, 1), {B, d});
    return norm(r, "ln_f");
  }

  Tensor encode_conv(const Batch& b, bool drop, std::mt19937_64* rng) const {
    const std::size_t B = b.size(), d = static_cast<std::size_t>(cfg_.d_model);
    Tensor x = nk::gelu(linear(nk::unfold1d(b.features, 8, 4), "conv1"));
    x = nk::gelu(linear(nk::unfold1d(x, 5, 1, 2, 2), "conv2"));
    x = nk::gelu(linear(nk::unfold1d(x, 5, 1, 2, 2), "conv3"));
    x = maybe_drop(nk::reshape(x, {B, x.dim(1) * d}), drop, rng);
    x = nk::gelu(linear(x, "fc1"));
    return linear(x, "fc2");
  }

  void push(const std::string& name, Tensor t) {
    index_[name] = params_.size();
    params_.push_back({name, std::move(t)});
  }

  void add_linear(std::mt19937_64& rng, const std::string& name, std::size_t in, std::size_t out) {
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    std::vector<double> w(in * out);
    for (auto& v : w) v = n(rng);
    push(name + ".w", Tensor::from({in, out}, std::move(w), true));
    push(name + ".b", Tensor::zeros({out}, true));
  }

  void add_norm(const std::string& name, std::size_t d) {
    push(name + ".g", Tensor::full({d}, 1.0, true));
    push(name + ".b", Tensor::zeros({d}, true));
  }

  void add_normal(std::mt19937_64& rng, const std::string& name, Shape shape, double sd) {
    std::normal_distribution<double> n(0.0, sd);
    std::vector<double> w(nk::numel(shape));
    for (auto& v : w) v = n(rng);
    push(name, Tensor::from(std::move(shape), std::move(w), true));
  }

  AdapterConfig cfg_;
  nk::ParamList params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------- batches

/// Standardized batch for the given sample indices.
inline Batch make_batch(const data::WindowSet& ws, const std::vector<std::size_t>& idx, const data::NormStats& st) {
  const std::size_t H = static_cast<std::size_t>(ws.H()), F = data::kFeatureWidth;
  std::vector<double> f(idx.size() * H * F);
  Batch b;
  b.pad_len.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& w = ws.samples.at(idx[i]);
    std::copy(w.features.begin(), w.features.end(), f.begin() + static_cast<std::ptrdiff_t>(i * H * F));
    st.standardize_window(f.data() + i * H * F, ws.H(), w.pad_len);
    b.pad_len.push_back(w.pad_len);
  }
  b.features = Tensor::from({idx.size(), H, F}, std::move(f));
  return b;
}

/// Standardized z targets [n, 6].
inline Tensor make_targets(const data::WindowSet& ws, const std::vector<std::size_t>& idx, const data::NormStats& st) {
  std::vector<double> z;
  z.reserve(idx.size() * data::kZDim);
  for (auto i : idx) {
    const auto s = st.standardize_z(ws.samples.at(i).z_target);
    z.insert(z.end(), s.begin(), s.end());
  }
  return Tensor::from({idx.size(), data::kZDim}, std::move(z));
}

// ------------------------------------------------------------ checkpoints

struct Checkpoint {
  AdapterConfig cfg;
  nk::ParamList params;
  data::NormStats stats;
  std::string stats_digest;
  std::string train_config_digest;
  json extra;
};

inline std::string checkpoint_bytes(const Adapter& a, const data::NormStats& stats,
                                    const std::string& train_config_digest, const json& extra = json::object()) {
  const json meta{{"kind", "corma-adapter"},
                  {"adapter_config", a.config().to_json()},
                  {"norm_stats", stats.to_json()},
                  {"norm_stats_digest", stats.digest()},
                  {"train_config_digest", train_config_digest},
                  {"extra", extra}};
  return nk::serialize_params(a.params(), meta);
}

inline void save_checkpoint(const std::string& path, const Adapter& a, const data::NormStats& stats,
                            const std::string& train_config_digest, const json& extra = json::object()) {
  write_file(path, checkpoint_bytes(a, stats, train_config_digest, extra));
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& expected_stats_digest = {}) {
  auto loaded = nk::deserialize_params(bytes);
  const json& m = loaded.meta;
  try {
    if (m.at("kind") != "corma-adapter") throw FormatError("checkpoint: not an adapter checkpoint");
    Checkpoint c;
    c.cfg = AdapterConfig::from_json(m.at("adapter_config"));
    c.stats = data::NormStats::from_json(m.at("norm_stats"));
    c.stats_digest = m.at("norm_stats_digest").get<std::string>();
    c.train_config_digest = m.at("train_config_digest").get<std::string>();
    c.extra = m.at("extra");
    if (c.stats.digest() != c.stats_digest) throw FormatError("checkpoint: embedded normalization stats are corrupt");
    if (!expected_stats_digest.empty() && expected_stats_digest != c.stats_digest)
      throw FormatError("checkpoint: normalization stats digest " + c.stats_digest.substr(0, 12) +
                        " does not match the data (" + expected_stats_digest.substr(0, 12) + ")");
    Adapter probe(c.cfg);
    probe.load_params(loaded.params);  // validates names and shapes
    c.params = std::move(loaded.params);
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed metadata: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

inline Checkpoint load_checkpoint(const std::string& path, const std::string& expected_stats_digest = {}) {
  return parse_checkpoint(read_file(path), expected_stats_digest);
}

inline Adapter adapter_from(const Checkpoint& c) {
  Adapter a(c.cfg);
  a.load_params(c.params);
  return a;
}

}  // namespace corma::adapt
