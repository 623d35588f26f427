#pragma once
// Weak force-regime labels from deployable evidence, and wrench features
// aligned at contact onset.

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "corma/common.hpp"
#include "corma/synthcontact.hpp"

namespace corma::regime {

using json = nlohmann::json;
using sim::ActionVec;
using sim::Episode;
using sim::ObservationVec;

enum class RegimeLabel : std::uint8_t { Free = 0, FirstContact = 1, GuidedSlide = 2, Jam = 3 };
inline constexpr int kNumRegimes = 4;

inline std::string regime_name(RegimeLabel r) {
  static const std::array<const char*, kNumRegimes> names{"free", "first_contact", "guided_slide", "jam"};
  return names[static_cast<std::size_t>(r)];
}

inline RegimeLabel regime_from_code(int c) {
  if (c < 0 || c >= kNumRegimes) throw FormatError("bad regime code " + std::to_string(c));
  return static_cast<RegimeLabel>(c);
}

struct RegimeThresholds {
  double theta_free = 1.0;       // N
  double theta_contact = 2.0;    // N
  int onset_window = 10;         // steps
  double theta_slide = 3.0e-3;   // m/s
  double theta_lat = 0.4;
  double theta_stall = 1.0e-3;   // m/s
  double theta_cmd = 2.0e-3;     // m/s
  double smoothing_halflife = 3.0;
  double dt = 0.02;

  void validate() const {
    require(theta_free > 0 && theta_contact > 0 && theta_free < theta_contact,
            "thresholds: need 0 < theta_free < theta_contact");
    require(onset_window > 0 && theta_slide > 0 && theta_lat > 0 && theta_stall > 0 && theta_cmd > 0 &&
                smoothing_halflife > 0 && dt > 0,
            "thresholds: all values must be positive");
  }

  json to_json() const {
    return json{{"theta_free", theta_free},   {"theta_contact", theta_contact}, {"onset_window", onset_window},
                {"theta_slide", theta_slide}, {"theta_lat", theta_lat},         {"theta_stall", theta_stall},
                {"theta_cmd", theta_cmd},     {"smoothing_halflife", smoothing_halflife}, {"dt", dt}};
  }

  static RegimeThresholds from_json(const json& j) {
    RegimeThresholds t;
    auto get = [&](const char* k, auto& v) {
      if (j.contains(k)) v = j.at(k).get<std::decay_t<decltype(v)>>();
    };
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!t.to_json().contains(it.key())) throw InvalidArgument("thresholds: unknown key '" + it.key() + "'");
    get("theta_free", t.theta_free);
    get("theta_contact", t.theta_contact);
    get("onset_window", t.onset_window);
    get("theta_slide", t.theta_slide);
    get("theta_lat", t.theta_lat);
    get("theta_stall", t.theta_stall);
    get("theta_cmd", t.theta_cmd);
    get("smoothing_halflife", t.smoothing_halflife);
    get("dt", t.dt);
    t.validate();
    return t;
  }

  std::string digest() const { return sha256_hex(to_json().dump()); }
};

/// EMA weight for a half-life given in steps.
inline double ema_weight(double halflife) { return 1.0 - std::exp2(-1.0 / halflife); }

/// EMA smoothing seeded with the first sample.
inline std::vector<Vec3> smooth(const std::vector<Vec3>& xs, double halflife) {
  std::vector<Vec3> out(xs.size());
  const double a = ema_weight(halflife);
  for (std::size_t t = 0; t < xs.size(); ++t) out[t] = t == 0 ? xs[0] : out[t - 1] * (1.0 - a) + xs[t] * a;
  return out;
}

inline std::vector<double> smooth(const std::vector<double>& xs, double halflife) {
  std::vector<double> out(xs.size());
  const double a = ema_weight(halflife);
  for (std::size_t t = 0; t < xs.size(); ++t) out[t] = t == 0 ? xs[0] : out[t - 1] * (1.0 - a) + xs[t] * a;
  return out;
}

struct WrenchFeatures {
  double lateral_ratio = 0;
  double force_derivative_norm = 0;
  double contact_dir_angle = 0;
  double force_mag = 0;
};

inline constexpr double kEps = 1e-6;

/// Angle of the lateral force in (-pi, pi]; 0 for a zero lateral force.
inline double dir_angle(const Vec3& f) {
  if (f.x == 0.0 && f.y == 0.0) return 0.0;
  double a = std::atan2(f.y, f.x);
  if (a == -std::numbers::pi) a = std::numbers::pi;
  return a;
}

/// Per-step features of an EMA-smoothed force series. The derivative is a
/// central difference (one-sided at the ends) divided by dt and by the
/// running maximum of the smoothed magnitude, floored at 1 N.
inline std::vector<WrenchFeatures> extract_wrench_features(const std::vector<Vec3>& force, double dt,
                                                           double halflife = RegimeThresholds{}.smoothing_halflife) {
  require(force.size() >= 2, "extract_wrench_features: need at least 2 samples");
  require(dt > 0, "extract_wrench_features: dt must be positive");
  for (const auto& f : force) require(f.finite(), "extract_wrench_features: non-finite force");
  const auto s = smooth(force, halflife);
  const std::size_t n = s.size();
  std::vector<WrenchFeatures> out(n);
  double scale = 1.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double mag = s[t].norm();
    scale = std::max(scale, mag);
    Vec3 d;
    if (t == 0) d = (s[1] - s[0]) * (1.0 / dt);
    else if (t + 1 == n) d = (s[n - 1] - s[n - 2]) * (1.0 / dt);
    else d = (s[t + 1] - s[t - 1]) * (0.5 / dt);
    out[t].force_mag = mag;
    out[t].lateral_ratio = std::min(1.0, s[t].norm_xy() / (mag + kEps));
    out[t].contact_dir_angle = dir_angle(s[t]);
    out[t].force_derivative_norm = d.norm() / scale;
  }
  return out;
}

/// First step at which the smoothed magnitude reaches theta_contact.
inline std::optional<int> detect_onset(const std::vector<double>& force_mag, const RegimeThresholds& th) {
  const auto s = smooth(force_mag, th.smoothing_halflife);
  for (std::size_t t = 0; t < s.size(); ++t)
    if (s[t] >= th.theta_contact) return static_cast<int>(t);
  return std::nullopt;
}

/// Per-step predicates, kept separate so precedence can be tested on its own.
struct RegimePredicates {
  bool jam = false, first_contact = false, guided = false;
};

inline RegimeLabel resolve(const RegimePredicates& p) {
  if (p.jam) return RegimeLabel::Jam;
  if (p.first_contact) return RegimeLabel::FirstContact;
  if (p.guided) return RegimeLabel::GuidedSlide;
  return RegimeLabel::Free;
}

/// Evaluates the label predicates. Measured speed at t is the first
/// difference of measured tip position over [t-1, t]; it is compared with
/// the command issued for that same interval (a_{t-1}).
inline std::vector<RegimePredicates> regime_predicates(const std::vector<ObservationVec>& obs,
                                                       const std::vector<ActionVec>& actions,
                                                       const RegimeThresholds& th) {
  require(obs.size() == actions.size(), "label_regimes: obs/action series lengths differ (" +
                                            std::to_string(obs.size()) + " vs " + std::to_string(actions.size()) +
                                            ")");
  th.validate();
  const std::size_t n = obs.size();
  std::vector<RegimePredicates> out(n);
  if (n == 0) return out;
  std::vector<Vec3> f(n);
  for (std::size_t t = 0; t < n; ++t) f[t] = obs[t].force_meas;
  const auto fs = smooth(f, th.smoothing_halflife);
  std::vector<double> mag(n);
  for (std::size_t t = 0; t < n; ++t) mag[t] = fs[t].norm();

  // onsets: every rise of the smoothed magnitude through theta_contact after
  // it has dropped below theta_free
  std::vector<int> onset_until(n, -1);
  bool armed = true;
  int until = -1;
  for (std::size_t t = 0; t < n; ++t) {
    if (armed && mag[t] >= th.theta_contact) {
      until = static_cast<int>(t) + th.onset_window - 1;
      armed = false;
    } else if (!armed && mag[t] < th.theta_free) {
      armed = true;
    }
    onset_until[t] = until;
  }

  for (std::size_t t = 0; t < n; ++t) {
    Vec3 v;
    double cmd = 0.0;
    if (t > 0) {
      v = (obs[t].tip_pos_meas - obs[t - 1].tip_pos_meas) * (1.0 / th.dt);
      cmd = actions[t - 1].v_cmd.norm();
    }
    const bool contact = mag[t] >= th.theta_contact;
    out[t].jam = contact && v.norm() < th.theta_stall && cmd >= th.theta_cmd;
    out[t].first_contact = static_cast<int>(t) <= onset_until[t];
    const Vec3 fhat = fs[t] * (1.0 / (mag[t] + kEps));
    const Vec3 vt = v - fhat * v.dot(fhat);
    const double lat = fs[t].norm_xy() / (mag[t] + kEps);
    out[t].guided = contact && vt.norm() >= th.theta_slide && lat >= th.theta_lat;
  }
  return out;
}

inline std::vector<RegimeLabel> label_regimes(const std::vector<ObservationVec>& obs,
                                              const std::vector<ActionVec>& actions, const RegimeThresholds& th) {
  const auto preds = regime_predicates(obs, actions, th);
  std::vector<RegimeLabel> out(preds.size());
  for (std::size_t t = 0; t < preds.size(); ++t) out[t] = resolve(preds[t]);
  return out;
}

inline std::vector<RegimeLabel> label_episode(const Episode& ep, const RegimeThresholds& th) {
  std::vector<ObservationVec> obs;
  std::vector<ActionVec> act;
  obs.reserve(ep.steps.size());
  act.reserve(ep.steps.size());
  for (const auto& r : ep.steps) {
    obs.push_back(r.obs);
    act.push_back(r.action);
  }
  return label_regimes(obs, act, th);
}

inline std::array<std::size_t, kNumRegimes> count_labels(const std::vector<RegimeLabel>& ls) {
  std::array<std::size_t, kNumRegimes> c{};
  for (auto l : ls) ++c[static_cast<std::size_t>(l)];
  return c;
}

inline void write_labels_csv(std::ostream& os, const std::vector<Episode>& eps,
                             const std::vector<std::vector<RegimeLabel>>& labels) {
  os << "run_id,t,regime,code\n";
  for (std::size_t e = 0; e < eps.size(); ++e)
    for (std::size_t t = 0; t < labels[e].size(); ++t)
      os << eps[e].run_id << ',' << t << ',' << regime_name(labels[e][t]) << ','
         << static_cast<int>(labels[e][t]) << '\n';
}

// ------------------------------------------------------------ onset align

struct AlignedRow {
  std::size_t episode = 0;
  int rel_step = 0;
  WrenchFeatures f;
  std::string dir_group;  // wall side: +x, -x, +y, -y
};

struct AlignedTable {
  std::vector<AlignedRow> rows;
  std::size_t skipped = 0;
};

/// Wall side touched after onset. The force on the peg points away from the
/// wall, so the side is the negated mean lateral force.
inline std::string wall_side(const std::vector<Vec3>& smoothed, int from, int to) {
  Vec3 m;
  for (int t = from; t <= to; ++t) m += smoothed[static_cast<std::size_t>(t)];
  if (std::abs(m.x) >= std::abs(m.y)) return m.x <= 0 ? "+x" : "-x";
  return m.y <= 0 ? "+y" : "-y";
}

inline AlignedTable onset_align(const std::vector<Episode>& eps, const RegimeThresholds& th, int pre, int post) {
  require(pre >= 0 && post >= 0, "onset_align: pre/post must be non-negative");
  AlignedTable tab;
  for (std::size_t e = 0; e < eps.size(); ++e) {
    const auto& ep = eps[e];
    if (ep.steps.size() < 2) {
      ++tab.skipped;
      continue;
    }
    std::vector<Vec3> f;
    std::vector<double> mag;
    for (const auto& r : ep.steps) {
      f.push_back(r.obs.force_meas);
      mag.push_back(r.obs.force_meas.norm());
    }
    const auto onset = detect_onset(mag, th);
    if (!onset) {
      ++tab.skipped;
      continue;
    }
    const auto feats = extract_wrench_features(f, th.dt, th.smoothing_halflife);
    const auto fs = smooth(f, th.smoothing_halflife);
    const int n = static_cast<int>(feats.size());
    const int lo = std::max(0, *onset - pre), hi = std::min(n - 1, *onset + post);
    const std::string side = wall_side(fs, *onset, hi);
    for (int t = lo; t <= hi; ++t) tab.rows.push_back({e, t - *onset, feats[static_cast<std::size_t>(t)], side});
  }
  return tab;
}

inline void write_aligned_csv(std::ostream& os, const AlignedTable& tab) {
  os << "episode,rel_step,lateral_ratio,force_derivative_norm,contact_dir_angle,force_mag,dir_group\n";
  os << std::setprecision(9);
  for (const auto& r : tab.rows)
    os << r.episode << ',' << r.rel_step << ',' << r.f.lateral_ratio << ',' << r.f.force_derivative_norm << ','
       << r.f.contact_dir_angle << ',' << r.f.force_mag << ',' << r.dir_group << '\n';
}

}  // namespace corma::regime
