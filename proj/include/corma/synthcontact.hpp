#pragma once
// Quasi-static contact simulator for a peg / gear / thread insertion family,
// the scripted privileged teacher, and the 6D privileged contact context.
//
// Geometry is axisymmetric about a bore whose centre is hidden from the
// controller. The cross-section is a polyline in (rho, z): flat top surface,
// conical chamfer, bore wall, optional detent ledges, floor. The commanded
// pose ("setpoint") is integrated from velocity commands; the tip follows it
// by compliant projection onto the feasible region with Coulomb friction,
// and the environment force is the spring reaction between the two.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "corma/common.hpp"

namespace corma::sim {

using json = nlohmann::json;

enum class TaskKind : std::uint8_t { PegLike = 0, GearLike = 1, ThreadLike = 2 };

inline std::string task_name(TaskKind t) {
  switch (t) {
    case TaskKind::PegLike: return "peg";
    case TaskKind::GearLike: return "gear";
    case TaskKind::ThreadLike: return "thread";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "peg" || s == "PegLike") return TaskKind::PegLike;
  if (s == "gear" || s == "GearLike") return TaskKind::GearLike;
  if (s == "thread" || s == "ThreadLike") return TaskKind::ThreadLike;
  throw InvalidArgument("unknown task '" + s + "' (expected peg|gear|thread)");
}

inline TaskKind task_from_code(int code) {
  require(code >= 0 && code <= 2, "task code out of range: " + std::to_string(code));
  return static_cast<TaskKind>(code);
}

/// Simulator configuration. Lengths in metres, forces in newtons.
struct SimConfig {
  double dt = 0.02;
  double bore_radius = 5.0e-3;
  double peg_radius = 4.5e-3;
  double chamfer_radius = 12.0e-3;
  double chamfer_depth = 4.5e-3;
  double goal_depth = -10.0e-3;
  double contact_stiffness = 2000.0;
  double wall_stiffness = 5000.0;
  double friction_coeff = 0.3;
  double max_speed = 0.02;
  double max_omega = 12.0;
  double thread_rate = 5.0e-4;
  std::vector<double> detent_depths{-5.0e-3};
  double force_noise_sigma = 0.1;
  double force_bias_sigma = 0.2;
  double target_noise_sigma = 3.0e-3;
  double pos_noise_sigma = 2.0e-6;
  int max_steps = 400;
  std::uint64_t seed = 1;

  // contact model
  double max_lead = 3.0e-3;           // per-axis bound on |setpoint - tip|
  double wedge_force = 1.0;           // wall normal force that locks descent in the bore
  double detent_clearance = 0.25e-3;  // radial clearance below a gear ledge
  double detent_chamfer = 0.25e-3;    // height of the small cone on each ledge
  double thread_engage_depth = 1.0e-3;
  double min_thread_angle = 8.0;      // rad of engaged rotation required for a thread success
  double force_flag_threshold = 2.0;
  double bore_offset_range = 10.0e-3; // bore centre ~ U(-r, r) per axis
  double substep = 5.0e-5;

  // privileged context constants
  double tau_on = 5.0;
  double ema_alpha = 0.2;
  double eps = 1e-6;
  double f_min = 0.5;
  double f_jam = 4.0;
  double v_stall = 1.0e-3;
  double v_cmd_min = 2.0e-3;

  double clearance() const { return bore_radius - peg_radius; }
  double chamfer_reach() const { return chamfer_radius - peg_radius; }

  void validate() const {
    auto fin = [](double v) { return std::isfinite(v); };
    require(fin(dt) && dt > 0, "SimConfig: dt must be > 0");
    require(peg_radius > 0 && peg_radius < bore_radius && bore_radius < chamfer_radius,
            "SimConfig: need 0 < peg_radius < bore_radius < chamfer_radius");
    require(chamfer_depth > 0, "SimConfig: chamfer_depth must be > 0");
    require(goal_depth < -chamfer_depth, "SimConfig: goal_depth must lie below the chamfer");
    require(max_steps >= 1, "SimConfig: max_steps must be >= 1");
    require(contact_stiffness > 0 && wall_stiffness > 0, "SimConfig: stiffnesses must be > 0");
    require(friction_coeff >= 0 && max_speed > 0 && max_omega >= 0, "SimConfig: bad friction/speed limits");
    require(thread_rate > 0 && max_lead > 0 && substep > 0, "SimConfig: bad thread_rate/max_lead/substep");
    require(force_noise_sigma >= 0 && force_bias_sigma >= 0 && target_noise_sigma >= 0 && pos_noise_sigma >= 0,
            "SimConfig: noise sigmas must be >= 0");
    require(detent_clearance > 0 && detent_clearance < clearance(), "SimConfig: detent_clearance must be in (0, clearance)");
    double prev = -chamfer_depth;
    for (double d : detent_depths) {
      require(d < prev && d - detent_chamfer > goal_depth,
              "SimConfig: detent depths must be strictly decreasing between the chamfer and the goal");
      prev = d - detent_chamfer;
    }
    require(tau_on > 0 && ema_alpha > 0 && ema_alpha <= 1 && eps > 0, "SimConfig: bad context constants");
  }

  json to_json() const {
    return json{{"dt", dt}, {"bore_radius", bore_radius}, {"peg_radius", peg_radius},
                {"chamfer_radius", chamfer_radius}, {"chamfer_depth", chamfer_depth},
                {"goal_depth", goal_depth}, {"contact_stiffness", contact_stiffness},
                {"wall_stiffness", wall_stiffness}, {"friction_coeff", friction_coeff},
                {"max_speed", max_speed}, {"max_omega", max_omega}, {"thread_rate", thread_rate},
                {"detent_depths", detent_depths}, {"force_noise_sigma", force_noise_sigma},
                {"force_bias_sigma", force_bias_sigma}, {"target_noise_sigma", target_noise_sigma},
                {"pos_noise_sigma", pos_noise_sigma}, {"max_steps", max_steps}, {"seed", seed},
                {"max_lead", max_lead}, {"wedge_force", wedge_force},
                {"detent_clearance", detent_clearance}, {"detent_chamfer", detent_chamfer},
                {"thread_engage_depth", thread_engage_depth}, {"min_thread_angle", min_thread_angle},
                {"force_flag_threshold", force_flag_threshold}, {"bore_offset_range", bore_offset_range},
                {"substep", substep}, {"tau_on", tau_on}, {"ema_alpha", ema_alpha}, {"eps", eps},
                {"f_min", f_min}, {"f_jam", f_jam}, {"v_stall", v_stall}, {"v_cmd_min", v_cmd_min}};
  }

  /// Missing keys keep their defaults, so partial config files are valid.
  static SimConfig from_json(const json& j) {
    SimConfig c;
    const json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.contains(it.key())) throw InvalidArgument("sim config: unknown key '" + it.key() + "'");
    auto get = [&](const char* k, auto& field) {
      if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("dt", c.dt); get("bore_radius", c.bore_radius); get("peg_radius", c.peg_radius);
    get("chamfer_radius", c.chamfer_radius); get("chamfer_depth", c.chamfer_depth);
    get("goal_depth", c.goal_depth); get("contact_stiffness", c.contact_stiffness);
    get("wall_stiffness", c.wall_stiffness); get("friction_coeff", c.friction_coeff);
    get("max_speed", c.max_speed); get("max_omega", c.max_omega); get("thread_rate", c.thread_rate);
    get("detent_depths", c.detent_depths); get("force_noise_sigma", c.force_noise_sigma);
    get("force_bias_sigma", c.force_bias_sigma); get("target_noise_sigma", c.target_noise_sigma);
    get("pos_noise_sigma", c.pos_noise_sigma); get("max_steps", c.max_steps); get("seed", c.seed);
    get("max_lead", c.max_lead); get("wedge_force", c.wedge_force);
    get("detent_clearance", c.detent_clearance); get("detent_chamfer", c.detent_chamfer);
    get("thread_engage_depth", c.thread_engage_depth); get("min_thread_angle", c.min_thread_angle);
    get("force_flag_threshold", c.force_flag_threshold); get("bore_offset_range", c.bore_offset_range);
    get("substep", c.substep); get("tau_on", c.tau_on); get("ema_alpha", c.ema_alpha); get("eps", c.eps);
    get("f_min", c.f_min); get("f_jam", c.f_jam); get("v_stall", c.v_stall); get("v_cmd_min", c.v_cmd_min);
    c.validate();
    return c;
  }

  std::string digest() const { return sha256_hex(to_json().dump()); }
};

struct ActionVec {
  Vec3 v_cmd;
  double omega_cmd = 0.0;

  std::array<double, 4> to_array() const { return {v_cmd.x, v_cmd.y, v_cmd.z, omega_cmd}; }
  static ActionVec from_array(const std::array<double, 4>& a) { return {{a[0], a[1], a[2]}, a[3]}; }
  bool finite() const { return v_cmd.finite() && std::isfinite(omega_cmd); }
};

inline ActionVec clip_action(ActionVec a, const SimConfig& cfg) {
  const double n = a.v_cmd.norm();
  if (n > cfg.max_speed) a.v_cmd = a.v_cmd * (cfg.max_speed / n);
  a.omega_cmd = std::clamp(a.omega_cmd, -cfg.max_omega, cfg.max_omega);
  return a;
}

/// Deployable observation: 14 scalars, all measured or commanded.
struct ObservationVec {
  static constexpr std::size_t kSize = 14;

  Vec3 tip_pos_meas;
  Vec3 force_meas;
  bool force_flag = false;
  ActionVec prev_action;
  Vec3 noisy_target;

  std::array<double, kSize> to_array() const {
    const auto a = prev_action.to_array();
    return {tip_pos_meas.x, tip_pos_meas.y, tip_pos_meas.z,
            force_meas.x,   force_meas.y,   force_meas.z,
            force_flag ? 1.0 : 0.0,
            a[0], a[1], a[2], a[3],
            noisy_target.x, noisy_target.y, noisy_target.z};
  }

  static ObservationVec from_array(const std::array<double, kSize>& v) {
    ObservationVec o;
    o.tip_pos_meas = {v[0], v[1], v[2]};
    o.force_meas = {v[3], v[4], v[5]};
    o.force_flag = v[6] != 0.0;
    o.prev_action = ActionVec::from_array({v[7], v[8], v[9], v[10]});
    o.noisy_target = {v[11], v[12], v[13]};
    return o;
  }

  json to_json() const {
    return json{{"tip_pos_meas", tip_pos_meas.arr()}, {"force_meas", force_meas.arr()},
                {"force_flag", force_flag}, {"prev_action", prev_action.to_array()},
                {"noisy_target", noisy_target.arr()}};
  }
};

struct PrivilegedZ {
  static constexpr std::size_t kSize = 6;
  double onset = 0, lateral = 0, guided = 0, dir_x = 0, dir_y = 0, jam = 0;

  std::array<double, kSize> to_array() const { return {onset, lateral, guided, dir_x, dir_y, jam}; }
  static PrivilegedZ from_array(const std::array<double, kSize>& a) { return {a[0], a[1], a[2], a[3], a[4], a[5]}; }

  /// Projects onto the declared component ranges.
  PrivilegedZ clamped() const {
    PrivilegedZ z{std::clamp(onset, 0.0, 1.0), std::clamp(lateral, 0.0, 1.0), std::clamp(guided, 0.0, 1.0),
                  std::clamp(dir_x, -1.0, 1.0), std::clamp(dir_y, -1.0, 1.0), std::clamp(jam, 0.0, 1.0)};
    const double r = std::hypot(z.dir_x, z.dir_y);
    if (r > 1.0) {
      z.dir_x /= r;
      z.dir_y /= r;
    }
    return z;
  }

  bool in_range() const {
    auto in = [](double v, double lo, double hi) { return std::isfinite(v) && v >= lo && v <= hi; };
    return in(onset, 0, 1) && in(lateral, 0, 1) && in(guided, 0, 1) && in(dir_x, -1, 1) && in(dir_y, -1, 1) &&
           in(jam, 0, 1) && dir_x * dir_x + dir_y * dir_y <= 1.0 + 1e-9;
  }
  bool is_zero() const { return onset == 0 && lateral == 0 && guided == 0 && dir_x == 0 && dir_y == 0 && jam == 0; }
};

struct SimState {
  Vec3 tip_pos;
  Vec3 setpoint;
  double screw_angle = 0.0;
  bool contact_active = false;
  Vec3 true_force;
  std::optional<int> onset_step;
  double jam_ema = 0.0;
  double guided_ema = 0.0;
  int step = 0;
  double tip_speed = 0.0;
  bool wall_contact = false;

  // hidden per-episode quantities
  Vec3 bore_center;   // z component is the surface height (0)
  Vec3 force_bias;
  Vec3 noisy_target;

  Vec3 lateral_offset() const { return {tip_pos.x - bore_center.x, tip_pos.y - bore_center.y, 0.0}; }

  bool finite() const {
    return tip_pos.finite() && setpoint.finite() && std::isfinite(screw_angle) && true_force.finite() &&
           std::isfinite(jam_ema) && std::isfinite(guided_ema) && bore_center.finite();
  }
};

/// Simulator truth attached to a step. Never part of the deployable input.
struct StepTruth {
  Vec3 true_force;
  bool contact_active = false;
  std::array<double, 2> lateral_offset{};
  double tip_speed = 0.0;
};

struct StepRecord {
  ObservationVec obs;
  ActionVec action;
  PrivilegedZ priv_z;
  StepTruth truth;
};

struct Episode {
  TaskKind task = TaskKind::PegLike;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<StepRecord> steps;
  bool success = false;
  std::string run_id;
};

inline std::string make_run_id(TaskKind task, std::uint64_t seed) {
  return task_name(task) + "-" + std::to_string(seed);
}

/// Independent random stream for (seed, task, purpose).
inline std::mt19937_64 make_rng(std::uint64_t seed, TaskKind task, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(task), stream};
  return std::mt19937_64(seq);
}

// ------------------------------------------------------------------ geometry

/// Cross-section of the fixture as a polyline in (rho, z), outermost point
/// first. Feasible tip positions lie on or above it.
class Profile {
 public:
  Profile(const SimConfig& cfg, TaskKind task) {
    const double c = cfg.clearance();
    pts_.push_back({1.0, 0.0});
    pts_.push_back({cfg.chamfer_reach(), 0.0});
    pts_.push_back({c, -cfg.chamfer_depth});
    if (task == TaskKind::GearLike) {
      for (double d : cfg.detent_depths) {
        pts_.push_back({c, d});
        pts_.push_back({cfg.detent_clearance, d - cfg.detent_chamfer});
      }
      pts_.push_back({cfg.detent_clearance, cfg.goal_depth});
    } else {
      pts_.push_back({c, cfg.goal_depth});
    }
    pts_.push_back({0.0, cfg.goal_depth});
    reach_ = cfg.chamfer_reach();
    bore_top_ = -cfg.chamfer_depth;
  }

  double zmin(double rho) const {
    for (std::size_t i = pts_.size() - 1; i-- > 0;) {
      const auto& a = pts_[i];
      const auto& b = pts_[i + 1];
      if (a[0] <= b[0]) continue;  // vertical
      if (rho >= b[0] && rho <= a[0]) return b[1] + (a[1] - b[1]) * (rho - b[0]) / (a[0] - b[0]);
    }
    return 0.0;
  }

  struct Nearest {
    double rho, z, dist;
    bool vertical;
  };

  Nearest nearest(double rho, double z) const {
    Nearest best{0, 0, std::numeric_limits<double>::infinity(), false};
    for (std::size_t i = 0; i + 1 < pts_.size(); ++i) {
      const auto& a = pts_[i];
      const auto& b = pts_[i + 1];
      const double dx = b[0] - a[0], dz = b[1] - a[1];
      const double len2 = dx * dx + dz * dz;
      double t = len2 > 0 ? ((rho - a[0]) * dx + (z - a[1]) * dz) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double pr = a[0] + t * dx, pz = a[1] + t * dz;
      const double d = std::hypot(rho - pr, z - pz);
      if (d < best.dist) best = {pr, pz, d, dx == 0.0};
    }
    return best;
  }

  double chamfer_reach() const { return reach_; }
  double bore_top() const { return bore_top_; }

 private:
  std::vector<std::array<double, 2>> pts_;
  double reach_ = 0, bore_top_ = 0;
};

namespace detail {

struct Cyl {
  double rho;
  double ux, uy;  // outward radial unit vector
};

inline Cyl to_cyl(const Vec3& p, const Vec3& centre, const Vec3& fallback_dir) {
  const double rx = p.x - centre.x, ry = p.y - centre.y;
  const double rho = std::hypot(rx, ry);
  if (rho > 1e-12) return {rho, rx / rho, ry / rho};
  const double f = std::hypot(fallback_dir.x, fallback_dir.y);
  if (f > 1e-12) return {0.0, fallback_dir.x / f, fallback_dir.y / f};
  return {0.0, 1.0, 0.0};
}

inline Vec3 from_cyl(double rho, double z, const Cyl& c, const Vec3& centre) {
  return {centre.x + rho * c.ux, centre.y + rho * c.uy, z};
}

struct MotionLimits {
  bool thread = false;
  double thread_start = 0.0;
  double thread_budget = 0.0;  // descent still allowed inside the thread this step
};

struct Resolved {
  Vec3 tip;
  bool wall_contact = false;
};

class Resolver {
 public:
  Resolver(const SimConfig& cfg, const Profile& prof, const Vec3& centre)
      : cfg_(cfg), prof_(prof), centre_(centre) {}

  bool feasible(const Vec3& q) const {
    const auto c = to_cyl(q, centre_, {});
    return q.z >= prof_.zmin(c.rho) - 1e-12;
  }

  Vec3 project(const Vec3& q, const Vec3& hint) const {
    const auto c = to_cyl(q, centre_, hint);
    const auto n = prof_.nearest(c.rho, q.z);
    return from_cyl(n.rho, n.z, c, centre_);
  }

  Profile::Nearest boundary(const Vec3& q) const {
    const auto c = to_cyl(q, centre_, {});
    return prof_.nearest(c.rho, q.z);
  }

  bool on_wall(const Vec3& q) const {
    const auto n = boundary(q);
    return n.vertical && n.dist < 1e-9 && q.z < prof_.bore_top() - 1e-9;
  }

  double wall_normal_force(const Vec3& p, const Vec3& s) const {
    if (!on_wall(p)) return 0.0;
    const auto c = to_cyl(p, centre_, {});
    const double out = (s.x - p.x) * c.ux + (s.y - p.y) * c.uy;
    return std::max(0.0, cfg_.wall_stiffness * out);
  }

  /// Limits vertical motion for wedging and thread coupling.
  double limit_dz(const Vec3& p, const Vec3& s, double dz, MotionLimits& lim) const {
    if (dz >= 0.0) return dz;
    if (wall_normal_force(p, s) >= cfg_.wedge_force) return 0.0;
    if (!lim.thread) return dz;
    const double free = std::max(0.0, p.z - lim.thread_start);
    const double allowed = free + lim.thread_budget;
    const double out = std::max(dz, -allowed);
    lim.thread_budget -= std::max(0.0, -out - free);
    return out;
  }

  Resolved resolve(Vec3 p, const Vec3& s, MotionLimits lim) const {
    const double h = cfg_.substep;
    const double mu = cfg_.friction_coeff;
    const double kn = cfg_.contact_stiffness;
    for (int iter = 0; iter < 2000; ++iter) {
      const Vec3 d = s - p;
      const double L = d.norm();
      if (L < 1e-12) break;
      Vec3 step = d * std::min(1.0, h / L);
      step.z = limit_dz(p, s, step.z, lim);
      if (step.norm() < 1e-13) break;
      const Vec3 cand = p + step;
      if (feasible(cand)) {
        p = (L <= h && step == d) ? s : cand;
        continue;
      }
      const Vec3 proj = project(cand, d);
      if (boundary(p).dist > 1e-9) {
        p = proj;
        continue;
      }
      // p rests on the boundary: Coulomb friction decides between stick and slip
      Vec3 n = proj - cand;
      double nn = n.norm();
      if (nn < 1e-15) break;
      n = n * (1.0 / nn);
      const bool wall = std::abs(n.z) < 0.1;
      const double fn = d.dot(n);
      if (fn >= 0.0) {
        p = proj;
        continue;
      }
      const double normal = (wall ? cfg_.wall_stiffness : kn) * (-fn);
      const Vec3 ft = (d - n * fn) * kn;
      const double T = ft.norm();
      if (T <= mu * normal + 1e-12) break;
      Vec3 move = ft * (std::min(h, (T - mu * normal) / kn) / T);
      move.z = limit_dz(p, s, move.z, lim);
      if (move.norm() < 1e-13) break;
      Vec3 next = p + move;
      if (!feasible(next)) next = project(next, d);
      p = next;
    }
    return {p, on_wall(p)};
  }

 private:
  const SimConfig& cfg_;
  const Profile& prof_;
  Vec3 centre_;
};

}  // namespace detail

// ------------------------------------------------------------------ context

/// The six-dimensional privileged contact context of a state.
inline PrivilegedZ compute_privileged_z(const SimState& state, const ActionVec& /*action*/, const SimConfig& cfg) {
  PrivilegedZ z;
  z.guided = state.guided_ema;
  z.jam = state.jam_ema;
  if (!state.contact_active) return z;
  const Vec3& F = state.true_force;
  const double fxy = F.norm_xy();
  z.onset = state.onset_step ? std::exp(-static_cast<double>(state.step - *state.onset_step) / cfg.tau_on) : 0.0;
  z.lateral = fxy / (F.norm() + cfg.eps);
  if (fxy >= cfg.f_min) {
    z.dir_x = F.x / (fxy + cfg.eps);
    z.dir_y = F.y / (fxy + cfg.eps);
  }
  return z;
}

inline ObservationVec observe(const SimState& s, const ActionVec& prev, const SimConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> unit(0.0, 1.0);
  ObservationVec o;
  o.tip_pos_meas = s.tip_pos + Vec3{unit(rng), unit(rng), unit(rng)} * cfg.pos_noise_sigma;
  o.force_meas = s.true_force + s.force_bias + Vec3{unit(rng), unit(rng), unit(rng)} * cfg.force_noise_sigma;
  o.force_flag = o.force_meas.norm() > cfg.force_flag_threshold;
  o.prev_action = prev;
  o.noisy_target = s.noisy_target;
  return o;
}

struct StepResult {
  SimState state;
  ObservationVec obs;
  PrivilegedZ z;
};

/// Advances the simulator by one control period.
inline StepResult sim_step(const SimState& state, const ActionVec& action_in, const SimConfig& cfg, TaskKind task,
                           std::mt19937_64& rng) {
  if (!action_in.finite()) throw InvalidArgument("sim_step: non-finite action");
  if (!state.finite()) throw InvalidArgument("sim_step: non-finite state");
  const ActionVec action = clip_action(action_in, cfg);
  const Profile prof(cfg, task);
  const detail::Resolver res(cfg, prof, state.bore_center);

  SimState next = state;
  next.step = state.step + 1;
  Vec3 s = state.setpoint + action.v_cmd * cfg.dt;

  detail::MotionLimits lim;
  lim.thread = task == TaskKind::ThreadLike;
  lim.thread_start = prof.bore_top() - cfg.thread_engage_depth;
  lim.thread_budget = cfg.thread_rate * std::max(0.0, action.omega_cmd) * cfg.dt;

  const auto r = res.resolve(state.tip_pos, s, lim);
  next.tip_pos = r.tip;
  next.wall_contact = r.wall_contact;
  if (lim.thread && state.tip_pos.z < lim.thread_start) next.screw_angle += action.omega_cmd * cfg.dt;

  // per-axis force limit of the commanding controller
  Vec3 lead = s - next.tip_pos;
  lead = {std::clamp(lead.x, -cfg.max_lead, cfg.max_lead), std::clamp(lead.y, -cfg.max_lead, cfg.max_lead),
          std::clamp(lead.z, -cfg.max_lead, cfg.max_lead)};
  s = next.tip_pos + lead;
  next.setpoint = s;

  Vec3 F;
  if (lead.norm() >= 1e-12) {
    const Vec3 delta = next.tip_pos - s;
    F = delta * cfg.contact_stiffness;
    if (r.wall_contact) {
      const auto c = detail::to_cyl(next.tip_pos, state.bore_center, {});
      const double radial = delta.x * c.ux + delta.y * c.uy;
      const double extra = (cfg.wall_stiffness - cfg.contact_stiffness) * radial;
      F += Vec3{extra * c.ux, extra * c.uy, 0.0};
    }
  }
  next.true_force = F;
  next.contact_active = F.norm() > 0.0;
  next.tip_speed = (next.tip_pos - state.tip_pos).norm() / cfg.dt;
  if (next.contact_active && !state.contact_active) next.onset_step = next.step;

  const double rho = (next.tip_pos - state.bore_center).norm_xy();
  const bool stall = F.norm() > cfg.f_jam && action.v_cmd.norm() > cfg.v_cmd_min && next.tip_speed < cfg.v_stall;
  const bool guided = next.contact_active && rho < prof.chamfer_reach() - 1e-9 && next.tip_speed >= cfg.v_stall;
  const double a = cfg.ema_alpha;
  next.jam_ema = (1.0 - a) * state.jam_ema + a * (stall ? 1.0 : 0.0);
  next.guided_ema = (1.0 - a) * state.guided_ema + a * (guided ? 1.0 : 0.0);

  StepResult out;
  out.obs = observe(next, action, cfg, rng);
  out.z = compute_privileged_z(next, action, cfg);
  out.state = next;
  return out;
}

inline SimState initial_state(const SimConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> unit(0.0, 1.0);
  SimState s;
  s.bore_center = {cfg.bore_offset_range * u(rng), cfg.bore_offset_range * u(rng), 0.0};
  s.force_bias = Vec3{unit(rng), unit(rng), unit(rng)} * cfg.force_bias_sigma;
  s.noisy_target = s.bore_center + Vec3{0, 0, cfg.goal_depth} +
                   Vec3{unit(rng), unit(rng), unit(rng)} * cfg.target_noise_sigma;
  const double r = 4.0e-3 * std::sqrt(0.5 * (u(rng) + 1.0));
  const double th = M_PI * u(rng);
  const double h = 5.0e-3 + 2.5e-3 * (u(rng) + 1.0);
  s.tip_pos = {s.noisy_target.x + r * std::cos(th), s.noisy_target.y + r * std::sin(th), h};
  s.setpoint = s.tip_pos;
  return s;
}

inline bool insertion_verified(const SimState& s, const SimConfig& cfg, TaskKind task) {
  const bool deep = s.tip_pos.z <= cfg.goal_depth + 1.0e-3;
  if (task == TaskKind::ThreadLike) return deep && s.screw_angle >= cfg.min_thread_angle;
  return deep;
}

inline StepTruth truth_of(const SimState& s) {
  const Vec3 off = s.lateral_offset();
  return {s.true_force, s.contact_active, {off.x, off.y}, s.tip_speed};
}

// --------------------------------------------------------------- controllers

struct ControllerGains {
  double descend_speed = 0.010;
  double approach_speed = 0.015;
  double approach_gain = 5.0;
  double approach_height = 2.0e-3;
  double align_tol = 1.0e-3;
  double lateral_speed = 0.008;
  double guided_lateral_speed = 0.004;
  double retract_speed = 0.010;
  double jam_lateral_speed = 0.010;
  double screw_rate = 8.0;
  double explore_sigma = 0.0;
};

/// Deployable z-conditioned controller: a fixed rule table over the contact
/// context. Lateral moves follow the contact force on the peg, i.e. away from
/// the touching wall and down the chamfer.
inline ActionVec z_controller_step(const ObservationVec& obs, const PrivilegedZ& z_in, TaskKind task,
                                   const ControllerGains& g, const SimConfig& cfg,
                                   std::mt19937_64* explore = nullptr) {
  const PrivilegedZ z = z_in.clamped();
  const bool thread = task == TaskKind::ThreadLike;
  ActionVec a;
  if (z.jam > 0.5) {
    a.v_cmd = {z.dir_x * g.jam_lateral_speed, z.dir_y * g.jam_lateral_speed, g.retract_speed};
  } else if (z.lateral > 0.6 && z.onset > 0.3) {
    a.v_cmd = {z.dir_x * g.lateral_speed, z.dir_y * g.lateral_speed, -0.5 * g.descend_speed};
    a.omega_cmd = thread ? g.screw_rate : 0.0;
  } else if (z.guided > 0.5) {
    const double k = g.guided_lateral_speed * z.lateral;
    a.v_cmd = {z.dir_x * k, z.dir_y * k, -g.descend_speed};
    a.omega_cmd = thread ? g.screw_rate : 0.0;
  } else {
    const Vec3 err = obs.noisy_target - obs.tip_pos_meas;
    const double e = err.norm_xy();
    if (obs.tip_pos_meas.z > g.approach_height && e > 0.25 * g.align_tol) {
      const double sp = std::min(g.approach_speed, g.approach_gain * e);
      a.v_cmd = {err.x / e * sp, err.y / e * sp, e < g.align_tol ? -g.descend_speed : 0.0};
    } else {
      a.v_cmd = {0.0, 0.0, -g.descend_speed};
    }
    a.omega_cmd = (thread && obs.force_flag) ? g.screw_rate : 0.0;
  }
  if (explore != nullptr && g.explore_sigma > 0) {
    std::normal_distribution<double> n(0.0, g.explore_sigma);
    a.v_cmd += Vec3{n(*explore), n(*explore), 0.0};
  }
  return clip_action(a, cfg);
}

struct TeacherOptions {
  bool disable_rotation = false;
};

namespace detail {

/// Scripted privileged controller. Reads the hidden bore centre directly.
class Teacher {
 public:
  Teacher(const SimConfig& cfg, TaskKind task, TeacherOptions opt, std::mt19937_64& rng)
      : cfg_(cfg), task_(task), opt_(opt), rng_(rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    gain_ = 1.5 + 4.0 * u(rng_);
    noise_ = 0.006 * u(rng_);
    descend_ = 0.006 + 0.006 * u(rng_);
    // some episodes press on blindly for a while after touching, which is
    // where most stalls and wedges in the teacher data come from
    if (u(rng_) < 0.6) hesitate_ = 5 + static_cast<int>(36.0 * u(rng_));
  }

  ActionVec act(const SimState& s, const ObservationVec& obs) {
    const ControllerGains g;
    const Profile prof(cfg_, task_);
    std::normal_distribution<double> n(0.0, 1.0);
    ActionVec a;
    if (retracting_) {
      const Vec3 err = s.bore_center - s.setpoint;
      a.v_cmd = {gain_ * err.x, gain_ * err.y, g.retract_speed};
      if (s.tip_pos.z >= retract_to_) retracting_ = false;
    } else if (s.jam_ema > 0.5) {
      retracting_ = true;
      retract_to_ = s.tip_pos.z + 2.0e-3;
      a.v_cmd = {0.0, 0.0, g.retract_speed};
    } else if (!s.contact_active && s.tip_pos.z > g.approach_height && !touched_) {
      const Vec3 err = obs.noisy_target - s.tip_pos;
      const double e = err.norm_xy();
      const double sp = std::min(g.approach_speed, g.approach_gain * e);
      a.v_cmd = e > 1e-9 ? Vec3{err.x / e * sp, err.y / e * sp, 0.0} : Vec3{};
      if (e < g.align_tol) a.v_cmd.z = -descend_;
    } else {
      touched_ = true;
      if (s.contact_active) ++pressed_;
      const Vec3 off = s.lateral_offset();
      if (pressed_ <= hesitate_) a.v_cmd = {0.0, 0.0, -descend_};
      else a.v_cmd = {-gain_ * off.x + noise_ * n(rng_), -gain_ * off.y + noise_ * n(rng_), -descend_};
    }
    const bool engaged = s.tip_pos.z < prof.bore_top() - cfg_.thread_engage_depth + 0.5e-3;
    if (task_ == TaskKind::ThreadLike && engaged && !opt_.disable_rotation && !retracting_) a.omega_cmd = g.screw_rate;
    return clip_action(a, cfg_);
  }

 private:
  const SimConfig& cfg_;
  TaskKind task_;
  TeacherOptions opt_;
  std::mt19937_64& rng_;
  double gain_ = 0, noise_ = 0, descend_ = 0;
  bool touched_ = false;
  int hesitate_ = 0, pressed_ = 0;
  bool retracting_ = false;
  double retract_to_ = 0.0;
};

}  // namespace detail

/// One privileged-teacher episode; fully determined by (cfg, task, seed).
inline Episode teacher_rollout(const SimConfig& cfg, TaskKind task, std::uint64_t seed, TeacherOptions opt = {}) {
  cfg.validate();
  auto sim_rng = make_rng(seed, task, 1);
  auto ctl_rng = make_rng(seed, task, 2);
  Episode ep;
  ep.task = task;
  ep.seed = seed;
  ep.config_digest = cfg.digest();
  ep.run_id = make_run_id(task, seed);

  SimState state = initial_state(cfg, sim_rng);
  ObservationVec obs = observe(state, ActionVec{}, cfg, sim_rng);
  PrivilegedZ z;
  detail::Teacher teacher(cfg, task, opt, ctl_rng);
  ep.steps.reserve(static_cast<std::size_t>(cfg.max_steps));
  for (int t = 0; t < cfg.max_steps; ++t) {
    const ActionVec a = teacher.act(state, obs);
    ep.steps.push_back({obs, a, z, truth_of(state)});
    auto r = sim_step(state, a, cfg, task, sim_rng);
    state = r.state;
    obs = r.obs;
    z = r.z;
    if (insertion_verified(state, cfg, task)) {
      ep.success = true;
      break;
    }
  }
  return ep;
}

/// Supplies the context fed to the z-controller at each step. Receives the
/// current observation and the simulator's true context for that step.
using ContextSource = std::function<PrivilegedZ(const ObservationVec&, const PrivilegedZ& true_z)>;

/// Runs the z-conditioned controller in closed loop. The simulator stream
/// depends only on (seed, task), so different context sources see the same
/// initial conditions and sensor noise sequence.
inline Episode controller_rollout(const SimConfig& cfg, TaskKind task, std::uint64_t seed, const ContextSource& source,
                                  const ControllerGains& gains = {}) {
  cfg.validate();
  auto sim_rng = make_rng(seed, task, 1);
  auto ctl_rng = make_rng(seed, task, 3);
  Episode ep;
  ep.task = task;
  ep.seed = seed;
  ep.config_digest = cfg.digest();
  ep.run_id = make_run_id(task, seed);
  SimState state = initial_state(cfg, sim_rng);
  ObservationVec obs = observe(state, ActionVec{}, cfg, sim_rng);
  PrivilegedZ z;
  for (int t = 0; t < cfg.max_steps; ++t) {
    const PrivilegedZ used = source(obs, z);
    const ActionVec a = z_controller_step(obs, used, task, gains, cfg, gains.explore_sigma > 0 ? &ctl_rng : nullptr);
    ep.steps.push_back({obs, a, z, truth_of(state)});
    auto r = sim_step(state, a, cfg, task, sim_rng);
    state = r.state;
    obs = r.obs;
    z = r.z;
    if (insertion_verified(state, cfg, task)) {
      ep.success = true;
      break;
    }
  }
  return ep;
}

// ---------------------------------------------------------------------- I/O

inline json step_row(const Episode& ep, std::size_t t) {
  const StepRecord& r = ep.steps[t];
  const bool last = t + 1 == ep.steps.size();
  return json{{"run_id", ep.run_id},
              {"task", task_name(ep.task)},
              {"seed", ep.seed},
              {"t", t},
              {"obs", r.obs.to_array()},
              {"action", r.action.to_array()},
              {"z", r.priv_z.to_array()},
              {"truth",
               {{"deployable", false},
                {"force", r.truth.true_force.arr()},
                {"contact", r.truth.contact_active},
                {"lateral_offset", r.truth.lateral_offset},
                {"tip_speed", r.truth.tip_speed}}},
              {"success", ep.success},
              {"insertion_verified", ep.success && last}};
}

inline void write_episodes_jsonl(std::ostream& os, const std::vector<Episode>& eps) {
  for (const auto& ep : eps)
    for (std::size_t t = 0; t < ep.steps.size(); ++t) os << step_row(ep, t).dump() << '\n';
}

/// Parses the JSONL step log back into episodes (rows grouped by run_id in
/// order of first appearance; rows within a run must be in t order).
inline std::vector<Episode> read_episodes_jsonl(std::istream& is, const std::string& config_digest = {}) {
  std::vector<Episode> eps;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("episodes line " + std::to_string(lineno) + ": " + e.what());
    }
    const auto run_id = j.at("run_id").get<std::string>();
    if (eps.empty() || eps.back().run_id != run_id) {
      for (const auto& e : eps)
        if (e.run_id == run_id) throw FormatError("episodes: run_id '" + run_id + "' is not contiguous");
      Episode ep;
      ep.run_id = run_id;
      ep.task = parse_task(j.at("task").get<std::string>());
      ep.seed = j.at("seed").get<std::uint64_t>();
      ep.success = j.at("success").get<bool>();
      ep.config_digest = config_digest;
      eps.push_back(std::move(ep));
    }
    Episode& ep = eps.back();
    if (j.at("t").get<std::size_t>() != ep.steps.size())
      throw FormatError("episodes line " + std::to_string(lineno) + ": steps out of order for " + run_id);
    StepRecord r;
    r.obs = ObservationVec::from_array(j.at("obs").get<std::array<double, ObservationVec::kSize>>());
    r.action = ActionVec::from_array(j.at("action").get<std::array<double, 4>>());
    r.priv_z = PrivilegedZ::from_array(j.at("z").get<std::array<double, PrivilegedZ::kSize>>());
    const auto& tr = j.at("truth");
    const auto f = tr.at("force").get<std::array<double, 3>>();
    r.truth.true_force = {f[0], f[1], f[2]};
    r.truth.contact_active = tr.at("contact").get<bool>();
    r.truth.lateral_offset = tr.at("lateral_offset").get<std::array<double, 2>>();
    r.truth.tip_speed = tr.at("tip_speed").get<double>();
    ep.steps.push_back(r);
  }
  return eps;
}

inline json episodes_manifest(const SimConfig& cfg, TaskKind task, const std::vector<std::uint64_t>& seeds) {
  return json{{"format", "corma-episodes-jsonl"}, {"version", 1}, {"task", task_name(task)},
              {"config", cfg.to_json()}, {"config_digest", cfg.digest()}, {"seeds", seeds}};
}

}  // namespace corma::sim
