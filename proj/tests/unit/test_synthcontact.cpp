#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "corma/regimekit.hpp"
#include "corma/synthcontact.hpp"

using namespace corma;
using namespace corma::sim;

namespace {

SimState resting_state() {
  SimState s;
  s.bore_center = {0, 0, 0};
  return s;
}

std::string jsonl(const Episode& ep) {
  std::ostringstream os;
  write_episodes_jsonl(os, {ep});
  return os.str();
}

double success_rate(TaskKind task, int n, TeacherOptions opt = {}) {
  const SimConfig cfg;
  int ok = 0;
  for (int s = 0; s < n; ++s) ok += teacher_rollout(cfg, task, static_cast<std::uint64_t>(s), opt).success;
  return static_cast<double>(ok) / n;
}

}  // namespace

TEST(Common, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Common, LittleEndianRoundTrip) {
  std::stringstream ss;
  le::put<std::uint32_t>(ss, 0x01020304u);
  le::put<double>(ss, -1.25);
  EXPECT_EQ(ss.str().substr(0, 4), std::string("\x04\x03\x02\x01", 4));
  EXPECT_EQ(le::get<std::uint32_t>(ss), 0x01020304u);
  EXPECT_EQ(le::get<double>(ss), -1.25);
  EXPECT_THROW(le::get<double>(ss), FormatError);
}

TEST(SimConfig, RejectsInvalidAndUnknownKeys) {
  SimConfig c;
  c.peg_radius = c.bore_radius + 1e-3;
  EXPECT_THROW(c.validate(), InvalidArgument);
  auto j = SimConfig{}.to_json();
  j["bogus"] = 1;
  EXPECT_THROW(SimConfig::from_json(j), InvalidArgument);
  EXPECT_EQ(SimConfig::from_json(SimConfig{}.to_json()).digest(), SimConfig{}.digest());
}

TEST(SimStep, FreeSpaceMotionHasNoForce) {
  const SimConfig cfg;
  std::mt19937_64 rng(1);
  SimState s = resting_state();
  s.tip_pos = s.setpoint = {0, 0, 10e-3};
  const auto r = sim_step(s, {{0, 0, -5e-3}, 0}, cfg, TaskKind::PegLike, rng);
  EXPECT_EQ(r.state.true_force.norm(), 0.0);
  EXPECT_FALSE(r.state.contact_active);
  EXPECT_TRUE(r.z.is_zero());
  EXPECT_NEAR(r.state.tip_pos.z, 10e-3 - 5e-3 * cfg.dt, 1e-15);
}

TEST(SimStep, FlatSurfacePenetrationGivesSpringForce) {
  const SimConfig cfg;
  std::mt19937_64 rng(1);
  SimState s = resting_state();
  s.tip_pos = {30e-3, 0, 0};
  s.setpoint = {30e-3, 0, -1e-3};
  const auto r = sim_step(s, {}, cfg, TaskKind::PegLike, rng);
  EXPECT_NEAR(r.state.true_force.z, 2.0, 1e-9);
  EXPECT_NEAR(r.state.true_force.norm_xy(), 0.0, 1e-12);
  EXPECT_EQ(r.state.tip_pos.z, 0.0);
  EXPECT_TRUE(r.state.contact_active);
}

TEST(SimStep, JamEmaFollowsClosedFormAndTipHolds) {
  const SimConfig cfg;
  std::mt19937_64 rng(1);
  SimState s = resting_state();
  s.tip_pos = {cfg.clearance(), 0, -7e-3};
  s.setpoint = {cfg.clearance() + 1.5e-3, 0, -7e-3};
  for (int k = 1; k <= 20; ++k) {
    s = sim_step(s, {{0, 0, -5e-3}, 0}, cfg, TaskKind::PegLike, rng).state;
    EXPECT_NEAR(s.jam_ema, 1.0 - std::pow(0.8, k), 1e-12) << "step " << k;
    EXPECT_EQ(s.tip_pos.z, -7e-3);
  }
  EXPECT_NEAR(s.jam_ema, 0.988, 1e-3);
}

TEST(SimStep, RejectsNonFiniteInput) {
  const SimConfig cfg;
  std::mt19937_64 rng(1);
  SimState s = resting_state();
  EXPECT_THROW(sim_step(s, {{NAN, 0, 0}, 0}, cfg, TaskKind::PegLike, rng), InvalidArgument);
  s.tip_pos.x = INFINITY;
  EXPECT_THROW(sim_step(s, {}, cfg, TaskKind::PegLike, rng), InvalidArgument);
}

TEST(SimStep, OnsetDecaysGeometricallyUnderMaintainedContact) {
  const SimConfig cfg;
  std::mt19937_64 rng(1);
  SimState s = resting_state();
  s.tip_pos = {30e-3, 0, 1e-4};
  s.setpoint = {30e-3, 0, -1e-3};
  double prev = -1;
  for (int k = 0; k < 15; ++k) {
    const auto r = sim_step(s, {}, cfg, TaskKind::PegLike, rng);
    ASSERT_TRUE(r.state.contact_active);
    if (k == 0) {
      EXPECT_EQ(r.z.onset, 1.0);
    }
    if (prev > 0) {
      EXPECT_NEAR(r.z.onset / prev, std::exp(-1.0 / cfg.tau_on), 1e-14);
    }
    prev = r.z.onset;
    s = r.state;
  }
}

TEST(PrivilegedZ, NeverContactedIsZero) {
  SimState s = resting_state();
  s.guided_ema = 0;
  EXPECT_TRUE(compute_privileged_z(s, {}, SimConfig{}).is_zero());
}

TEST(PrivilegedZ, DirectEvaluation) {
  SimState s = resting_state();
  s.contact_active = true;
  s.true_force = {3, 0, 4};
  s.step = 9;
  s.onset_step = 9;
  const auto z = compute_privileged_z(s, {}, SimConfig{});
  EXPECT_EQ(z.onset, 1.0);
  EXPECT_NEAR(z.lateral, 0.6, 1e-6);
  EXPECT_NEAR(z.dir_x, 1.0, 1e-6);
  EXPECT_EQ(z.dir_y, 0.0);
}

TEST(PrivilegedZ, DirectionGatedBelowMinimumLateralForce) {
  SimState s = resting_state();
  s.contact_active = true;
  s.true_force = {0.3, 0.2, 4};
  const auto z = compute_privileged_z(s, {}, SimConfig{});
  EXPECT_EQ(z.dir_x, 0.0);
  EXPECT_EQ(z.dir_y, 0.0);
  EXPECT_GT(z.lateral, 0.0);
}

TEST(PrivilegedZ, RangesHoldOverRandomWalks) {
  const SimConfig cfg;
  std::size_t steps = 0;
  for (int task = 0; task < 3; ++task) {
    std::mt19937_64 rng(100 + task), act(200 + task);
    std::normal_distribution<double> n(0.0, 0.01);
    for (int ep = 0; ep < 10; ++ep) {
      SimState s = initial_state(cfg, rng);
      for (int t = 0; t < 400; ++t, ++steps) {
        ActionVec a{{n(act), n(act), n(act) - 0.004}, 500 * n(act)};
        const auto r = sim_step(s, a, cfg, task_from_code(task), rng);
        ASSERT_TRUE(r.z.in_range()) << "task " << task << " step " << t;
        ASSERT_TRUE(r.state.finite());
        s = r.state;
      }
    }
  }
  EXPECT_GE(steps, 10000u);
}

TEST(PrivilegedZ, RangesHoldOverTeacherEpisodes) {
  const SimConfig cfg;
  std::size_t steps = 0;
  for (int task = 0; task < 3; ++task)
    for (std::uint64_t seed = 0; seed < 30; ++seed)
      for (const auto& r : teacher_rollout(cfg, task_from_code(task), seed).steps) {
        ASSERT_TRUE(r.priv_z.in_range());
        ++steps;
      }
  EXPECT_GE(steps, 10000u);
}

TEST(Teacher, RolloutIsDeterministic) {
  const SimConfig cfg;
  for (auto task : {TaskKind::PegLike, TaskKind::GearLike, TaskKind::ThreadLike})
    EXPECT_EQ(jsonl(teacher_rollout(cfg, task, 7)), jsonl(teacher_rollout(cfg, task, 7)));
  EXPECT_NE(jsonl(teacher_rollout(cfg, TaskKind::PegLike, 7)), jsonl(teacher_rollout(cfg, TaskKind::PegLike, 8)));
}

TEST(Teacher, PegSuccessRateMeetsFloor) { EXPECT_GE(success_rate(TaskKind::PegLike, 500), 0.8); }

TEST(Teacher, ThreadWithoutRotationFails) {
  EXPECT_LE(success_rate(TaskKind::ThreadLike, 100, TeacherOptions{true}), 0.05);
  EXPECT_GE(success_rate(TaskKind::ThreadLike, 100), 0.5);
}

TEST(Teacher, EpisodeInvariants) {
  const SimConfig cfg;
  for (int task = 0; task < 3; ++task)
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const auto ep = teacher_rollout(cfg, task_from_code(task), seed);
      EXPECT_LE(ep.steps.size(), static_cast<std::size_t>(cfg.max_steps));
      EXPECT_EQ(ep.run_id, make_run_id(ep.task, seed));
    }
}

TEST(Teacher, BatchShowsAllFourRegimes) {
  const SimConfig cfg;
  for (auto task : {TaskKind::PegLike, TaskKind::GearLike}) {
    std::array<std::size_t, regime::kNumRegimes> c{};
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto k = regime::count_labels(regime::label_episode(teacher_rollout(cfg, task, seed), {}));
      for (int i = 0; i < regime::kNumRegimes; ++i) c[i] += k[i];
    }
    for (int i = 0; i < regime::kNumRegimes; ++i) EXPECT_GT(c[i], 0u) << task_name(task) << " regime " << i;
  }
}

TEST(Controller, ZeroContextAboveTargetDescends) {
  const SimConfig cfg;
  ObservationVec o;
  o.noisy_target = {0, 0, -10e-3};
  o.tip_pos_meas = {0, 0, 5e-3};
  const auto a = z_controller_step(o, {}, TaskKind::PegLike, {}, cfg);
  EXPECT_EQ(a.v_cmd.x, 0.0);
  EXPECT_EQ(a.v_cmd.y, 0.0);
  EXPECT_LT(a.v_cmd.z, 0.0);

  o.tip_pos_meas = {4e-3, -3e-3, 5e-3};
  const auto b = z_controller_step(o, {}, TaskKind::PegLike, {}, cfg);
  EXPECT_LT(b.v_cmd.x, 0.0);
  EXPECT_GT(b.v_cmd.y, 0.0);
  EXPECT_NEAR(b.v_cmd.x / b.v_cmd.y, -4.0 / 3.0, 1e-12);
}

TEST(Controller, JamRetractsAndMovesWithContactForce) {
  PrivilegedZ z;
  z.jam = 0.9;
  z.dir_x = 1.0;
  const auto a = z_controller_step({}, z, TaskKind::PegLike, {}, SimConfig{});
  EXPECT_GT(a.v_cmd.z, 0.0);
  EXPECT_GT(a.v_cmd.x, 0.0);
  EXPECT_EQ(a.v_cmd.y, 0.0);
}

TEST(Controller, ClampsOutOfRangeContext) {
  PrivilegedZ z{5.0, 5.0, -3.0, 9.0, 0.0, -1.0};
  const auto a = z_controller_step({}, z, TaskKind::PegLike, {}, SimConfig{});
  EXPECT_TRUE(a.finite());
  EXPECT_LE(std::abs(a.v_cmd.x), SimConfig{}.max_speed + 1e-15);
}

TEST(Controller, OracleClosedLoopSucceeds) {
  const SimConfig cfg;
  const ContextSource oracle = [](const ObservationVec&, const PrivilegedZ& z) { return z; };
  int ok = 0;
  for (std::uint64_t s = 0; s < 50; ++s) ok += controller_rollout(cfg, TaskKind::PegLike, s, oracle).success;
  EXPECT_GE(ok, 40);
}

TEST(Serialization, ObservationCarriesNoTruth) {
  ObservationVec o;
  const auto j = o.to_json();
  for (const char* k : {"true_force", "truth", "contact_active", "bore_center", "lateral_offset", "tip_pos", "z"})
    EXPECT_FALSE(j.contains(k)) << k;
  EXPECT_EQ(j.size(), 5u);
}

TEST(Serialization, JsonlRoundTripAndTruthFlag) {
  const auto ep = teacher_rollout(SimConfig{}, TaskKind::GearLike, 3);
  std::istringstream is(jsonl(ep));
  const auto back = read_episodes_jsonl(is);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(jsonl(back[0]), jsonl(ep));
  EXPECT_EQ(step_row(ep, 0)["truth"]["deployable"], false);
  std::istringstream bad("{\"run_id\": 3}\n");
  EXPECT_THROW(read_episodes_jsonl(bad), std::exception);
}
