#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "corma/datakit.hpp"

using namespace corma;
using namespace corma::data;
using sim::Episode;
using sim::TaskKind;

namespace {

Episode synthetic_episode(int len, TaskKind task = TaskKind::PegLike, std::uint64_t seed = 0) {
  Episode ep;
  ep.task = task;
  ep.seed = seed;
  ep.run_id = sim::make_run_id(task, seed);
  for (int t = 0; t < len; ++t) {
    sim::StepRecord r;
    r.obs.tip_pos_meas = {0.001 * t, -0.002 * t, 0.01 - 1e-4 * t};
    r.obs.prev_action = {{0.001 * (seed + 1), 0, -0.005}, 0};
    r.priv_z.onset = 0.5 + 0.01 * (t % 7);
    r.priv_z.jam = 0.1 * (static_cast<double>(seed % 5));
    r.truth.true_force = {99, 99, 99};
    ep.steps.push_back(r);
  }
  return ep;
}

std::vector<Episode> teacher_batch(int per_task) {
  std::vector<Episode> eps;
  for (auto task : {TaskKind::PegLike, TaskKind::GearLike})
    for (int s = 0; s < per_task; ++s) eps.push_back(sim::teacher_rollout({}, task, static_cast<std::uint64_t>(s)));
  return eps;
}

}  // namespace

TEST(Windowing, SingleStepEpisodeIsPadded) {
  const auto w = window_episodes({synthetic_episode(1)}, {}, {});
  ASSERT_EQ(w.size(), 1u);
  EXPECT_EQ(w[0].pad_len, 31);
  for (std::size_t i = 0; i < 31 * kFeatureWidth; ++i) EXPECT_EQ(w[0].features[i], 0.0);
}

TEST(Windowing, StrideAnchorsAtEpisodeEnd) {
  const auto w = window_episodes({synthetic_episode(100)}, {}, {});
  ASSERT_EQ(w.size(), 25u);
  for (std::size_t k = 0; k < w.size(); ++k) EXPECT_EQ(w[k].final_step, 3 + 4 * static_cast<int>(k));
  // brute-force anchor enumeration
  int n = 0;
  for (int t = 0; t < 100; ++t) n += (99 - t) % 4 == 0;
  EXPECT_EQ(n, 25);
}

TEST(Windowing, TargetIsFinalStepContextAndRowsAreDeployable) {
  const auto ep = synthetic_episode(50);
  const auto w = window_episodes({ep}, {}, {});
  for (const auto& s : w) {
    EXPECT_EQ(s.z_target, ep.steps[static_cast<std::size_t>(s.final_step)].priv_z.to_array());
    const auto row = feature_row(ep.steps[static_cast<std::size_t>(s.final_step)].obs);
    for (std::size_t c = 0; c < kFeatureWidth; ++c) EXPECT_EQ(s.features[31 * kFeatureWidth + c], row[c]);
    for (double v : s.features) EXPECT_NE(v, 99.0);
  }
}

TEST(Windowing, AllFreeEpisodeHasFreeWindows) {
  for (const auto& s : window_episodes({synthetic_episode(80)}, {}, {})) EXPECT_EQ(s.regime, RegimeLabel::Free);
}

TEST(Windowing, EmptyInputIsCounted) {
  WindowCounts c;
  EXPECT_TRUE(window_episodes({}, {}, {}, &c).empty());
  EXPECT_EQ(c.empty_inputs, 1u);
}

TEST(Windowing, SpecValidation) {
  EXPECT_THROW((WindowSpec{0, 4, 1}.validate()), InvalidArgument);
  EXPECT_THROW((WindowSpec{32, 0, 1}.validate()), InvalidArgument);
}

TEST(Normalizer, ConstantColumnIsFloored) {
  const auto w = window_episodes({synthetic_episode(40)}, {}, {});
  const auto st = fit_normalizer(w, 32);
  EXPECT_EQ(st.feat_std[3], kStdFloor);  // force_meas.x is constant zero
  EXPECT_GT(st.feat_std[0], 1e-6);
  EXPECT_THROW(fit_normalizer({}, 32), InvalidArgument);
}

TEST(Normalizer, StandardizeThenRefitIsIdentity) {
  const auto eps = teacher_batch(10);
  auto w = window_episodes(eps, {}, {});
  const auto st = fit_normalizer(w, 32);
  for (auto& s : w) {
    st.standardize_window(s.features.data(), 32, s.pad_len);
    s.z_target = st.standardize_z(s.z_target);
  }
  const auto again = fit_normalizer(w, 32);
  for (std::size_t c = 0; c < kFeatureWidth; ++c) {
    EXPECT_NEAR(again.feat_mean[c], 0.0, 1e-9) << c;
    if (st.feat_std[c] > kStdFloor) {
      EXPECT_NEAR(again.feat_std[c], 1.0, 1e-9) << c;
    }
  }
  for (std::size_t k = 0; k < kZDim; ++k) {
    EXPECT_NEAR(again.z_mean[k], 0.0, 1e-9);
    EXPECT_NEAR(again.z_std[k] * again.z_std[k], 1.0, 1e-9);
  }
}

TEST(Normalizer, PadRowsExcluded) {
  auto w = window_episodes({synthetic_episode(3)}, {}, {});
  const auto st = fit_normalizer(w, 32);
  // rows 0..2 of x = 0, .001, .002: mean .001
  EXPECT_NEAR(st.feat_mean[0], 0.001, 1e-15);
}

TEST(Splits, TenEpisodesGiveTwoValidationEpisodes) {
  std::vector<Episode> eps;
  for (int s = 0; s < 10; ++s) eps.push_back(synthetic_episode(20, TaskKind::PegLike, static_cast<std::uint64_t>(s)));
  const auto [tr, va] = make_splits(eps, 0.2, 11);
  EXPECT_EQ(va.run_ids.size(), 2u);
  EXPECT_EQ(tr.run_ids.size(), 8u);
  const auto [tr2, va2] = make_splits(eps, 0.2, 11);
  EXPECT_EQ(va.run_ids, va2.run_ids);
  EXPECT_THROW(make_splits({eps[0]}, 0.2, 1), InvalidArgument);
  EXPECT_THROW(make_splits(eps, 1.0, 1), InvalidArgument);
}

TEST(Splits, NoRunIdLeakageAndValUsesTrainStats) {
  const auto eps = teacher_batch(15);
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto [tr, va] = make_splits(eps, 0.25, seed);
    std::set<std::string> a(tr.run_ids.begin(), tr.run_ids.end());
    for (const auto& r : va.run_ids) EXPECT_EQ(a.count(r), 0u) << r;
    EXPECT_EQ(tr.stats, va.stats);
    EXPECT_EQ(tr.stats, fit_normalizer(tr.samples, 32));
    EXPECT_NE(va.stats, fit_normalizer(va.samples, 32));
  }
}

TEST(Splits, BothTasksInBothSplits) {
  const auto eps = teacher_batch(6);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto [tr, va] = make_splits(eps, 0.2, seed);
    for (const auto* ws : {&tr, &va}) {
      std::set<TaskKind> tasks;
      for (const auto& s : ws->samples) tasks.insert(s.task);
      EXPECT_EQ(tasks.size(), 2u);
    }
  }
}

TEST(Splits, TrainTargetsHaveUnitVarianceAfterStandardization) {
  const auto [tr, va] = make_splits(teacher_batch(10), 0.2, 4);
  for (std::size_t k = 0; k < kZDim; ++k) {
    double m = 0, v = 0;
    for (const auto& s : tr.samples) m += tr.stats.standardize_z(s.z_target)[k];
    m /= static_cast<double>(tr.size());
    for (const auto& s : tr.samples) v += std::pow(tr.stats.standardize_z(s.z_target)[k] - m, 2);
    EXPECT_NEAR(v / static_cast<double>(tr.size()), 1.0, 1e-9) << k;
  }
}

TEST(Binary, RoundTripIsBitIdentical) {
  const auto [tr, va] = make_splits(teacher_batch(4), 0.25, 2);
  std::stringstream ss;
  write_windowset(ss, va);
  const auto back = read_windowset(ss);
  ASSERT_EQ(back.size(), va.size());
  EXPECT_EQ(back.stats, va.stats);
  EXPECT_EQ(back.run_ids, va.run_ids);
  EXPECT_EQ(back.split_tag, "val");
  EXPECT_EQ(back.source_digest, va.source_digest);
  for (std::size_t i = 0; i < va.size(); ++i) {
    EXPECT_EQ(back.samples[i].features, va.samples[i].features);
    EXPECT_EQ(back.samples[i].z_target, va.samples[i].z_target);
    EXPECT_EQ(back.samples[i].regime, va.samples[i].regime);
    EXPECT_EQ(back.samples[i].task, va.samples[i].task);
    EXPECT_EQ(back.samples[i].pad_len, va.samples[i].pad_len);
  }
  std::stringstream again;
  write_windowset(again, back);
  std::stringstream first;
  write_windowset(first, va);
  EXPECT_EQ(again.str(), first.str());
  EXPECT_EQ(first.str().substr(0, 4), "CRMA");
}

TEST(Binary, CorruptInputRejected) {
  const auto [tr, va] = make_splits(teacher_batch(3), 0.3, 2);
  std::stringstream ss;
  write_windowset(ss, va);
  auto bytes = ss.str();
  std::istringstream trunc(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_windowset(trunc), FormatError);
  bytes[0] = 'X';
  std::istringstream bad(bytes);
  EXPECT_THROW(read_windowset(bad), FormatError);
}
