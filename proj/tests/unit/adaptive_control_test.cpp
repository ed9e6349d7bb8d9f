// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/adaptive_control.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "test_util.hpp"

namespace skelsplat {
namespace {

using testing::random_transform;
using testing::random_vec3;

std::vector<Vec3> cluster(std::mt19937_64& rng, const Vec3& c, int n, double r) {
  std::vector<Vec3> out;
  for (int i = 0; i < n; ++i) out.push_back(c + random_vec3(rng, r));
  return out;
}

void check_model(const std::vector<Vec3>& sp, const SkinningWeights& w, std::size_t n) {
  ASSERT_NO_THROW(w.validate(n, sp.size()));
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = w.weights_of(i);
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-12);
  }
  for (double l : w.logits) EXPECT_TRUE(std::isfinite(l));
}

TEST(Impact, Cases) {
  // Superpoint 2 is referenced by nobody.
  SkinningWeights w{2, {0, 1, 1, 0}, {1.0, 0.0, 0.5, -0.5}};
  EXPECT_EQ(impact(w, 2), 0.0);
  SkinningWeights full{2, {3, 1}, {800.0, 0.0}};
  EXPECT_NEAR(impact(full, 3), 1.0, 1e-15);

  std::mt19937_64 rng(1);
  const auto g = cluster(rng, Vec3::Zero(), 30, 1.0), s = cluster(rng, Vec3::Zero(), 7, 1.0);
  auto sw = make_skinning(g, s, 4);
  std::normal_distribution<double> nd(0, 1);
  for (auto& l : sw.logits) l = nd(rng);
  const auto all = impacts(sw, 7);
  for (int j = 0; j < 7; ++j) {
    double ref = 0;
    for (std::size_t i = 0; i < 30; ++i)
      for (int k = 0; k < 4; ++k)
        if (sw.neighbors_of(i)[k] == j) ref += sw.weights_of(i)[k];
    EXPECT_NEAR(all[j], ref, 1e-9);
    EXPECT_NEAR(impact(sw, j), ref, 1e-9);
  }
}

TEST(WeightedGradNorm, Cases) {
  SkinningWeights w{2, {0, 1, 0, 1}, {0.3, -0.1, 2.0, 0.0}};
  EXPECT_EQ(weighted_grad_norm(w, 3, std::vector<double>{0.0, 0.0}), std::vector<double>(3, 0.0));
  SkinningWeights single{1, {1}, {0.0}};
  EXPECT_NEAR(weighted_grad_norm(single, 2, std::vector<double>{0.7})[1], 0.7, 1e-15);

  std::mt19937_64 rng(2);
  const auto g = cluster(rng, Vec3::Zero(), 20, 1.0), s = cluster(rng, Vec3::Zero(), 5, 1.0);
  auto sw = make_skinning(g, s, 3);
  std::normal_distribution<double> nd(0, 1);
  for (auto& l : sw.logits) l = nd(rng);
  std::vector<double> gn(20);
  for (auto& v : gn) v = std::abs(nd(rng));
  const auto out = weighted_grad_norm(sw, 5, gn);
  for (int j = 0; j < 5; ++j) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < 20; ++i)
      for (int k = 0; k < 3; ++k)
        if (sw.neighbors_of(i)[k] == j) num += sw.weights_of(i)[k] * gn[i], den += sw.weights_of(i)[k];
    EXPECT_NEAR(out[j], den > 0 ? num / den : 0.0, 1e-9);
  }
  EXPECT_THROW(weighted_grad_norm(sw, 5, std::vector<double>(3)), Error);
}

TEST(MergeDistance, Cases) {
  std::mt19937_64 rng(3);
  MotionSequence same, gap, rnd;
  for (int t = 0; t < 4; ++t) {
    const auto tr = random_transform(rng);
    same.times.push_back(t), gap.times.push_back(t), rnd.times.push_back(t);
    same.samples.push_back({{tr, tr}});
    gap.samples.push_back({{{tr.rotation, tr.translation + tr.rotation * Vec3(0.3, 0, 0)}, tr}});
    rnd.samples.push_back({{random_transform(rng), random_transform(rng)}});
  }
  EXPECT_NEAR(merge_distance(0, 1, same), 0.0, 1e-12);
  EXPECT_NEAR(merge_distance(0, 1, gap), 0.3, 1e-12);
  double ref = 0;
  for (const auto& s : rnd.samples) {
    const auto rel = compose(inverse(s.transforms[1]), s.transforms[0]);
    ref += se3_log(rel).twist.norm();
  }
  EXPECT_NEAR(merge_distance(0, 1, rnd), ref / 4, 1e-8);
}

struct Scene {
  std::vector<Vec3> gaussians, superpoints;
  SkinningWeights weights;
};

/// Two Gaussian clusters, one superpoint at each, plus `extra` far orphans.
Scene two_clusters(std::mt19937_64& rng, int extra = 0) {
  Scene s;
  s.gaussians = cluster(rng, Vec3(-1, 0, 0), 20, 0.2);
  const auto b = cluster(rng, Vec3(1, 0, 0), 20, 0.2);
  s.gaussians.insert(s.gaussians.end(), b.begin(), b.end());
  s.superpoints = {Vec3(-1, 0, 0), Vec3(1, 0, 0)};
  for (int e = 0; e < extra; ++e) s.superpoints.push_back(Vec3(0, 50.0 + e, 0));
  s.weights = make_skinning(s.gaussians, s.superpoints, std::min<int>(2, s.superpoints.size()));
  // Sharpen the binding so orphans carry essentially no weight.
  for (std::size_t i = 0; i < s.gaussians.size(); ++i) s.weights.logits_of(i)[0] = 30.0;
  return s;
}

TEST(Prune, RemovesOrphansOnly) {
  std::mt19937_64 rng(4);
  Scene s = two_clusters(rng, 2);
  ControlThresholds th;
  th.neighbors = 2;
  const auto report = prune({s.superpoints, s.weights, s.gaussians}, th);
  EXPECT_EQ(report.before, 4u);
  EXPECT_EQ(report.after, 2u);
  ASSERT_EQ(report.events.size(), 2u);
  EXPECT_EQ(report.events[0].event, "prune");
  EXPECT_EQ(report.remap, (std::vector<int>{0, 1, -1, -1}));
  EXPECT_EQ(s.superpoints.size(), 2u);
  check_model(s.superpoints, s.weights, s.gaussians.size());
  // Retained entries keep their logits.
  EXPECT_EQ(s.weights.logits_of(0)[0], 30.0);

  const auto again = prune({s.superpoints, s.weights, s.gaussians}, th);
  EXPECT_FALSE(again.changed());
}

TEST(Prune, NeverBelowTwoAndKeepsFullNeighborLists) {
  std::mt19937_64 rng(5);
  Scene s = two_clusters(rng, 0);
  ControlThresholds th;
  th.prune = 1e9;  // everything qualifies
  const auto report = prune({s.superpoints, s.weights, s.gaussians}, th);
  EXPECT_FALSE(report.changed());
  EXPECT_EQ(s.superpoints.size(), 2u);

  // Many superpoints, some orphaned: every Gaussian keeps K neighbors while M >= K.
  std::vector<Vec3> g = cluster(rng, Vec3::Zero(), 40, 1.0);
  std::vector<Vec3> sp = cluster(rng, Vec3::Zero(), 10, 1.0);
  for (int e = 0; e < 3; ++e) sp.push_back(Vec3(100.0 + e, 0, 0));
  auto w = make_skinning(g, sp, 5);
  ControlThresholds t5;
  const auto r = prune({sp, w, g}, t5);
  EXPECT_EQ(r.events.size(), 3u);
  EXPECT_EQ(w.k, 5);
  check_model(sp, w, g.size());
}

TEST(Densify, QuiescentModelHasNoClones) {
  std::mt19937_64 rng(6);
  Scene s = two_clusters(rng);
  ControlThresholds th;
  th.neighbors = 2;
  const std::vector<double> small(s.gaussians.size(), 1e-6);
  const auto r = densify({s.superpoints, s.weights, s.gaussians}, th, small);
  EXPECT_FALSE(r.changed());
  EXPECT_FALSE(densify({s.superpoints, s.weights, s.gaussians}, th, small).changed());
}

TEST(Densify, ClonesOverloadedSuperpointsAtTheirCentroid) {
  std::mt19937_64 rng(7);
  Scene s;
  s.gaussians = cluster(rng, Vec3(-1, 0, 0), 15, 0.2);
  const auto b = cluster(rng, Vec3(1, 0, 0), 15, 0.2);
  s.gaussians.insert(s.gaussians.end(), b.begin(), b.end());
  // One superpoint serving both clusters, another far away.
  s.superpoints = {Vec3(0, 0.1, 0), Vec3(0, 30, 0)};
  s.weights = make_skinning(s.gaussians, s.superpoints, 1);
  ControlThresholds th;
  th.neighbors = 1;
  th.clone = 40.0;
  // Large trajectory residual on the right cluster only.
  std::vector<double> gn(30, 0.0);
  for (int i = 15; i < 30; ++i) gn[i] = 1.0;
  Vec3 centroid = Vec3::Zero();
  for (const auto& p : s.gaussians) centroid += p;
  centroid /= 30.0;
  const auto r = densify({s.superpoints, s.weights, s.gaussians}, th, gn);
  ASSERT_EQ(r.events.size(), 1u);
  EXPECT_EQ(r.events[0].index, 0);
  EXPECT_EQ(s.superpoints.size(), 3u);
  Vec3 lo = s.gaussians[0], hi = s.gaussians[0];
  for (const auto& p : s.gaussians) lo = lo.cwiseMin(p), hi = hi.cwiseMax(p);
  EXPECT_NEAR((s.superpoints[2] - centroid).norm(), 1e-4 * (hi - lo).norm(), 1e-6);
  check_model(s.superpoints, s.weights, s.gaussians.size());

  // Clone count equals the number of threshold-exceeding superpoints.
  Scene t;
  t.gaussians = cluster(rng, Vec3::Zero(), 60, 1.0);
  t.superpoints = cluster(rng, Vec3::Zero(), 6, 1.0);
  t.weights = make_skinning(t.gaussians, t.superpoints, 3);
  std::vector<double> tg(60);
  for (auto& v : tg) v = std::uniform_real_distribution<double>(0, 1e-3)(rng);
  const auto gj = weighted_grad_norm(t.weights, 6, tg);
  const auto wj = impacts(t.weights, 6);
  ControlThresholds tt;
  tt.neighbors = 3;
  const double ct = tt.clone_threshold(60, 6);
  EXPECT_DOUBLE_EQ(ct, 40.0);
  int expected = 0;
  for (int j = 0; j < 6; ++j) expected += (gj[j] > tt.grad || wj[j] > ct) ? 1 : 0;
  const auto rt = densify({t.superpoints, t.weights, t.gaussians}, tt, tg);
  EXPECT_EQ(static_cast<int>(rt.events.size()), expected);
  EXPECT_EQ(t.superpoints.size(), 6u + expected);
}

TEST(Densify, RespectsCap) {
  std::mt19937_64 rng(8);
  Scene s = two_clusters(rng);
  ControlThresholds th;
  th.neighbors = 2;
  th.max_superpoints = 3;
  const std::vector<double> big(s.gaussians.size(), 1.0);
  const auto r = densify({s.superpoints, s.weights, s.gaussians}, th, big);
  EXPECT_EQ(r.events.size(), 1u);
  EXPECT_EQ(s.superpoints.size(), 3u);
}

MotionSequence motion_of(const std::vector<RigidTransform>& per_superpoint, int steps) {
  MotionSequence m;
  for (int t = 0; t < steps; ++t) {
    m.times.push_back(t);
    MotionSample s;
    for (const auto& tr : per_superpoint) {
      const Vec3 w = so3_log(tr.rotation) * (t / static_cast<double>(steps));
      s.transforms.push_back({so3_exp(w), tr.translation * t});
    }
    m.samples.push_back(s);
  }
  return m;
}

TEST(Merge, DuplicatedSuperpointMerges) {
  std::mt19937_64 rng(9);
  Scene s = two_clusters(rng);
  s.superpoints.push_back(s.superpoints[1]);
  s.weights = make_skinning(s.gaussians, s.superpoints, 3);
  const RigidTransform a{so3_exp(Vec3(0, 0, 0.5)), Vec3(0.1, 0, 0)};
  const RigidTransform b{so3_exp(Vec3(0.4, 0, 0)), Vec3(0, 0.2, 0)};
  const auto motion = motion_of({a, b, b}, 5);
  EXPECT_EQ(merge_distance(1, 2, motion), 0.0);
  ControlThresholds th;
  th.neighbors = 3;
  const auto r = merge({s.superpoints, s.weights, s.gaussians}, th, motion);
  EXPECT_EQ(r.before, 3u);
  EXPECT_EQ(r.after, 2u);
  EXPECT_EQ(r.remap, (std::vector<int>{0, 1, 1}));
  EXPECT_LT((s.superpoints[1] - Vec3(1, 0, 0)).norm(), 1e-15);
  check_model(s.superpoints, s.weights, s.gaussians.size());

  // Repeating with the motion of the merged model is a no-op.
  const auto again = merge({s.superpoints, s.weights, s.gaussians}, th, motion_of({a, b}, 5));
  EXPECT_FALSE(again.changed());
}

TEST(Merge, HingeSidesNeverMerge) {
  std::mt19937_64 rng(10);
  Scene s = two_clusters(rng);
  const auto motion = motion_of({RigidTransform::identity(), {so3_exp(Vec3(0, 0, 1.0)), Vec3::Zero()}}, 5);
  ControlThresholds th;
  th.neighbors = 2;
  EXPECT_FALSE(merge({s.superpoints, s.weights, s.gaussians}, th, motion).changed());
}

TEST(Merge, ChainMergesTransitivelyAndKeepsTwo) {
  std::mt19937_64 rng(11);
  std::vector<Vec3> g = cluster(rng, Vec3::Zero(), 30, 1.0);
  // Four collinear superpoints, consecutive ones 3e-4 apart in motion.
  std::vector<Vec3> sp{Vec3(0, 0, 0), Vec3(0.1, 0, 0), Vec3(0.2, 0, 0), Vec3(0.3, 0, 0), Vec3(5, 0, 0)};
  auto w = make_skinning(g, sp, 3);
  MotionSequence m;
  for (int t = 0; t < 3; ++t) {
    m.times.push_back(t);
    MotionSample s;
    for (int j = 0; j < 4; ++j) s.transforms.push_back({Mat3::Identity(), Vec3(3e-4 * j, 0, 0)});
    s.transforms.push_back({so3_exp(Vec3(0, 0, 1)), Vec3::Zero()});
    m.samples.push_back(s);
  }
  // 0-1, 1-2, 2-3 are below threshold but 0-2 (6e-4) and 0-3 are not.
  ControlThresholds th;
  th.neighbors = 3;
  th.merge_neighbors = 2;
  const auto r = merge({sp, w, g}, th, m);
  EXPECT_EQ(r.after, 2u);
  EXPECT_EQ(r.remap, (std::vector<int>{0, 0, 0, 0, 1}));
  check_model(sp, w, g.size());

  // All superpoints share one motion: merging stops at two.
  std::vector<Vec3> sp2{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)};
  auto w2 = make_skinning(g, sp2, 3);
  MotionSequence still;
  still.times = {0, 1};
  still.samples.assign(2, MotionSample::identity(4));
  const auto r2 = merge({sp2, w2, g}, th, still);
  EXPECT_EQ(sp2.size(), 2u);
  EXPECT_EQ(r2.after, 2u);
  check_model(sp2, w2, g.size());
}

TEST(RebuildSkinning, CarriesLogitsAndCombinesMerged) {
  const std::vector<Vec3> g{Vec3(0, 0, 0)};
  const std::vector<Vec3> old_sp{Vec3(0.1, 0, 0), Vec3(0.2, 0, 0), Vec3(0.3, 0, 0)};
  SkinningWeights old{3, {0, 1, 2}, {1.0, 2.0, -1.0}};
  // 0 and 1 merge into new 0; 2 becomes new 1.
  const std::vector<Vec3> sp{Vec3(0.15, 0, 0), Vec3(0.3, 0, 0)};
  const auto w = rebuild_skinning(g, sp, old, std::vector<int>{0, 0, 1}, 3);
  EXPECT_EQ(w.k, 2);
  EXPECT_NEAR(w.logits[0], std::log(std::exp(1.0) + std::exp(2.0)), 1e-12);
  EXPECT_EQ(w.logits[1], -1.0);
  const auto ow = old.weights_of(0);
  EXPECT_NEAR(w.weights_of(0)[0], ow[0] + ow[1], 1e-12);
}

}  // namespace
}  // namespace skelsplat
