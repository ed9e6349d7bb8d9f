// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/superpoint_model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "test_util.hpp"

namespace skelsplat {
namespace {

using testing::random_transform;
using testing::random_vec3;

TEST(Fps, AllPointsWhenMEqualsN) {
  std::mt19937_64 rng(1);
  std::vector<Vec3> pts;
  for (int i = 0; i < 9; ++i) pts.push_back(random_vec3(rng));
  const auto idx = farthest_point_sampling(pts, 9, 4);
  EXPECT_EQ(std::set<int>(idx.begin(), idx.end()).size(), 9u);
}

TEST(Fps, SingleIsSeededStart) {
  std::vector<Vec3> pts(20, Vec3::Zero());
  for (int i = 0; i < 20; ++i) pts[i].x() = i;
  EXPECT_EQ(farthest_point_sampling(pts, 1, 7), farthest_point_sampling(pts, 1, 7));
  EXPECT_EQ(farthest_point_sampling(pts, 1, 7).size(), 1u);
  EXPECT_THROW(farthest_point_sampling(pts, 21, 7), Error);
}

TEST(Fps, TwoClustersGiveOneEach) {
  std::mt19937_64 rng(2);
  std::vector<Vec3> pts;
  for (int i = 0; i < 30; ++i) pts.push_back(random_vec3(rng, 0.1));
  for (int i = 0; i < 30; ++i) pts.push_back(Vec3(10, 0, 0) + random_vec3(rng, 0.1));
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto idx = farthest_point_sampling(pts, 2, seed);
    EXPECT_NE(idx[0] < 30, idx[1] < 30);
  }
}

TEST(Knn, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  std::vector<Vec3> q, r;
  for (int i = 0; i < 40; ++i) q.push_back(random_vec3(rng));
  for (int i = 0; i < 12; ++i) r.push_back(random_vec3(rng));
  const auto nb = knn_assign(q, r, 5);
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<int> order(r.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return (r[a] - q[i]).norm() < (r[b] - q[i]).norm(); });
    for (int k = 0; k < 5; ++k) EXPECT_EQ(nb[i * 5 + k], order[k]);
  }
}

TEST(Knn, CoincidentIsFirstAndFullK) {
  std::vector<Vec3> r = {{0, 0, 0}, {1, 0, 0}, {0, 2, 0}};
  std::vector<Vec3> q = {{0, 0, 0}};
  const auto nb = knn_assign(q, r, 3);
  EXPECT_EQ(nb, (std::vector<int>{0, 1, 2}));
  EXPECT_THROW(knn_assign(q, r, 4), Error);
}

TEST(Skinning, SoftmaxCases) {
  const std::vector<double> eq(5, 0.3);
  for (double w : skinning_weights(eq)) EXPECT_DOUBLE_EQ(w, 0.2);
  const std::vector<double> peaked = {20, 0, 0, 0, 0};
  EXPECT_GT(skinning_weights(peaked)[0], 0.999);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> l(5);
    for (auto& v : l) v = n(rng);
    const auto w = skinning_weights(l);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    for (double v : w) EXPECT_GT(v, 0.0);
  }
}

TEST(DeformField, ZeroInitIsIdentityAndPure) {
  const DeformField phi(32, 2, 5);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10; ++i) {
    const Vec3 p = random_vec3(rng);
    const RigidTransform t = phi.eval(p, 0.1 * i);
    EXPECT_EQ(t.rotation, Mat3::Identity());
    EXPECT_EQ(t.translation, Vec3::Zero());
  }
  EXPECT_EQ(DeformField::input_size(), 66 + 14);
}

TEST(DeformField, BackwardMatchesFiniteDifferences) {
  DeformField phi(8, 2, 6);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 0.3);
  for (auto& b : phi.net().parameter_blocks())
    for (auto& v : b) v += n(rng);
  std::vector<Vec3> pos = {random_vec3(rng, 0.5), random_vec3(rng, 0.5), random_vec3(rng, 0.5)};
  const std::vector<double> times = {0.1, 0.5, 0.9};
  std::vector<Mat3> gr(3);
  std::vector<Vec3> go(3);
  for (int q = 0; q < 3; ++q) {
    gr[q] = Mat3::Random();
    go[q] = Vec3::Random();
  }
  auto loss = [&](const DeformField& f, const std::vector<Vec3>& p) {
    const auto s = f.eval_batch(p, times);
    double l = 0;
    for (int q = 0; q < 3; ++q) l += (s.transforms[q].rotation.cwiseProduct(gr[q])).sum() + s.transforms[q].translation.dot(go[q]);
    return l;
  };
  DeformField::Batch batch;
  phi.eval_batch(pos, times, &batch);
  std::vector<Vec3> gp(3, Vec3::Zero());
  const auto grads = phi.backward(batch, gr, go, gp);
  const auto gblocks = Mlp::gradient_blocks(grads);
  auto blocks = phi.net().parameter_blocks();
  const double h = 1e-6;
  double worst = 0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t i = 0; i < blocks[b].size(); ++i) {
      const double o = blocks[b][i];
      blocks[b][i] = o + h;
      const double lp = loss(phi, pos);
      blocks[b][i] = o - h;
      const double lm = loss(phi, pos);
      blocks[b][i] = o;
      const double fd = (lp - lm) / (2 * h);
      worst = std::max(worst, std::abs(fd - gblocks[b][i]) / std::max(1e-3, std::abs(fd)));
    }
  }
  for (int q = 0; q < 3; ++q) {
    for (int c = 0; c < 3; ++c) {
      auto p = pos, m = pos;
      p[q][c] += h;
      m[q][c] -= h;
      const double fd = (loss(phi, p) - loss(phi, m)) / (2 * h);
      worst = std::max(worst, std::abs(fd - gp[q][c]) / std::max(1e-3, std::abs(fd)));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

GaussianSet small_set(std::mt19937_64& rng, int n) {
  GaussianSet set(0);
  for (int i = 0; i < n; ++i) {
    Gaussian3D g;
    g.position = random_vec3(rng);
    g.rotation = testing::random_quat(rng);
    g.log_scale = random_vec3(rng);
    g.opacity_logit = 0.3 * i;
    g.sh = {0.1 * i, 0.2, 0.3};
    set.push_back(g);
  }
  return set;
}

TEST(Lbs, IdentityTransformsKeepCanonical) {
  std::mt19937_64 rng(7);
  const auto set = small_set(rng, 12);
  std::vector<Vec3> sp = {random_vec3(rng), random_vec3(rng), random_vec3(rng), random_vec3(rng)};
  auto w = make_skinning(set.positions, sp, 3);
  for (auto& l : w.logits) l = std::normal_distribution<double>()(rng);
  const auto out = lbs_deform(set, MotionSample::identity(4), w);
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_LT((out.positions[i] - set.positions[i]).norm(), 1e-14);
    EXPECT_LT((out.rotations[i].as_vector() - set.rotations[i].as_vector()).norm(), 1e-14);
  }
  EXPECT_EQ(out.log_scales, set.log_scales);
  EXPECT_EQ(out.opacity_logits, set.opacity_logits);
  EXPECT_EQ(out.sh, set.sh);
}

TEST(Lbs, SharedTransformIsRigid) {
  std::mt19937_64 rng(8);
  const auto set = small_set(rng, 10);
  std::vector<Vec3> sp = {random_vec3(rng), random_vec3(rng), random_vec3(rng)};
  auto w = make_skinning(set.positions, sp, 3);
  for (auto& l : w.logits) l = std::normal_distribution<double>()(rng);
  const RigidTransform t = random_transform(rng);
  MotionSample s{{t, t, t}};
  const auto out = lbs_deform(set, s, w);
  const UnitQuaternion r = matrix_to_quat(t.rotation);
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_LT((out.positions[i] - t.apply(set.positions[i])).norm(), 1e-12);
    EXPECT_LT(quat_angle(out.rotations[i], quat_mul(r, set.rotations[i])), 1e-7);
    EXPECT_NEAR(out.rotations[i].norm(), 1.0, 1e-8);
  }
}

TEST(Lbs, TwoTranslationsAverage) {
  GaussianSet set(0);
  Gaussian3D g;
  g.position = {0.3, 0.2, 0.1};
  g.sh = {0, 0, 0};
  set.push_back(g);
  SkinningWeights w{2, {0, 1}, {0.0, 0.0}};
  const Vec3 o1(1, 0, 0), o2(0, 2, 4);
  MotionSample s{{RigidTransform{Mat3::Identity(), o1}, RigidTransform{Mat3::Identity(), o2}}};
  const auto out = lbs_deform(set, s, w);
  EXPECT_LT((out.positions[0] - (g.position + 0.5 * (o1 + o2))).norm(), 1e-15);
}

TEST(Lbs, AntipodalQuaternionsDoNotCancel) {
  // Two neighbors with rotations near 180° about z whose canonical
  // quaternions land in opposite hemispheres relative to each other.
  GaussianSet set(0);
  Gaussian3D g;
  g.sh = {0, 0, 0};
  set.push_back(g);
  SkinningWeights w{2, {0, 1}, {0.0, 0.0}};
  MotionSample s{{RigidTransform{so3_exp(Vec3(0, 0, M_PI - 0.01)), Vec3::Zero()},
                  RigidTransform{so3_exp(Vec3(0, 0, -(M_PI - 0.01))), Vec3::Zero()}}};
  const auto out = lbs_deform(set, s, w);
  EXPECT_NEAR(quat_angle(out.rotations[0], UnitQuaternion::from_axis_angle(Vec3::UnitZ(), M_PI)), 0.0, 1e-9);
}

TEST(Lbs, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  std::vector<Vec3> mu;
  for (int i = 0; i < 8; ++i) mu.push_back(random_vec3(rng));
  std::vector<Vec3> sp = {random_vec3(rng), random_vec3(rng), random_vec3(rng), random_vec3(rng)};
  auto w = make_skinning(mu, sp, 3);
  for (auto& l : w.logits) l = std::normal_distribution<double>()(rng);
  MotionSample s;
  for (int j = 0; j < 4; ++j) s.transforms.push_back(random_transform(rng));
  std::vector<Vec3> gout;
  for (int i = 0; i < 8; ++i) gout.push_back(random_vec3(rng));
  auto loss = [&](const std::vector<Vec3>& m, const MotionSample& ms, const SkinningWeights& sw) {
    const auto p = lbs_positions(m, ms, sw);
    double l = 0;
    for (int i = 0; i < 8; ++i) l += p[i].dot(gout[i]);
    return l;
  };
  LbsGradients g;
  g.rotation.assign(4, Mat3::Zero());
  g.translation.assign(4, Vec3::Zero());
  g.logits.assign(w.logits.size(), 0.0);
  g.canonical.assign(8, Vec3::Zero());
  lbs_positions_backward(mu, s, w, gout, g);
  const double h = 1e-6;
  for (std::size_t e = 0; e < w.logits.size(); ++e) {
    auto wp = w, wm = w;
    wp.logits[e] += h;
    wm.logits[e] -= h;
    EXPECT_NEAR(g.logits[e], (loss(mu, s, wp) - loss(mu, s, wm)) / (2 * h), 1e-7);
  }
  for (int j = 0; j < 4; ++j) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        auto sp_ = s, sm = s;
        sp_.transforms[j].rotation(r, c) += h;
        sm.transforms[j].rotation(r, c) -= h;
        EXPECT_NEAR(g.rotation[j](r, c), (loss(mu, sp_, w) - loss(mu, sm, w)) / (2 * h), 1e-7);
      }
      auto sp_ = s, sm = s;
      sp_.transforms[j].translation[r] += h;
      sm.transforms[j].translation[r] -= h;
      EXPECT_NEAR(g.translation[j][r], (loss(mu, sp_, w) - loss(mu, sm, w)) / (2 * h), 1e-7);
    }
  }
  for (int i = 0; i < 8; ++i) {
    for (int c = 0; c < 3; ++c) {
      auto mp = mu, mm = mu;
      mp[i][c] += h;
      mm[i][c] -= h;
      EXPECT_NEAR(g.canonical[i][c], (loss(mp, s, w) - loss(mm, s, w)) / (2 * h), 1e-7);
    }
  }
}

TEST(MotionSequence, Validation) {
  MotionSequence seq{{0.0, 0.5, 1.0}, {MotionSample::identity(2), MotionSample::identity(2), MotionSample::identity(2)}};
  EXPECT_NO_THROW(seq.validate());
  seq.times[1] = 0.0;
  EXPECT_THROW(seq.validate(), Error);
  seq.times[1] = 1.5;
  EXPECT_THROW(seq.validate(), Error);
}

}  // namespace
}  // namespace skelsplat
