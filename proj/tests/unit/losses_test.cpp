// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "test_util.hpp"

namespace skelsplat {
namespace {

using testing::fd_worst;
using testing::flat;
using testing::random_transform;
using testing::random_vec3;

constexpr double kGradTolerance = 1e-3;

LossWeights unit_weights() {
  LossWeights w;
  w.fit = w.joint = w.arap = w.smooth = w.sparse = 1.0;
  return w;
}

std::vector<Vec3> random_points(std::mt19937_64& rng, int n, double scale = 1.0) {
  std::vector<Vec3> out;
  for (int i = 0; i < n; ++i) out.push_back(random_vec3(rng, scale));
  return out;
}

MotionSample random_sample(std::mt19937_64& rng, std::size_t m, double angle = 1.0) {
  MotionSample s;
  for (std::size_t j = 0; j < m; ++j) s.transforms.push_back(random_transform(rng, angle, 1.0));
  return s;
}

void randomize_logits(std::mt19937_64& rng, SkinningWeights& w) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& l : w.logits) l = n(rng);
}

void perturb(std::mt19937_64& rng, Mlp& net, double sigma) {
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& b : net.parameter_blocks())
    for (auto& v : b) v += n(rng);
}

TEST(LossWeights, DefaultsAndValidation) {
  const LossWeights w;
  EXPECT_EQ(w.fit, 1.0);
  EXPECT_EQ(w.joint, 1.0);
  EXPECT_EQ(w.arap, 1e-3);
  EXPECT_EQ(w.smooth, 0.1);
  EXPECT_EQ(w.sparse, 0.1);
  EXPECT_EQ(w.ssim_mix, 0.2);
  EXPECT_EQ(w.discovery_transform, 1.0);
  EXPECT_EQ(w.discovery_probe, 0.1);
  EXPECT_NO_THROW(w.validate());
  LossWeights bad;
  bad.arap = -1.0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(TotalDynamicLoss, WeightedSum) {
  EXPECT_EQ(total_dynamic_loss({}, LossWeights{}), 0.0);
  const LossComponents c{2.0, 3.0, 5.0, 7.0, 11.0};
  EXPECT_DOUBLE_EQ(total_dynamic_loss(c, LossWeights{}), 2.0 + 3.0 + 5e-3 + 0.7 + 1.1);
  LossWeights first_window;
  first_window.joint = 0.0;
  EXPECT_DOUBLE_EQ(total_dynamic_loss(c, first_window), 2.0 + 5e-3 + 0.7 + 1.1);
}

TEST(LRgb, Cases) {
  Image a(16, 12, Vec3(0.3, 0.5, 0.7));
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 16; ++x) a.set(x, y, Vec3(0.02 * x, 0.05 * y, 0.5));
  EXPECT_EQ(l_rgb(a, a), 0.0);
  Image b = a;
  for (auto& v : b.rgb) v += 0.1f;
  const double l1 = mean_abs_error(a, b);
  EXPECT_NEAR(l1, 0.1, 1e-6);
  EXPECT_NEAR(l_rgb(a, b), 0.8 * l1 + 0.2 * (1.0 - ssim(a, b)), 1e-12);
  EXPECT_EQ(l_rgb(a, b, 0.0), l1);
  EXPECT_THROW(l_rgb(a, Image(4, 4)), Error);
}

TEST(LTraj, PositionsAndTransforms) {
  std::mt19937_64 rng(1);
  const auto pts = random_points(rng, 7);
  EXPECT_EQ(l_traj_positions(pts, pts), 0.0);
  const Vec3 d(0.3, -0.4, 1.2);
  std::vector<Vec3> moved = pts;
  for (auto& p : moved) p += d;
  EXPECT_NEAR(l_traj_positions(moved, pts), d.squaredNorm(), 1e-14);
  EXPECT_THROW(l_traj_positions(moved, std::span<const Vec3>(pts).first(3)), Error);

  const auto truth = random_sample(rng, 3);
  EXPECT_EQ(l_traj_transforms(truth, truth), 0.0);
  auto pred = random_sample(rng, 3);
  MotionGradient g = MotionGradient::zeros(3);
  l_traj_transforms(pred, truth, &g);
  std::vector<double> params, analytic;
  for (std::size_t j = 0; j < 3; ++j) {
    const double* r = pred.transforms[j].rotation.data();
    params.insert(params.end(), r, r + 9);
    analytic.insert(analytic.end(), g.rotation[j].data(), g.rotation[j].data() + 9);
    params.insert(params.end(), pred.transforms[j].translation.data(), pred.transforms[j].translation.data() + 3);
    analytic.insert(analytic.end(), g.translation[j].data(), g.translation[j].data() + 3);
  }
  auto loss = [&] {
    MotionSample s;
    for (std::size_t j = 0; j < 3; ++j) {
      RigidTransform t;
      t.rotation = Eigen::Map<const Mat3>(params.data() + 12 * j);
      t.translation = Eigen::Map<const Vec3>(params.data() + 12 * j + 9);
      s.transforms.push_back(t);
    }
    return l_traj_transforms(s, truth);
  };
  EXPECT_LT(fd_worst(params, analytic, loss), kGradTolerance);
}

TEST(RelativeAngle, MatchesLogAndGradient) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const Mat3 a = testing::random_rotation(rng, 3.0), b = testing::random_rotation(rng, 3.0);
    const double ref = so3_log(a.transpose() * b).squaredNorm();
    EXPECT_NEAR(relative_angle_sq(a, b), ref, 1e-9);
  }
  EXPECT_EQ(relative_angle_sq(Mat3::Identity(), Mat3::Identity()), 0.0);
  const Mat3 a = testing::random_rotation(rng, 1.0), b = testing::random_rotation(rng, 1.0);
  // Tangent perturbations R exp(h ω) keep the trace formula on the manifold.
  Mat3 ga = Mat3::Zero(), gb = Mat3::Zero();
  relative_angle_sq(a, b, &ga, &gb);
  for (int c = 0; c < 3; ++c) {
    const double h = 1e-6;
    const Vec3 w = Vec3::Unit(c);
    const double fa = (relative_angle_sq(a * so3_exp(h * w), b) - relative_angle_sq(a * so3_exp(-h * w), b)) / (2 * h);
    const double fb = (relative_angle_sq(a, b * so3_exp(h * w)) - relative_angle_sq(a, b * so3_exp(-h * w))) / (2 * h);
    EXPECT_NEAR(fa, (ga.cwiseProduct(a * hat(w))).sum(), 1e-7);
    EXPECT_NEAR(fb, (gb.cwiseProduct(b * hat(w))).sum(), 1e-7);
  }
}

TEST(NeighborGraph, ExcludesSelfAndMatchesBruteForce) {
  std::mt19937_64 rng(3);
  const auto pts = random_points(rng, 12);
  const auto g = neighbor_graph(pts, 4);
  ASSERT_EQ(g.k, 4);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<std::pair<double, int>> d;
    for (std::size_t j = 0; j < pts.size(); ++j)
      if (j != i) d.push_back({(pts[i] - pts[j]).squaredNorm(), static_cast<int>(j)});
    std::sort(d.begin(), d.end());
    for (int q = 0; q < 4; ++q) EXPECT_EQ(g.neighbors_of(i)[q], d[q].second);
  }
  EXPECT_EQ(neighbor_graph(std::span<const Vec3>(pts).first(3), 5).k, 2);
}

TEST(LArap, Cases) {
  std::mt19937_64 rng(4);
  const auto pts = random_points(rng, 6);
  const auto graph = neighbor_graph(pts, 3);
  const RigidTransform shared = random_transform(rng);
  EXPECT_NEAR(l_arap(MotionSample{std::vector<RigidTransform>(6, shared)}, graph), 0.0, 1e-20);

  const std::vector<Vec3> two{Vec3::Zero(), Vec3::UnitX()};
  const auto g2 = neighbor_graph(two, 1);
  const Mat3 r = testing::random_rotation(rng);
  MotionSample gap{{{r, Vec3(0, 0, 0)}, {r, Vec3(0.5, 0, 0)}}};
  EXPECT_NEAR(l_arap(gap, g2), 2 * 0.25, 1e-12);

  const auto sample = random_sample(rng, 6, 2.5);
  double ref = 0;
  for (std::size_t j = 0; j < 6; ++j)
    for (int k : graph.neighbors_of(j)) {
      const auto& a = sample.transforms[j];
      const auto& b = sample.transforms[k];
      ref += so3_log(a.rotation.inverse() * b.rotation).squaredNorm() + (a.translation - b.translation).squaredNorm();
    }
  EXPECT_NEAR(l_arap(sample, graph), ref, 1e-8);
}

TEST(LSmooth, Cases) {
  std::mt19937_64 rng(5);
  // Identical weight rows over identical neighbor sets.
  SkinningWeights same{2, {0, 1, 0, 1, 0, 1}, {0.3, -0.2, 0.3, -0.2, 0.3, -0.2}};
  const std::vector<Vec3> three{Vec3::Zero(), Vec3::UnitX(), Vec3::UnitY()};
  EXPECT_EQ(l_smooth(same, neighbor_graph(three, 2)), 0.0);

  // Two Gaussians, (numerically) one-hot on different superpoints.
  SkinningWeights onehot{2, {0, 1, 2, 3}, {800.0, 0.0, 800.0, 0.0}};
  const std::vector<Vec3> pair{Vec3::Zero(), Vec3::UnitX()};
  EXPECT_NEAR(l_smooth(onehot, neighbor_graph(pair, 1)), 2 * 2.0, 1e-12);

  const auto gs = random_points(rng, 9), sp = random_points(rng, 6);
  auto w = make_skinning(gs, sp, 3);
  randomize_logits(rng, w);
  const auto graph = neighbor_graph(gs, 3);
  double ref = 0;
  for (std::size_t i = 0; i < 9; ++i) {
    auto dense = [&](std::size_t r) {
      std::vector<double> d(6, 0.0);
      const auto wr = w.weights_of(r);
      for (int q = 0; q < 3; ++q) d[w.neighbors_of(r)[q]] += wr[q];
      return d;
    };
    const auto di = dense(i);
    for (int n : graph.neighbors_of(i)) {
      const auto dn = dense(n);
      for (int s = 0; s < 6; ++s) ref += std::abs(di[s] - dn[s]);
    }
  }
  EXPECT_NEAR(l_smooth(w, graph), ref, 1e-12);

  std::vector<double> g(w.logits.size(), 0.0);
  l_smooth(w, graph, g);
  EXPECT_LT(fd_worst(w.logits, g, [&] { return l_smooth(w, graph); }), kGradTolerance);
}

TEST(LSparse, EntropyValuesAndGradient) {
  EXPECT_EQ(binary_entropy(0.0), 0.0);
  EXPECT_EQ(binary_entropy(1.0), 0.0);
  EXPECT_NEAR(binary_entropy(0.5), std::log(2.0), 1e-15);
  EXPECT_NEAR(binary_entropy(0.5), 0.6931, 1e-4);
  EXPECT_LT(binary_entropy(0.9), binary_entropy(0.5));
  EXPECT_LT(binary_entropy(1e-12), 1e-10);

  SkinningWeights uniform{2, {0, 1}, {0.0, 0.0}};
  EXPECT_NEAR(l_sparse(uniform), 2 * std::log(2.0), 1e-15);

  std::mt19937_64 rng(6);
  const auto gs = random_points(rng, 8), sp = random_points(rng, 4);
  auto w = make_skinning(gs, sp, 3);
  randomize_logits(rng, w);
  std::vector<double> g(w.logits.size(), 0.0);
  l_sparse(w, g);
  EXPECT_LT(fd_worst(w.logits, g, [&] { return l_sparse(w); }), kGradTolerance);
}

/// Hinge motion for two superpoints plus a rigid third one.
MotionSequence hinge_motion(int steps) {
  MotionSequence m;
  const Vec3 pivot(0.2, 0.1, 0.0);
  for (int s = 0; s < steps; ++s) {
    const Mat3 r = so3_exp(Vec3(0, 0, 0.3 * s));
    m.times.push_back(s / static_cast<double>(steps));
    m.samples.push_back({{RigidTransform::identity(), {r, pivot - r * pivot}, RigidTransform::identity()}});
  }
  return m;
}

TEST(LJoint, Cases) {
  std::vector<CandidatePair> pairs(3);
  pairs[0].a = 0, pairs[0].b = 1;
  pairs[1].a = 1, pairs[1].b = 2;
  pairs[2].a = 0, pairs[2].b = 2;
  EXPECT_EQ(l_joint(pairs, std::vector<Edge>{{1, 0}, {2, 1}}, 3), 0.0);

  std::vector<CandidatePair> single(1);
  single[0].a = 0, single[0].b = 1;
  single[0].d_ab = single[0].d_ba = 2.0;
  const double with_edge = l_joint(single, std::vector<Edge>{{1, 0}}, 2);
  const double without = l_joint(single, {}, 2);
  EXPECT_DOUBLE_EQ(with_edge - without, 2.0);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (auto& p : pairs) p.d_ab = u(rng), p.d_ba = u(rng);
  const std::vector<Edge> edges{{1, 0}, {2, 1}};
  double ordered = 0;
  for (const auto& p : pairs) ordered += p.d_ab + p.d_ba;
  const double ref = ordered / 9.0 + ((pairs[0].d_ab + pairs[0].d_ba) / 2 + (pairs[1].d_ab + pairs[1].d_ba) / 2) / 2.0;
  EXPECT_NEAR(l_joint(pairs, edges, 3), ref, 1e-10);
  EXPECT_THROW(l_joint(pairs, std::vector<Edge>{{3, 0}}, 4), Error);
}

TEST(LJoint, MotionFormMatchesTableAndGradient) {
  std::mt19937_64 rng(8);
  const std::vector<Vec3> sp{Vec3(0, 0, 0), Vec3(0.4, 0.1, 0), Vec3(-0.3, 0.2, 0.1)};
  MotionSequence motion;
  for (int s = 0; s < 3; ++s) {
    motion.times.push_back(s);
    motion.samples.push_back(random_sample(rng, 3, 1.0));
  }
  CandidateTable table(candidate_pairs(sp, 2));
  JointSolveOptions opt;
  table.update(motion, sp, opt);
  const std::vector<Edge> edges{{1, 0}, {2, 0}};
  EXPECT_NEAR(l_joint_motion(table.pairs(), edges, 3, motion.samples, 1.0), l_joint(table.pairs(), edges, 3), 1e-10);

  std::vector<MotionGradient> g(3, MotionGradient::zeros(3));
  l_joint_motion(table.pairs(), edges, 3, motion.samples, 1.5, g);
  std::vector<double> params, analytic;
  for (int s = 0; s < 3; ++s)
    for (int j = 0; j < 3; ++j) {
      const auto& t = motion.samples[s].transforms[j];
      params.insert(params.end(), t.rotation.data(), t.rotation.data() + 9);
      params.insert(params.end(), t.translation.data(), t.translation.data() + 3);
      analytic.insert(analytic.end(), g[s].rotation[j].data(), g[s].rotation[j].data() + 9);
      analytic.insert(analytic.end(), g[s].translation[j].data(), g[s].translation[j].data() + 3);
    }
  auto loss = [&] {
    std::vector<MotionSample> samples(3, MotionSample::identity(3));
    for (int s = 0; s < 3; ++s)
      for (int j = 0; j < 3; ++j) {
        samples[s].transforms[j].rotation = Eigen::Map<const Mat3>(params.data() + 12 * (3 * s + j));
        samples[s].transforms[j].translation = Eigen::Map<const Vec3>(params.data() + 12 * (3 * s + j) + 9);
      }
    return l_joint_motion(table.pairs(), edges, 3, samples, 1.5);
  };
  EXPECT_LT(fd_worst(params, analytic, loss), kGradTolerance);
}

TEST(LDiscovery, Cases) {
  std::mt19937_64 rng(9);
  const auto cached = random_sample(rng, 4, 2.0);
  const auto probes = make_probes(random_points(rng, 4), 11);
  const LossWeights lw;
  EXPECT_EQ(l_discovery(cached, cached, probes, lw), 0.0);

  const Vec3 d(0.0, 0.3, 0.4);
  MotionSample shifted = cached;
  for (auto& t : shifted.transforms) t.translation += d;
  EXPECT_NEAR(l_discovery(shifted, cached, probes, lw), 1.0 * 0.25 + 0.1 * 0.5, 1e-12);
  EXPECT_THROW(l_discovery(shifted, MotionSample::identity(2), probes, lw), Error);

  const auto pred = random_sample(rng, 4, 1.0);
  MotionGradient g = MotionGradient::zeros(4);
  l_discovery(pred, cached, probes, lw, &g);
  std::vector<double> params, analytic;
  for (int j = 0; j < 4; ++j) {
    const auto& t = pred.transforms[j];
    params.insert(params.end(), t.rotation.data(), t.rotation.data() + 9);
    params.insert(params.end(), t.translation.data(), t.translation.data() + 3);
    analytic.insert(analytic.end(), g.rotation[j].data(), g.rotation[j].data() + 9);
    analytic.insert(analytic.end(), g.translation[j].data(), g.translation[j].data() + 3);
  }
  auto loss = [&] {
    MotionSample s = MotionSample::identity(4);
    for (int j = 0; j < 4; ++j) {
      s.transforms[j].rotation = Eigen::Map<const Mat3>(params.data() + 12 * j);
      s.transforms[j].translation = Eigen::Map<const Vec3>(params.data() + 12 * j + 9);
    }
    return l_discovery(s, cached, probes, lw);
  };
  EXPECT_LT(fd_worst(params, analytic, loss), kGradTolerance);
}

TEST(Probes, SeededAndWithinBox) {
  std::mt19937_64 rng(10);
  const auto sp = random_points(rng, 5);
  const auto a = make_probes(sp, 3), b = make_probes(sp, 3), c = make_probes(sp, 4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  Vec3 lo = sp[0], hi = sp[0];
  for (const auto& p : sp) lo = lo.cwiseMin(p), hi = hi.cwiseMax(p);
  const double half = 0.25 * (hi - lo).norm();
  for (std::size_t j = 0; j < sp.size(); ++j) EXPECT_LE((a[j] - sp[j]).cwiseAbs().maxCoeff(), half);
}

/// N = 8 Gaussians, M = 4 superpoints, 3 timestamps.
struct TinyScene {
  std::vector<Vec3> superpoints, canonical;
  SkinningWeights weights;
  TrajectoryTargets targets;

  explicit TinyScene(std::mt19937_64& rng) {
    superpoints = random_points(rng, 4, 0.6);
    canonical = random_points(rng, 8, 0.8);
    weights = make_skinning(canonical, superpoints, 3);
    randomize_logits(rng, weights);
    targets.times = {0.0, 0.4, 0.9};
    for (int t = 0; t < 3; ++t) {
      std::vector<Vec3> p;
      for (const auto& c : canonical) p.push_back(c + random_vec3(rng, 0.2));
      targets.positions.push_back(p);
      targets.superpoints.push_back(random_sample(rng, 4, 0.5));
    }
  }
};

TEST(DynamicObjective, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  TinyScene s(rng);
  DeformField field(8, 2, 5);
  perturb(rng, field.net(), 0.2);
  const auto sp_graph = neighbor_graph(s.superpoints, 2);
  const auto g_graph = neighbor_graph(s.canonical, 3);
  MotionSequence motion;
  for (int t = 0; t < 3; ++t) {
    motion.times.push_back(s.targets.times[t]);
    motion.samples.push_back(field.eval_all(s.superpoints, s.targets.times[t]));
  }
  CandidateTable table(candidate_pairs(s.superpoints, 2));
  table.update(motion, s.superpoints, JointSolveOptions{});
  const auto edges = minimum_spanning_edges(4, table.pairs());
  DynamicTerms terms{&sp_graph, &g_graph, table.pairs(), edges, true};
  const LossWeights lw = unit_weights();
  const std::vector<std::size_t> batch{0, 2};

  DynamicGradients g;
  const auto comp = dynamic_objective(field, s.superpoints, s.weights, s.canonical, s.targets, batch, terms, lw, &g);
  EXPECT_GT(comp.fit, 0.0);
  EXPECT_GT(comp.joint, 0.0);
  EXPECT_GT(comp.arap, 0.0);
  EXPECT_GT(comp.smooth, 0.0);
  EXPECT_GT(comp.sparse, 0.0);
  auto loss = [&] {
    return total_dynamic_loss(dynamic_objective(field, s.superpoints, s.weights, s.canonical, s.targets, batch, terms, lw), lw);
  };
  auto blocks = field.net().parameter_blocks();
  const auto gb = Mlp::gradient_blocks(g.field);
  for (std::size_t b = 0; b < blocks.size(); ++b) EXPECT_LT(fd_worst(blocks[b], gb[b], loss), kGradTolerance) << "block " << b;
  EXPECT_LT(fd_worst(flat(s.superpoints), flat(g.superpoints), loss, 1e-7), kGradTolerance);
  EXPECT_LT(fd_worst(s.weights.logits, g.logits, loss), kGradTolerance);
  EXPECT_LT(fd_worst(flat(s.canonical), flat(g.canonical), loss), kGradTolerance);
}

TEST(DynamicObjective, JointTermStopsGradientByDefault) {
  std::mt19937_64 rng(11);
  TinyScene s(rng);
  DeformField field(8, 2, 5);
  perturb(rng, field.net(), 0.2);
  MotionSequence motion;
  for (int t = 0; t < 3; ++t) {
    motion.times.push_back(s.targets.times[t]);
    motion.samples.push_back(field.eval_all(s.superpoints, s.targets.times[t]));
  }
  CandidateTable table(candidate_pairs(s.superpoints, 2));
  table.update(motion, s.superpoints, JointSolveOptions{});
  const auto edges = minimum_spanning_edges(4, table.pairs());
  const DynamicTerms stopped{nullptr, nullptr, table.pairs(), edges};
  LossWeights lw = unit_weights();

  DynamicGradients with_joint, without_joint;
  const auto comp = dynamic_objective(field, s.superpoints, s.weights, s.canonical, s.targets, {}, stopped, lw, &with_joint);
  EXPECT_GT(comp.joint, 0.0);
  lw.joint = 0.0;
  dynamic_objective(field, s.superpoints, s.weights, s.canonical, s.targets, {}, stopped, lw, &without_joint);
  const auto a = Mlp::gradient_blocks(with_joint.field);
  const auto b = Mlp::gradient_blocks(without_joint.field);
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].size(); ++i) EXPECT_EQ(a[k][i], b[k][i]);
  for (std::size_t j = 0; j < s.superpoints.size(); ++j) EXPECT_EQ(with_joint.superpoints[j], without_joint.superpoints[j]);
}

TEST(DynamicObjective, ZeroMotionFitsStaticScene) {
  std::mt19937_64 rng(12);
  TinyScene s(rng);
  for (auto& p : s.targets.positions) p = s.canonical;
  for (auto& m : s.targets.superpoints) m = MotionSample::identity(4);
  const DeformField field(8, 2, 5);
  const auto c = dynamic_objective(field, s.superpoints, s.weights, s.canonical, s.targets, {}, DynamicTerms{}, LossWeights{});
  EXPECT_LT(c.fit, 1e-24);
  s.targets.positions.pop_back();
  EXPECT_THROW(dynamic_objective(field, s.superpoints, s.weights, s.canonical, s.targets, {}, DynamicTerms{}, LossWeights{}), Error);
}

/// Chain 0 - 1 - 2 - 3 rooted at 1 over four superpoints.
SkeletonTree tiny_tree(std::mt19937_64& rng) {
  SkeletonTree t = orient_tree(4, std::vector<Edge>{{0, 1}, {1, 2}, {2, 3}}, 1);
  for (auto& j : t.joints) j = random_vec3(rng, 0.6);
  return t;
}

TEST(DiscoveryObjective, ExactModelIsZeroAndGradientsMatch) {
  std::mt19937_64 rng(13);
  auto tree = tiny_tree(rng);
  const std::vector<double> times{0.0, 0.5, 1.0};
  JointField field(8, 2, 6, times);
  perturb(rng, field.net(), 0.2);
  for (std::size_t i = 0; i < 3; ++i) field.set_root(i, random_transform(rng, 1.0, 0.5));
  const auto probes = make_probes(random_points(rng, 4, 0.6), 3);
  const LossWeights lw;

  // Cache the model's own motion: the loss is zero there.
  MotionSequence cached;
  cached.times = times;
  for (std::size_t i = 0; i < 3; ++i) cached.samples.push_back(forward_kinematics(tree, field.root(i), field.eval_rotations(tree, times[i])));
  EXPECT_LT(discovery_objective(field, tree, cached, probes, lw), 1e-20);

  for (auto& s : cached.samples) s = random_sample(rng, 4, 1.0);
  JointFieldGradients g;
  discovery_objective(field, tree, cached, probes, lw, &g);
  auto loss = [&] { return discovery_objective(field, tree, cached, probes, lw); };
  auto blocks = field.net().parameter_blocks();
  const auto gb = Mlp::gradient_blocks(g.field);
  for (std::size_t b = 0; b < blocks.size(); ++b) EXPECT_LT(fd_worst(blocks[b], gb[b], loss), kGradTolerance) << "block " << b;
  // The root's joint is unused; its gradient must be exactly zero.
  EXPECT_EQ(g.joints[tree.root], Vec3::Zero());
  EXPECT_LT(fd_worst(flat(tree.joints), flat(g.joints), loss, 1e-7), kGradTolerance);
  EXPECT_LT(fd_worst(flat(field.root_quats()), flat(g.root_quats), loss), kGradTolerance);
  EXPECT_LT(fd_worst(flat(field.root_translations()), flat(g.root_translations), loss), kGradTolerance);
}

TEST(KinematicObjective, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  TinyScene s(rng);
  auto tree = tiny_tree(rng);
  JointField field(8, 2, 7, s.targets.times);
  perturb(rng, field.net(), 0.2);
  for (std::size_t i = 0; i < 3; ++i) field.set_root(i, random_transform(rng, 1.0, 0.5));
  const auto g_graph = neighbor_graph(s.canonical, 3);
  const LossWeights lw = unit_weights();
  const std::vector<std::size_t> batch{1, 2};
  KinematicGradients g;
  const auto c = kinematic_objective(field, tree, s.weights, s.canonical, s.targets, batch, &g_graph, lw, &g);
  EXPECT_GT(c.fit, 0.0);
  auto loss = [&] {
    return total_dynamic_loss(kinematic_objective(field, tree, s.weights, s.canonical, s.targets, batch, &g_graph, lw), lw);
  };
  auto blocks = field.net().parameter_blocks();
  const auto gb = Mlp::gradient_blocks(g.kinematic.field);
  for (std::size_t b = 0; b < blocks.size(); ++b) EXPECT_LT(fd_worst(blocks[b], gb[b], loss), kGradTolerance) << "block " << b;
  EXPECT_LT(fd_worst(flat(tree.joints), flat(g.kinematic.joints), loss, 1e-7), kGradTolerance);
  EXPECT_LT(fd_worst(flat(field.root_quats()), flat(g.kinematic.root_quats), loss), kGradTolerance);
  EXPECT_LT(fd_worst(flat(field.root_translations()), flat(g.kinematic.root_translations), loss), kGradTolerance);
  EXPECT_LT(fd_worst(s.weights.logits, g.logits, loss), kGradTolerance);
  EXPECT_LT(fd_worst(flat(s.canonical), flat(g.canonical), loss), kGradTolerance);
}

TEST(KinematicObjective, PerfectModelHasZeroFit) {
  std::mt19937_64 rng(15);
  TinyScene s(rng);
  const auto tree = tiny_tree(rng);
  JointField field(8, 2, 7, s.targets.times);
  for (std::size_t t = 0; t < 3; ++t) {
    s.targets.superpoints[t] = forward_kinematics(tree, field.root(t), field.eval_rotations(tree, s.targets.times[t]));
    s.targets.positions[t] = lbs_positions(s.canonical, s.targets.superpoints[t], s.weights);
  }
  const auto c = kinematic_objective(field, tree, s.weights, s.canonical, s.targets, {}, nullptr, LossWeights{});
  EXPECT_LT(c.fit, 1e-24);
}

}  // namespace
}  // namespace skelsplat
