// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/synthetic.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>

#include "test_util.hpp"

namespace skelsplat {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

/// One superpoint per link at its midpoint, every Gaussian bound to its own link.
struct LinkModel {
  std::vector<Vec3> superpoints;
  SkinningWeights weights;
  SkeletonTree tree;
};

LinkModel link_model(const GroundTruth& gt) {
  LinkModel m;
  for (const LinkSpec& l : gt.spec.links) m.superpoints.push_back(0.5 * (l.start + l.end));
  m.weights.k = 1;
  m.weights.neighbors = gt.link_of;
  m.weights.logits.assign(gt.link_of.size(), 0.0);
  m.tree = gt.skeleton;
  return m;
}

TEST(Generate, StaticIsIdentity) {
  const GroundTruth gt = generate(preset("static"));
  ASSERT_EQ(gt.num_links(), 2u);
  for (std::size_t f = 0; f < gt.times.size(); ++f) {
    for (const RigidTransform& t : gt.link_motion[f].transforms) {
      EXPECT_EQ(t.rotation, Mat3::Identity());
      EXPECT_EQ(t.translation, Vec3::Zero());
    }
    EXPECT_EQ(gt.trajectories[f], gt.gaussians.positions);
  }
}

TEST(Generate, LinearHingeMatchesPivotRotation) {
  ArticulatedSpec s;
  s.timestamps = 7;
  LinkSpec base;
  base.start = Vec3(-0.5, 0.1, 0.0);
  base.end = Vec3(0.2, 0.1, 0.0);
  s.links.push_back(base);
  const Vec3 c(0.3, 0.1, 0.0);
  LinkSpec arm;
  arm.parent = 0;
  arm.pivot = c;
  arm.start = c + Vec3(0.03, 0.0, 0.0);
  arm.end = c + Vec3(0.5, 0.0, 0.0);
  arm.axis = Vec3::UnitZ();
  arm.angle.kind = AngleCurve::Kind::Linear;
  arm.angle.from = 0.0;
  arm.angle.to = 90.0 * kDeg;
  s.links.push_back(arm);
  const GroundTruth gt = generate(s);
  for (std::size_t f = 0; f < gt.times.size(); ++f) {
    const double a = 90.0 * kDeg * gt.times[f];
    Mat3 r;
    r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
    const Vec3 t = c - r * c;
    const RigidTransform& got = gt.link_motion[f].transforms[1];
    EXPECT_LT((got.rotation - r).cwiseAbs().maxCoeff(), 1e-12) << f;
    EXPECT_LT((got.translation - t).cwiseAbs().maxCoeff(), 1e-12) << f;
    EXPECT_EQ(gt.link_motion[f].transforms[0].rotation, Mat3::Identity());
  }
  // Final frame: the arm points along +y from the pivot.
  const Vec3 tip = gt.link_motion.back().transforms[1].apply(arm.end);
  EXPECT_LT((tip - (c + Vec3(0.0, 0.5, 0.0))).norm(), 1e-12);
}

TEST(Generate, HumanoidFkConsistency) {
  const GroundTruth gt = generate(preset("humanoid8"));
  ASSERT_EQ(gt.num_links(), 8u);
  EXPECT_NO_THROW(gt.self_check());
  for (std::size_t f = 0; f < gt.times.size(); ++f) {
    const MotionSample fk = forward_kinematics(gt.skeleton, gt.pose_at(gt.times[f]));
    for (std::size_t k = 0; k < gt.num_links(); ++k) {
      const Mat4 diff = fk.transforms[k].homogeneous() - gt.link_motion[f].transforms[k].homogeneous();
      EXPECT_LT(diff.cwiseAbs().maxCoeff(), 1e-12);
    }
    for (std::size_t i = 0; i < gt.gaussians.size(); ++i) {
      const auto& tr = gt.link_motion[f].transforms[static_cast<std::size_t>(gt.link_of[i])];
      EXPECT_EQ(gt.trajectories[f][i], tr.apply(gt.gaussians.positions[i]));
    }
  }
}

TEST(Generate, Deterministic) {
  for (const std::string& name : preset_names()) {
    const GroundTruth a = generate(preset(name, 7));
    const GroundTruth b = generate(preset(name, 7));
    EXPECT_EQ(a.gaussians.positions, b.gaussians.positions) << name;
    EXPECT_EQ(a.gaussians.sh, b.gaussians.sh) << name;
    EXPECT_EQ(a.trajectories, b.trajectories) << name;
    EXPECT_EQ(spec_to_json(a.spec), spec_to_json(b.spec)) << name;
  }
  const GroundTruth c = generate(preset("hinge2", 8));
  EXPECT_NE(c.gaussians.positions, generate(preset("hinge2", 7)).gaussians.positions);
}

TEST(Generate, EveryJointArticulates) {
  for (const std::string& name : preset_names()) {
    if (name == "static") continue;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const ArticulatedSpec s = preset(name, seed);
      const auto times = s.training_times();
      for (std::size_t k = 1; k < s.links.size(); ++k) {
        double lo = 1e9, hi = -1e9;
        for (double t : times) {
          lo = std::min(lo, s.links[k].angle.at(t));
          hi = std::max(hi, s.links[k].angle.at(t));
        }
        EXPECT_GE(hi - lo, 30.0 * kDeg) << name << " link " << k;
      }
    }
  }
}

TEST(Generate, RandomTreesAreWellSeparated) {
  for (int parts : {4, 6, 8}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const ArticulatedSpec s = random_tree(parts, seed);
      ASSERT_EQ(static_cast<int>(s.links.size()), parts);
      for (std::size_t k = 1; k < s.links.size(); ++k) {
        const LinkSpec& c = s.links[k];
        const LinkSpec& p = s.links[static_cast<std::size_t>(c.parent)];
        const Vec3 pd = (p.end - p.start).normalized(), cd = (c.end - c.start).normalized();
        const double bend = std::acos(std::clamp(pd.dot(cd), -1.0, 1.0));
        EXPECT_GE(bend, 40.0 * kDeg - 1e-12);
        EXPECT_LT(std::abs(c.axis.dot(pd)), 1e-9);
        EXPECT_LT(std::abs(c.axis.dot(cd)), 1e-9);
        for (std::size_t o = 1; o < k; ++o)
          if (s.links[o].parent >= 0) EXPECT_GE((s.links[o].pivot - c.pivot).norm(), 0.2);
      }
      EXPECT_NO_THROW(generate(s));
    }
  }
}

TEST(Generate, TimesAndValidation) {
  ArticulatedSpec s = preset("hinge2");
  s.timestamps = 5;
  EXPECT_EQ(s.training_times(), (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
  EXPECT_EQ(s.held_out_times(), (std::vector<double>{0.125, 0.375, 0.625, 0.875}));
  s.timestamps = 1;
  EXPECT_THROW(generate(s), Error);
  s = preset("chain3");
  s.links[1].parent = 2;  // forward reference would allow a cycle
  EXPECT_THROW(generate(s), Error);
  s = preset("chain3");
  s.links[2].angle.amplitude = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(generate(s), Error);
  EXPECT_THROW(preset("tree1"), Error);
  EXPECT_THROW(preset("nope"), Error);
  EXPECT_THROW(generate(ArticulatedSpec{}), Error);
}

TEST(Generate, RenderTruth) {
  const GroundTruth gt = generate(preset("static"));
  const Camera cam = default_camera(gt, 64, 64);
  const Image a = render_truth(gt, 0.3, cam);
  const Image b = render(gt.gaussians, cam, Vec3::Ones());
  EXPECT_EQ(a.rgb, b.rgb);
  // The object is in view.
  EXPECT_GT(mean_abs_error(a, Image(64, 64, Vec3::Ones())), 1e-3);
}

TEST(EvalSkeleton, TruthModel) {
  for (const char* name : {"hinge2", "humanoid8", "tree6"}) {
    const GroundTruth gt = generate(preset(name, 1));
    const LinkModel m = link_model(gt);
    const SkeletonReport r = eval_skeleton(m.tree, m.weights, m.superpoints, gt);
    EXPECT_TRUE(r.topology_match) << name;
    EXPECT_EQ(r.joint_rmse, 0.0) << name;
    EXPECT_EQ(r.part_iou, 1.0) << name;
    EXPECT_EQ(r.matched_edges, static_cast<int>(gt.num_links()) - 1);
  }
}

TEST(EvalSkeleton, DisplacedJoint) {
  const GroundTruth gt = generate(preset("humanoid8"));
  LinkModel m = link_model(gt);
  const double d = 0.037;
  m.tree.joints[3] += d * Vec3(0.6, 0.0, 0.8);
  const SkeletonReport r = eval_skeleton(m.tree, m.weights, m.superpoints, gt);
  const double edges = static_cast<double>(gt.num_links() - 1);
  EXPECT_NEAR(r.joint_rmse, d / std::sqrt(edges), 1e-15);
  EXPECT_TRUE(r.topology_match);
}

TEST(EvalSkeleton, CollapsesSharedLabelsAndDetectsWrongTopology) {
  const GroundTruth gt = generate(preset("chain3"));
  // Two superpoints per link; chain of 8 nodes in link order.
  std::vector<Vec3> sp;
  for (const LinkSpec& l : gt.spec.links) {
    sp.push_back(l.start + 0.25 * (l.end - l.start));
    sp.push_back(l.start + 0.75 * (l.end - l.start));
  }
  SkinningWeights w;
  w.k = 1;
  for (std::size_t i = 0; i < gt.gaussians.size(); ++i) {
    const int link = gt.link_of[i];
    const Vec3& p = gt.gaussians.positions[i];
    const int a = 2 * link, b = 2 * link + 1;
    w.neighbors.push_back((p - sp[a]).norm() <= (p - sp[b]).norm() ? a : b);
  }
  w.logits.assign(w.neighbors.size(), 0.0);
  std::vector<Edge> edges;
  for (int j = 1; j < 8; ++j) edges.push_back({j - 1, j});
  SkeletonTree tree = orient_tree(8, edges, 0);
  for (int j = 1; j < 8; ++j)
    if (j % 2 == 0) tree.joints[j] = gt.spec.links[static_cast<std::size_t>(j / 2)].pivot;
  SkeletonReport r = eval_skeleton(tree, w, sp, gt);
  EXPECT_TRUE(r.topology_match);
  EXPECT_EQ(r.predicted_edges, 3);
  EXPECT_EQ(r.matched_edges, 3);
  EXPECT_EQ(r.part_iou, 1.0);
  EXPECT_NEAR(r.joint_rmse, 0.0, 1e-15);

  // Reattach link 3 to link 1: edge {1,3} is not a true edge.
  std::vector<Edge> wrong = edges;
  wrong[5] = {3, 6};
  tree = orient_tree(8, wrong, 0);
  r = eval_skeleton(tree, w, sp, gt);
  EXPECT_FALSE(r.topology_match);
  EXPECT_EQ(r.matched_edges, 2);
}

TEST(EvalSkeleton, RandomAssignmentBaseline) {
  // Two equal links; every superpoint dominates 40 random Gaussians. A
  // superpoint's label is its majority link, so the expected IoU is
  // E[max(k, n − k)] / n with k ~ Binomial(n, 1/2).
  ArticulatedSpec s = preset("hinge2");
  s.links[0].gaussians = s.links[1].gaussians = 400;
  const GroundTruth gt = generate(s);
  const int per = 40, m = static_cast<int>(gt.gaussians.size()) / per;
  double expected = 0.0, binom = std::pow(0.5, per);
  for (int k = 0; k <= per; ++k) {
    expected += binom * std::max(k, per - k) / static_cast<double>(per);
    binom *= static_cast<double>(per - k) / (k + 1);
  }
  std::mt19937_64 rng(3);
  double mean = 0.0;
  const int trials = 200;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<int> order(gt.gaussians.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    SkinningWeights w;
    w.k = 1;
    w.neighbors.resize(order.size());
    for (std::size_t q = 0; q < order.size(); ++q) w.neighbors[static_cast<std::size_t>(order[q])] = static_cast<int>(q) / per;
    w.logits.assign(order.size(), 0.0);
    std::vector<Vec3> sp(static_cast<std::size_t>(m), Vec3::Zero());
    std::vector<Edge> chain;
    for (int j = 1; j < m; ++j) chain.push_back({j - 1, j});
    const SkeletonTree tree = orient_tree(m, chain, 0);
    mean += eval_skeleton(tree, w, sp, gt).part_iou / trials;
  }
  EXPECT_NEAR(expected, 0.5626, 1e-3);
  // Standard error of the mean is about 1.5e-3.
  EXPECT_NEAR(mean, expected, 6e-3);
}

TEST(EvalSkeleton, Errors) {
  const GroundTruth gt = generate(preset("hinge2"));
  const LinkModel m = link_model(gt);
  EXPECT_THROW(eval_skeleton(SkeletonTree{}, m.weights, {}, gt), Error);
  std::vector<Vec3> three = {Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
  EXPECT_THROW(eval_skeleton(m.tree, m.weights, three, gt), Error);
}

TEST(SpecJson, RoundTrip) {
  for (const std::string& name : preset_names()) {
    const ArticulatedSpec s = preset(name, 4);
    const ArticulatedSpec back = spec_from_json(spec_to_json(s));
    EXPECT_EQ(spec_to_json(back), spec_to_json(s));
    EXPECT_EQ(generate(back).trajectories, generate(s).trajectories) << name;
  }
  const ArticulatedSpec p = spec_from_json(R"({"preset": "tree4", "seed": 2, "timestamps": 9})");
  EXPECT_EQ(p.links.size(), 4u);
  EXPECT_EQ(p.timestamps, 9);
  ArticulatedSpec expected = random_tree(4, 2);
  expected.timestamps = 9;
  EXPECT_EQ(spec_to_json(p), spec_to_json(expected));
}

TEST(SpecJson, Errors) {
  try {
    spec_from_json("{\n  \"links\": [\n    {\"start\": [0, 0, 0],, }\n  ]\n}");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  try {
    spec_from_json(R"({"links": [{"start": [0, 0, 0], "end": [1, 0, 0]}, {"parent": 0, "start": [0, 0], "end": [1, 1, 0]}]})");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("links[1].start"), std::string::npos) << e.what();
  }
  try {
    spec_from_json(R"({"links": [{"start": [0, 0, 0], "end": [1, 0, 0], "angle": {"kind": "cubic"}}]})");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("links[0].angle.kind"), std::string::npos) << e.what();
  }
  EXPECT_THROW(spec_from_json(R"({"preset": "hinge2", "seed": -1})"), Error);
  EXPECT_THROW(spec_from_json(R"([1, 2])"), Error);
}

TEST(GroundTruthIo, SaveLoad) {
  const auto dir = std::filesystem::temp_directory_path() / "skelsplat_synthetic_test";
  std::filesystem::remove_all(dir);
  const GroundTruth gt = generate(preset("chain3", 5));
  save_ground_truth(gt, dir, true);
  EXPECT_TRUE(std::filesystem::exists(dir / "canonical.ply"));
  EXPECT_TRUE(std::filesystem::exists(dir / "frames" / "frame_000.png"));
  const GroundTruth back = load_ground_truth(dir);
  EXPECT_EQ(back.trajectories, gt.trajectories);
  EXPECT_EQ(load_ply(dir / "canonical.ply").size(), gt.gaussians.size());
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace skelsplat
