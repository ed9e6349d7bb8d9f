// SPDX-License-Identifier: Apache-2.0
//
// Procedural articulated objects: capsule-shaped links driven by scripted
// hinge angles, with exact per-link motion, Gaussian trajectories, ground
// truth renders and skeleton evaluation against the true link tree.
#pragma once

#include "skelsplat/kinematic.hpp"
#include "skelsplat/splat_render.hpp"
#include "skelsplat/superpoint_model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace skelsplat {

/// Hinge angle over normalized time t in [0, 1].
struct AngleCurve {
  enum class Kind { Sine, Linear };
  Kind kind = Kind::Sine;
  // Sine: amplitude · sin(2π frequency t + phase)
  double amplitude = 0.0;
  double frequency = 1.0;
  double phase = 0.0;
  // Linear: from + (to − from) t
  double from = 0.0;
  double to = 0.0;

  double at(double t) const;
};

struct LinkSpec {
  int parent = -1;  // -1 for the single root link
  Vec3 start = Vec3::Zero();
  Vec3 end = Vec3::UnitX();
  Vec3 pivot = Vec3::Zero();  // joint to the parent, unused for the root
  Vec3 axis = Vec3::UnitZ();
  int gaussians = 48;
  double radius = 0.02;
  Vec3 color = Vec3(0.8, 0.3, 0.2);
  AngleCurve angle;

  double length() const { return (end - start).norm(); }
};

/// Rigid motion of the root link: rotation about `pivot` plus a
/// translation, both sinusoidal in t.
struct RootMotion {
  Vec3 axis = Vec3::UnitY();
  Vec3 pivot = Vec3::Zero();
  double angle = 0.0;
  Vec3 translation = Vec3::Zero();
  double frequency = 1.0;

  RigidTransform at(double t) const;
};

struct ArticulatedSpec {
  std::string name = "custom";
  std::vector<LinkSpec> links;
  RootMotion root;
  int timestamps = 24;
  std::uint64_t seed = 0;

  /// Throws Error on a cyclic or multi-rooted tree, a parent listed after
  /// its child, degenerate axes, non-finite values or fewer than 2 timestamps.
  void validate() const;
  /// t_k = k / (N_t − 1).
  std::vector<double> training_times() const;
  /// Midpoints between consecutive training times.
  std::vector<double> held_out_times() const;
  /// Local hinge rotation of every link (identity for the root).
  std::vector<Mat3> link_rotations(double t) const;
};

/// Names accepted by preset(): static, hinge2, chain3, humanoid8, treeN
/// (N in [2, 12]).
std::vector<std::string> preset_names();
/// Throws Error on an unknown name. `seed` drives sampling and, for treeN,
/// the random tree.
ArticulatedSpec preset(std::string_view name, std::uint64_t seed = 0);
/// Random tree with `parts` links; siblings never collide and every joint
/// bends by at least 40 degrees between parent and child.
ArticulatedSpec random_tree(int parts, std::uint64_t seed);

struct GroundTruth {
  ArticulatedSpec spec;
  GaussianSet gaussians;           // canonical
  std::vector<int> link_of;        // per Gaussian
  SkeletonTree skeleton;           // one node per link, joints at the pivots
  std::vector<double> times;       // training timestamps
  std::vector<MotionSample> link_motion;          // [t][link]
  std::vector<std::vector<Vec3>> trajectories;    // [t][gaussian]

  std::size_t num_links() const { return spec.links.size(); }
  /// Link transforms at any t via forward kinematics on `skeleton`.
  MotionSample links_at(double t) const;
  /// KinematicPose of the true tree at t.
  KinematicPose pose_at(double t) const;
  /// Every Gaussian moved rigidly with its link.
  GaussianSet deformed_at(double t) const;
  /// Diagonal of the box around every trajectory point.
  double bbox_diagonal() const;
  std::pair<Vec3, Vec3> bounds() const;

  /// Recomputes the link motion with homogeneous matrices along parent
  /// chains and checks FK and trajectory rigidity. Throws Error on failure.
  void self_check(double tolerance = 1e-12) const;
};

/// Deterministic in (spec, spec.seed). Runs self_check().
GroundTruth generate(const ArticulatedSpec& spec);

/// Camera looking at the scene's bounds from the front-right, framing the
/// whole motion.
LookAt default_view(const GroundTruth& truth, int width = 256, int height = 256);
Camera default_camera(const GroundTruth& truth, int width = 256, int height = 256);
Image render_truth(const GroundTruth& truth, double t, const Camera& camera, const Vec3& background = Vec3::Ones());

/// Link per superpoint: majority link of the Gaussians it dominates, then
/// the weight-weighted majority of the Gaussians referencing it, then the
/// link of the nearest Gaussian.
std::vector<int> label_superpoints(const SkinningWeights& weights, std::span<const Vec3> superpoints,
                                   const GroundTruth& truth);

struct SkeletonReport {
  bool topology_match = false;
  double joint_rmse = 0.0;
  double part_iou = 0.0;
  int predicted_edges = 0;  // distinct link pairs after collapsing labels
  int truth_edges = 0;
  int matched_edges = 0;    // tree edges whose link pair is a true edge
  std::vector<int> labels;  // per superpoint
};

/// Compares a tree over superpoints with the true link tree. Throws Error
/// on an empty prediction or mismatched sizes.
SkeletonReport eval_skeleton(const SkeletonTree& predicted, const SkinningWeights& weights,
                             std::span<const Vec3> superpoints, const GroundTruth& truth);

/// Spec document (JSON). Parse and schema errors name the line and field.
std::string spec_to_json(const ArticulatedSpec& spec);
ArticulatedSpec spec_from_json(std::string_view text);
ArticulatedSpec load_spec(const std::filesystem::path& path);

/// Writes canonical.ply, truth.json (spec, skeleton, link motion and
/// trajectories) and optionally one PNG per training timestamp.
void save_ground_truth(const GroundTruth& truth, const std::filesystem::path& dir, bool frames = false);
/// Regenerates from the stored spec and checks it against the stored
/// trajectories.
GroundTruth load_ground_truth(const std::filesystem::path& dir);

}  // namespace skelsplat
