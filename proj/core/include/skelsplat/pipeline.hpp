// SPDX-License-Identifier: Apache-2.0
//
// The three training stages (dynamic, skeleton discovery, kinematic) driven
// by ground-truth trajectories, with control events, run logging and
// bit-exact checkpoint / resume.
#pragma once

#include "skelsplat/adaptive_control.hpp"
#include "skelsplat/kinematic.hpp"
#include "skelsplat/losses.hpp"
#include "skelsplat/skeleton_discovery.hpp"
#include "skelsplat/superpoint_model.hpp"
#include "skelsplat/synthetic.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace skelsplat {

/// Half-open step range [begin, end).
struct StepWindow {
  std::int64_t begin = 0;
  std::int64_t end = 0;

  bool contains(std::int64_t step) const { return step >= begin && step < end; }
};

struct StageConfig {
  std::int64_t dynamic_steps = 8000;
  std::int64_t discovery_steps = 2000;
  std::int64_t kinematic_steps = 8000;

  int initial_superpoints = 512;
  int skinning_neighbors = kDefaultNeighbors;  // K
  int candidate_neighbors = kDefaultNeighbors; // K' for joint candidates and ARAP
  int gaussian_neighbors = 5;                  // smoothness graph
  int batch_timestamps = 4;

  /// The joint term and the skeleton refresh start here.
  std::int64_t joint_start = 2000;
  std::int64_t skeleton_refresh = 100;
  std::int64_t control_period = 1000;
  StepWindow densify_window{1000, 4000};
  StepWindow merge_window{4000, 6000};

  int field_width = 64;
  int field_depth = 4;
  int joint_field_width = 128;
  int joint_field_depth = 3;

  LrSchedule field_lr{1e-3, 1e-5, 8000};
  double superpoint_lr = 1e-4;
  double logit_lr = 1e-2;
  double discovery_lr = 1e-3;
  LrSchedule kinematic_lr{1e-4, 1e-6, 8000};
  double kinematic_logit_lr = 1e-3;
  double canonical_lr = 1e-5;
  /// Directions of the joint normal equations weaker than this fraction of
  /// the strongest are taken from the pair midpoint.
  double joint_rank_tolerance = 1e-3;

  std::int64_t log_period = 100;
  LossWeights loss;
  ControlThresholds thresholds;
  std::uint64_t seed = 0;

  /// Throws Error when a window lies outside the dynamic stage or a size or
  /// rate is not positive.
  void validate() const;
  /// Shortened schedule for quick runs: every step count and window scaled
  /// by `factor` (at least one step each).
  StageConfig scaled(double factor) const;
};

std::string config_to_json(const StageConfig& config);
/// Unknown keys are rejected; missing keys keep their defaults. Errors name
/// the offending field, prefixed with `root` when the config is nested in a
/// larger document.
StageConfig config_from_json(std::string_view text, const std::string& root = "");

enum class Stage { Dynamic = 0, Discovery = 1, Kinematic = 2, Done = 3 };
const char* stage_name(Stage s);

struct ProjectState {
  Stage stage = Stage::Dynamic;
  std::int64_t step = 0;  // within the current stage

  GaussianSet gaussians;
  std::vector<Vec3> superpoints;
  SkinningWeights weights;
  DeformField field;
  /// Superpoint label (true link) used for the transform targets.
  std::vector<int> labels;

  CandidateTable table;
  std::vector<Edge> joint_edges;  // spanning edges of the last refresh
  SkeletonTree tree;
  MotionSequence cached;
  JointField psi;
  std::vector<Vec3> probes;

  /// One optimizer per parameter group of the current stage.
  std::vector<Adam> optimizers;
  std::mt19937_64 rng;

  // Lowest-loss snapshot of the discovery or kinematic stage, restored when
  // the stage ends.
  double best_loss = 0.0;
  std::optional<Mlp> best_psi;
  std::vector<Vec3> best_joints;
  std::vector<Vec4> best_root_quats;
  std::vector<Vec3> best_root_translations;
  std::vector<double> best_logits;     // kinematic only
  std::vector<Vec3> best_positions;    // kinematic only

  double last_loss = 0.0;
  /// Full-sequence objective at the end of each stage.
  std::array<double, 3> stage_loss{0.0, 0.0, 0.0};

  /// Throws Error when sizes disagree.
  void validate() const;
};

/// FPS superpoints, K-NN skinning and a fresh Φ.
ProjectState initialize_state(const GroundTruth& truth, const StageConfig& config);

/// Where stage loops report. Every callback is optional.
struct RunHooks {
  /// One JSON object per line: progress records and control events.
  std::function<void(const std::string&)> log;
  /// Called after every `checkpoint_period` steps of any stage.
  std::function<void(const ProjectState&)> checkpoint;
  std::int64_t checkpoint_period = 0;
  /// Stop (returning false) once this many steps ran in this call.
  std::optional<std::int64_t> step_budget;
};

/// Each stage resumes from state.step, returns true when it finished and
/// advances state.stage. Throws Error on a non-finite loss, naming the
/// stage and step.
bool run_dynamic_stage(ProjectState& state, const StageConfig& config, const GroundTruth& truth,
                       const RunHooks& hooks = {});
bool run_discovery_stage(ProjectState& state, const StageConfig& config, const RunHooks& hooks = {});
bool run_kinematic_stage(ProjectState& state, const StageConfig& config, const GroundTruth& truth,
                         const RunHooks& hooks = {});
/// Runs stages until `until` is reached (all remaining stages by default);
/// errors are prefixed with the stage name.
bool run_pipeline(ProjectState& state, const StageConfig& config, const GroundTruth& truth,
                  const RunHooks& hooks = {}, Stage until = Stage::Done);

/// Φ at every superpoint for every training timestamp.
MotionSequence cache_motion(const DeformField& field, std::span<const Vec3> superpoints, std::span<const double> times);
/// Candidate pairs from K'-NN, plus the Euclidean spanning tree so the
/// candidate graph is always connected.
std::vector<std::pair<int, int>> connected_candidates(std::span<const Vec3> superpoints, int k_prime);
/// Per-timestamp transform targets from the superpoint labels.
TrajectoryTargets make_targets(const GroundTruth& truth, std::span<const int> labels);

/// Superpoints whose rotations never differ by more than this (radians,
/// 5 degrees) over the sequence move as one rigid part.
inline constexpr double kArticulationAngle = 0.087266462599716474;

/// Largest local rotation angle of every tree node over the training
/// timestamps (0 at the root): from Ψ once the discovery stage has run,
/// otherwise from the cached or live Φ motion. Empty without a tree.
std::vector<double> joint_motion_range(const ProjectState& state);

/// Rigid part per superpoint: the transitive closure of pairs whose relative
/// rotation stays within `min_angle`. Parts are numbered by first member.
std::vector<int> rigid_parts(const ProjectState& state, double min_angle = kArticulationAngle);

/// One articulation between two rigid parts, with the tree nodes whose edge
/// to the parent crosses it (a learned tree may cross the same hinge twice).
struct PartJoint {
  int parent_part = 0;
  int child_part = 0;
  std::vector<int> nodes;
};
std::vector<PartJoint> part_joints(const ProjectState& state, double min_angle = kArticulationAngle);

struct PipelineReport {
  Stage stage = Stage::Dynamic;
  std::size_t superpoints = 0;
  std::size_t joints = 0;              // tree edges, M - 1
  std::size_t articulated_joints = 0;  // joints between rigid parts
  double dynamic_loss = 0.0;
  double discovery_loss = 0.0;
  double kinematic_loss = 0.0;
  double trajectory_rmse = 0.0;  // Gaussians, training timestamps
  double superpoint_rmse = 0.0;
  double bbox_diagonal = 0.0;
  std::optional<SkeletonReport> skeleton;
  std::optional<double> psnr;  // held-out timestamps, mean
  std::optional<double> ssim;
};

/// Metrics for the state's current stage: after the dynamic stage the
/// trajectories come from Φ, after the kinematic stage from FK + LBS.
/// `render_size` > 0 adds PSNR / SSIM against ground-truth renders at the
/// held-out timestamps.
PipelineReport evaluate(const ProjectState& state, const GroundTruth& truth, int render_size = 0);
std::string report_to_json(const PipelineReport& report);

/// Pose of the learned skeleton that reproduces the true link motion at
/// `t`: each learned edge takes the relative rotation of the labels' links.
KinematicPose truth_pose_for(const ProjectState& state, const GroundTruth& truth, double t);

/// Binary checkpoint of the whole state, RNG and optimizers included.
void save_state(const ProjectState& state, const std::filesystem::path& path);
ProjectState load_state(const std::filesystem::path& path);
void write_state(std::ostream& out, const ProjectState& state);
ProjectState read_state(std::istream& in);

}  // namespace skelsplat
