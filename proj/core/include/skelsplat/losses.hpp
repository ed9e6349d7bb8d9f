// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: photometric metric, trajectory fit, joint distance,
// ARAP / smoothness / sparsity regularizers and the kinematic-fitting loss,
// plus the assembled per-stage objectives with analytic gradients.
#pragma once

#include "skelsplat/kinematic.hpp"
#include "skelsplat/skeleton_discovery.hpp"
#include "skelsplat/splat_render.hpp"
#include "skelsplat/superpoint_model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace skelsplat {

struct LossWeights {
  double fit = 1.0;     // λ0
  double joint = 1.0;   // λ1
  double arap = 1e-3;   // λ2
  double smooth = 0.1;  // λ3
  double sparse = 0.1;  // λ4
  double ssim_mix = 0.2;             // λ in the photometric loss
  double discovery_transform = 1.0;  // λ5
  double discovery_probe = 0.1;      // λ6

  /// Throws Error on a negative or non-finite weight.
  void validate() const;
};

/// Unweighted per-step loss terms.
struct LossComponents {
  double fit = 0.0;
  double joint = 0.0;
  double arap = 0.0;
  double smooth = 0.0;
  double sparse = 0.0;
};

double total_dynamic_loss(const LossComponents& c, const LossWeights& w);

/// (1 - λ) L1 + λ (1 - SSIM). Throws Error on a size mismatch.
double l_rgb(const Image& rendered, const Image& truth, double ssim_mix = 0.2);

/// dL/dR and dL/do for every superpoint at one timestamp.
struct MotionGradient {
  std::vector<Mat3> rotation;
  std::vector<Vec3> translation;

  static MotionGradient zeros(std::size_t n) { return {std::vector<Mat3>(n, Mat3::Zero()), std::vector<Vec3>(n, Vec3::Zero())}; }
};

/// (1/N) Σ ‖μ_i − μ*_i‖². Accumulates the gradient into `grad` when non-empty.
double l_traj_positions(std::span<const Vec3> predicted, std::span<const Vec3> truth, std::span<Vec3> grad = {});
/// (1/M) Σ ‖R_j − R*_j‖²_F + ‖o_j − o*_j‖².
double l_traj_transforms(const MotionSample& predicted, const MotionSample& truth, MotionGradient* grad = nullptr);

/// θ² of R_aᵀ R_b (θ from its axial part and trace), and the gradient w.r.t. both
/// arguments scaled by `scale` and accumulated (either pointer may be null).
double relative_angle_sq(const Mat3& ra, const Mat3& rb, Mat3* grad_a = nullptr, Mat3* grad_b = nullptr,
                         double scale = 1.0);

/// Σ_j Σ_{k ∈ N_j} θ²(R_jᵀ R_k) + ‖o_j − o_k‖².
double l_arap(const MotionSample& sample, const NeighborGraph& graph, MotionGradient* grad = nullptr);

/// Σ_i Σ_{n ∈ N_i} ‖w_i − w_n‖₁ over dense weight rows. Subgradient
/// (sign, 0 at ties) accumulated into `grad_logits` when non-empty.
double l_smooth(const SkinningWeights& weights, const NeighborGraph& gaussian_graph, std::span<double> grad_logits = {});

/// −[w ln w + (1 − w) ln(1 − w)], 0 at the endpoints.
double binary_entropy(double w);
/// Σ_i Σ_k H(w_ik) over the stored entries.
double l_sparse(const SkinningWeights& weights, std::span<double> grad_logits = {});

/// (1/M²) Σ_{candidates} (d_ab + d_ba) + (1/(M−1)) Σ_{edges} (d_ab + d_ba)/2,
/// read from the table's current distances. Throws Error when a tree edge
/// is not a candidate pair.
double l_joint(std::span<const CandidatePair> pairs, std::span<const Edge> tree_edges, std::size_t num_superpoints);
/// The same objective recomputed on `samples` with the pairs' joint
/// estimates held fixed, residual sums multiplied by `residual_scale`.
/// Gradients w.r.t. every transform go into `grads` (one per sample) when
/// non-empty.
double l_joint_motion(std::span<const CandidatePair> pairs, std::span<const Edge> tree_edges, std::size_t num_superpoints,
                      std::span<const MotionSample> samples, double residual_scale, std::span<MotionGradient> grads = {});

/// One probe point per superpoint: its position plus a uniform offset in
/// a cube of half-width `scale` times the bounding-box diagonal.
std::vector<Vec3> make_probes(std::span<const Vec3> superpoints, std::uint64_t seed, double scale = 0.25);

/// (1/M) Σ_j λ5 (‖ô_j − o_j‖² + θ²(R_jᵀ R̂_j)) + λ6 ‖(R_j p_j + o_j) − (R̂_j p_j + ô_j)‖
/// for one timestamp; hats are the kinematic prediction.
double l_discovery(const MotionSample& predicted, const MotionSample& cached, std::span<const Vec3> probes,
                   const LossWeights& weights, MotionGradient* grad_predicted = nullptr);

// --- assembled objectives -----------------------------------------------------

/// Ground truth for the trajectory loss at the training timestamps.
struct TrajectoryTargets {
  std::vector<double> times;
  std::vector<std::vector<Vec3>> positions;  // [t][gaussian]
  std::vector<MotionSample> superpoints;     // [t], empty to skip the transform term

  /// Throws Error when a timestamp lacks a correspondence.
  void validate(std::size_t num_gaussians, std::size_t num_superpoints) const;
};

/// Optional regularizer inputs of the dynamic objective.
struct DynamicTerms {
  const NeighborGraph* superpoint_graph = nullptr;  // ARAP; null skips
  const NeighborGraph* gaussian_graph = nullptr;    // smoothness; null skips
  std::span<const CandidatePair> pairs;             // joint term; empty skips
  std::span<const Edge> tree_edges;
  /// The joint term is reported but, by default, sends no gradient to the
  /// motion: joint learning must not steer Φ, the superpoints or Gaussians.
  bool joint_gradient = false;
};

struct DynamicGradients {
  Mlp::Gradients field;
  std::vector<Vec3> superpoints;
  std::vector<double> logits;
  std::vector<Vec3> canonical;
};

/// Components are averaged over `time_indices` (all timestamps when empty)
/// and normalized: arap / M, smooth / N, sparse / N; the joint residuals are
/// extrapolated to the full sequence. Gradients are of the weighted total
/// (without the joint term unless terms.joint_gradient).
LossComponents dynamic_objective(const DeformField& field, std::span<const Vec3> superpoints,
                                 const SkinningWeights& weights, std::span<const Vec3> canonical,
                                 const TrajectoryTargets& targets, std::span<const std::size_t> time_indices,
                                 const DynamicTerms& terms, const LossWeights& lw, DynamicGradients* grads = nullptr);

struct JointFieldGradients {
  Mlp::Gradients field;
  std::vector<Vec3> joints;             // per node
  std::vector<Vec4> root_quats;         // per timestamp
  std::vector<Vec3> root_translations;  // per timestamp
};

/// Mean l_discovery over every cached timestamp, the kinematic prediction
/// being FK of Ψ with the per-timestamp root. `field.times()` must match.
double discovery_objective(const JointField& field, const SkeletonTree& tree, const MotionSequence& cached,
                           std::span<const Vec3> probes, const LossWeights& lw, JointFieldGradients* grads = nullptr);

struct KinematicGradients {
  JointFieldGradients kinematic;
  std::vector<double> logits;
  std::vector<Vec3> canonical;
};

/// Trajectory loss routed through FK + LBS, plus smoothness and sparsity
/// (normalized by N). Returns the components; gradients are of the total.
LossComponents kinematic_objective(const JointField& field, const SkeletonTree& tree, const SkinningWeights& weights,
                                   std::span<const Vec3> canonical, const TrajectoryTargets& targets,
                                   std::span<const std::size_t> time_indices, const NeighborGraph* gaussian_graph,
                                   const LossWeights& lw, KinematicGradients* grads = nullptr);

}  // namespace skelsplat
