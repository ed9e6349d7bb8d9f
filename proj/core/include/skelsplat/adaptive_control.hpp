// SPDX-License-Identifier: Apache-2.0
//
// Superpoint prune / densify / merge between optimization steps.
#pragma once

#include "skelsplat/superpoint_model.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace skelsplat {

struct ControlThresholds {
  double prune = 1e-3;
  double grad = 2e-4;
  double merge = 5e-4;
  /// Impact above which a superpoint is cloned; <= 0 selects
  /// 4 × mean impact (= 4 N / M, since every weight row sums to 1).
  double clone = 0.0;
  int max_superpoints = 2048;
  int min_superpoints = 2;
  int neighbors = kDefaultNeighbors;        // K for rebuilt skinning lists
  int merge_neighbors = kDefaultNeighbors;  // K' for merge candidates
  std::uint64_t seed = 0;                   // clone jitter

  void validate() const;
  double clone_threshold(std::size_t num_gaussians, std::size_t num_superpoints) const;
};

/// W_j = Σ_{i : j ∈ N_i} w_ij for every superpoint.
std::vector<double> impacts(const SkinningWeights& weights, std::size_t num_superpoints);
double impact(const SkinningWeights& weights, int j);

/// g_j = Σ_{i ∈ Ñ_j} (w_ij / Σ_{k ∈ Ñ_j} w_kj) · grad_norm_sq[i], 0 for
/// superpoints no Gaussian references.
std::vector<double> weighted_grad_norm(const SkinningWeights& weights, std::size_t num_superpoints,
                                       std::span<const double> grad_norm_sq);

/// (1/N_t) Σ_t ‖se3_log((T_b^t)⁻¹ T_a^t)‖.
double merge_distance(int a, int b, const MotionSequence& motion);

/// One line of the control log.
struct ControlEvent {
  std::string event;  // "prune", "clone" or "merge"
  int index = 0;      // superpoint index before the event
  double metric = 0.0;
  double threshold = 0.0;
};

struct ControlReport {
  std::vector<ControlEvent> events;
  /// Old superpoint index -> new index, -1 when removed. Clones are
  /// appended after the survivors.
  std::vector<int> remap;
  std::size_t before = 0;
  std::size_t after = 0;

  bool changed() const { return !events.empty(); }
};

/// Superpoints plus the skinning lists of the Gaussians they drive.
struct ControlModel {
  std::vector<Vec3>& superpoints;
  SkinningWeights& weights;
  std::span<const Vec3> gaussians;  // canonical positions
};

/// Fresh K-NN lists against `superpoints`; an entry whose superpoint
/// survives from `old` (through `remap`) keeps its logit, several old entries
/// landing on one superpoint combine by log-sum-exp, new entries get 0.
SkinningWeights rebuild_skinning(std::span<const Vec3> gaussians, std::span<const Vec3> superpoints,
                                 const SkinningWeights& old, std::span<const int> remap, int k);

/// Removes superpoints with W_j < δ_prune, lowest impact first, never below
/// min_superpoints.
ControlReport prune(ControlModel model, const ControlThresholds& th);

/// Clones superpoints with W_j > δ_clone or g_j > δ_grad (`grad_norm_sq`
/// may be empty to skip the gradient test), highest metric first up to
/// max_superpoints. The clone sits at the impact-weighted centroid of the
/// superpoint's Gaussians plus a 1e-4 × bounding-box-diagonal jitter.
ControlReport densify(ControlModel model, const ControlThresholds& th, std::span<const double> grad_norm_sq);

/// Unions K'-NN pairs with D < δ_merge (ascending D, stopping at
/// min_superpoints) and replaces every group by one superpoint at the
/// impact-weighted mean. `motion` holds one transform per superpoint.
ControlReport merge(ControlModel model, const ControlThresholds& th, const MotionSequence& motion);

}  // namespace skelsplat
