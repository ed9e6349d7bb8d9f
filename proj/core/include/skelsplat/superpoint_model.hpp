// SPDX-License-Identifier: Apache-2.0
//
// Superpoints, softmax skinning weights, the superpoint deformation field
// and linear blend skinning of Gaussians.
#pragma once

#include "skelsplat/gaussian_scene.hpp"
#include "skelsplat/geom.hpp"
#include "skelsplat/nn_optim.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace skelsplat {

inline constexpr int kPositionFreqs = 10;
inline constexpr int kTimeFreqs = 6;
inline constexpr int kDefaultNeighbors = 5;

struct SuperpointSet {
  std::vector<Vec3> positions;

  std::size_t size() const { return positions.size(); }
  void validate() const;
};

/// Per-Gaussian neighbor lists into a SuperpointSet plus the learnable
/// logits of the softmax weights. Row i occupies [i*k, (i+1)*k).
struct SkinningWeights {
  int k = 0;
  std::vector<int> neighbors;
  std::vector<double> logits;

  std::size_t size() const { return k > 0 ? neighbors.size() / static_cast<std::size_t>(k) : 0; }
  std::span<const int> neighbors_of(std::size_t i) const { return {neighbors.data() + i * k, static_cast<std::size_t>(k)}; }
  std::span<const double> logits_of(std::size_t i) const { return {logits.data() + i * k, static_cast<std::size_t>(k)}; }
  std::span<double> logits_of(std::size_t i) { return {logits.data() + i * k, static_cast<std::size_t>(k)}; }
  std::vector<double> weights_of(std::size_t i) const;
  /// Neighbor with the largest weight (first on ties).
  int dominant(std::size_t i) const;
  void validate(std::size_t num_gaussians, std::size_t num_superpoints) const;
};

struct MotionSample {
  std::vector<RigidTransform> transforms;

  std::size_t size() const { return transforms.size(); }
  static MotionSample identity(std::size_t n) { return {std::vector<RigidTransform>(n)}; }
};

struct MotionSequence {
  std::vector<double> times;
  std::vector<MotionSample> samples;

  std::size_t size() const { return times.size(); }
  /// Transforms of superpoint j across all timestamps.
  std::vector<RigidTransform> track(std::size_t j) const;
  void validate() const;
};

/// Greedy max-min selection. The first index is drawn from `seed`; later
/// ties go to the lower index. Throws Error when m > points.size().
std::vector<int> farthest_point_sampling(std::span<const Vec3> points, int m, std::uint64_t seed);

/// K nearest references of every query, nearest first, ties to the lower
/// index. Result is queries.size() * k.
std::vector<int> knn_assign(std::span<const Vec3> queries, std::span<const Vec3> references, int k);

/// k nearest other points of every point (self excluded), nearest first.
struct NeighborGraph {
  int k = 0;
  std::vector<int> neighbors;

  std::size_t size() const { return k > 0 ? neighbors.size() / static_cast<std::size_t>(k) : 0; }
  std::span<const int> neighbors_of(std::size_t i) const { return {neighbors.data() + i * k, static_cast<std::size_t>(k)}; }
};
/// k is clamped to points.size() − 1.
NeighborGraph neighbor_graph(std::span<const Vec3> points, int k);

std::vector<double> skinning_weights(std::span<const double> logits);
/// dL/dlogits given the softmax output and dL/dweights.
std::vector<double> softmax_backward(std::span<const double> weights, std::span<const double> grad_weights);

/// Fresh lists from knn_assign with all logits zero (uniform weights).
SkinningWeights make_skinning(std::span<const Vec3> gaussians, std::span<const Vec3> superpoints, int k);

/// Φ: (γ(p; 10), γ(t; 6)) -> 7 values, decoded as a quaternion offset from
/// identity (normalized) and a translation. The head starts at zero, so a
/// new field is the identity everywhere.
class DeformField {
 public:
  static constexpr int kOutputs = 7;

  DeformField() = default;
  DeformField(int width, int depth, std::uint64_t seed);
  explicit DeformField(Mlp net);

  static int input_size() { return encoded_size(3, kPositionFreqs) + encoded_size(1, kTimeFreqs); }
  static VecX encode(const Vec3& p, double t);
  static RigidTransform decode(const Eigen::Ref<const VecX>& out);

  RigidTransform eval(const Vec3& p, double t) const;

  /// Batched evaluation of queries (positions[q], times[q]).
  struct Batch {
    std::vector<Vec3> positions;
    std::vector<double> times;
    MatX output;
    MlpCache cache;
  };
  MotionSample eval_batch(std::span<const Vec3> positions, std::span<const double> times, Batch* batch = nullptr) const;
  MotionSample eval_all(std::span<const Vec3> positions, double t) const;

  /// Backprop dL/dR and dL/do of every query. Accumulates dL/dposition into
  /// `grad_positions` when non-null (same length as the batch).
  Mlp::Gradients backward(const Batch& batch, std::span<const Mat3> grad_rotation,
                          std::span<const Vec3> grad_translation, std::span<Vec3> grad_positions) const;

  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }

 private:
  Mlp net_;
};

/// μ_i' = Σ_j w_ij (R_j μ_i + o_j), q_i' = normalize(Σ_j w_ij r_j) ⊗ q_i.
/// Quaternions are flipped into the hemisphere of the highest-weight
/// neighbor before blending. Scale, opacity and SH are copied.
GaussianSet lbs_deform(const GaussianSet& set, const MotionSample& sample, const SkinningWeights& weights);

std::vector<Vec3> lbs_positions(std::span<const Vec3> canonical, const MotionSample& sample,
                                const SkinningWeights& weights);

/// Gradients of a loss through lbs_positions. Every array is accumulated
/// into (callers zero them first) and must be sized by the caller; empty
/// arrays are skipped.
struct LbsGradients {
  std::vector<Mat3> rotation;     // per superpoint
  std::vector<Vec3> translation;  // per superpoint
  std::vector<double> logits;     // per weight entry
  std::vector<Vec3> canonical;    // per Gaussian
};
void lbs_positions_backward(std::span<const Vec3> canonical, const MotionSample& sample,
                            const SkinningWeights& weights, std::span<const Vec3> grad_positions,
                            LbsGradients& grads);

}  // namespace skelsplat
