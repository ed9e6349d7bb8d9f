// SPDX-License-Identifier: Apache-2.0
//
// Forward kinematics over a skeleton tree, the joint-rotation field Ψ with a
// per-timestamp root trajectory, reposing and pose interpolation.
#pragma once

#include "skelsplat/nn_optim.hpp"
#include "skelsplat/skeleton_discovery.hpp"
#include "skelsplat/superpoint_model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace skelsplat {

/// Root transform plus one local rotation per tree node (the root's entry
/// is ignored and kept at identity).
struct KinematicPose {
  RigidTransform root;
  std::vector<UnitQuaternion> joints;

  static KinematicPose identity(std::size_t nodes) { return {RigidTransform::identity(), std::vector<UnitQuaternion>(nodes)}; }
};

/// [R, j - R j]: rotation about the fixed point j.
RigidTransform local_joint_transform(const Mat3& rotation, const Vec3& joint);
inline RigidTransform local_joint_transform(const UnitQuaternion& q, const Vec3& joint) {
  return local_joint_transform(quat_to_matrix(q), joint);
}

/// T_j = T_root · Π_{k ∈ chain(j)} T̂_k, root first.
MotionSample forward_kinematics(const SkeletonTree& tree, const KinematicPose& pose);
MotionSample forward_kinematics(const SkeletonTree& tree, const RigidTransform& root,
                                std::span<const Mat3> local_rotations);

struct FkGradients {
  Mat3 root_rotation = Mat3::Zero();
  Vec3 root_translation = Vec3::Zero();
  std::vector<Mat3> local_rotation;  // per node
  std::vector<Vec3> joints;          // per node
};
/// Backprop dL/dR_j, dL/dt_j of every world transform to the root
/// transform, local rotations and joint positions.
FkGradients forward_kinematics_backward(const SkeletonTree& tree, std::span<const Mat3> local_rotations,
                                        const MotionSample& world,
                                        std::span<const Mat3> grad_rotation, std::span<const Vec3> grad_translation);

/// Ψ: (γ(j_k; 10), γ(t; 6)) -> quaternion offset from identity, plus a free
/// root transform per training timestamp.
class JointField {
 public:
  static constexpr int kOutputs = 4;

  JointField() = default;
  JointField(int width, int depth, std::uint64_t seed, std::vector<double> times);
  explicit JointField(Mlp net, std::vector<double> times);

  static int input_size() { return encoded_size(3, kPositionFreqs) + encoded_size(1, kTimeFreqs); }
  static VecX encode(const Vec3& joint, double t);
  static Mat3 decode(const Eigen::Ref<const VecX>& out);

  const std::vector<double>& times() const { return times_; }
  /// Raw root parameters per training timestamp: unnormalized quaternion
  /// (w, x, y, z) and translation.
  std::vector<Vec4>& root_quats() { return root_quats_; }
  const std::vector<Vec4>& root_quats() const { return root_quats_; }
  std::vector<Vec3>& root_translations() { return root_translations_; }
  const std::vector<Vec3>& root_translations() const { return root_translations_; }
  void set_root(std::size_t index, const RigidTransform& t);
  RigidTransform root(std::size_t index) const;
  /// Exact at training timestamps; slerp/lerp between them, clamped outside.
  RigidTransform root_at(double t) const;

  struct Batch {
    std::vector<int> nodes;  // non-root nodes, in tree order
    std::vector<Vec3> joints;
    double t = 0.0;
    MatX output;
    MlpCache cache;
  };
  /// Local rotation per node (identity at the root).
  std::vector<Mat3> eval_rotations(const SkeletonTree& tree, double t, Batch* batch = nullptr) const;
  /// Backprop per-node dL/dR̂ into Ψ; adds dL/dj_k into `grad_joints`
  /// (per node) when non-empty.
  Mlp::Gradients backward(const Batch& batch, std::span<const Mat3> grad_local_rotation,
                          std::span<Vec3> grad_joints) const;

  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }

 private:
  Mlp net_;
  std::vector<double> times_;
  std::vector<Vec4> root_quats_;
  std::vector<Vec3> root_translations_;
};

KinematicPose eval_joint_field(const JointField& field, const SkeletonTree& tree, double t);

/// forward_kinematics followed by lbs_deform.
GaussianSet repose(const GaussianSet& set, const SkinningWeights& weights, const SkeletonTree& tree,
                   const KinematicPose& pose);

/// Per-joint slerp, root rotation slerp and translation lerp. Throws Error
/// when the poses cover different joint counts.
KinematicPose interpolate_poses(const KinematicPose& a, const KinematicPose& b, double u);

}  // namespace skelsplat
