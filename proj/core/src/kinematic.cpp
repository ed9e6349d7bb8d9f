// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/kinematic.hpp"

#include <algorithm>
#include <cmath>

namespace skelsplat {

RigidTransform local_joint_transform(const Mat3& rotation, const Vec3& joint) {
  return {rotation, joint - rotation * joint};
}

MotionSample forward_kinematics(const SkeletonTree& tree, const RigidTransform& root,
                                std::span<const Mat3> local_rotations) {
  if (local_rotations.size() != tree.size()) throw Error("forward_kinematics: one local rotation per node required");
  MotionSample out = MotionSample::identity(tree.size());
  for (int v : tree.topological_order()) {
    if (v == tree.root) {
      out.transforms[v] = root;
    } else {
      out.transforms[v] = compose(out.transforms[tree.parent[v]], local_joint_transform(local_rotations[v], tree.joints[v]));
    }
  }
  return out;
}

MotionSample forward_kinematics(const SkeletonTree& tree, const KinematicPose& pose) {
  if (pose.joints.size() != tree.size()) throw Error("forward_kinematics: pose does not cover every joint");
  std::vector<Mat3> local(tree.size());
  for (std::size_t v = 0; v < tree.size(); ++v) local[v] = quat_to_matrix(pose.joints[v]);
  return forward_kinematics(tree, pose.root, local);
}

FkGradients forward_kinematics_backward(const SkeletonTree& tree, std::span<const Mat3> local_rotations,
                                        const MotionSample& world,
                                        std::span<const Mat3> grad_rotation, std::span<const Vec3> grad_translation) {
  const std::size_t n = tree.size();
  if (local_rotations.size() != n || world.size() != n || grad_rotation.size() != n || grad_translation.size() != n) {
    throw Error("forward_kinematics_backward: size mismatch");
  }
  std::vector<Mat3> gr(grad_rotation.begin(), grad_rotation.end());
  std::vector<Vec3> gt(grad_translation.begin(), grad_translation.end());
  FkGradients out;
  out.local_rotation.assign(n, Mat3::Zero());
  out.joints.assign(n, Vec3::Zero());
  auto order = tree.topological_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const int c = *it;
    if (c == tree.root) continue;
    const int p = tree.parent[c];
    const Mat3& rl = local_rotations[c];
    const Vec3& j = tree.joints[c];
    const Vec3 tl = j - rl * j;
    const Mat3& rp = world.transforms[p].rotation;
    // T_c = T_p T̂: R_c = R_p R̂, t_c = R_p t̂ + t_p.
    gr[p] += gr[c] * rl.transpose() + gt[c] * tl.transpose();
    gt[p] += gt[c];
    const Vec3 g_tl = rp.transpose() * gt[c];
    out.local_rotation[c] = rp.transpose() * gr[c] - g_tl * j.transpose();
    out.joints[c] = (Mat3::Identity() - rl).transpose() * g_tl;
  }
  out.root_rotation = gr[tree.root];
  out.root_translation = gt[tree.root];
  return out;
}

// --- joint field ------------------------------------------------------------

JointField::JointField(int width, int depth, std::uint64_t seed, std::vector<double> times)
    : JointField(Mlp(MlpShape{input_size(), kOutputs, width, depth}, seed, true), std::move(times)) {}

JointField::JointField(Mlp net, std::vector<double> times)
    : net_(std::move(net)),
      times_(std::move(times)),
      root_quats_(times_.size(), Vec4(1, 0, 0, 0)),
      root_translations_(times_.size(), Vec3::Zero()) {
  if (net_.input_dim() != input_size() || net_.output_dim() != kOutputs) {
    throw Error("JointField: network shape does not match the field");
  }
  for (std::size_t i = 1; i < times_.size(); ++i) {
    if (!(times_[i] > times_[i - 1])) throw Error("JointField: timestamps must increase strictly");
  }
}

VecX JointField::encode(const Vec3& joint, double t) {
  const double pc[3] = {joint.x(), joint.y(), joint.z()};
  VecX out(input_size());
  out << positional_encoding(pc, kPositionFreqs), positional_encoding({&t, 1}, kTimeFreqs);
  return out;
}

Mat3 JointField::decode(const Eigen::Ref<const VecX>& out) {
  return quat_to_matrix(UnitQuaternion{1.0 + out[0], out[1], out[2], out[3]}.normalized());
}

void JointField::set_root(std::size_t index, const RigidTransform& t) {
  root_quats_.at(index) = matrix_to_quat(t.rotation).as_vector();
  root_translations_.at(index) = t.translation;
}

RigidTransform JointField::root(std::size_t index) const {
  return {quat_to_matrix(UnitQuaternion::from_vector(root_quats_.at(index)).normalized()), root_translations_.at(index)};
}

RigidTransform JointField::root_at(double t) const {
  if (times_.empty()) return RigidTransform::identity();
  if (t <= times_.front()) return root(0);
  if (t >= times_.back()) return root(times_.size() - 1);
  const auto hi = static_cast<std::size_t>(std::upper_bound(times_.begin(), times_.end(), t) - times_.begin());
  const std::size_t lo = hi - 1;
  if (t == times_[lo]) return root(lo);
  const double u = (t - times_[lo]) / (times_[hi] - times_[lo]);
  const auto qa = UnitQuaternion::from_vector(root_quats_[lo]).normalized();
  const auto qb = UnitQuaternion::from_vector(root_quats_[hi]).normalized();
  return {quat_to_matrix(slerp(qa, qb, u)), (1.0 - u) * root_translations_[lo] + u * root_translations_[hi]};
}

std::vector<Mat3> JointField::eval_rotations(const SkeletonTree& tree, double t, Batch* batch) const {
  std::vector<int> nodes;
  for (int v : tree.topological_order()) {
    if (v != tree.root) nodes.push_back(v);
  }
  std::vector<Mat3> out(tree.size(), Mat3::Identity());
  if (nodes.empty()) {
    if (batch) *batch = Batch{{}, {}, t, {}, {}};
    return out;
  }
  MatX in(input_size(), static_cast<Eigen::Index>(nodes.size()));
  for (std::size_t q = 0; q < nodes.size(); ++q) in.col(static_cast<Eigen::Index>(q)) = encode(tree.joints[nodes[q]], t);
  MatX y = net_.forward(in, batch ? &batch->cache : nullptr);
  for (std::size_t q = 0; q < nodes.size(); ++q) out[nodes[q]] = decode(y.col(static_cast<Eigen::Index>(q)));
  if (batch) {
    batch->nodes = nodes;
    batch->joints.clear();
    for (int v : nodes) batch->joints.push_back(tree.joints[v]);
    batch->t = t;
    batch->output = std::move(y);
  }
  return out;
}

Mlp::Gradients JointField::backward(const Batch& batch, std::span<const Mat3> grad_local_rotation,
                                    std::span<Vec3> grad_joints) const {
  const auto n = static_cast<Eigen::Index>(batch.nodes.size());
  MatX g(kOutputs, n);
  for (Eigen::Index q = 0; q < n; ++q) {
    const Vec4 raw(1.0 + batch.output(0, q), batch.output(1, q), batch.output(2, q), batch.output(3, q));
    g.col(q) = quat_to_matrix_backward(raw, grad_local_rotation[batch.nodes[q]]);
  }
  if (n == 0) return {};
  Mlp::Gradients grads = net_.backward(batch.cache, g);
  if (!grad_joints.empty()) {
    const int pe = encoded_size(3, kPositionFreqs);
    for (Eigen::Index q = 0; q < n; ++q) {
      const Vec3& j = batch.joints[q];
      const double pc[3] = {j.x(), j.y(), j.z()};
      grad_joints[batch.nodes[q]] += positional_encoding_backward(pc, kPositionFreqs, {grads.input.col(q).data(), static_cast<std::size_t>(pe)});
    }
  }
  return grads;
}

KinematicPose eval_joint_field(const JointField& field, const SkeletonTree& tree, double t) {
  const auto rot = field.eval_rotations(tree, t);
  KinematicPose pose = KinematicPose::identity(tree.size());
  pose.root = field.root_at(t);
  for (std::size_t v = 0; v < tree.size(); ++v) {
    if (static_cast<int>(v) != tree.root) pose.joints[v] = matrix_to_quat(rot[v]);
  }
  return pose;
}

GaussianSet repose(const GaussianSet& set, const SkinningWeights& weights, const SkeletonTree& tree,
                   const KinematicPose& pose) {
  return lbs_deform(set, forward_kinematics(tree, pose), weights);
}

KinematicPose interpolate_poses(const KinematicPose& a, const KinematicPose& b, double u) {
  if (a.joints.size() != b.joints.size()) throw Error("interpolate_poses: poses belong to different skeletons");
  if (u == 0.0) return a;
  if (u == 1.0) return b;
  KinematicPose out;
  out.joints.reserve(a.joints.size());
  for (std::size_t k = 0; k < a.joints.size(); ++k) out.joints.push_back(slerp(a.joints[k], b.joints[k], u));
  // Equal parts stay bit-exact so interpolating a pose with itself is a no-op.
  if (a.root.rotation == b.root.rotation) {
    out.root.rotation = a.root.rotation;
  } else {
    out.root.rotation = quat_to_matrix(slerp(matrix_to_quat(a.root.rotation), matrix_to_quat(b.root.rotation), u));
  }
  out.root.translation = a.root.translation == b.root.translation
                             ? a.root.translation
                             : Vec3((1.0 - u) * a.root.translation + u * b.root.translation);
  return out;
}

}  // namespace skelsplat
