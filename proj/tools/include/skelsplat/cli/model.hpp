// SPDX-License-Identifier: Apache-2.0
//
// A trained model as the render paths see it: canonical Gaussians, skinning,
// skeleton and Ψ. Loaded read-only from a project checkpoint.
#pragma once

#include "skelsplat/cli/documents.hpp"
#include "skelsplat/cli/project.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace skelsplat::cli {

struct Model {
  GaussianSet gaussians;
  SkinningWeights weights;
  SkeletonTree tree;
  JointField psi;
  std::size_t superpoints = 0;
  std::vector<double> motion_range;  // per node, radians
  std::vector<int> parts;            // rigid part per node
  std::vector<PartJoint> joints;     // articulations between parts
  std::string hash;                  // FNV-1a of the checkpoint bytes

  /// Pose from Ψ at time t (the root trajectory is interpolated between
  /// training timestamps).
  KinematicPose pose_at(double t) const;
  GaussianSet posed(const KinematicPose& pose) const;
};

/// 64-bit FNV-1a, 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

/// Throws Error when there is no checkpoint or Ψ has not been fitted yet.
Model load_model(const Project& project);
Model model_from_state(const ProjectState& state, std::string hash);

/// The one render path of the command line and the service: repose, splat,
/// encode as 8-bit PNG.
std::vector<std::uint8_t> render_pose_png(const Model& model, const LookAt& camera, const KinematicPose& pose,
                                          const Vec3& background);

/// GET /model body.
json model_to_json(const Model& model);

}  // namespace skelsplat::cli
