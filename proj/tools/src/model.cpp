// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/cli/model.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace skelsplat::cli {

KinematicPose Model::pose_at(double t) const { return eval_joint_field(psi, tree, t); }

GaussianSet Model::posed(const KinematicPose& pose) const { return repose(gaussians, weights, tree, pose); }

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Model model_from_state(const ProjectState& s, std::string hash) {
  if (s.stage != Stage::Kinematic && s.stage != Stage::Done)
    throw Error(std::string("model is not trained yet (stage ") + stage_name(s.stage) + ")");
  Model m;
  m.gaussians = s.gaussians;
  m.weights = s.weights;
  m.tree = s.tree;
  m.psi = s.psi;
  m.superpoints = s.superpoints.size();
  m.motion_range = joint_motion_range(s);
  m.parts = rigid_parts(s);
  m.joints = part_joints(s);
  m.hash = std::move(hash);
  return m;
}

Model load_model(const Project& project) {
  const fs::path file = project.checkpoint();
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("no trained model: " + file.string() + " does not exist");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  std::istringstream state_in(bytes);
  return model_from_state(read_state(state_in), fnv1a_hex(bytes));
}

std::vector<std::uint8_t> render_pose_png(const Model& model, const LookAt& camera, const KinematicPose& pose,
                                          const Vec3& background) {
  if (pose.joints.size() != model.tree.size()) throw Error("pose does not match the skeleton");
  return encode_png(render(model.posed(pose), camera.camera(), background));
}

json model_to_json(const Model& m) {
  Vec3 lo = Vec3::Constant(0.0), hi = Vec3::Constant(0.0);
  if (!m.gaussians.empty()) {
    lo = hi = m.gaussians.positions.front();
    for (const Vec3& p : m.gaussians.positions) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
  }
  json joints = json::array();
  for (const PartJoint& j : m.joints) {
    const auto first = static_cast<std::size_t>(j.nodes.front());
    double range = 0.0;
    for (int k : j.nodes) range = std::max(range, m.motion_range[static_cast<std::size_t>(k)]);
    joints.push_back({{"parts", {j.parent_part, j.child_part}},
                      {"nodes", j.nodes},
                      {"position", vec3_to_json(m.tree.joints[first])},
                      {"motion_range", range}});
  }
  return {{"schema", "skelsplat.model/1"},
          {"superpoints", m.superpoints},
          {"gaussians", m.gaussians.size()},
          {"joints", std::move(joints)},
          {"skeleton", skeleton_to_json(m.tree, m.motion_range, m.parts)},
          {"bounding_box", {{"min", vec3_to_json(lo)}, {"max", vec3_to_json(hi)}}},
          {"training_times", m.psi.times()},
          {"model_hash", m.hash}};
}

}  // namespace skelsplat::cli
