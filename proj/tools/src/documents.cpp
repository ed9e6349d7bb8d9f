// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/cli/documents.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace skelsplat::cli {

DocumentError::DocumentError(int status, std::string path, const std::string& reason)
    : Error((path.empty() ? std::string("document") : path) + ": " + reason),
      status_(status),
      path_(std::move(path)),
      reason_(reason) {}

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& reason) {
  throw DocumentError(kBadRequest, path, reason);
}

std::string line_and_column(std::string_view text, std::size_t byte) {
  byte = std::min(byte, text.size());
  std::size_t line = 1, column = 1;
  for (std::size_t i = 0; i < byte; ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(column);
}

double finite_number(const json& v, const std::string& path) {
  if (!v.is_number()) bad(path, "must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) bad(path, "must be finite");
  return x;
}

}  // namespace

json parse_document(std::string_view text, const std::string& what) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw DocumentError(kBadRequest, "", what + " is not valid JSON (" +
                                             line_and_column(text, e.byte > 0 ? e.byte - 1 : 0) + ")");
  }
}

FieldReader::FieldReader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
  if (!node_.is_object()) bad(path_, "must be an object");
}

std::string FieldReader::child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

bool FieldReader::has(const char* key) const { return node_.contains(key); }

const json* FieldReader::find(const char* key) {
  seen_.emplace_back(key);
  auto it = node_.find(key);
  return it == node_.end() ? nullptr : &*it;
}

const json& FieldReader::require(const char* key) {
  const json* v = find(key);
  if (!v) bad(child(key), "is required");
  return *v;
}

double FieldReader::number(const char* key, double fallback) {
  const json* v = find(key);
  return v ? finite_number(*v, child(key)) : fallback;
}

double FieldReader::number(const char* key) { return finite_number(require(key), child(key)); }

int FieldReader::integer(const char* key, int fallback) {
  const std::int64_t v = integer64(key, fallback);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) bad(child(key), "is out of range");
  return static_cast<int>(v);
}

std::int64_t FieldReader::integer64(const char* key, std::int64_t fallback) {
  const json* v = find(key);
  if (!v) return fallback;
  if (!v->is_number_integer()) bad(child(key), "must be an integer");
  return v->get<std::int64_t>();
}

std::string FieldReader::string(const char* key, const std::string& fallback) {
  const json* v = find(key);
  if (!v) return fallback;
  if (!v->is_string()) bad(child(key), "must be a string");
  return v->get<std::string>();
}

Vec3 FieldReader::vec3(const char* key, const Vec3& fallback) {
  const json* v = find(key);
  return v ? vec3_from_json(*v, child(key)) : fallback;
}

Vec3 FieldReader::vec3(const char* key) { return vec3_from_json(require(key), child(key)); }

void FieldReader::finish() const {
  for (auto it = node_.begin(); it != node_.end(); ++it) {
    if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) bad(child(it.key()), "unknown field");
  }
}

Vec3 vec3_from_json(const json& node, const std::string& path) {
  if (!node.is_array() || node.size() != 3) bad(path, "must be an array of 3 numbers");
  Vec3 v;
  for (int i = 0; i < 3; ++i) v[i] = finite_number(node[static_cast<std::size_t>(i)], path + "[" + std::to_string(i) + "]");
  return v;
}

json vec3_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

UnitQuaternion quat_from_json(const json& node, const std::string& path) {
  if (!node.is_array() || node.size() != 4) bad(path, "must be a quaternion [w, x, y, z]");
  Vec4 q;
  for (int i = 0; i < 4; ++i) q[i] = finite_number(node[static_cast<std::size_t>(i)], path + "[" + std::to_string(i) + "]");
  if (q.norm() < 1e-12) bad(path, "quaternion has zero length");
  return UnitQuaternion::from_vector(q).normalized();
}

json quat_to_json(const UnitQuaternion& q) { return json::array({q.w, q.x, q.y, q.z}); }

LookAt camera_from_json(const json& node, const std::string& path) {
  FieldReader r(node, path);
  LookAt cam;
  cam.position = r.vec3("position");
  cam.target = r.vec3("target");
  cam.up = r.vec3("up", Vec3::UnitY());
  cam.fov_y_deg = r.number("fov", cam.fov_y_deg);
  cam.width = r.integer("width", cam.width);
  cam.height = r.integer("height", cam.height);
  r.finish();
  if (!(cam.fov_y_deg > 0.0 && cam.fov_y_deg < 180.0)) bad(r.child("fov"), "must lie in (0, 180) degrees");
  if (cam.width < 1 || cam.width > kMaxImageSize) bad(r.child("width"), "must lie in [1, " + std::to_string(kMaxImageSize) + "]");
  if (cam.height < 1 || cam.height > kMaxImageSize) bad(r.child("height"), "must lie in [1, " + std::to_string(kMaxImageSize) + "]");
  const Vec3 forward = cam.target - cam.position;
  if (forward.norm() < 1e-12) bad(r.child("target"), "coincides with the position");
  if (forward.normalized().cross(cam.up).norm() < 1e-9) bad(r.child("up"), "is parallel to the view direction");
  return cam;
}

json camera_to_json(const LookAt& cam) {
  return {{"position", vec3_to_json(cam.position)},
          {"target", vec3_to_json(cam.target)},
          {"up", vec3_to_json(cam.up)},
          {"fov", cam.fov_y_deg},
          {"width", cam.width},
          {"height", cam.height}};
}

json pose_to_json(const KinematicPose& pose, const SkeletonTree& tree) {
  json joints = json::array();
  for (std::size_t k = 0; k < tree.size(); ++k) {
    if (static_cast<int>(k) == tree.root) continue;
    joints.push_back({{"index", k}, {"rotation", quat_to_json(pose.joints[k])}});
  }
  return {{"root", {{"rotation", quat_to_json(matrix_to_quat(pose.root.rotation))},
                    {"translation", vec3_to_json(pose.root.translation)}}},
          {"joints", std::move(joints)}};
}

KinematicPose pose_from_json(const json& node, const SkeletonTree& tree, const std::string& path) {
  FieldReader r(node, path);
  KinematicPose pose = KinematicPose::identity(tree.size());
  if (const json* root = r.find("root")) {
    FieldReader rr(*root, r.child("root"));
    if (const json* q = rr.find("rotation")) pose.root.rotation = quat_to_matrix(quat_from_json(*q, rr.child("rotation")));
    pose.root.translation = rr.vec3("translation", Vec3::Zero());
    rr.finish();
  }
  if (const json* joints = r.find("joints")) {
    const std::string jpath = r.child("joints");
    if (!joints->is_array()) bad(jpath, "must be an array");
    std::set<std::int64_t> seen;
    for (std::size_t i = 0; i < joints->size(); ++i) {
      FieldReader jr((*joints)[i], jpath + "[" + std::to_string(i) + "]");
      const json& idx = jr.require("index");
      if (!idx.is_number_integer()) bad(jr.child("index"), "must be an integer");
      const std::int64_t k = idx.get<std::int64_t>();
      const UnitQuaternion q = quat_from_json(jr.require("rotation"), jr.child("rotation"));
      jr.finish();
      if (k < 0 || k >= static_cast<std::int64_t>(tree.size()))
        throw DocumentError(kUnprocessable, jr.child("index"),
                            "joint " + std::to_string(k) + " does not exist (skeleton has " +
                                std::to_string(tree.size()) + " nodes)");
      if (k == tree.root)
        throw DocumentError(kUnprocessable, jr.child("index"),
                            "node " + std::to_string(k) + " is the root and has no joint; use root.rotation");
      if (!seen.insert(k).second) bad(jr.child("index"), "joint " + std::to_string(k) + " is listed twice");
      pose.joints[static_cast<std::size_t>(k)] = q;
    }
  }
  r.finish();
  return pose;
}

json skeleton_to_json(const SkeletonTree& tree, std::span<const double> range, std::span<const int> parts) {
  const auto children = tree.children();
  json nodes = json::array();
  for (std::size_t k = 0; k < tree.size(); ++k) {
    const bool is_root = static_cast<int>(k) == tree.root;
    json n = {{"index", k},
              {"parent", is_root ? json() : json(tree.parent[k])},
              {"joint", is_root ? json() : vec3_to_json(tree.joints[k])},
              {"children", children[k]}};
    if (!range.empty()) n["motion_range"] = range[k];
    if (!parts.empty()) {
      n["part"] = parts[k];
      n["articulated"] = !is_root && parts[k] != parts[static_cast<std::size_t>(tree.parent[k])];
    }
    nodes.push_back(std::move(n));
  }
  return {{"root", tree.root}, {"nodes", std::move(nodes)}};
}

}  // namespace skelsplat::cli
