// SPDX-License-Identifier: Apache-2.0
//
// JSON documents shared by the command line and the HTTP service: cameras,
// pose documents and the skeleton export. The wire format is described by
// schema/service_v1.json.
#pragma once

#include "skelsplat/kinematic.hpp"
#include "skelsplat/splat_render.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <string>
#include <string_view>

namespace skelsplat::cli {

using json = nlohmann::json;

inline constexpr int kBadRequest = 400;
inline constexpr int kNotFound = 404;
inline constexpr int kUnprocessable = 422;

/// Largest image edge accepted in a render request.
inline constexpr int kMaxImageSize = 4096;

/// A document that does not fit its schema (400) or the loaded skeleton
/// (422). what() is "<path>: <reason>".
class DocumentError : public Error {
 public:
  DocumentError(int status, std::string path, const std::string& reason);
  int status() const { return status_; }
  const std::string& path() const { return path_; }
  const std::string& reason() const { return reason_; }

 private:
  int status_;
  std::string path_;
  std::string reason_;
};

/// Parse errors name the line and column.
json parse_document(std::string_view text, const std::string& what);

/// Object member reader that records the dotted path of every field and
/// rejects members it was not asked about.
class FieldReader {
 public:
  FieldReader(const json& node, std::string path);

  const std::string& path() const { return path_; }
  std::string child(const std::string& key) const;
  bool has(const char* key) const;
  /// nullptr when absent.
  const json* find(const char* key);
  const json& require(const char* key);

  double number(const char* key, double fallback);
  double number(const char* key);
  int integer(const char* key, int fallback);
  std::int64_t integer64(const char* key, std::int64_t fallback);
  std::string string(const char* key, const std::string& fallback);
  Vec3 vec3(const char* key, const Vec3& fallback);
  Vec3 vec3(const char* key);
  /// Throws on members never read.
  void finish() const;

 private:
  const json& node_;
  std::string path_;
  std::vector<std::string> seen_;
};

Vec3 vec3_from_json(const json& node, const std::string& path);
json vec3_to_json(const Vec3& v);
/// [w, x, y, z], normalized; a zero or non-finite quaternion is rejected.
UnitQuaternion quat_from_json(const json& node, const std::string& path);
json quat_to_json(const UnitQuaternion& q);

/// {position, target, up, fov, width, height}; right-handed, y-up world,
/// `fov` is the vertical field of view in degrees.
LookAt camera_from_json(const json& node, const std::string& path);
json camera_to_json(const LookAt& camera);

/// {root: {rotation, translation}, joints: [{index, rotation}]}. Every
/// non-root node is listed, in index order.
json pose_to_json(const KinematicPose& pose, const SkeletonTree& tree);
/// Missing joints and a missing root stay at identity. An index outside the
/// tree or naming the root node is a skeleton mismatch (422).
KinematicPose pose_from_json(const json& node, const SkeletonTree& tree, const std::string& path);

/// {root, nodes: [{index, parent, joint, children, part, motion_range,
/// articulated}]}; a node is articulated when its rigid part differs from
/// its parent's. `motion_range` and `parts` may be empty.
json skeleton_to_json(const SkeletonTree& tree, std::span<const double> motion_range, std::span<const int> parts);

}  // namespace skelsplat::cli
