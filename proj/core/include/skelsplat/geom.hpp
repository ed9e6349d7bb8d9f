// SPDX-License-Identifier: Apache-2.0
//
// Quaternion, SO(3) and SE(3) helpers shared by every other module.
//
// Conventions:
//   * quaternions are stored (w, x, y, z); canonical sign is w >= 0.
//   * a RigidTransform maps a point p to R p + t.
//   * compose(a, b) is the homogeneous product a * b (b applied first).
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <stdexcept>
#include <string>

namespace skelsplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct UnitQuaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static UnitQuaternion identity() { return {}; }
  static UnitQuaternion from_vector(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }
  /// Rotation of `angle` radians about `axis` (axis need not be unit length).
  static UnitQuaternion from_axis_angle(const Vec3& axis, double angle);

  Vec4 as_vector() const { return {w, x, y, z}; }
  Vec3 vec() const { return {x, y, z}; }
  double norm() const;
  UnitQuaternion normalized() const;
  /// Normalized and flipped into the w >= 0 hemisphere.
  UnitQuaternion canonical() const;
  UnitQuaternion conjugate() const { return {w, -x, -y, -z}; }

  bool operator==(const UnitQuaternion&) const = default;
};

/// Hamilton product a ⊗ b, normalized.
UnitQuaternion quat_mul(const UnitQuaternion& a, const UnitQuaternion& b);

Mat3 quat_to_matrix(const UnitQuaternion& q);

/// Throws Error when `r` is not orthonormal (residual > 1e-6) or has det < 0.
UnitQuaternion matrix_to_quat(const Mat3& r);

/// Geodesic angle between two rotations in [0, pi].
double quat_angle(const UnitQuaternion& a, const UnitQuaternion& b);

/// Spherical linear interpolation along the shorter arc.
UnitQuaternion slerp(const UnitQuaternion& a, const UnitQuaternion& b, double u);

/// Backprop through quat_to_matrix for an unnormalized 4-vector q.
/// Given dL/dR, returns dL/dq where R = quat_to_matrix(q / |q|).
Vec4 quat_to_matrix_backward(const Vec4& q, const Mat3& grad_rotation);

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_quat(const UnitQuaternion& q, const Vec3& t) {
    return {quat_to_matrix(q), t};
  }
  static RigidTransform from_homogeneous(const Mat4& m);

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Mat4 homogeneous() const;
  /// Max of |RᵀR - I| and |det R - 1|.
  double orthonormality_residual() const;
};

RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform inverse(const RigidTransform& t);

/// Element of se(3): rotation vector omega and translational part v.
struct Twist {
  Vec3 omega = Vec3::Zero();
  Vec3 v = Vec3::Zero();

  /// Euclidean norm of the 6-vector with the rotational part scaled by
  /// `rotation_weight` (radians and scene units are mixed unweighted at 1.0).
  double norm(double rotation_weight = 1.0) const;
};

struct TwistLog {
  Twist twist;
  /// Rotation angle is within 1e-6 of pi; the direction of omega is then
  /// ambiguous but its magnitude is still valid.
  bool near_pi = false;
};

Mat3 hat(const Vec3& w);
Mat3 so3_exp(const Vec3& omega);
/// Rotation vector of `r`; accurate up to and including angle pi.
Vec3 so3_log(const Mat3& r);

RigidTransform se3_exp(const Twist& xi);
TwistLog se3_log(const RigidTransform& t);

/// Angle below which exp/log use series expansions.
inline constexpr double kSmallAngle = 1e-6;

}  // namespace skelsplat
