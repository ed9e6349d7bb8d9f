// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/geom.hpp"

#include <algorithm>
#include <cmath>

namespace skelsplat {

UnitQuaternion UnitQuaternion::from_axis_angle(const Vec3& axis, double angle) {
  const double n = axis.norm();
  if (n == 0.0) return identity();
  const Vec3 a = axis / n;
  const double s = std::sin(0.5 * angle);
  return {std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s};
}

double UnitQuaternion::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

UnitQuaternion UnitQuaternion::normalized() const {
  const double n = norm();
  if (n == 0.0) return identity();
  return {w / n, x / n, y / n, z / n};
}

UnitQuaternion UnitQuaternion::canonical() const {
  UnitQuaternion q = normalized();
  if (q.w < 0.0) q = {-q.w, -q.x, -q.y, -q.z};
  return q;
}

UnitQuaternion quat_mul(const UnitQuaternion& a, const UnitQuaternion& b) {
  UnitQuaternion r{a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
                   a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
                   a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
                   a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
  return r.normalized();
}

Mat3 quat_to_matrix(const UnitQuaternion& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

UnitQuaternion matrix_to_quat(const Mat3& r) {
  const double residual =
      std::max((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(),
               std::abs(r.determinant() - 1.0));
  if (!(residual <= 1e-6)) {
    throw Error("matrix_to_quat: matrix is not a rotation (residual " +
                std::to_string(residual) + ")");
  }
  // Shepperd: pick the largest diagonal term for stability.
  const double tr = r.trace();
  UnitQuaternion q;
  if (tr >= r(0, 0) && tr >= r(1, 1) && tr >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + tr);
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
  } else if (r(0, 0) >= r(1, 1) && r(0, 0) >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
  } else if (r(1, 1) >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
  } else {
    const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  return q.canonical();
}

double quat_angle(const UnitQuaternion& a, const UnitQuaternion& b) {
  const UnitQuaternion d = quat_mul(a.conjugate(), b).canonical();
  return 2.0 * std::atan2(d.vec().norm(), d.w);
}

UnitQuaternion slerp(const UnitQuaternion& a, const UnitQuaternion& b, double u) {
  if (u == 0.0) return a;
  if (u == 1.0 || a == b) return b;
  // Relative rotation a⁻¹b on the short arc, scaled in angle.
  UnitQuaternion d = quat_mul(a.conjugate(), b).canonical();
  const double half = std::atan2(d.vec().norm(), d.w);
  const Vec3 axis = d.vec();
  if (axis.norm() < 1e-300) return a;
  const UnitQuaternion step = UnitQuaternion::from_axis_angle(axis, 2.0 * half * u);
  return quat_mul(a, step);
}

Vec4 quat_to_matrix_backward(const Vec4& q, const Mat3& g) {
  const double n = q.norm();
  const Vec4 u = q / n;
  const double w = u[0], x = u[1], y = u[2], z = u[3];
  Vec4 du;
  du[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  du[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) +
               z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2));
  du[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
               w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2));
  du[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) +
               y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
  // Through u = q / |q|.
  return (du - u * u.dot(du)) / n;
}

RigidTransform RigidTransform::from_homogeneous(const Mat4& m) {
  return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
}

Mat4 RigidTransform::homogeneous() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

double RigidTransform::orthonormality_residual() const {
  return std::max((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff(),
                  std::abs(rotation.determinant() - 1.0));
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

RigidTransform inverse(const RigidTransform& t) {
  const Mat3 rt = t.rotation.transpose();
  return {rt, -(rt * t.translation)};
}

double Twist::norm(double rotation_weight) const {
  return std::sqrt(rotation_weight * rotation_weight * omega.squaredNorm() + v.squaredNorm());
}

Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

Mat3 so3_exp(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 k = hat(omega);
  double a, b;  // R = I + a K + b K²
  if (theta < kSmallAngle) {
    a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0;
    b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
  } else {
    a = std::sin(theta) / theta;
    const double s = std::sin(0.5 * theta);
    b = 2.0 * s * s / theta2;
  }
  return Mat3::Identity() + a * k + b * k * k;
}

Vec3 so3_log(const Mat3& r) {
  // Via the quaternion: angle = 2 atan2(|v|, w) stays accurate near 0 and pi.
  // Projection onto SO(3) first so slightly drifted inputs are tolerated.
  Eigen::Quaterniond eq(r);
  eq.normalize();
  UnitQuaternion q{eq.w(), eq.x(), eq.y(), eq.z()};
  if (q.w < 0) q = {-q.w, -q.x, -q.y, -q.z};
  const Vec3 v = q.vec();
  const double s = v.norm();
  const double angle = 2.0 * std::atan2(s, q.w);
  if (s < 1e-300) return Vec3::Zero();
  if (angle < kSmallAngle) {
    // angle / s = 2 / w * (1 + s²/(3w²)) to second order.
    return v * (2.0 / q.w) * (1.0 + s * s / (3.0 * q.w * q.w));
  }
  return v * (angle / s);
}

namespace {

// Coefficients of V = I + c1 K + c2 K², with K = hat(omega).
void left_jacobian_coeffs(double theta, double& c1, double& c2) {
  const double t2 = theta * theta;
  if (theta < kSmallAngle) {
    c1 = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    c2 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  } else {
    const double s = std::sin(0.5 * theta);
    c1 = 2.0 * s * s / t2;
    c2 = (theta - std::sin(theta)) / (t2 * theta);
  }
}

}  // namespace

RigidTransform se3_exp(const Twist& xi) {
  const double theta = xi.omega.norm();
  const Mat3 k = hat(xi.omega);
  double c1, c2;
  left_jacobian_coeffs(theta, c1, c2);
  const Mat3 v = Mat3::Identity() + c1 * k + c2 * k * k;
  return {so3_exp(xi.omega), v * xi.v};
}

TwistLog se3_log(const RigidTransform& t) {
  TwistLog out;
  const Vec3 omega = so3_log(t.rotation);
  const double theta = omega.norm();
  out.near_pi = theta > M_PI - 1e-6;
  const Mat3 k = hat(omega);
  // V⁻¹ = I - K/2 + c K², c = (1 - theta sin(theta) / (2 (1 - cos theta))) / theta².
  double c;
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  } else {
    const double half = 0.5 * theta;
    // theta sin(theta) / (2 (1 - cos theta)) = half * cot(half)
    c = (1.0 - half * std::cos(half) / std::sin(half)) / (theta * theta);
  }
  const Mat3 v_inv = Mat3::Identity() - 0.5 * k + c * k * k;
  out.twist.omega = omega;
  out.twist.v = v_inv * t.translation;
  return out;
}

}  // namespace skelsplat
