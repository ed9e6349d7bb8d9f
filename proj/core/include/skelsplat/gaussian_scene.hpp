// SPDX-License-Identifier: Apache-2.0
//
// Canonical-space Gaussian splats: storage, covariance, spherical-harmonic
// color and PLY persistence in the usual 3D-GS field layout.
#pragma once

#include "skelsplat/geom.hpp"

#include <cmath>
#include <filesystem>
#include <span>
#include <vector>

namespace skelsplat {

/// Number of SH coefficients per channel for `degree` in [0, 3].
constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// One splat. Scales are log-space, opacity is pre-sigmoid.
struct Gaussian3D {
  Vec3 position = Vec3::Zero();
  UnitQuaternion rotation;
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  /// sh_coeff_count(degree) * 3 values, coefficient-major: sh[k * 3 + channel].
  std::vector<double> sh;
};

/// Struct-of-arrays container; every array has size() entries.
class GaussianSet {
 public:
  explicit GaussianSet(int sh_degree = 0);

  int sh_degree() const { return sh_degree_; }
  int coeffs_per_channel() const { return sh_coeff_count(sh_degree_); }
  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }

  void push_back(const Gaussian3D& g);
  Gaussian3D at(std::size_t i) const;
  std::span<const double> sh_of(std::size_t i) const;
  std::span<double> sh_of(std::size_t i);

  /// Throws Error if the arrays disagree in length.
  void check_consistent() const;

  std::vector<Vec3> positions;
  std::vector<UnitQuaternion> rotations;
  std::vector<Vec3> log_scales;
  std::vector<double> opacity_logits;
  std::vector<double> sh;  // size() * coeffs_per_channel() * 3

 private:
  int sh_degree_;
};

/// Σ = R S Sᵀ Rᵀ with S = diag(exp(log_scale)).
Mat3 covariance(const UnitQuaternion& q, const Vec3& log_scale);

/// Real SH color with the 3D-GS constant table, +0.5 DC offset, clamped at 0.
/// Throws Error when coeffs.size() != sh_coeff_count(degree) * 3.
Vec3 eval_sh(std::span<const double> coeffs, int degree, const Vec3& dir);

/// Binary little-endian PLY with fields x y z nx ny nz f_dc_* f_rest_*
/// opacity scale_* rot_*, all float32.
void save_ply(const GaussianSet& set, const std::filesystem::path& path);
GaussianSet load_ply(const std::filesystem::path& path);

}  // namespace skelsplat
