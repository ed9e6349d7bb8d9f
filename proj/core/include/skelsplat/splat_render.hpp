// SPDX-License-Identifier: Apache-2.0
//
// Forward CPU rasterizer for Gaussian splats (EWA projection, depth sort,
// front-to-back alpha compositing) plus PSNR / SSIM and PNG I/O.
//
// Camera space follows the pinhole convention: x right, y down, z forward.
// Pixel (px, py) has its center at (px + 0.5, py + 0.5).
#pragma once

#include "skelsplat/gaussian_scene.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace skelsplat {

struct Camera {
  RigidTransform world_to_camera;
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;
  int width = 1, height = 1;
  double near_plane = 0.01;

  /// Look-at camera for a right-handed, y-up world. `fov_y_deg` is the
  /// vertical field of view; the principal point is the image center.
  static Camera look_at(const Vec3& position, const Vec3& target, const Vec3& up,
                        double fov_y_deg, int width, int height);

  Vec3 center() const;
  /// Throws Error on non-positive focal lengths or empty image size.
  void validate() const;
};

/// Look-at description of a camera, the form cameras take in config files
/// and service requests.
struct LookAt {
  Vec3 position = Vec3(0.0, 0.0, 1.0);
  Vec3 target = Vec3::Zero();
  Vec3 up = Vec3::UnitY();
  double fov_y_deg = 40.0;
  int width = 256;
  int height = 256;

  Camera camera() const { return Camera::look_at(position, target, up, fov_y_deg, width, height); }
};

struct Splat2D {
  Vec2 center = Vec2::Zero();
  Mat2 cov = Mat2::Identity();
  Mat2 conic = Mat2::Identity();  // cov⁻¹
  double depth = 0.0;
  Vec3 color = Vec3::Zero();
  double opacity = 0.0;
  /// Radius (pixels) outside which alpha is guaranteed below the 1/255 cutoff.
  double radius = 0.0;
  std::size_t index = 0;
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;  // row-major, 3 floats per pixel

  Image() = default;
  Image(int w, int h, const Vec3& fill = Vec3::Zero());

  Vec3 at(int x, int y) const;
  void set(int x, int y, const Vec3& c);
};

inline constexpr double kLowPassVariance = 0.3;
inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kMinAlpha = 1.0 / 255.0;
inline constexpr int kTileSize = 16;

/// Projects one Gaussian; std::nullopt when it is culled.
std::optional<Splat2D> project(const Gaussian3D& g, int sh_degree, const Camera& cam);

/// σ exp(-½ dᵀ Σ'⁻¹ d) clamped to 0.99; returns 0 below the 1/255 cutoff.
double pixel_alpha(const Splat2D& splat, const Vec2& x);

/// Projects and sorts by (depth, index).
std::vector<Splat2D> project_all(const GaussianSet& set, const Camera& cam);

/// Tile-binned renderer (16x16 tiles).
Image render(const GaussianSet& set, const Camera& cam, const Vec3& background);
/// Reference renderer: every pixel walks the full sorted splat list.
Image render_naive(const GaussianSet& set, const Camera& cam, const Vec3& background);

/// Returns +infinity for identical images. Throws Error on size mismatch.
double psnr(const Image& a, const Image& b);
/// 11x11 Gaussian window (sigma 1.5), C1 = 0.01², C2 = 0.03², zero padding.
double ssim(const Image& a, const Image& b);
double mean_abs_error(const Image& a, const Image& b);

/// 8-bit RGB PNG.
std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);
Image decode_png(const std::vector<std::uint8_t>& bytes);

}  // namespace skelsplat
