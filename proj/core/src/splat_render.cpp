// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/splat_render.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <thread>

namespace skelsplat {

Camera Camera::look_at(const Vec3& position, const Vec3& target, const Vec3& up,
                       double fov_y_deg, int width, int height) {
  const Vec3 forward = (target - position).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-12) throw Error("look_at: up vector is parallel to the view direction");
  right.normalize();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.world_to_camera.rotation.row(0) = right;
  cam.world_to_camera.rotation.row(1) = down;
  cam.world_to_camera.rotation.row(2) = forward;
  cam.world_to_camera.translation = -(cam.world_to_camera.rotation * position);
  cam.width = width;
  cam.height = height;
  cam.fy = 0.5 * height / std::tan(0.5 * fov_y_deg * M_PI / 180.0);
  cam.fx = cam.fy;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.validate();
  return cam;
}

Vec3 Camera::center() const {
  return -(world_to_camera.rotation.transpose() * world_to_camera.translation);
}

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw Error("camera focal lengths must be positive");
  if (width < 1 || height < 1) throw Error("camera image size must be at least 1x1");
}

Image::Image(int w, int h, const Vec3& fill) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3) {
  for (std::size_t i = 0; i < rgb.size(); i += 3) {
    rgb[i] = static_cast<float>(fill.x());
    rgb[i + 1] = static_cast<float>(fill.y());
    rgb[i + 2] = static_cast<float>(fill.z());
  }
}

Vec3 Image::at(int x, int y) const {
  const std::size_t o = (static_cast<std::size_t>(y) * width + x) * 3;
  return {rgb[o], rgb[o + 1], rgb[o + 2]};
}

void Image::set(int x, int y, const Vec3& c) {
  const std::size_t o = (static_cast<std::size_t>(y) * width + x) * 3;
  rgb[o] = static_cast<float>(c.x());
  rgb[o + 1] = static_cast<float>(c.y());
  rgb[o + 2] = static_cast<float>(c.z());
}

std::optional<Splat2D> project(const Gaussian3D& g, int sh_degree, const Camera& cam) {
  const Vec3 pc = cam.world_to_camera.apply(g.position);
  const double z = pc.z();
  if (z < cam.near_plane) return std::nullopt;

  const double opacity = sigmoid(g.opacity_logit);
  if (std::min(opacity, kMaxAlpha) < kMinAlpha) return std::nullopt;

  Eigen::Matrix<double, 2, 3> jac;
  jac << cam.fx / z, 0.0, -cam.fx * pc.x() / (z * z),
         0.0, cam.fy / z, -cam.fy * pc.y() / (z * z);
  const Mat3& w = cam.world_to_camera.rotation;
  const Mat3 cov3 = covariance(g.rotation, g.log_scale);
  Splat2D s;
  s.cov = jac * w * cov3 * w.transpose() * jac.transpose();
  s.cov(0, 0) += kLowPassVariance;
  s.cov(1, 1) += kLowPassVariance;
  s.cov(0, 1) = s.cov(1, 0) = 0.5 * (s.cov(0, 1) + s.cov(1, 0));
  const double det = s.cov.determinant();
  if (!(det > 0.0)) return std::nullopt;
  s.conic << s.cov(1, 1) / det, -s.cov(0, 1) / det, -s.cov(1, 0) / det, s.cov(0, 0) / det;
  s.center = {cam.fx * pc.x() / z + cam.cx, cam.fy * pc.y() / z + cam.cy};
  s.depth = z;
  s.opacity = opacity;

  // Largest eigenvalue bounds the Mahalanobis distance from below:
  // dᵀΣ⁻¹d >= |d|² / λmax, so alpha < 1/255 once |d| exceeds `radius`.
  const double mid = 0.5 * (s.cov(0, 0) + s.cov(1, 1));
  const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
  const double reach = std::sqrt(2.0 * std::log(std::min(opacity, kMaxAlpha) / kMinAlpha));
  s.radius = reach * std::sqrt(lambda_max);
  if (s.center.x() + s.radius < 0.0 || s.center.x() - s.radius > cam.width ||
      s.center.y() + s.radius < 0.0 || s.center.y() - s.radius > cam.height) {
    return std::nullopt;
  }
  const Vec3 dir = (g.position - cam.center()).normalized();
  s.color = eval_sh(g.sh, sh_degree, dir);
  return s;
}

double pixel_alpha(const Splat2D& splat, const Vec2& x) {
  const Vec2 d = x - splat.center;
  const double power = -0.5 * d.dot(splat.conic * d);
  if (power > 0.0) return 0.0;
  const double alpha = std::min(kMaxAlpha, splat.opacity * std::exp(power));
  return alpha < kMinAlpha ? 0.0 : alpha;
}

std::vector<Splat2D> project_all(const GaussianSet& set, const Camera& cam) {
  cam.validate();
  set.check_consistent();
  std::vector<Splat2D> splats;
  splats.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    Gaussian3D g;
    g.position = set.positions[i];
    g.rotation = set.rotations[i];
    g.log_scale = set.log_scales[i];
    g.opacity_logit = set.opacity_logits[i];
    const auto sh = set.sh_of(i);
    g.sh.assign(sh.begin(), sh.end());
    if (auto s = project(g, set.sh_degree(), cam)) {
      s->index = i;
      splats.push_back(*s);
    }
  }
  std::sort(splats.begin(), splats.end(), [](const Splat2D& a, const Splat2D& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.index < b.index;
  });
  return splats;
}

namespace {

// Front-to-back compositing of `order` (indices into `splats`) at one pixel.
template <typename IndexRange>
Vec3 shade_pixel(const std::vector<Splat2D>& splats, const IndexRange& order, const Vec2& x,
                 const Vec3& background) {
  Vec3 color = Vec3::Zero();
  double transmittance = 1.0;
  for (const auto idx : order) {
    const Splat2D& s = splats[idx];
    const double alpha = pixel_alpha(s, x);
    if (alpha == 0.0) continue;
    color += s.color * (alpha * transmittance);
    transmittance *= 1.0 - alpha;
  }
  return color + background * transmittance;
}

struct IotaRange {
  std::size_t n;
  struct It {
    std::size_t i;
    std::size_t operator*() const { return i; }
    It& operator++() { ++i; return *this; }
    bool operator!=(const It& o) const { return i != o.i; }
  };
  It begin() const { return {0}; }
  It end() const { return {n}; }
};

template <typename Fn>
void parallel_for(int count, Fn&& fn) {
  const int threads = std::max(1, std::min<int>(count, static_cast<int>(std::thread::hardware_concurrency())));
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < count; i += threads) fn(i);
    });
  }
}

}  // namespace

Image render(const GaussianSet& set, const Camera& cam, const Vec3& background) {
  const auto splats = project_all(set, cam);
  Image img(cam.width, cam.height, background);
  const int tiles_x = (cam.width + kTileSize - 1) / kTileSize;
  const int tiles_y = (cam.height + kTileSize - 1) / kTileSize;
  std::vector<std::vector<std::uint32_t>> bins(static_cast<std::size_t>(tiles_x) * tiles_y);
  for (std::size_t k = 0; k < splats.size(); ++k) {
    const Splat2D& s = splats[k];
    // Pixel centers within the radius, widened by one pixel of slack.
    const int x0 = std::max(0, static_cast<int>(std::floor(s.center.x() - s.radius - 0.5)) - 1);
    const int x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(s.center.x() + s.radius - 0.5)) + 1);
    const int y0 = std::max(0, static_cast<int>(std::floor(s.center.y() - s.radius - 0.5)) - 1);
    const int y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(s.center.y() + s.radius - 0.5)) + 1);
    if (x0 > x1 || y0 > y1) continue;
    for (int ty = y0 / kTileSize; ty <= y1 / kTileSize; ++ty)
      for (int tx = x0 / kTileSize; tx <= x1 / kTileSize; ++tx)
        bins[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(static_cast<std::uint32_t>(k));
  }
  parallel_for(tiles_x * tiles_y, [&](int tile) {
    const int tx = tile % tiles_x, ty = tile / tiles_x;
    const auto& bin = bins[static_cast<std::size_t>(tile)];
    for (int y = ty * kTileSize; y < std::min(cam.height, (ty + 1) * kTileSize); ++y)
      for (int x = tx * kTileSize; x < std::min(cam.width, (tx + 1) * kTileSize); ++x)
        img.set(x, y, shade_pixel(splats, bin, Vec2(x + 0.5, y + 0.5), background));
  });
  return img;
}

Image render_naive(const GaussianSet& set, const Camera& cam, const Vec3& background) {
  const auto splats = project_all(set, cam);
  Image img(cam.width, cam.height, background);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x)
      img.set(x, y, shade_pixel(splats, IotaRange{splats.size()}, Vec2(x + 0.5, y + 0.5), background));
  return img;
}

// --- metrics --------------------------------------------------------------

namespace {

void check_same_size(const Image& a, const Image& b, const char* what) {
  if (a.width != b.width || a.height != b.height) {
    throw Error(std::string(what) + ": image dimensions differ (" + std::to_string(a.width) + "x" +
                std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                std::to_string(b.height) + ")");
  }
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  check_same_size(a, b, "psnr");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = static_cast<double>(a.rgb[i]) - b.rgb[i];
    sum += d * d;
  }
  if (sum == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = sum / static_cast<double>(a.rgb.size());
  return 10.0 * std::log10(1.0 / mse);
}

double mean_abs_error(const Image& a, const Image& b) {
  check_same_size(a, b, "l1");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) sum += std::abs(static_cast<double>(a.rgb[i]) - b.rgb[i]);
  return a.rgb.empty() ? 0.0 : sum / static_cast<double>(a.rgb.size());
}

double ssim(const Image& a, const Image& b) {
  check_same_size(a, b, "ssim");
  constexpr int kWin = 11;
  constexpr int kHalf = kWin / 2;
  constexpr double kSigma = 1.5;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  double kernel[kWin];
  double ksum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kHalf;
    kernel[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    ksum += kernel[i];
  }
  for (double& k : kernel) k /= ksum;

  const int w = a.width, h = a.height;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  // Separable blur with zero padding.
  auto blur = [&](const std::vector<double>& src) {
    std::vector<double> tmp(n, 0.0), out(n, 0.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int k = -kHalf; k <= kHalf; ++k) {
          const int xx = x + k;
          if (xx >= 0 && xx < w) s += kernel[k + kHalf] * src[static_cast<std::size_t>(y) * w + xx];
        }
        tmp[static_cast<std::size_t>(y) * w + x] = s;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int k = -kHalf; k <= kHalf; ++k) {
          const int yy = y + k;
          if (yy >= 0 && yy < h) s += kernel[k + kHalf] * tmp[static_cast<std::size_t>(yy) * w + x];
        }
        out[static_cast<std::size_t>(y) * w + x] = s;
      }
    return out;
  };

  double total = 0.0;
  std::vector<double> pa(n), pb(n), paa(n), pbb(n), pab(n);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      pa[i] = a.rgb[i * 3 + c];
      pb[i] = b.rgb[i * 3 + c];
      paa[i] = pa[i] * pa[i];
      pbb[i] = pb[i] * pb[i];
      pab[i] = pa[i] * pb[i];
    }
    const auto mu_a = blur(pa), mu_b = blur(pb), s_aa = blur(paa), s_bb = blur(pbb), s_ab = blur(pab);
    for (std::size_t i = 0; i < n; ++i) {
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = s_aa[i] - ma * ma, vb = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
      total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
    }
  }
  return total / static_cast<double>(3 * n);
}

// --- PNG ------------------------------------------------------------------

namespace {

void png_append(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

struct PngReader {
  const std::vector<std::uint8_t>* bytes;
  std::size_t pos = 0;
};

void png_consume(png_structp png, png_bytep data, png_size_t len) {
  auto* r = static_cast<PngReader*>(png_get_io_ptr(png));
  if (r->pos + len > r->bytes->size()) png_error(png, "truncated PNG stream");
  std::memcpy(data, r->bytes->data() + r->pos, len);
  r->pos += len;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("encode_png: libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("encode_png: libpng error");
  }
  png_set_write_fn(png, &out, png_append, nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_sRGB(png, info, PNG_sRGB_INTENT_PERCEPTUAL);
  png_write_info(png, info);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(image.width) * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int i = 0; i < image.width * 3; ++i) {
      const double v = std::clamp(static_cast<double>(image.rgb[static_cast<std::size_t>(y) * image.width * 3 + i]), 0.0, 1.0);
      row[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const Image& image, const std::filesystem::path& path) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_png: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw Error("decode_png: not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("decode_png: libpng init failed");
  png_infop info = png_create_info_struct(png);
  PngReader reader{&bytes, 0};
  Image img;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("decode_png: libpng error");
  }
  png_set_read_fn(png, &reader, png_consume);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  img = Image(w, h);
  std::vector<std::uint8_t> row(png_get_rowbytes(png, info));
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int i = 0; i < w * 3; ++i)
      img.rgb[static_cast<std::size_t>(y) * w * 3 + i] = static_cast<float>(row[static_cast<std::size_t>(i)] / 255.0);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

Image read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_png: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

}  // namespace skelsplat
