// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/gaussian_scene.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

namespace skelsplat {

GaussianSet::GaussianSet(int sh_degree) : sh_degree_(sh_degree) {
  if (sh_degree < 0 || sh_degree > 3) throw Error("SH degree must be in [0, 3]");
}

void GaussianSet::push_back(const Gaussian3D& g) {
  const std::size_t n = static_cast<std::size_t>(coeffs_per_channel()) * 3;
  if (g.sh.size() != n) throw Error("push_back: SH coefficient count does not match degree");
  positions.push_back(g.position);
  rotations.push_back(g.rotation);
  log_scales.push_back(g.log_scale);
  opacity_logits.push_back(g.opacity_logit);
  sh.insert(sh.end(), g.sh.begin(), g.sh.end());
}

Gaussian3D GaussianSet::at(std::size_t i) const {
  Gaussian3D g;
  g.position = positions.at(i);
  g.rotation = rotations.at(i);
  g.log_scale = log_scales.at(i);
  g.opacity_logit = opacity_logits.at(i);
  const auto s = sh_of(i);
  g.sh.assign(s.begin(), s.end());
  return g;
}

std::span<const double> GaussianSet::sh_of(std::size_t i) const {
  const std::size_t n = static_cast<std::size_t>(coeffs_per_channel()) * 3;
  return {sh.data() + i * n, n};
}

std::span<double> GaussianSet::sh_of(std::size_t i) {
  const std::size_t n = static_cast<std::size_t>(coeffs_per_channel()) * 3;
  return {sh.data() + i * n, n};
}

void GaussianSet::check_consistent() const {
  const std::size_t n = positions.size();
  if (rotations.size() != n || log_scales.size() != n || opacity_logits.size() != n ||
      sh.size() != n * static_cast<std::size_t>(coeffs_per_channel()) * 3) {
    throw Error("GaussianSet arrays are not length-consistent");
  }
}

Mat3 covariance(const UnitQuaternion& q, const Vec3& log_scale) {
  const Mat3 r = quat_to_matrix(q.normalized());
  const Mat3 m = r * log_scale.array().exp().matrix().asDiagonal();
  return m * m.transpose();
}

namespace {

constexpr double kC0 = 0.28209479177387814;
constexpr double kC1 = 0.4886025119029199;
constexpr std::array<double, 5> kC2 = {1.0925484305920792, -1.0925484305920792,
                                       0.31539156525252005, -1.0925484305920792,
                                       0.5462742152960396};
constexpr std::array<double, 7> kC3 = {-0.5900435899266435, 2.890611442640554,
                                       -0.4570457994644658, 0.3731763325901154,
                                       -0.4570457994644658, 1.445305721320277,
                                       -0.5900435899266435};

}  // namespace

Vec3 eval_sh(std::span<const double> coeffs, int degree, const Vec3& dir) {
  if (degree < 0 || degree > 3 || coeffs.size() != static_cast<std::size_t>(sh_coeff_count(degree)) * 3) {
    throw Error("eval_sh: coefficient count does not match SH degree " + std::to_string(degree));
  }
  auto c = [&](int k) { return Vec3(coeffs[k * 3], coeffs[k * 3 + 1], coeffs[k * 3 + 2]); };
  Vec3 out = kC0 * c(0);
  if (degree > 0) {
    const double x = dir.x(), y = dir.y(), z = dir.z();
    out += -kC1 * y * c(1) + kC1 * z * c(2) - kC1 * x * c(3);
    if (degree > 1) {
      const double xx = x * x, yy = y * y, zz = z * z, xy = x * y, yz = y * z, xz = x * z;
      out += kC2[0] * xy * c(4) + kC2[1] * yz * c(5) + kC2[2] * (2 * zz - xx - yy) * c(6) +
             kC2[3] * xz * c(7) + kC2[4] * (xx - yy) * c(8);
      if (degree > 2) {
        out += kC3[0] * y * (3 * xx - yy) * c(9) + kC3[1] * xy * z * c(10) +
               kC3[2] * y * (4 * zz - xx - yy) * c(11) +
               kC3[3] * z * (2 * zz - 3 * xx - 3 * yy) * c(12) +
               kC3[4] * x * (4 * zz - xx - yy) * c(13) + kC3[5] * z * (xx - yy) * c(14) +
               kC3[6] * x * (xx - 3 * yy) * c(15);
      }
    }
  }
  out.array() += 0.5;
  return out.cwiseMax(0.0);
}

// --- PLY ------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "PLY I/O assumes a little-endian host");

std::vector<std::string> property_names(int degree) {
  std::vector<std::string> names = {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"};
  const int rest = (sh_coeff_count(degree) - 1) * 3;
  for (int i = 0; i < rest; ++i) names.push_back("f_rest_" + std::to_string(i));
  names.push_back("opacity");
  for (int i = 0; i < 3; ++i) names.push_back("scale_" + std::to_string(i));
  for (int i = 0; i < 4; ++i) names.push_back("rot_" + std::to_string(i));
  return names;
}

struct PlyProperty {
  std::size_t offset = 0;
  bool is_double = false;
};

}  // namespace

void save_ply(const GaussianSet& set, const std::filesystem::path& path) {
  set.check_consistent();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("save_ply: cannot open " + path.string());
  const int degree = set.sh_degree();
  const auto names = property_names(degree);
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << set.size() << "\n";
  for (const auto& n : names) out << "property float " << n << "\n";
  out << "end_header\n";

  const int coeffs = set.coeffs_per_channel();
  std::vector<float> row(names.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::size_t k = 0;
    for (int a = 0; a < 3; ++a) row[k++] = static_cast<float>(set.positions[i][a]);
    for (int a = 0; a < 3; ++a) row[k++] = 0.0f;
    const auto sh = set.sh_of(i);
    for (int c = 0; c < 3; ++c) row[k++] = static_cast<float>(sh[c]);
    // f_rest is channel-major.
    for (int c = 0; c < 3; ++c)
      for (int j = 1; j < coeffs; ++j) row[k++] = static_cast<float>(sh[j * 3 + c]);
    row[k++] = static_cast<float>(set.opacity_logits[i]);
    for (int a = 0; a < 3; ++a) row[k++] = static_cast<float>(set.log_scales[i][a]);
    const auto& q = set.rotations[i];
    row[k++] = static_cast<float>(q.w);
    row[k++] = static_cast<float>(q.x);
    row[k++] = static_cast<float>(q.y);
    row[k++] = static_cast<float>(q.z);
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw Error("save_ply: write failed for " + path.string());
}

GaussianSet load_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_ply: cannot open " + path.string());

  std::string line;
  std::getline(in, line);
  if (line != "ply") throw Error("load_ply: not a PLY file");
  std::size_t count = 0;
  bool in_vertex = false, seen_vertex = false, binary_le = false;
  std::map<std::string, PlyProperty> props;
  std::size_t stride = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = fmt == "binary_little_endian";
    } else if (tok == "element") {
      std::string name;
      ls >> name;
      in_vertex = name == "vertex";
      if (in_vertex) {
        if (!(ls >> count)) throw Error("load_ply: malformed vertex element count");
        seen_vertex = true;
      } else if (seen_vertex) {
        // Trailing elements after the vertex block are ignored.
        in_vertex = false;
      }
    } else if (tok == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      if (type == "list") throw Error("load_ply: list properties are not supported in vertex element");
      PlyProperty p;
      p.offset = stride;
      if (type == "float" || type == "float32") {
        stride += 4;
      } else if (type == "double" || type == "float64") {
        p.is_double = true;
        stride += 8;
      } else {
        throw Error("load_ply: unsupported property type '" + type + "' for " + name);
      }
      props[name] = p;
    }
  }
  if (line != "end_header") throw Error("load_ply: header is not terminated");
  if (!binary_le) throw Error("load_ply: only binary_little_endian PLY is supported");
  if (!seen_vertex) throw Error("load_ply: no vertex element");

  std::size_t rest = 0;
  while (props.count("f_rest_" + std::to_string(rest))) ++rest;
  int degree = -1;
  for (int d = 0; d <= 3; ++d)
    if (static_cast<std::size_t>((sh_coeff_count(d) - 1) * 3) == rest) degree = d;
  if (degree < 0) throw Error("load_ply: f_rest count " + std::to_string(rest) + " matches no SH degree");

  for (const auto& name : property_names(degree)) {
    if (name[0] == 'n' && name.size() == 2) continue;  // normals are optional
    if (!props.count(name)) throw Error("missing property: " + name);
  }

  GaussianSet set(degree);
  std::vector<char> buffer(stride * count);
  in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
  if (static_cast<std::size_t>(in.gcount()) != buffer.size()) {
    throw Error("load_ply: vertex data truncated (expected " + std::to_string(count) +
                " elements of " + std::to_string(stride) + " bytes)");
  }
  auto read = [&](std::size_t i, const std::string& name) -> double {
    const PlyProperty& p = props.at(name);
    const char* src = buffer.data() + i * stride + p.offset;
    if (p.is_double) {
      double v;
      std::memcpy(&v, src, 8);
      return v;
    }
    float v;
    std::memcpy(&v, src, 4);
    return v;
  };
  const int coeffs = sh_coeff_count(degree);
  for (std::size_t i = 0; i < count; ++i) {
    Gaussian3D g;
    g.position = {read(i, "x"), read(i, "y"), read(i, "z")};
    g.rotation = {read(i, "rot_0"), read(i, "rot_1"), read(i, "rot_2"), read(i, "rot_3")};
    g.log_scale = {read(i, "scale_0"), read(i, "scale_1"), read(i, "scale_2")};
    g.opacity_logit = read(i, "opacity");
    g.sh.assign(static_cast<std::size_t>(coeffs) * 3, 0.0);
    for (int c = 0; c < 3; ++c) g.sh[c] = read(i, "f_dc_" + std::to_string(c));
    for (int c = 0; c < 3; ++c)
      for (int j = 1; j < coeffs; ++j)
        g.sh[j * 3 + c] = read(i, "f_rest_" + std::to_string(c * (coeffs - 1) + (j - 1)));
    set.push_back(g);
  }
  return set;
}

}  // namespace skelsplat
