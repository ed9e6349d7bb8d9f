// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/synthetic.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace skelsplat {

namespace {

using json = nlohmann::json;

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kShC0 = 0.28209479177387814;

const std::array<Vec3, 12> kPalette = {
    Vec3(0.85, 0.33, 0.25), Vec3(0.25, 0.55, 0.85), Vec3(0.30, 0.75, 0.35), Vec3(0.90, 0.75, 0.20),
    Vec3(0.60, 0.35, 0.80), Vec3(0.20, 0.80, 0.80), Vec3(0.95, 0.55, 0.70), Vec3(0.55, 0.45, 0.25),
    Vec3(0.45, 0.45, 0.45), Vec3(0.75, 0.90, 0.40), Vec3(0.15, 0.30, 0.55), Vec3(0.90, 0.45, 0.10),
};

bool finite(const Vec3& v) { return v.allFinite(); }

Mat3 axis_rotation(const Vec3& axis, double angle) {
  return quat_to_matrix(UnitQuaternion::from_axis_angle(axis, angle));
}

// Unit vector orthogonal to `d`.
Vec3 any_perpendicular(const Vec3& d) {
  const Vec3 trial = std::abs(d.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return d.cross(trial).normalized();
}

double segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1) {
  // Dense sampling is plenty for rejection tests at this scale.
  double best = std::numeric_limits<double>::infinity();
  constexpr int kSteps = 24;
  for (int a = 0; a <= kSteps; ++a) {
    const Vec3 p = p0 + (p1 - p0) * (static_cast<double>(a) / kSteps);
    for (int b = 0; b <= kSteps; ++b) {
      const Vec3 q = q0 + (q1 - q0) * (static_cast<double>(b) / kSteps);
      best = std::min(best, (p - q).norm());
    }
  }
  return best;
}

LinkSpec make_link(int parent, const Vec3& pivot, const Vec3& dir, double length, const Vec3& axis, int gaussians,
                   int color) {
  LinkSpec l;
  l.parent = parent;
  l.pivot = pivot;
  l.start = pivot + 0.03 * dir;
  l.end = pivot + length * dir;
  l.axis = axis.normalized();
  l.gaussians = gaussians;
  l.color = kPalette[static_cast<std::size_t>(color) % kPalette.size()];
  return l;
}

AngleCurve sine(double amplitude, double frequency, double phase) {
  AngleCurve c;
  c.amplitude = amplitude;
  c.frequency = frequency;
  c.phase = phase;
  return c;
}

ArticulatedSpec hinge_spec(bool moving) {
  ArticulatedSpec s;
  s.name = moving ? "hinge2" : "static";
  LinkSpec root;
  root.start = Vec3(-0.5, 0.0, 0.0);
  root.end = Vec3(-0.02, 0.0, 0.0);
  root.pivot = root.start;
  root.gaussians = 64;
  root.color = kPalette[0];
  s.links.push_back(root);
  LinkSpec arm = make_link(0, Vec3::Zero(), Vec3(1.0, 0.25, 0.0).normalized(), 0.5, Vec3::UnitZ(), 64, 1);
  if (moving) arm.angle = sine(0.8, 1.0, 0.3);
  s.links.push_back(arm);
  if (moving) {
    s.root.axis = Vec3::UnitY();
    s.root.pivot = Vec3(-0.25, 0.0, 0.0);
    s.root.angle = 0.2;
    s.root.translation = Vec3(0.0, 0.1, 0.0);
    s.root.frequency = 0.5;
  }
  s.timestamps = 16;
  return s;
}

ArticulatedSpec chain_spec() {
  ArticulatedSpec s;
  s.name = "chain3";
  LinkSpec root;
  root.start = Vec3(-0.6, 0.0, 0.0);
  root.end = Vec3(-0.22, 0.0, 0.0);
  root.pivot = root.start;
  root.gaussians = 48;
  root.color = kPalette[0];
  s.links.push_back(root);
  Vec3 pivot(-0.2, 0.0, 0.0);
  const std::array<Vec3, 3> dirs = {Vec3(1.0, 0.5, 0.0), Vec3(1.0, -0.6, 0.0), Vec3(1.0, 0.55, 0.0)};
  const std::array<double, 3> freq = {1.0, 1.5, 0.75};
  const std::array<double, 3> phase = {0.0, 1.2, 2.5};
  for (int k = 0; k < 3; ++k) {
    LinkSpec l = make_link(k, pivot, dirs[k].normalized(), 0.36, Vec3::UnitZ(), 48, k + 1);
    l.angle = sine(0.6, freq[k], phase[k]);
    pivot = pivot + 0.38 * dirs[k].normalized();
    s.links.push_back(l);
  }
  s.root.axis = Vec3::UnitY();
  s.root.angle = 0.15;
  s.root.translation = Vec3(0.0, 0.0, 0.1);
  s.root.frequency = 0.5;
  s.timestamps = 20;
  return s;
}

ArticulatedSpec humanoid_spec() {
  ArticulatedSpec s;
  s.name = "humanoid8";
  LinkSpec torso;
  torso.start = Vec3(0.0, 0.0, 0.0);
  torso.end = Vec3(0.0, 0.5, 0.0);
  torso.pivot = torso.start;
  torso.gaussians = 64;
  torso.color = kPalette[0];
  s.links.push_back(torso);
  auto add = [&](int parent, const Vec3& pivot, const Vec3& dir, double len, const Vec3& axis, AngleCurve c) {
    LinkSpec l = make_link(parent, pivot, dir.normalized(), len, axis, 40, static_cast<int>(s.links.size()));
    l.angle = c;
    s.links.push_back(l);
    return static_cast<int>(s.links.size()) - 1;
  };
  add(0, Vec3(0.0, 0.53, 0.0), Vec3::UnitY(), 0.22, Vec3::UnitX(), sine(0.5, 1.0, 0.4));
  const int ual = add(0, Vec3(-0.04, 0.44, 0.0), Vec3(-1.0, -0.3, 0.0), 0.3, Vec3::UnitZ(), sine(0.7, 1.0, 0.0));
  const int uar = add(0, Vec3(0.04, 0.44, 0.0), Vec3(1.0, -0.3, 0.0), 0.3, Vec3::UnitZ(), sine(0.7, 1.25, 1.0));
  add(ual, s.links[ual].end + Vec3(-0.02, 0.0, 0.0), Vec3(-1.0, 0.4, 0.0), 0.28, Vec3::UnitZ(), sine(0.6, 1.5, 0.5));
  add(uar, s.links[uar].end + Vec3(0.02, 0.0, 0.0), Vec3(1.0, 0.4, 0.0), 0.28, Vec3::UnitZ(), sine(0.6, 0.75, 2.0));
  add(0, Vec3(-0.05, -0.02, 0.0), Vec3(-0.25, -1.0, 0.0), 0.45, Vec3::UnitZ(), sine(0.5, 1.0, 2.8));
  add(0, Vec3(0.05, -0.02, 0.0), Vec3(0.25, -1.0, 0.0), 0.45, Vec3::UnitZ(), sine(0.5, 1.25, 4.0));
  s.root.axis = Vec3::UnitY();
  s.root.pivot = Vec3(0.0, 0.25, 0.0);
  s.root.angle = 0.3;
  s.root.translation = Vec3(0.1, 0.0, 0.0);
  s.root.frequency = 0.5;
  s.timestamps = 24;
  return s;
}

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    Vec3 v(normal(rng), normal(rng), normal(rng));
    if (v.norm() > 1e-6) return v.normalized();
  }
}

}  // namespace

double AngleCurve::at(double t) const {
  if (kind == Kind::Linear) return from + (to - from) * t;
  return amplitude * std::sin(kTwoPi * frequency * t + phase);
}

RigidTransform RootMotion::at(double t) const {
  const double s = std::sin(kTwoPi * frequency * t);
  RigidTransform out;
  out.rotation = angle == 0.0 ? Mat3::Identity() : axis_rotation(axis, angle * s);
  out.translation = pivot - out.rotation * pivot + translation * s;
  return out;
}

void ArticulatedSpec::validate() const {
  if (links.empty()) throw Error("spec: no links");
  if (timestamps < 2) throw Error("spec: timestamps must be at least 2");
  if (links[0].parent != -1) throw Error("spec: links[0] must be the root (parent -1)");
  for (std::size_t i = 0; i < links.size(); ++i) {
    const LinkSpec& l = links[i];
    const std::string at = "spec: links[" + std::to_string(i) + "]";
    if (i > 0 && (l.parent < 0 || l.parent >= static_cast<int>(i)))
      throw Error(at + ".parent must name an earlier link");
    if (!finite(l.start) || !finite(l.end) || !finite(l.pivot) || !finite(l.axis) || !finite(l.color))
      throw Error(at + " has a non-finite vector");
    if (l.length() <= 1e-9) throw Error(at + " has zero length");
    if (i > 0 && l.axis.norm() <= 1e-9) throw Error(at + ".axis is zero");
    if (l.gaussians < 1) throw Error(at + ".gaussians must be positive");
    if (!(l.radius >= 0.0) || !std::isfinite(l.radius)) throw Error(at + ".radius must be non-negative");
    const AngleCurve& c = l.angle;
    if (!std::isfinite(c.amplitude) || !std::isfinite(c.frequency) || !std::isfinite(c.phase) ||
        !std::isfinite(c.from) || !std::isfinite(c.to))
      throw Error(at + ".angle is not finite");
  }
  if (!finite(root.axis) || !finite(root.pivot) || !finite(root.translation) || !std::isfinite(root.angle) ||
      !std::isfinite(root.frequency))
    throw Error("spec: root motion is not finite");
  if (root.angle != 0.0 && root.axis.norm() <= 1e-9) throw Error("spec: root.axis is zero");
}

std::vector<double> ArticulatedSpec::training_times() const {
  std::vector<double> t(static_cast<std::size_t>(std::max(timestamps, 0)));
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = static_cast<double>(k) / static_cast<double>(timestamps - 1);
  return t;
}

std::vector<double> ArticulatedSpec::held_out_times() const {
  const auto t = training_times();
  std::vector<double> out;
  for (std::size_t k = 0; k + 1 < t.size(); ++k) out.push_back(0.5 * (t[k] + t[k + 1]));
  return out;
}

std::vector<Mat3> ArticulatedSpec::link_rotations(double t) const {
  std::vector<Mat3> out(links.size(), Mat3::Identity());
  for (std::size_t k = 1; k < links.size(); ++k) {
    const double a = links[k].angle.at(t);
    if (a != 0.0) out[k] = axis_rotation(links[k].axis, a);
  }
  return out;
}

std::vector<std::string> preset_names() {
  return {"static", "hinge2", "chain3", "humanoid8", "tree4", "tree6", "tree8"};
}

ArticulatedSpec random_tree(int parts, std::uint64_t seed) {
  if (parts < 2 || parts > 12) throw Error("random_tree: parts must be in [2, 12]");
  std::mt19937_64 rng(seed ^ 0x5eed7ee5ull);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr double kClearance = 0.2;
  constexpr double kMinBend = 40.0 * std::numbers::pi / 180.0;
  constexpr double kMaxBend = 140.0 * std::numbers::pi / 180.0;

  for (int attempt = 0;; ++attempt) {
    if (attempt > 200) throw Error("random_tree: could not place links");
    ArticulatedSpec s;
    s.name = "tree" + std::to_string(parts);
    s.seed = seed;
    const Vec3 d0 = random_unit(rng);
    const double l0 = 0.4 + 0.1 * unit(rng);
    LinkSpec root;
    root.start = -0.5 * l0 * d0;
    root.end = 0.5 * l0 * d0;
    root.pivot = root.start;
    root.gaussians = 40;
    root.color = kPalette[0];
    s.links.push_back(root);
    std::vector<int> children(static_cast<std::size_t>(parts), 0);

    bool ok = true;
    for (int i = 1; i < parts && ok; ++i) {
      bool placed = false;
      for (int tries = 0; tries < 400 && !placed; ++tries) {
        const int parent = static_cast<int>(unit(rng) * i);
        if (children[parent] >= 3) continue;
        const LinkSpec& p = s.links[parent];
        const Vec3 pdir = (p.end - p.start).normalized();
        // Attach at the far end, or somewhere on the outer 60 %.
        const bool at_end = unit(rng) < 0.6;
        const double u = at_end ? 1.0 : 0.4 + 0.6 * unit(rng);
        const Vec3 pivot = p.start + u * (p.end - p.start) + (at_end ? Vec3(0.02 * pdir) : Vec3::Zero());
        const Vec3 dir = random_unit(rng);
        const double bend = std::acos(std::clamp(dir.dot(pdir), -1.0, 1.0));
        if (bend < kMinBend || bend > kMaxBend) continue;
        const double len = 0.35 + 0.15 * unit(rng);
        LinkSpec c = make_link(parent, pivot, dir, len, pdir.cross(dir), 40, i);
        bool clear = true;
        for (int k = 0; k < i && clear; ++k) {
          const LinkSpec& o = s.links[k];
          if (k == parent) continue;
          if (segment_distance(c.start, c.end, o.start, o.end) < kClearance) clear = false;
          if (o.parent >= 0 && (o.pivot - c.pivot).norm() < kClearance) clear = false;
        }
        // Stay clear of the parent except near the pivot.
        if (clear && segment_distance(c.start + 0.25 * (c.end - c.start), c.end, p.start, p.end) < kClearance * 0.75)
          clear = false;
        if (!clear) continue;
        c.angle = sine(0.5 + 0.3 * unit(rng), 0.75 + 0.75 * unit(rng), kTwoPi * unit(rng));
        s.links.push_back(c);
        ++children[parent];
        placed = true;
      }
      if (!placed) ok = false;
    }
    if (!ok) continue;
    s.root.axis = random_unit(rng);
    s.root.pivot = Vec3::Zero();
    s.root.angle = 0.3;
    s.root.translation = 0.2 * random_unit(rng);
    s.root.frequency = 0.5;
    s.timestamps = 16;
    return s;
  }
}

ArticulatedSpec preset(std::string_view name, std::uint64_t seed) {
  ArticulatedSpec s;
  if (name == "static") {
    s = hinge_spec(false);
  } else if (name == "hinge2") {
    s = hinge_spec(true);
  } else if (name == "chain3") {
    s = chain_spec();
  } else if (name == "humanoid8") {
    s = humanoid_spec();
  } else if (name.starts_with("tree")) {
    int parts = 0;
    const std::string digits(name.substr(4));
    try {
      std::size_t used = 0;
      parts = std::stoi(digits, &used);
      if (used != digits.size()) parts = 0;
    } catch (const std::exception&) {
      parts = 0;
    }
    if (parts < 2 || parts > 12) throw Error("unknown preset '" + std::string(name) + "'");
    return random_tree(parts, seed);
  } else {
    throw Error("unknown preset '" + std::string(name) + "'");
  }
  s.seed = seed;
  return s;
}

// --- generation ----------------------------------------------------------------

MotionSample GroundTruth::links_at(double t) const {
  return forward_kinematics(skeleton, spec.root.at(t), spec.link_rotations(t));
}

KinematicPose GroundTruth::pose_at(double t) const {
  KinematicPose pose = KinematicPose::identity(num_links());
  pose.root = spec.root.at(t);
  const auto rot = spec.link_rotations(t);
  for (std::size_t k = 1; k < rot.size(); ++k) pose.joints[k] = matrix_to_quat(rot[k]);
  return pose;
}

GaussianSet GroundTruth::deformed_at(double t) const {
  const MotionSample links = links_at(t);
  std::vector<UnitQuaternion> q(links.size());
  for (std::size_t k = 0; k < links.size(); ++k) q[k] = matrix_to_quat(links.transforms[k].rotation);
  GaussianSet out = gaussians;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto k = static_cast<std::size_t>(link_of[i]);
    out.positions[i] = links.transforms[k].apply(gaussians.positions[i]);
    out.rotations[i] = quat_mul(q[k], gaussians.rotations[i]);
  }
  return out;
}

std::pair<Vec3, Vec3> GroundTruth::bounds() const {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& frame : trajectories)
    for (const Vec3& p : frame) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
  for (const Vec3& p : gaussians.positions) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return {lo, hi};
}

double GroundTruth::bbox_diagonal() const {
  const auto [lo, hi] = bounds();
  return (hi - lo).norm();
}

void GroundTruth::self_check(double tolerance) const {
  const std::size_t n = gaussians.size();
  if (link_of.size() != n) throw Error("ground truth: link ids do not cover the Gaussians");
  if (link_motion.size() != times.size() || trajectories.size() != times.size())
    throw Error("ground truth: motion does not cover the timestamps");
  skeleton.validate();
  for (std::size_t f = 0; f < times.size(); ++f) {
    const double t = times[f];
    // Independent chain of 4x4 matrices, rotations from Eigen's axis-angle.
    std::vector<Mat4> world(num_links());
    const RigidTransform root = spec.root.at(t);
    for (std::size_t k = 0; k < num_links(); ++k) {
      const LinkSpec& l = spec.links[k];
      if (l.parent < 0) {
        world[k] = root.homogeneous();
        continue;
      }
      Mat4 local = Mat4::Identity();
      const double a = l.angle.at(t);
      const Mat3 r = Eigen::AngleAxisd(a, l.axis.normalized()).toRotationMatrix();
      local.topLeftCorner<3, 3>() = r;
      local.topRightCorner<3, 1>() = l.pivot - r * l.pivot;
      world[k] = world[static_cast<std::size_t>(l.parent)] * local;
    }
    const MotionSample& motion = link_motion[f];
    if (motion.size() != num_links()) throw Error("ground truth: link motion has the wrong size");
    for (std::size_t k = 0; k < num_links(); ++k) {
      const double err = (motion.transforms[k].homogeneous() - world[k]).cwiseAbs().maxCoeff();
      if (!(err <= tolerance))
        throw Error("ground truth: link " + std::to_string(k) + " disagrees with FK at t=" + std::to_string(t));
    }
    if (trajectories[f].size() != n) throw Error("ground truth: trajectory frame has the wrong size");
    for (std::size_t i = 0; i < n; ++i) {
      const RigidTransform& tr = motion.transforms[static_cast<std::size_t>(link_of[i])];
      const Vec3 expected = tr.apply(gaussians.positions[i]);
      if (!((trajectories[f][i] - expected).lpNorm<Eigen::Infinity>() <= tolerance * (1.0 + expected.norm())))
        throw Error("ground truth: trajectory of Gaussian " + std::to_string(i) + " is not rigid");
    }
  }
}

GroundTruth generate(const ArticulatedSpec& spec) {
  spec.validate();
  GroundTruth gt;
  gt.spec = spec;
  gt.gaussians = GaussianSet(0);

  const std::size_t links = spec.links.size();
  gt.skeleton.parent.resize(links);
  gt.skeleton.joints.resize(links);
  gt.skeleton.root = 0;
  for (std::size_t k = 0; k < links; ++k) {
    const LinkSpec& l = spec.links[k];
    gt.skeleton.parent[k] = l.parent < 0 ? static_cast<int>(k) : l.parent;
    gt.skeleton.joints[k] = l.parent < 0 ? l.start : l.pivot;
  }
  gt.skeleton.validate();

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t k = 0; k < links; ++k) {
    const LinkSpec& l = spec.links[k];
    const Vec3 dir = (l.end - l.start).normalized();
    Vec3 side = l.parent < 0 ? any_perpendicular(dir) : l.axis.normalized().cross(dir);
    if (side.norm() < 1e-9) side = any_perpendicular(dir);
    side.normalize();
    const Vec3 normal = dir.cross(side);
    Mat3 frame;
    frame << dir, side, normal;
    const UnitQuaternion q = matrix_to_quat(frame);
    const double spacing = l.length() / l.gaussians;
    const Vec3 log_scale(std::log(0.7 * spacing + 1e-4), std::log(0.5 * l.radius + 4e-3),
                         std::log(0.5 * l.radius + 4e-3));
    for (int g = 0; g < l.gaussians; ++g) {
      const double u = (g + unit(rng)) / l.gaussians;
      const double phi = kTwoPi * unit(rng);
      const double r = l.radius * std::sqrt(unit(rng));
      Gaussian3D gs;
      gs.position = l.start + u * (l.end - l.start) + r * (std::cos(phi) * side + std::sin(phi) * normal);
      gs.rotation = q;
      gs.log_scale = log_scale;
      gs.opacity_logit = logit(0.9);
      gs.sh = {(l.color.x() - 0.5) / kShC0, (l.color.y() - 0.5) / kShC0, (l.color.z() - 0.5) / kShC0};
      gt.gaussians.push_back(gs);
      gt.link_of.push_back(static_cast<int>(k));
    }
  }

  gt.times = spec.training_times();
  for (double t : gt.times) {
    MotionSample m = gt.links_at(t);
    std::vector<Vec3> frame(gt.gaussians.size());
    for (std::size_t i = 0; i < frame.size(); ++i)
      frame[i] = m.transforms[static_cast<std::size_t>(gt.link_of[i])].apply(gt.gaussians.positions[i]);
    gt.link_motion.push_back(std::move(m));
    gt.trajectories.push_back(std::move(frame));
  }
  gt.self_check();
  return gt;
}

LookAt default_view(const GroundTruth& truth, int width, int height) {
  const auto [lo, hi] = truth.bounds();
  const Vec3 center = 0.5 * (lo + hi);
  const double radius = std::max(0.5 * (hi - lo).norm(), 1e-3);
  constexpr double kFov = 40.0;
  const double dist = 1.1 * radius / std::sin(0.5 * kFov * std::numbers::pi / 180.0);
  const Vec3 dir = Vec3(0.35, 0.3, 1.0).normalized();
  return {center + dist * dir, center, Vec3::UnitY(), kFov, width, height};
}

Camera default_camera(const GroundTruth& truth, int width, int height) {
  return default_view(truth, width, height).camera();
}

Image render_truth(const GroundTruth& truth, double t, const Camera& camera, const Vec3& background) {
  return render(truth.deformed_at(t), camera, background);
}

// --- evaluation ----------------------------------------------------------------

std::vector<int> label_superpoints(const SkinningWeights& weights, std::span<const Vec3> superpoints,
                                   const GroundTruth& truth) {
  const std::size_t m = superpoints.size();
  const std::size_t n = truth.gaussians.size();
  const std::size_t links = truth.num_links();
  weights.validate(n, m);
  std::vector<std::vector<double>> votes(m, std::vector<double>(links, 0.0));
  std::vector<std::vector<double>> soft(m, std::vector<double>(links, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const auto link = static_cast<std::size_t>(truth.link_of[i]);
    votes[static_cast<std::size_t>(weights.dominant(i))][link] += 1.0;
    const auto w = weights.weights_of(i);
    const auto nb = weights.neighbors_of(i);
    for (int k = 0; k < weights.k; ++k) soft[static_cast<std::size_t>(nb[k])][link] += w[k];
  }
  auto argmax = [](const std::vector<double>& v) {
    int best = -1;
    double top = 0.0;
    for (std::size_t l = 0; l < v.size(); ++l)
      if (v[l] > top) {
        top = v[l];
        best = static_cast<int>(l);
      }
    return best;
  };
  std::vector<int> labels(m, -1);
  for (std::size_t j = 0; j < m; ++j) {
    labels[j] = argmax(votes[j]);
    if (labels[j] < 0) labels[j] = argmax(soft[j]);
    if (labels[j] < 0) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) {
        const double d = (truth.gaussians.positions[i] - superpoints[j]).squaredNorm();
        if (d < best) {
          best = d;
          labels[j] = truth.link_of[i];
        }
      }
    }
  }
  return labels;
}

SkeletonReport eval_skeleton(const SkeletonTree& predicted, const SkinningWeights& weights,
                             std::span<const Vec3> superpoints, const GroundTruth& truth) {
  if (predicted.size() == 0 || superpoints.empty()) throw Error("eval_skeleton: empty prediction");
  if (predicted.size() != superpoints.size())
    throw Error("eval_skeleton: skeleton and superpoints differ in size");
  predicted.validate();

  SkeletonReport report;
  report.labels = label_superpoints(weights, superpoints, truth);

  using Key = std::pair<int, int>;
  auto key = [](int a, int b) { return Key{std::min(a, b), std::max(a, b)}; };
  std::set<Key> truth_edges;
  for (std::size_t k = 0; k < truth.num_links(); ++k)
    if (truth.spec.links[k].parent >= 0) truth_edges.insert(key(static_cast<int>(k), truth.spec.links[k].parent));

  std::set<Key> pred_edges;
  double sq = 0.0;
  for (const Edge& e : predicted.edges()) {
    const int la = report.labels[static_cast<std::size_t>(e.a)];
    const int lb = report.labels[static_cast<std::size_t>(e.b)];
    if (la == lb) continue;
    const Key k = key(la, lb);
    pred_edges.insert(k);
    if (!truth_edges.contains(k)) continue;
    // The child link of the true edge owns the pivot.
    const int child = truth.spec.links[static_cast<std::size_t>(k.first)].parent == k.second ? k.first : k.second;
    const Vec3 pivot = truth.spec.links[static_cast<std::size_t>(child)].pivot;
    sq += (predicted.joints[static_cast<std::size_t>(e.a)] - pivot).squaredNorm();
    ++report.matched_edges;
  }
  report.predicted_edges = static_cast<int>(pred_edges.size());
  report.truth_edges = static_cast<int>(truth_edges.size());
  report.topology_match = pred_edges == truth_edges;
  report.joint_rmse = report.matched_edges > 0 ? std::sqrt(sq / report.matched_edges)
                                               : std::numeric_limits<double>::quiet_NaN();

  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.gaussians.size(); ++i)
    if (report.labels[static_cast<std::size_t>(weights.dominant(i))] == truth.link_of[i]) ++hits;
  report.part_iou = truth.gaussians.empty() ? 0.0 : static_cast<double>(hits) / truth.gaussians.size();
  return report;
}

// --- JSON ----------------------------------------------------------------------

namespace {

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

struct Reader {
  const json& node;
  std::string path;

  const json& need(const std::string& key) const {
    if (!node.is_object()) throw Error("spec: " + path + " must be an object");
    auto it = node.find(key);
    if (it == node.end()) throw Error("spec: missing field " + child(key));
    return *it;
  }
  bool has(const std::string& key) const { return node.is_object() && node.contains(key); }
  std::string child(const std::string& key) const { return path.empty() ? key : path + "." + key; }

  double number(const std::string& key) const {
    const json& v = need(key);
    if (!v.is_number()) throw Error("spec: " + child(key) + " must be a number");
    return v.get<double>();
  }
  double number_or(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }
  int integer_or(const std::string& key, int fallback) const {
    if (!has(key)) return fallback;
    const json& v = node.at(key);
    if (!v.is_number_integer()) throw Error("spec: " + child(key) + " must be an integer");
    return v.get<int>();
  }
  Vec3 vec(const std::string& key) const {
    const json& v = need(key);
    if (!v.is_array() || v.size() != 3) throw Error("spec: " + child(key) + " must be an array of 3 numbers");
    Vec3 out;
    for (int c = 0; c < 3; ++c) {
      if (!v[static_cast<std::size_t>(c)].is_number())
        throw Error("spec: " + child(key) + "[" + std::to_string(c) + "] must be a number");
      out[c] = v[static_cast<std::size_t>(c)].get<double>();
    }
    return out;
  }
  Vec3 vec_or(const std::string& key, const Vec3& fallback) const { return has(key) ? vec(key) : fallback; }
};

json spec_json(const ArticulatedSpec& s) {
  json links = json::array();
  for (const LinkSpec& l : s.links) {
    json angle;
    if (l.angle.kind == AngleCurve::Kind::Linear) {
      angle = {{"kind", "linear"}, {"from", l.angle.from}, {"to", l.angle.to}};
    } else {
      angle = {{"kind", "sine"},
               {"amplitude", l.angle.amplitude},
               {"frequency", l.angle.frequency},
               {"phase", l.angle.phase}};
    }
    links.push_back({{"parent", l.parent},
                     {"start", vec_json(l.start)},
                     {"end", vec_json(l.end)},
                     {"pivot", vec_json(l.pivot)},
                     {"axis", vec_json(l.axis)},
                     {"gaussians", l.gaussians},
                     {"radius", l.radius},
                     {"color", vec_json(l.color)},
                     {"angle", angle}});
  }
  return {{"name", s.name},
          {"timestamps", s.timestamps},
          {"seed", s.seed},
          {"root",
           {{"axis", vec_json(s.root.axis)},
            {"pivot", vec_json(s.root.pivot)},
            {"angle", s.root.angle},
            {"translation", vec_json(s.root.translation)},
            {"frequency", s.root.frequency}}},
          {"links", links}};
}

ArticulatedSpec spec_from(const json& doc) {
  if (!doc.is_object()) throw Error("spec: document must be an object");
  const Reader top{doc, ""};
  std::uint64_t seed = 0;
  if (top.has("seed")) {
    const json& v = doc.at("seed");
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      throw Error("spec: seed must be a non-negative integer");
    seed = v.get<std::uint64_t>();
  }
  ArticulatedSpec s;
  if (top.has("preset")) {
    const json& p = doc.at("preset");
    if (!p.is_string()) throw Error("spec: preset must be a string");
    s = preset(p.get<std::string>(), seed);
    if (top.has("links")) throw Error("spec: preset and links are mutually exclusive");
  } else {
    const json& links = top.need("links");
    if (!links.is_array()) throw Error("spec: links must be an array");
    for (std::size_t i = 0; i < links.size(); ++i) {
      const Reader r{links[i], "links[" + std::to_string(i) + "]"};
      LinkSpec l;
      l.parent = r.integer_or("parent", -1);
      l.start = r.vec("start");
      l.end = r.vec("end");
      l.pivot = r.vec_or("pivot", l.start);
      l.axis = r.vec_or("axis", Vec3::UnitZ());
      l.gaussians = r.integer_or("gaussians", l.gaussians);
      l.radius = r.number_or("radius", l.radius);
      l.color = r.vec_or("color", kPalette[i % kPalette.size()]);
      if (r.has("angle")) {
        const Reader a{links[i].at("angle"), r.child("angle")};
        const std::string kind = a.has("kind") && a.need("kind").is_string() ? a.need("kind").get<std::string>() : "sine";
        if (kind == "linear") {
          l.angle.kind = AngleCurve::Kind::Linear;
          l.angle.from = a.number("from");
          l.angle.to = a.number("to");
        } else if (kind == "sine") {
          l.angle.amplitude = a.number("amplitude");
          l.angle.frequency = a.number_or("frequency", 1.0);
          l.angle.phase = a.number_or("phase", 0.0);
        } else {
          throw Error("spec: " + a.child("kind") + " must be \"sine\" or \"linear\"");
        }
      }
      s.links.push_back(l);
    }
    if (top.has("root")) {
      const Reader r{doc.at("root"), "root"};
      s.root.axis = r.vec_or("axis", s.root.axis);
      s.root.pivot = r.vec_or("pivot", s.root.pivot);
      s.root.angle = r.number_or("angle", 0.0);
      s.root.translation = r.vec_or("translation", Vec3::Zero());
      s.root.frequency = r.number_or("frequency", 1.0);
    }
    s.seed = seed;
    if (top.has("name")) {
      if (!doc.at("name").is_string()) throw Error("spec: name must be a string");
      s.name = doc.at("name").get<std::string>();
    }
  }
  s.timestamps = top.integer_or("timestamps", s.timestamps);
  s.validate();
  return s;
}

std::string line_context(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string spec_to_json(const ArticulatedSpec& spec) { return spec_json(spec).dump(2); }

ArticulatedSpec spec_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw Error("spec: parse error at " + line_context(text, e.byte > 0 ? e.byte - 1 : 0) + ": " +
                std::string(e.what()));
  }
  try {
    return spec_from(doc);
  } catch (const json::exception& e) {
    throw Error(std::string("spec: ") + e.what());
  }
}

ArticulatedSpec load_spec(const std::filesystem::path& path) { return spec_from_json(read_text(path)); }

void save_ground_truth(const GroundTruth& truth, const std::filesystem::path& dir, bool frames) {
  std::filesystem::create_directories(dir);
  save_ply(truth.gaussians, dir / "canonical.ply");
  json skeleton = {{"root", truth.skeleton.root}, {"parent", truth.skeleton.parent}};
  json joints = json::array();
  for (const Vec3& j : truth.skeleton.joints) joints.push_back(vec_json(j));
  skeleton["joints"] = joints;
  json motion = json::array();
  for (const MotionSample& m : truth.link_motion) {
    json frame = json::array();
    for (const RigidTransform& t : m.transforms) {
      const UnitQuaternion q = matrix_to_quat(t.rotation);
      frame.push_back({{"rotation", {q.w, q.x, q.y, q.z}}, {"translation", vec_json(t.translation)}});
    }
    motion.push_back(frame);
  }
  json traj = json::array();
  for (const auto& frame : truth.trajectories) {
    json f = json::array();
    for (const Vec3& p : frame) f.push_back(vec_json(p));
    traj.push_back(f);
  }
  const json doc = {{"format", "skelsplat-truth"}, {"version", 1},
                    {"spec", spec_json(truth.spec)},  {"skeleton", skeleton},
                    {"link_of", truth.link_of},       {"times", truth.times},
                    {"link_motion", motion},          {"trajectories", traj}};
  std::ofstream out(dir / "truth.json");
  if (!out) throw Error("cannot write " + (dir / "truth.json").string());
  out << doc.dump() << '\n';
  if (!out) throw Error("failed writing " + (dir / "truth.json").string());
  if (frames) {
    const Camera cam = default_camera(truth);
    std::filesystem::create_directories(dir / "frames");
    for (std::size_t f = 0; f < truth.times.size(); ++f) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%03zu.png", f);
      write_png(render_truth(truth, truth.times[f], cam), dir / "frames" / name);
    }
  }
}

GroundTruth load_ground_truth(const std::filesystem::path& dir) {
  const std::string text = read_text(dir / "truth.json");
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error("truth.json: parse error at " + line_context(text, e.byte > 0 ? e.byte - 1 : 0));
  }
  if (!doc.is_object() || !doc.contains("spec")) throw Error("truth.json: missing spec");
  GroundTruth gt = generate(spec_from(doc.at("spec")));
  try {
    const json& traj = doc.at("trajectories");
    if (traj.size() != gt.trajectories.size()) throw Error("truth.json: trajectories disagree with the spec");
    for (std::size_t f = 0; f < traj.size(); ++f) {
      if (traj[f].size() != gt.trajectories[f].size()) throw Error("truth.json: trajectories disagree with the spec");
      for (std::size_t i = 0; i < traj[f].size(); ++i) {
        const Vec3 p(traj[f][i][0].get<double>(), traj[f][i][1].get<double>(), traj[f][i][2].get<double>());
        if ((p - gt.trajectories[f][i]).norm() > 1e-12)
          throw Error("truth.json: stored trajectories disagree with the regenerated scene");
      }
    }
  } catch (const json::exception& e) {
    throw Error(std::string("truth.json: ") + e.what());
  }
  return gt;
}

}  // namespace skelsplat
