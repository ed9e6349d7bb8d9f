// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

namespace skelsplat {

void LossWeights::validate() const {
  for (double w : {fit, joint, arap, smooth, sparse, ssim_mix, discovery_transform, discovery_probe}) {
    if (!std::isfinite(w) || w < 0.0) throw Error("LossWeights: weights must be finite and non-negative");
  }
  if (ssim_mix > 1.0) throw Error("LossWeights: ssim_mix must lie in [0, 1]");
}

double total_dynamic_loss(const LossComponents& c, const LossWeights& w) {
  return w.fit * c.fit + w.joint * c.joint + w.arap * c.arap + w.smooth * c.smooth + w.sparse * c.sparse;
}

double l_rgb(const Image& rendered, const Image& truth, double ssim_mix) {
  if (rendered.width != truth.width || rendered.height != truth.height) throw Error("l_rgb: image sizes differ");
  const double l1 = mean_abs_error(rendered, truth);
  if (ssim_mix == 0.0) return l1;
  return (1.0 - ssim_mix) * l1 + ssim_mix * (1.0 - ssim(rendered, truth));
}

double l_traj_positions(std::span<const Vec3> predicted, std::span<const Vec3> truth, std::span<Vec3> grad) {
  if (predicted.size() != truth.size()) throw Error("l_traj: missing trajectory correspondence");
  if (predicted.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(predicted.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const Vec3 d = predicted[i] - truth[i];
    sum += d.squaredNorm();
    if (!grad.empty()) grad[i] += 2.0 * inv * d;
  }
  return sum * inv;
}

double l_traj_transforms(const MotionSample& predicted, const MotionSample& truth, MotionGradient* grad) {
  if (predicted.size() != truth.size()) throw Error("l_traj: missing superpoint correspondence");
  if (predicted.size() == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(predicted.size());
  double sum = 0.0;
  for (std::size_t j = 0; j < predicted.size(); ++j) {
    const Mat3 dr = predicted.transforms[j].rotation - truth.transforms[j].rotation;
    const Vec3 dt = predicted.transforms[j].translation - truth.transforms[j].translation;
    sum += dr.squaredNorm() + dt.squaredNorm();
    if (grad) {
      grad->rotation[j] += 2.0 * inv * dr;
      grad->translation[j] += 2.0 * inv * dt;
    }
  }
  return sum * inv;
}

double relative_angle_sq(const Mat3& ra, const Mat3& rb, Mat3* grad_a, Mat3* grad_b, double scale) {
  const Mat3 e = ra.transpose() * rb;
  // θ = atan2(|v|, c) with v the axial part of E and c = (tr E − 1) / 2:
  // exact zero at E = I and well conditioned for small angles.
  const Vec3 v(0.5 * (e(2, 1) - e(1, 2)), 0.5 * (e(0, 2) - e(2, 0)), 0.5 * (e(1, 0) - e(0, 1)));
  const double s = v.norm();
  const double c = 0.5 * (e.trace() - 1.0);
  const double theta = std::atan2(s, c);
  if ((grad_a || grad_b) && theta > 0.0) {
    const double ratio = s > 0.0 ? theta / s : (c > 0.0 ? 1.0 / c : 0.0);
    const Mat3 g = scale / (s * s + c * c) * (c * ratio * hat(v) - theta * s * Mat3::Identity());
    if (grad_a) *grad_a += rb * g.transpose();
    if (grad_b) *grad_b += ra * g;
  }
  return theta * theta;
}

double l_arap(const MotionSample& sample, const NeighborGraph& graph, MotionGradient* grad) {
  if (graph.size() != sample.size()) throw Error("l_arap: graph does not match the motion sample");
  double sum = 0.0;
  for (std::size_t j = 0; j < sample.size(); ++j) {
    const RigidTransform& tj = sample.transforms[j];
    for (int k : graph.neighbors_of(j)) {
      const RigidTransform& tk = sample.transforms[k];
      const Vec3 dt = tj.translation - tk.translation;
      if (grad) {
        sum += relative_angle_sq(tj.rotation, tk.rotation, &grad->rotation[j], &grad->rotation[k]);
        grad->translation[j] += 2.0 * dt;
        grad->translation[k] -= 2.0 * dt;
      } else {
        sum += relative_angle_sq(tj.rotation, tk.rotation);
      }
      sum += dt.squaredNorm();
    }
  }
  return sum;
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void logits_from_weight_grads(const SkinningWeights& weights, const std::vector<double>& gw, std::span<double> grad_logits) {
  const auto k = static_cast<std::size_t>(weights.k);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto w = weights.weights_of(i);
    const auto gl = softmax_backward(w, {gw.data() + i * k, k});
    for (std::size_t q = 0; q < k; ++q) grad_logits[i * k + q] += gl[q];
  }
}

}  // namespace

double l_smooth(const SkinningWeights& weights, const NeighborGraph& gaussian_graph, std::span<double> grad_logits) {
  const std::size_t n = weights.size();
  if (gaussian_graph.size() != n) throw Error("l_smooth: graph does not match the skinning rows");
  const auto k = static_cast<std::size_t>(weights.k);
  std::vector<std::vector<double>> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = weights.weights_of(i);
  const bool want = !grad_logits.empty();
  std::vector<double> gw(want ? n * k : 0, 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ni = weights.neighbors_of(i);
    for (int other : gaussian_graph.neighbors_of(i)) {
      const auto m = static_cast<std::size_t>(other);
      const auto nm = weights.neighbors_of(m);
      std::vector<bool> matched(k, false);
      for (std::size_t a = 0; a < k; ++a) {
        double v = 0.0;
        std::size_t hit = k;
        for (std::size_t b = 0; b < k; ++b) {
          if (nm[b] == ni[a]) {
            v = rows[m][b];
            hit = b;
            break;
          }
        }
        const double d = rows[i][a] - v;
        sum += std::abs(d);
        if (want) {
          gw[i * k + a] += sign(d);
          if (hit < k) gw[m * k + hit] -= sign(d);
        }
        if (hit < k) matched[hit] = true;
      }
      for (std::size_t b = 0; b < k; ++b) {
        if (matched[b]) continue;
        sum += std::abs(rows[m][b]);
        if (want) gw[m * k + b] += sign(rows[m][b]);
      }
    }
  }
  if (want) logits_from_weight_grads(weights, gw, grad_logits);
  return sum;
}

double binary_entropy(double w) {
  if (w <= 0.0 || w >= 1.0) return 0.0;
  return -(w * std::log(w) + (1.0 - w) * std::log1p(-w));
}

double l_sparse(const SkinningWeights& weights, std::span<double> grad_logits) {
  const auto k = static_cast<std::size_t>(weights.k);
  const bool want = !grad_logits.empty();
  std::vector<double> gw(want ? weights.size() * k : 0, 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto w = weights.weights_of(i);
    for (std::size_t q = 0; q < k; ++q) {
      sum += binary_entropy(w[q]);
      // dH/dw = ln((1 − w) / w); finite for softmax outputs short of underflow.
      if (want && w[q] > 0.0 && w[q] < 1.0) gw[i * k + q] = std::log1p(-w[q]) - std::log(w[q]);
    }
  }
  if (want) logits_from_weight_grads(weights, gw, grad_logits);
  return sum;
}

namespace {

std::map<std::pair<int, int>, std::size_t> pair_index(std::span<const CandidatePair> pairs) {
  std::map<std::pair<int, int>, std::size_t> out;
  for (std::size_t p = 0; p < pairs.size(); ++p) out[{std::min(pairs[p].a, pairs[p].b), std::max(pairs[p].a, pairs[p].b)}] = p;
  return out;
}

/// Weight of each pair's (d_ab + d_ba) in the joint objective.
std::vector<double> joint_coefficients(std::span<const CandidatePair> pairs, std::span<const Edge> tree_edges,
                                       std::size_t num_superpoints) {
  const double m = static_cast<double>(num_superpoints);
  std::vector<double> coef(pairs.size(), m > 0 ? 1.0 / (m * m) : 0.0);
  if (num_superpoints < 2) return coef;
  const auto index = pair_index(pairs);
  for (const Edge& e : tree_edges) {
    const auto it = index.find({std::min(e.a, e.b), std::max(e.a, e.b)});
    if (it == index.end()) throw Error("l_joint: tree edge is not a candidate pair");
    coef[it->second] += 0.5 / (m - 1.0);
  }
  return coef;
}

}  // namespace

double l_joint(std::span<const CandidatePair> pairs, std::span<const Edge> tree_edges, std::size_t num_superpoints) {
  const auto coef = joint_coefficients(pairs, tree_edges, num_superpoints);
  double sum = 0.0;
  for (std::size_t p = 0; p < pairs.size(); ++p) sum += coef[p] * (pairs[p].d_ab + pairs[p].d_ba);
  return sum;
}

double l_joint_motion(std::span<const CandidatePair> pairs, std::span<const Edge> tree_edges, std::size_t num_superpoints,
                      std::span<const MotionSample> samples, double residual_scale, std::span<MotionGradient> grads) {
  const auto coef = joint_coefficients(pairs, tree_edges, num_superpoints);
  const bool want = !grads.empty();
  if (want && grads.size() != samples.size()) throw Error("l_joint_motion: one gradient per sample required");
  double total = 0.0;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const CandidatePair& cp = pairs[p];
    double d = 2.0 * kJointCoupling * (cp.j_ab - cp.j_ba).squaredNorm();
    // e = R_bᵀ (R_a j + t_a − t_b) − j: residual of a rotating about j relative to b.
    auto directed = [&](int a, int b, const Vec3& j) {
      for (std::size_t s = 0; s < samples.size(); ++s) {
        const RigidTransform& ta = samples[s].transforms[a];
        const RigidTransform& tb = samples[s].transforms[b];
        const Vec3 u = ta.rotation * j + ta.translation - tb.translation;
        const Vec3 e = tb.rotation.transpose() * u - j;
        d += residual_scale * e.squaredNorm();
        if (want) {
          const Vec3 g = 2.0 * residual_scale * coef[p] * e;
          const Vec3 rg = tb.rotation * g;
          grads[s].rotation[a] += rg * j.transpose();
          grads[s].translation[a] += rg;
          grads[s].translation[b] -= rg;
          grads[s].rotation[b] += u * g.transpose();
        }
      }
    };
    directed(cp.a, cp.b, cp.j_ab);
    directed(cp.b, cp.a, cp.j_ba);
    total += coef[p] * d;
  }
  return total;
}

std::vector<Vec3> make_probes(std::span<const Vec3> superpoints, std::uint64_t seed, double scale) {
  if (superpoints.empty()) return {};
  Vec3 lo = superpoints.front(), hi = superpoints.front();
  for (const Vec3& p : superpoints) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  double diag = (hi - lo).norm();
  if (diag <= 0.0) diag = 1.0;
  const double half = scale * diag;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-half, half);
  std::vector<Vec3> out;
  out.reserve(superpoints.size());
  for (const Vec3& p : superpoints) {
    const double x = u(rng), y = u(rng), z = u(rng);
    out.push_back(p + Vec3(x, y, z));
  }
  return out;
}

double l_discovery(const MotionSample& predicted, const MotionSample& cached, std::span<const Vec3> probes,
                   const LossWeights& weights, MotionGradient* grad_predicted) {
  const std::size_t m = predicted.size();
  if (cached.size() != m || probes.size() != m) throw Error("l_discovery: skeleton and cached motion disagree");
  if (m == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(m);
  const double l5 = weights.discovery_transform, l6 = weights.discovery_probe;
  double sum = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const RigidTransform& hat_t = predicted.transforms[j];
    const RigidTransform& ref = cached.transforms[j];
    const Vec3 dt = hat_t.translation - ref.translation;
    Mat3* gr = grad_predicted ? &grad_predicted->rotation[j] : nullptr;
    const double rot = relative_angle_sq(ref.rotation, hat_t.rotation, nullptr, gr, l5 * inv);
    const Vec3 diff = ref.apply(probes[j]) - hat_t.apply(probes[j]);
    const double dist = diff.norm();
    sum += l5 * (dt.squaredNorm() + rot) + l6 * dist;
    if (grad_predicted) {
      grad_predicted->translation[j] += 2.0 * l5 * inv * dt;
      if (dist > 0.0) {
        const Vec3 u = -(l6 * inv / dist) * diff;
        grad_predicted->rotation[j] += u * probes[j].transpose();
        grad_predicted->translation[j] += u;
      }
    }
  }
  return sum * inv;
}

// --- assembled objectives -----------------------------------------------------

void TrajectoryTargets::validate(std::size_t num_gaussians, std::size_t num_superpoints) const {
  if (positions.size() != times.size()) throw Error("TrajectoryTargets: missing trajectory correspondence");
  for (const auto& p : positions) {
    if (p.size() != num_gaussians) throw Error("TrajectoryTargets: missing trajectory correspondence");
  }
  if (!superpoints.empty()) {
    if (superpoints.size() != times.size()) throw Error("TrajectoryTargets: missing superpoint correspondence");
    for (const auto& s : superpoints) {
      if (s.size() != num_superpoints) throw Error("TrajectoryTargets: missing superpoint correspondence");
    }
  }
}

namespace {

std::vector<std::size_t> resolve_indices(std::span<const std::size_t> time_indices, std::size_t count) {
  std::vector<std::size_t> out(time_indices.begin(), time_indices.end());
  if (out.empty()) {
    out.resize(count);
    std::iota(out.begin(), out.end(), std::size_t{0});
  }
  for (std::size_t t : out) {
    if (t >= count) throw Error("objective: timestamp index out of range");
  }
  return out;
}

void add_scaled(MotionGradient& into, const MotionGradient& g, double s) {
  for (std::size_t j = 0; j < into.rotation.size(); ++j) {
    into.rotation[j] += s * g.rotation[j];
    into.translation[j] += s * g.translation[j];
  }
}

void add_scaled(std::span<double> into, std::span<const double> g, double s) {
  for (std::size_t q = 0; q < into.size(); ++q) into[q] += s * g[q];
}

}  // namespace

LossComponents dynamic_objective(const DeformField& field, std::span<const Vec3> superpoints,
                                 const SkinningWeights& weights, std::span<const Vec3> canonical,
                                 const TrajectoryTargets& targets, std::span<const std::size_t> time_indices,
                                 const DynamicTerms& terms, const LossWeights& lw, DynamicGradients* grads) {
  const std::size_t m = superpoints.size(), n = canonical.size();
  targets.validate(n, m);
  weights.validate(n, m);
  const auto idx = resolve_indices(time_indices, targets.times.size());
  const std::size_t nb = idx.size();
  const double inv_b = 1.0 / static_cast<double>(nb);

  std::vector<Vec3> q_pos;
  std::vector<double> q_time;
  q_pos.reserve(nb * m);
  q_time.reserve(nb * m);
  for (std::size_t t : idx) {
    for (std::size_t j = 0; j < m; ++j) {
      q_pos.push_back(superpoints[j]);
      q_time.push_back(targets.times[t]);
    }
  }
  DeformField::Batch batch;
  const MotionSample flat = field.eval_batch(q_pos, q_time, grads ? &batch : nullptr);
  std::vector<MotionSample> samples(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    samples[b].transforms.assign(flat.transforms.begin() + static_cast<std::ptrdiff_t>(b * m),
                                 flat.transforms.begin() + static_cast<std::ptrdiff_t>((b + 1) * m));
  }

  LossComponents c;
  std::vector<MotionGradient> mg;
  if (grads) {
    mg.assign(nb, MotionGradient::zeros(m));
    grads->superpoints.assign(m, Vec3::Zero());
    grads->logits.assign(weights.logits.size(), 0.0);
    grads->canonical.assign(n, Vec3::Zero());
  }

  std::vector<Vec3> gpos;
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t t = idx[b];
    const auto pred = lbs_positions(canonical, samples[b], weights);
    if (grads) gpos.assign(n, Vec3::Zero());
    c.fit += inv_b * l_traj_positions(pred, targets.positions[t], grads ? std::span<Vec3>(gpos) : std::span<Vec3>());
    if (grads) {
      const double s = lw.fit * inv_b;
      for (auto& g : gpos) g *= s;
      LbsGradients lg{mg[b].rotation, mg[b].translation, std::vector<double>(weights.logits.size(), 0.0),
                      std::vector<Vec3>(n, Vec3::Zero())};
      lbs_positions_backward(canonical, samples[b], weights, gpos, lg);
      mg[b].rotation = std::move(lg.rotation);
      mg[b].translation = std::move(lg.translation);
      add_scaled(grads->logits, lg.logits, 1.0);
      for (std::size_t i = 0; i < n; ++i) grads->canonical[i] += lg.canonical[i];
    }
    if (!targets.superpoints.empty()) {
      MotionGradient tmp = grads ? MotionGradient::zeros(m) : MotionGradient{};
      c.fit += inv_b * l_traj_transforms(samples[b], targets.superpoints[t], grads ? &tmp : nullptr);
      if (grads) add_scaled(mg[b], tmp, lw.fit * inv_b);
    }
    if (terms.superpoint_graph) {
      MotionGradient tmp = grads ? MotionGradient::zeros(m) : MotionGradient{};
      c.arap += inv_b / static_cast<double>(m) * l_arap(samples[b], *terms.superpoint_graph, grads ? &tmp : nullptr);
      if (grads) add_scaled(mg[b], tmp, lw.arap * inv_b / static_cast<double>(m));
    }
  }

  if (!terms.pairs.empty()) {
    const double scale = static_cast<double>(targets.times.size()) * inv_b;
    const bool want = grads && lw.joint > 0.0 && terms.joint_gradient;
    std::vector<MotionGradient> jg;
    if (want) jg.assign(nb, MotionGradient::zeros(m));
    c.joint = l_joint_motion(terms.pairs, terms.tree_edges, m, samples, scale, jg);
    if (want) {
      for (std::size_t b = 0; b < nb; ++b) add_scaled(mg[b], jg[b], lw.joint);
    }
  }

  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  std::vector<double> gl;
  if (terms.gaussian_graph) {
    if (grads) gl.assign(weights.logits.size(), 0.0);
    c.smooth = inv_n * l_smooth(weights, *terms.gaussian_graph, gl);
    if (grads) add_scaled(grads->logits, gl, lw.smooth * inv_n);
  }
  if (grads) gl.assign(weights.logits.size(), 0.0);
  c.sparse = inv_n * l_sparse(weights, gl);
  if (grads) add_scaled(grads->logits, gl, lw.sparse * inv_n);

  if (grads) {
    std::vector<Mat3> gr(nb * m);
    std::vector<Vec3> gt(nb * m);
    std::vector<Vec3> gp(nb * m, Vec3::Zero());
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t j = 0; j < m; ++j) {
        gr[b * m + j] = mg[b].rotation[j];
        gt[b * m + j] = mg[b].translation[j];
      }
    }
    grads->field = field.backward(batch, gr, gt, gp);
    for (std::size_t q = 0; q < gp.size(); ++q) grads->superpoints[q % m] += gp[q];
  }
  return c;
}

namespace {

void check_field_times(const JointField& field, std::size_t count) {
  if (field.times().size() != count) throw Error("objective: joint field timestamps do not match the sequence");
}

void init_joint_field_grads(const JointField& field, std::size_t nodes, JointFieldGradients& g) {
  g.field = {};
  g.joints.assign(nodes, Vec3::Zero());
  g.root_quats.assign(field.times().size(), Vec4::Zero());
  g.root_translations.assign(field.times().size(), Vec3::Zero());
}

/// Backprop world-transform gradients at timestamp `index` into Ψ, the
/// joints and the root parameters.
void backprop_kinematics(const JointField& field, const SkeletonTree& tree, std::size_t index,
                         const JointField::Batch& batch, const std::vector<Mat3>& local, const MotionSample& world,
                         const MotionGradient& g, JointFieldGradients& out) {
  const FkGradients fk = forward_kinematics_backward(tree, local, world, g.rotation, g.translation);
  for (std::size_t v = 0; v < tree.size(); ++v) out.joints[v] += fk.joints[v];
  Mlp::accumulate(out.field, field.backward(batch, fk.local_rotation, out.joints));
  out.root_quats[index] += quat_to_matrix_backward(field.root_quats()[index], fk.root_rotation);
  out.root_translations[index] += fk.root_translation;
}

}  // namespace

double discovery_objective(const JointField& field, const SkeletonTree& tree, const MotionSequence& cached,
                           std::span<const Vec3> probes, const LossWeights& lw, JointFieldGradients* grads) {
  check_field_times(field, cached.size());
  if (cached.size() == 0) return 0.0;
  if (grads) init_joint_field_grads(field, tree.size(), *grads);
  const double inv_t = 1.0 / static_cast<double>(cached.size());
  double total = 0.0;
  for (std::size_t i = 0; i < cached.size(); ++i) {
    JointField::Batch batch;
    const auto local = field.eval_rotations(tree, cached.times[i], grads ? &batch : nullptr);
    const MotionSample world = forward_kinematics(tree, field.root(i), local);
    MotionGradient g = grads ? MotionGradient::zeros(tree.size()) : MotionGradient{};
    total += inv_t * l_discovery(world, cached.samples[i], probes, lw, grads ? &g : nullptr);
    if (grads) {
      for (std::size_t v = 0; v < tree.size(); ++v) {
        g.rotation[v] *= inv_t;
        g.translation[v] *= inv_t;
      }
      backprop_kinematics(field, tree, i, batch, local, world, g, *grads);
    }
  }
  return total;
}

LossComponents kinematic_objective(const JointField& field, const SkeletonTree& tree, const SkinningWeights& weights,
                                   std::span<const Vec3> canonical, const TrajectoryTargets& targets,
                                   std::span<const std::size_t> time_indices, const NeighborGraph* gaussian_graph,
                                   const LossWeights& lw, KinematicGradients* grads) {
  const std::size_t m = tree.size(), n = canonical.size();
  targets.validate(n, m);
  weights.validate(n, m);
  check_field_times(field, targets.times.size());
  const auto idx = resolve_indices(time_indices, targets.times.size());
  const double inv_b = 1.0 / static_cast<double>(idx.size());
  if (grads) {
    init_joint_field_grads(field, m, grads->kinematic);
    grads->logits.assign(weights.logits.size(), 0.0);
    grads->canonical.assign(n, Vec3::Zero());
  }
  LossComponents c;
  std::vector<Vec3> gpos;
  for (std::size_t t : idx) {
    JointField::Batch batch;
    const auto local = field.eval_rotations(tree, targets.times[t], grads ? &batch : nullptr);
    const MotionSample world = forward_kinematics(tree, field.root(t), local);
    const auto pred = lbs_positions(canonical, world, weights);
    if (grads) gpos.assign(n, Vec3::Zero());
    c.fit += inv_b * l_traj_positions(pred, targets.positions[t], grads ? std::span<Vec3>(gpos) : std::span<Vec3>());
    MotionGradient g = grads ? MotionGradient::zeros(m) : MotionGradient{};
    if (!targets.superpoints.empty()) {
      MotionGradient tmp = grads ? MotionGradient::zeros(m) : MotionGradient{};
      c.fit += inv_b * l_traj_transforms(world, targets.superpoints[t], grads ? &tmp : nullptr);
      if (grads) add_scaled(g, tmp, lw.fit * inv_b);
    }
    if (grads) {
      for (auto& v : gpos) v *= lw.fit * inv_b;
      LbsGradients lg{std::vector<Mat3>(m, Mat3::Zero()), std::vector<Vec3>(m, Vec3::Zero()),
                      std::vector<double>(weights.logits.size(), 0.0), std::vector<Vec3>(n, Vec3::Zero())};
      lbs_positions_backward(canonical, world, weights, gpos, lg);
      for (std::size_t j = 0; j < m; ++j) {
        g.rotation[j] += lg.rotation[j];
        g.translation[j] += lg.translation[j];
      }
      add_scaled(grads->logits, lg.logits, 1.0);
      for (std::size_t i = 0; i < n; ++i) grads->canonical[i] += lg.canonical[i];
      backprop_kinematics(field, tree, t, batch, local, world, g, grads->kinematic);
    }
  }
  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  std::vector<double> gl;
  if (gaussian_graph) {
    if (grads) gl.assign(weights.logits.size(), 0.0);
    c.smooth = inv_n * l_smooth(weights, *gaussian_graph, gl);
    if (grads) add_scaled(grads->logits, gl, lw.smooth * inv_n);
  }
  if (grads) gl.assign(weights.logits.size(), 0.0);
  c.sparse = inv_n * l_sparse(weights, gl);
  if (grads) add_scaled(grads->logits, gl, lw.sparse * inv_n);
  return c;
}

}  // namespace skelsplat
