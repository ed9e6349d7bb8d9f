// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/superpoint_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace skelsplat {

void SuperpointSet::validate() const {
  if (positions.size() < 2) throw Error("SuperpointSet: need at least 2 superpoints");
  for (const auto& p : positions) {
    if (!p.allFinite()) throw Error("SuperpointSet: non-finite position");
  }
}

std::vector<double> SkinningWeights::weights_of(std::size_t i) const { return skinning_weights(logits_of(i)); }

int SkinningWeights::dominant(std::size_t i) const {
  const auto l = logits_of(i);
  return neighbors_of(i)[static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin())];
}

void SkinningWeights::validate(std::size_t num_gaussians, std::size_t num_superpoints) const {
  if (k < 1) throw Error("SkinningWeights: k must be >= 1");
  if (neighbors.size() != num_gaussians * k || logits.size() != neighbors.size()) {
    throw Error("SkinningWeights: size does not match Gaussian count");
  }
  for (int n : neighbors) {
    if (n < 0 || static_cast<std::size_t>(n) >= num_superpoints) throw Error("SkinningWeights: neighbor out of range");
  }
  for (double l : logits) {
    if (!std::isfinite(l)) throw Error("SkinningWeights: non-finite logit");
  }
}

std::vector<RigidTransform> MotionSequence::track(std::size_t j) const {
  std::vector<RigidTransform> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.transforms.at(j));
  return out;
}

void MotionSequence::validate() const {
  if (times.size() != samples.size()) throw Error("MotionSequence: one sample per timestamp required");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < 0.0 || times[i] > 1.0) throw Error("MotionSequence: timestamp outside [0, 1]");
    if (i > 0 && !(times[i] > times[i - 1])) throw Error("MotionSequence: timestamps must increase strictly");
    if (samples[i].size() != samples.front().size()) throw Error("MotionSequence: sample sizes differ");
  }
}

std::vector<int> farthest_point_sampling(std::span<const Vec3> points, int m, std::uint64_t seed) {
  const auto n = static_cast<int>(points.size());
  if (m < 0 || m > n) throw Error("farthest_point_sampling: M exceeds the point count");
  std::vector<int> out;
  if (m == 0) return out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, n - 1);
  out.push_back(pick(rng));
  std::vector<double> dist(points.size(), std::numeric_limits<double>::infinity());
  while (static_cast<int>(out.size()) < m) {
    const Vec3& last = points[out.back()];
    int best = -1;
    double best_d = -1.0;
    for (int i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], (points[i] - last).squaredNorm());
      if (dist[i] > best_d) {
        best_d = dist[i];
        best = i;
      }
    }
    out.push_back(best);
  }
  return out;
}

std::vector<int> knn_assign(std::span<const Vec3> queries, std::span<const Vec3> references, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > references.size()) throw Error("knn_assign: K must be in [1, M]");
  std::vector<int> out;
  out.reserve(queries.size() * k);
  std::vector<std::pair<double, int>> d(references.size());
  for (const auto& q : queries) {
    for (std::size_t j = 0; j < references.size(); ++j) d[j] = {(references[j] - q).squaredNorm(), static_cast<int>(j)};
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    for (int j = 0; j < k; ++j) out.push_back(d[j].second);
  }
  return out;
}

NeighborGraph neighbor_graph(std::span<const Vec3> points, int k) {
  NeighborGraph g;
  const int n = static_cast<int>(points.size());
  g.k = std::max(0, std::min(k, n - 1));
  if (g.k == 0) return g;
  const auto raw = knn_assign(points, points, g.k + 1);
  g.neighbors.reserve(static_cast<std::size_t>(n) * g.k);
  for (int i = 0; i < n; ++i) {
    int taken = 0;
    for (int q = 0; q <= g.k && taken < g.k; ++q) {
      const int j = raw[static_cast<std::size_t>(i) * (g.k + 1) + q];
      if (j == i) continue;
      g.neighbors.push_back(j);
      ++taken;
    }
  }
  return g;
}

std::vector<double> skinning_weights(std::span<const double> logits) {
  std::vector<double> w(logits.size());
  if (logits.empty()) return w;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) sum += w[k] = std::exp(logits[k] - mx);
  for (auto& v : w) v /= sum;
  return w;
}

std::vector<double> softmax_backward(std::span<const double> w, std::span<const double> gw) {
  double dot = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) dot += w[k] * gw[k];
  std::vector<double> out(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) out[k] = w[k] * (gw[k] - dot);
  return out;
}

SkinningWeights make_skinning(std::span<const Vec3> gaussians, std::span<const Vec3> superpoints, int k) {
  SkinningWeights w;
  w.k = k;
  w.neighbors = knn_assign(gaussians, superpoints, k);
  w.logits.assign(w.neighbors.size(), 0.0);
  return w;
}

// --- deformation field ------------------------------------------------------

DeformField::DeformField(int width, int depth, std::uint64_t seed)
    : net_(MlpShape{input_size(), kOutputs, width, depth}, seed, true) {}

DeformField::DeformField(Mlp net) : net_(std::move(net)) {
  if (net_.input_dim() != input_size() || net_.output_dim() != kOutputs) {
    throw Error("DeformField: network shape does not match the field");
  }
}

VecX DeformField::encode(const Vec3& p, double t) {
  const double pc[3] = {p.x(), p.y(), p.z()};
  VecX out(input_size());
  out << positional_encoding(pc, kPositionFreqs), positional_encoding({&t, 1}, kTimeFreqs);
  return out;
}

RigidTransform DeformField::decode(const Eigen::Ref<const VecX>& out) {
  const UnitQuaternion q{1.0 + out[0], out[1], out[2], out[3]};
  return {quat_to_matrix(q.normalized()), out.segment<3>(4)};
}

RigidTransform DeformField::eval(const Vec3& p, double t) const {
  const MatX in = encode(p, t);
  return decode(net_.forward(in).col(0));
}

MotionSample DeformField::eval_batch(std::span<const Vec3> positions, std::span<const double> times, Batch* batch) const {
  if (positions.size() != times.size()) throw Error("DeformField::eval_batch: positions/times length mismatch");
  MatX in(input_size(), static_cast<Eigen::Index>(positions.size()));
  for (std::size_t q = 0; q < positions.size(); ++q) in.col(static_cast<Eigen::Index>(q)) = encode(positions[q], times[q]);
  MatX out = net_.forward(in, batch ? &batch->cache : nullptr);
  MotionSample s;
  s.transforms.reserve(positions.size());
  for (Eigen::Index q = 0; q < out.cols(); ++q) s.transforms.push_back(decode(out.col(q)));
  if (batch) {
    batch->positions.assign(positions.begin(), positions.end());
    batch->times.assign(times.begin(), times.end());
    batch->output = std::move(out);
  }
  return s;
}

MotionSample DeformField::eval_all(std::span<const Vec3> positions, double t) const {
  const std::vector<double> times(positions.size(), t);
  return eval_batch(positions, times);
}

Mlp::Gradients DeformField::backward(const Batch& batch, std::span<const Mat3> grad_rotation,
                                     std::span<const Vec3> grad_translation, std::span<Vec3> grad_positions) const {
  const auto n = static_cast<Eigen::Index>(batch.positions.size());
  if (grad_rotation.size() != batch.positions.size() || grad_translation.size() != batch.positions.size()) {
    throw Error("DeformField::backward: gradient count mismatch");
  }
  MatX g(kOutputs, n);
  for (Eigen::Index q = 0; q < n; ++q) {
    const Vec4 raw(1.0 + batch.output(0, q), batch.output(1, q), batch.output(2, q), batch.output(3, q));
    g.col(q).head<4>() = quat_to_matrix_backward(raw, grad_rotation[q]);
    g.col(q).tail<3>() = grad_translation[q];
  }
  Mlp::Gradients grads = net_.backward(batch.cache, g);
  if (!grad_positions.empty()) {
    const int pe = encoded_size(3, kPositionFreqs);
    for (Eigen::Index q = 0; q < n; ++q) {
      const Vec3& p = batch.positions[q];
      const double pc[3] = {p.x(), p.y(), p.z()};
      const VecX gp = positional_encoding_backward(pc, kPositionFreqs, {grads.input.col(q).data(), static_cast<std::size_t>(pe)});
      grad_positions[q] += gp;
    }
  }
  return grads;
}

// --- linear blend skinning --------------------------------------------------

namespace {

void check_lbs_inputs(std::size_t n, const MotionSample& sample, const SkinningWeights& weights) {
  if (weights.size() != n) throw Error("lbs: skinning rows do not match the Gaussian count");
  for (int j : weights.neighbors) {
    if (j < 0 || static_cast<std::size_t>(j) >= sample.size()) throw Error("lbs: neighbor index outside the motion sample");
  }
}

}  // namespace

std::vector<Vec3> lbs_positions(std::span<const Vec3> canonical, const MotionSample& sample,
                                const SkinningWeights& weights) {
  check_lbs_inputs(canonical.size(), sample, weights);
  std::vector<Vec3> out(canonical.size());
  for (std::size_t i = 0; i < canonical.size(); ++i) {
    const auto w = weights.weights_of(i);
    const auto nb = weights.neighbors_of(i);
    Vec3 acc = Vec3::Zero();
    for (int k = 0; k < weights.k; ++k) acc += w[k] * sample.transforms[nb[k]].apply(canonical[i]);
    out[i] = acc;
  }
  return out;
}

GaussianSet lbs_deform(const GaussianSet& set, const MotionSample& sample, const SkinningWeights& weights) {
  check_lbs_inputs(set.size(), sample, weights);
  std::vector<UnitQuaternion> quats;
  quats.reserve(sample.size());
  for (const auto& t : sample.transforms) quats.push_back(matrix_to_quat(t.rotation));

  GaussianSet out = set;
  out.positions = lbs_positions(set.positions, sample, weights);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto w = weights.weights_of(i);
    const auto nb = weights.neighbors_of(i);
    const auto top = static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
    const Vec4 ref = quats[nb[top]].as_vector();
    Vec4 blend = Vec4::Zero();
    for (int k = 0; k < weights.k; ++k) {
      const Vec4 r = quats[nb[k]].as_vector();
      blend += w[k] * (r.dot(ref) < 0.0 ? -r : r);
    }
    if (blend.norm() < 1e-8) throw Error("lbs_deform: degenerate blended rotation");
    out.rotations[i] = quat_mul(UnitQuaternion::from_vector(blend.normalized()), set.rotations[i]);
  }
  return out;
}

void lbs_positions_backward(std::span<const Vec3> canonical, const MotionSample& sample,
                            const SkinningWeights& weights, std::span<const Vec3> grad_positions,
                            LbsGradients& grads) {
  check_lbs_inputs(canonical.size(), sample, weights);
  const bool want_rt = !grads.rotation.empty();
  const bool want_logits = !grads.logits.empty();
  const bool want_canonical = !grads.canonical.empty();
  std::vector<double> gw(static_cast<std::size_t>(weights.k));
  for (std::size_t i = 0; i < canonical.size(); ++i) {
    const Vec3& g = grad_positions[i];
    const Vec3& mu = canonical[i];
    const auto w = weights.weights_of(i);
    const auto nb = weights.neighbors_of(i);
    for (int k = 0; k < weights.k; ++k) {
      const RigidTransform& tr = sample.transforms[nb[k]];
      if (want_rt) {
        grads.rotation[nb[k]] += w[k] * g * mu.transpose();
        grads.translation[nb[k]] += w[k] * g;
      }
      if (want_canonical) grads.canonical[i] += w[k] * tr.rotation.transpose() * g;
      gw[k] = g.dot(tr.apply(mu));
    }
    if (want_logits) {
      const auto gl = softmax_backward(w, gw);
      for (int k = 0; k < weights.k; ++k) grads.logits[i * weights.k + k] += gl[k];
    }
  }
}

}  // namespace skelsplat
