// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/adaptive_control.hpp"

#include "skelsplat/skeleton_discovery.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <tuple>

namespace skelsplat {

void ControlThresholds::validate() const {
  for (double v : {prune, grad, merge}) {
    if (!std::isfinite(v) || v < 0.0) throw Error("ControlThresholds: thresholds must be finite and non-negative");
  }
  if (!std::isfinite(clone)) throw Error("ControlThresholds: clone threshold must be finite");
  if (min_superpoints < 2) throw Error("ControlThresholds: min_superpoints must be at least 2");
  if (max_superpoints < min_superpoints) throw Error("ControlThresholds: max_superpoints below min_superpoints");
  if (neighbors < 1 || merge_neighbors < 1) throw Error("ControlThresholds: neighbor counts must be positive");
}

double ControlThresholds::clone_threshold(std::size_t num_gaussians, std::size_t num_superpoints) const {
  if (clone > 0.0) return clone;
  if (num_superpoints == 0) return 0.0;
  return 4.0 * static_cast<double>(num_gaussians) / static_cast<double>(num_superpoints);
}

std::vector<double> impacts(const SkinningWeights& weights, std::size_t num_superpoints) {
  std::vector<double> out(num_superpoints, 0.0);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto w = weights.weights_of(i);
    const auto nb = weights.neighbors_of(i);
    for (int k = 0; k < weights.k; ++k) out.at(static_cast<std::size_t>(nb[k])) += w[k];
  }
  return out;
}

double impact(const SkinningWeights& weights, int j) {
  double sum = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto nb = weights.neighbors_of(i);
    const auto it = std::find(nb.begin(), nb.end(), j);
    if (it != nb.end()) sum += weights.weights_of(i)[static_cast<std::size_t>(it - nb.begin())];
  }
  return sum;
}

std::vector<double> weighted_grad_norm(const SkinningWeights& weights, std::size_t num_superpoints,
                                       std::span<const double> grad_norm_sq) {
  if (grad_norm_sq.size() != weights.size()) throw Error("weighted_grad_norm: one gradient per Gaussian required");
  std::vector<double> num(num_superpoints, 0.0), den(num_superpoints, 0.0);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto w = weights.weights_of(i);
    const auto nb = weights.neighbors_of(i);
    for (int k = 0; k < weights.k; ++k) {
      num.at(static_cast<std::size_t>(nb[k])) += w[k] * grad_norm_sq[i];
      den[static_cast<std::size_t>(nb[k])] += w[k];
    }
  }
  for (std::size_t j = 0; j < num_superpoints; ++j) num[j] = den[j] > 0.0 ? num[j] / den[j] : 0.0;
  return num;
}

double merge_distance(int a, int b, const MotionSequence& motion) {
  if (motion.size() == 0) return 0.0;
  double sum = 0.0;
  for (const auto& s : motion.samples) {
    const auto& ta = s.transforms.at(static_cast<std::size_t>(a));
    const auto& tb = s.transforms.at(static_cast<std::size_t>(b));
    sum += se3_log(relative_transform(ta, tb)).twist.norm();
  }
  return sum / static_cast<double>(motion.size());
}

SkinningWeights rebuild_skinning(std::span<const Vec3> gaussians, std::span<const Vec3> superpoints,
                                 const SkinningWeights& old, std::span<const int> remap, int k) {
  if (superpoints.empty()) throw Error("rebuild_skinning: no superpoints");
  SkinningWeights out;
  out.k = std::min<int>(k, static_cast<int>(superpoints.size()));
  out.neighbors = knn_assign(gaussians, superpoints, out.k);
  out.logits.assign(out.neighbors.size(), 0.0);
  const bool carry = old.size() == gaussians.size();
  for (std::size_t i = 0; carry && i < gaussians.size(); ++i) {
    std::map<int, std::vector<double>> carried;
    const auto nb = old.neighbors_of(i);
    const auto lg = old.logits_of(i);
    for (int q = 0; q < old.k; ++q) {
      const int to = remap[static_cast<std::size_t>(nb[q])];
      if (to >= 0) carried[to].push_back(lg[q]);
    }
    for (int q = 0; q < out.k; ++q) {
      const auto it = carried.find(out.neighbors[i * out.k + q]);
      if (it == carried.end()) continue;
      const double mx = *std::max_element(it->second.begin(), it->second.end());
      double s = 0.0;
      for (double v : it->second) s += std::exp(v - mx);
      out.logits[i * out.k + q] = mx + std::log(s);
    }
  }
  return out;
}

namespace {

void apply(ControlModel& model, std::vector<Vec3> superpoints, const std::vector<int>& remap, const ControlThresholds& th) {
  model.weights = rebuild_skinning(model.gaussians, superpoints, model.weights, remap, th.neighbors);
  model.superpoints = std::move(superpoints);
}

double bbox_diagonal(std::span<const Vec3> pts) {
  if (pts.empty()) return 0.0;
  Vec3 lo = pts.front(), hi = pts.front();
  for (const Vec3& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return (hi - lo).norm();
}

}  // namespace

ControlReport prune(ControlModel model, const ControlThresholds& th) {
  th.validate();
  const std::size_t m = model.superpoints.size();
  ControlReport report;
  report.before = m;
  report.remap.resize(m);
  std::iota(report.remap.begin(), report.remap.end(), 0);
  const auto w = impacts(model.weights, m);
  std::vector<int> order;
  for (std::size_t j = 0; j < m; ++j) {
    if (w[j] < th.prune) order.push_back(static_cast<int>(j));
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return w[a] < w[b]; });
  std::vector<bool> removed(m, false);
  std::size_t remaining = m;
  for (int j : order) {
    if (remaining <= static_cast<std::size_t>(th.min_superpoints)) break;
    removed[j] = true;
    --remaining;
    report.events.push_back({"prune", j, w[j], th.prune});
  }
  report.after = remaining;
  if (!report.changed()) return report;
  std::vector<Vec3> kept;
  for (std::size_t j = 0; j < m; ++j) {
    report.remap[j] = removed[j] ? -1 : static_cast<int>(kept.size());
    if (!removed[j]) kept.push_back(model.superpoints[j]);
  }
  apply(model, std::move(kept), report.remap, th);
  return report;
}

ControlReport densify(ControlModel model, const ControlThresholds& th, std::span<const double> grad_norm_sq) {
  th.validate();
  const std::size_t m = model.superpoints.size();
  const std::size_t n = model.gaussians.size();
  ControlReport report;
  report.before = m;
  report.remap.resize(m);
  std::iota(report.remap.begin(), report.remap.end(), 0);
  const auto w = impacts(model.weights, m);
  std::vector<double> g(m, 0.0);
  if (!grad_norm_sq.empty()) g = weighted_grad_norm(model.weights, m, grad_norm_sq);
  const double clone_th = th.clone_threshold(n, m);

  // (ratio to threshold, index, metric, threshold) of every candidate.
  std::vector<std::tuple<double, int, double, double>> cand;
  for (std::size_t j = 0; j < m; ++j) {
    const double rw = clone_th > 0.0 ? w[j] / clone_th : 0.0;
    const double rg = th.grad > 0.0 ? g[j] / th.grad : 0.0;
    const bool by_w = w[j] > clone_th;
    const bool by_g = !grad_norm_sq.empty() && g[j] > th.grad;
    if (!by_w && !by_g) continue;
    if (by_g && (!by_w || rg > rw)) {
      cand.emplace_back(rg, static_cast<int>(j), g[j], th.grad);
    } else {
      cand.emplace_back(rw, static_cast<int>(j), w[j], clone_th);
    }
  }
  std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
  const std::size_t room = static_cast<std::size_t>(th.max_superpoints) > m ? th.max_superpoints - m : 0;
  if (cand.size() > room) cand.resize(room);
  report.after = m + cand.size();
  if (cand.empty()) return report;

  // Impact-weighted centroid of each candidate's Gaussians.
  std::vector<Vec3> centroid(m, Vec3::Zero());
  for (std::size_t i = 0; i < n; ++i) {
    const auto wi = model.weights.weights_of(i);
    const auto nb = model.weights.neighbors_of(i);
    for (int k = 0; k < model.weights.k; ++k) centroid[nb[k]] += wi[k] * model.gaussians[i];
  }
  const double jitter = 1e-4 * std::max(bbox_diagonal(model.gaussians), 1e-12);
  std::mt19937_64 rng(th.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vec3> next = model.superpoints;
  for (const auto& [ratio, j, metric, threshold] : cand) {
    Vec3 c = w[j] > 0.0 ? Vec3(centroid[j] / w[j]) : model.superpoints[j];
    Vec3 dir(normal(rng), normal(rng), normal(rng));
    if (dir.norm() < 1e-12) dir = Vec3::UnitX();
    next.push_back(c + jitter * dir.normalized());
    report.events.push_back({"clone", j, metric, threshold});
  }
  apply(model, std::move(next), report.remap, th);
  return report;
}

ControlReport merge(ControlModel model, const ControlThresholds& th, const MotionSequence& motion) {
  th.validate();
  const std::size_t m = model.superpoints.size();
  for (const auto& s : motion.samples) {
    if (s.size() != m) throw Error("merge: motion does not cover every superpoint");
  }
  ControlReport report;
  report.before = m;
  report.remap.resize(m);
  std::iota(report.remap.begin(), report.remap.end(), 0);
  const auto graph = neighbor_graph(model.superpoints, th.merge_neighbors);
  std::set<std::pair<int, int>> pairs;
  for (std::size_t a = 0; a < m; ++a) {
    for (int b : graph.neighbors_of(a)) pairs.emplace(std::min<int>(static_cast<int>(a), b), std::max<int>(static_cast<int>(a), b));
  }
  std::vector<std::tuple<double, int, int>> close;
  for (const auto& [a, b] : pairs) {
    const double d = merge_distance(a, b, motion);
    if (d < th.merge) close.emplace_back(d, a, b);
  }
  std::sort(close.begin(), close.end());
  UnionFind uf(static_cast<int>(m));
  for (const auto& [d, a, b] : close) {
    if (uf.components() <= th.min_superpoints) break;
    if (uf.unite(a, b)) report.events.push_back({"merge", b, d, th.merge});
  }
  if (!report.changed()) {
    report.after = m;
    return report;
  }
  // Groups in order of their lowest member.
  const auto w = impacts(model.weights, m);
  std::map<int, int> group_of_root;
  std::vector<Vec3> sum;
  std::vector<double> mass;
  std::vector<Vec3> plain;
  std::vector<int> count;
  for (std::size_t j = 0; j < m; ++j) {
    const int r = uf.find(static_cast<int>(j));
    auto [it, fresh] = group_of_root.try_emplace(r, static_cast<int>(sum.size()));
    if (fresh) {
      sum.push_back(Vec3::Zero());
      mass.push_back(0.0);
      plain.push_back(Vec3::Zero());
      count.push_back(0);
    }
    const int gi = it->second;
    report.remap[j] = gi;
    sum[gi] += w[j] * model.superpoints[j];
    mass[gi] += w[j];
    plain[gi] += model.superpoints[j];
    ++count[gi];
  }
  std::vector<Vec3> next(sum.size());
  for (std::size_t gi = 0; gi < sum.size(); ++gi) {
    if (count[gi] == 1) {
      next[gi] = plain[gi];
    } else {
      next[gi] = mass[gi] > 0.0 ? Vec3(sum[gi] / mass[gi]) : Vec3(plain[gi] / count[gi]);
    }
  }
  report.after = next.size();
  apply(model, std::move(next), report.remap, th);
  return report;
}

}  // namespace skelsplat
