// SPDX-License-Identifier: Apache-2.0
//
// Joint estimation between superpoint pairs, smoothed pair distances and
// the minimum-spanning skeleton tree over superpoints.
#pragma once

#include "skelsplat/geom.hpp"
#include "skelsplat/superpoint_model.hpp"

#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace skelsplat {

inline constexpr double kJointCoupling = 1.0;  // λ_d
inline constexpr double kEmaMomentum = 0.1;    // ε

/// (T_b)⁻¹ T_a: motion of a expressed relative to b.
RigidTransform relative_transform(const RigidTransform& ta, const RigidTransform& tb);

struct JointSolveOptions {
  double damping = 1e-8;
  /// Point the damping pulls toward (origin when unset).
  std::optional<Vec3> anchor;
  /// Directions of A with eigenvalue below max(relative * λ_max, absolute)
  /// are unobservable; the solution takes the anchor's component there.
  double relative_rank_tolerance = 0.0;
  double absolute_rank_tolerance = 0.0;
  /// λ_max at or below this marks the pair as co-rigid.
  double degenerate_tolerance = 1e-12;
};

struct JointSolution {
  Vec3 joint = Vec3::Zero();
  double residual = 0.0;  // Σ_t ‖t_r − (I − R_r) j‖²
  bool degenerate = false;
};

/// argmin_j Σ_t ‖t_r^t − (I − R_r^t) j‖² via the damped normal equations.
JointSolution solve_joint(std::span<const RigidTransform> relative, const JointSolveOptions& options = {});

/// d_ab = Σ_t ‖t_r^t − (j_ab − R_r^t j_ab)‖² + λ_d ‖j_ab − j_ba‖².
double joint_distance(std::span<const RigidTransform> relative, const Vec3& j_ab, const Vec3& j_ba,
                      double lambda_d = kJointCoupling);
/// Same, also writing ∂d/∂j_ab and ∂d/∂j_ba.
double joint_distance(std::span<const RigidTransform> relative, const Vec3& j_ab, const Vec3& j_ba,
                      double lambda_d, Vec3* grad_ab, Vec3* grad_ba);

inline double ema_update(double smoothed, double d, double momentum = kEmaMomentum) {
  return (1.0 - momentum) * smoothed + momentum * d;
}

struct CandidatePair {
  int a = 0;
  int b = 0;
  Vec3 j_ab = Vec3::Zero();
  Vec3 j_ba = Vec3::Zero();
  double d_ab = 0.0;
  double d_ba = 0.0;
  double distance = 0.0;  // (d_ab + d_ba) / 2
  double smoothed = 0.0;
  bool degenerate = false;
  int updates = 0;
};

/// Unordered pairs (a < b) with b among the k' nearest of a or vice versa.
std::vector<std::pair<int, int>> candidate_pairs(std::span<const Vec3> superpoints, int k_prime);

/// Joint estimates and EMA-smoothed distances for every candidate pair.
class CandidateTable {
 public:
  CandidateTable() = default;
  explicit CandidateTable(std::vector<std::pair<int, int>> pairs);

  /// Re-solve every pair from the motion of all superpoints and fold the
  /// new distance into the EMA (the first update initializes it).
  /// Co-rigid pairs get the joint at the midpoint of the two superpoints.
  void update(const MotionSequence& motion, std::span<const Vec3> superpoints, const JointSolveOptions& options);

  const std::vector<CandidatePair>& pairs() const { return pairs_; }
  std::vector<CandidatePair>& pairs() { return pairs_; }
  const CandidatePair* find(int a, int b) const;
  bool empty() const { return pairs_.empty(); }

 private:
  std::vector<CandidatePair> pairs_;
  std::map<std::pair<int, int>, std::size_t> index_;
};

class UnionFind {
 public:
  explicit UnionFind(int n);
  int find(int x);
  bool unite(int a, int b);
  int components() const { return components_; }

 private:
  std::vector<int> parent_, rank_;
  int components_;
};

struct Edge {
  int a = 0;
  int b = 0;
  bool operator==(const Edge&) const = default;
};

/// Raised by build_skeleton when the candidate graph has several components.
class DisconnectedError : public Error {
 public:
  DisconnectedError(std::vector<std::vector<int>> components);
  const std::vector<std::vector<int>>& components() const { return components_; }

 private:
  std::vector<std::vector<int>> components_;
};

/// Kruskal over candidates sorted by (smoothed, a, b).
std::vector<Edge> minimum_spanning_edges(int num_nodes, std::span<const CandidatePair> pairs);

/// Node of minimum eccentricity; lowest index on ties.
int select_root(int num_nodes, std::span<const Edge> edges);

struct SkeletonTree {
  std::vector<int> parent;  // parent[root] == root
  std::vector<Vec3> joints; // joint to the parent; unused for the root
  int root = 0;

  std::size_t size() const { return parent.size(); }
  std::vector<Edge> edges() const;  // (child, parent) for every non-root node
  std::vector<std::vector<int>> children() const;
  /// Nodes ordered so every parent precedes its children.
  std::vector<int> topological_order() const;
  /// Root-first ancestor chain of `node`, excluding the root itself.
  std::vector<int> chain(int node) const;
  void validate() const;
};

/// Orient an undirected spanning tree away from `root`.
SkeletonTree orient_tree(int num_nodes, std::span<const Edge> edges, int root);

/// j_k = (j_ab + j_ba) / 2 for the pair matching each tree edge.
void assign_joints(SkeletonTree& tree, const CandidateTable& table);

/// MST + root selection + joint assignment. Throws DisconnectedError.
SkeletonTree build_skeleton(int num_nodes, const CandidateTable& table);

}  // namespace skelsplat
