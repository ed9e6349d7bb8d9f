// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/skeleton_discovery.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

namespace skelsplat {

RigidTransform relative_transform(const RigidTransform& ta, const RigidTransform& tb) {
  return compose(inverse(tb), ta);
}

JointSolution solve_joint(std::span<const RigidTransform> relative, const JointSolveOptions& options) {
  if (relative.empty()) throw Error("solve_joint: need at least one timestamp");
  Mat3 a = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  for (const auto& r : relative) {
    const Mat3 m = Mat3::Identity() - r.rotation;
    a += m.transpose() * m;
    b += m.transpose() * r.translation;
  }
  const Vec3 anchor = options.anchor.value_or(Vec3::Zero());
  JointSolution sol;
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(a);
  const Vec3 lambda = eig.eigenvalues();
  const double lmax = lambda.maxCoeff();
  sol.degenerate = lmax <= options.degenerate_tolerance;
  if (sol.degenerate && options.anchor) {
    sol.joint = anchor;
  } else if (options.relative_rank_tolerance > 0.0 || options.absolute_rank_tolerance > 0.0) {
    const double cut = std::max(options.relative_rank_tolerance * lmax, options.absolute_rank_tolerance);
    const Mat3& v = eig.eigenvectors();
    Vec3 coeff = v.transpose() * anchor;
    const Vec3 vb = v.transpose() * (b + options.damping * anchor);
    for (int k = 0; k < 3; ++k) {
      if (lambda[k] > cut) coeff[k] = vb[k] / (lambda[k] + options.damping);
    }
    sol.joint = v * coeff;
  } else {
    sol.joint = (a + options.damping * Mat3::Identity()).ldlt().solve(b + options.damping * anchor);
  }
  for (const auto& r : relative) {
    sol.residual += (r.translation - (Mat3::Identity() - r.rotation) * sol.joint).squaredNorm();
  }
  return sol;
}

double joint_distance(std::span<const RigidTransform> relative, const Vec3& j_ab, const Vec3& j_ba, double lambda_d) {
  return joint_distance(relative, j_ab, j_ba, lambda_d, nullptr, nullptr);
}

double joint_distance(std::span<const RigidTransform> relative, const Vec3& j_ab, const Vec3& j_ba, double lambda_d,
                      Vec3* grad_ab, Vec3* grad_ba) {
  double d = 0.0;
  Vec3 g = Vec3::Zero();
  for (const auto& r : relative) {
    const Mat3 m = Mat3::Identity() - r.rotation;
    const Vec3 e = r.translation - m * j_ab;
    d += e.squaredNorm();
    g -= 2.0 * m.transpose() * e;
  }
  const Vec3 diff = j_ab - j_ba;
  d += lambda_d * diff.squaredNorm();
  if (grad_ab) *grad_ab = g + 2.0 * lambda_d * diff;
  if (grad_ba) *grad_ba = -2.0 * lambda_d * diff;
  return d;
}

std::vector<std::pair<int, int>> candidate_pairs(std::span<const Vec3> superpoints, int k_prime) {
  const int m = static_cast<int>(superpoints.size());
  std::set<std::pair<int, int>> out;
  if (m < 2) return {};
  const int k = std::min(k_prime + 1, m);  // the nearest of each point is itself
  const auto nb = knn_assign(superpoints, superpoints, k);
  for (int a = 0; a < m; ++a) {
    for (int s = 0; s < k; ++s) {
      const int b = nb[a * k + s];
      if (b != a) out.insert({std::min(a, b), std::max(a, b)});
    }
  }
  return {out.begin(), out.end()};
}

CandidateTable::CandidateTable(std::vector<std::pair<int, int>> pairs) {
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  for (const auto& [a, b] : pairs) {
    if (a == b) throw Error("CandidateTable: pair with identical endpoints");
    CandidatePair p;
    p.a = std::min(a, b);
    p.b = std::max(a, b);
    index_[{p.a, p.b}] = pairs_.size();
    pairs_.push_back(p);
  }
}

const CandidatePair* CandidateTable::find(int a, int b) const {
  const auto it = index_.find({std::min(a, b), std::max(a, b)});
  return it == index_.end() ? nullptr : &pairs_[it->second];
}

void CandidateTable::update(const MotionSequence& motion, std::span<const Vec3> superpoints,
                            const JointSolveOptions& options) {
  std::vector<RigidTransform> rel_ab(motion.size()), rel_ba(motion.size());
  for (auto& p : pairs_) {
    for (std::size_t t = 0; t < motion.size(); ++t) {
      const auto& ta = motion.samples[t].transforms.at(p.a);
      const auto& tb = motion.samples[t].transforms.at(p.b);
      rel_ab[t] = relative_transform(ta, tb);
      rel_ba[t] = relative_transform(tb, ta);
    }
    JointSolveOptions opt = options;
    opt.anchor = 0.5 * (superpoints[p.a] + superpoints[p.b]);
    const JointSolution s_ab = solve_joint(rel_ab, opt);
    const JointSolution s_ba = solve_joint(rel_ba, opt);
    p.degenerate = s_ab.degenerate && s_ba.degenerate;
    p.j_ab = s_ab.joint;
    p.j_ba = s_ba.joint;
    p.d_ab = joint_distance(rel_ab, p.j_ab, p.j_ba);
    p.d_ba = joint_distance(rel_ba, p.j_ba, p.j_ab);
    p.distance = 0.5 * (p.d_ab + p.d_ba);
    p.smoothed = p.updates == 0 ? p.distance : ema_update(p.smoothed, p.distance);
    ++p.updates;
  }
}

UnionFind::UnionFind(int n) : parent_(static_cast<std::size_t>(n)), rank_(static_cast<std::size_t>(n), 0), components_(n) {
  std::iota(parent_.begin(), parent_.end(), 0);
}

int UnionFind::find(int x) {
  while (parent_[x] != x) {
    parent_[x] = parent_[parent_[x]];
    x = parent_[x];
  }
  return x;
}

bool UnionFind::unite(int a, int b) {
  a = find(a);
  b = find(b);
  if (a == b) return false;
  if (rank_[a] < rank_[b]) std::swap(a, b);
  parent_[b] = a;
  if (rank_[a] == rank_[b]) ++rank_[a];
  --components_;
  return true;
}

namespace {

std::string describe_components(const std::vector<std::vector<int>>& comps) {
  std::ostringstream s;
  s << "candidate graph is disconnected (" << comps.size() << " components:";
  for (const auto& c : comps) {
    s << " {";
    for (std::size_t i = 0; i < c.size(); ++i) s << (i ? "," : "") << c[i];
    s << "}";
  }
  s << "); increase K'";
  return s.str();
}

}  // namespace

DisconnectedError::DisconnectedError(std::vector<std::vector<int>> components)
    : Error(describe_components(components)), components_(std::move(components)) {}

std::vector<Edge> minimum_spanning_edges(int num_nodes, std::span<const CandidatePair> pairs) {
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    const auto& p = pairs[x];
    const auto& q = pairs[y];
    return std::tie(p.smoothed, p.a, p.b) < std::tie(q.smoothed, q.a, q.b);
  });
  UnionFind uf(num_nodes);
  std::vector<Edge> edges;
  for (auto i : order) {
    if (uf.unite(pairs[i].a, pairs[i].b)) edges.push_back({pairs[i].a, pairs[i].b});
  }
  if (uf.components() > 1) {
    std::map<int, std::vector<int>> groups;
    for (int v = 0; v < num_nodes; ++v) groups[uf.find(v)].push_back(v);
    std::vector<std::vector<int>> comps;
    for (auto& [root, members] : groups) comps.push_back(std::move(members));
    std::sort(comps.begin(), comps.end());
    throw DisconnectedError(std::move(comps));
  }
  return edges;
}

namespace {

std::vector<std::vector<int>> adjacency(int n, std::span<const Edge> edges) {
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (const auto& e : edges) {
    adj.at(e.a).push_back(e.b);
    adj.at(e.b).push_back(e.a);
  }
  for (auto& a : adj) std::sort(a.begin(), a.end());
  return adj;
}

std::vector<int> bfs_depths(const std::vector<std::vector<int>>& adj, int src) {
  std::vector<int> depth(adj.size(), -1);
  std::queue<int> q;
  depth[src] = 0;
  q.push(src);
  while (!q.empty()) {
    const int v = q.front();
    q.pop();
    for (int u : adj[v]) {
      if (depth[u] < 0) {
        depth[u] = depth[v] + 1;
        q.push(u);
      }
    }
  }
  return depth;
}

}  // namespace

int select_root(int num_nodes, std::span<const Edge> edges) {
  if (num_nodes < 1) throw Error("select_root: empty tree");
  const auto adj = adjacency(num_nodes, edges);
  // Tree center: the middle of a longest path (two BFS sweeps).
  auto far = [&](int src) {
    const auto d = bfs_depths(adj, src);
    if (std::find(d.begin(), d.end(), -1) != d.end()) throw Error("select_root: graph is not connected");
    return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
  };
  const int u = far(0);
  const auto du = bfs_depths(adj, u);
  const int v = static_cast<int>(std::max_element(du.begin(), du.end()) - du.begin());
  const auto dv = bfs_depths(adj, v);
  const int diameter = du[v];
  int best = -1;
  for (int x = 0; x < num_nodes; ++x) {
    // On a longest path the eccentricity is max(du, dv); the centers sit at
    // ceil(diameter / 2).
    if (du[x] + dv[x] == diameter && std::max(du[x], dv[x]) == (diameter + 1) / 2) {
      best = x;
      break;
    }
  }
  return best;
}

std::vector<Edge> SkeletonTree::edges() const {
  std::vector<Edge> out;
  for (int v = 0; v < static_cast<int>(parent.size()); ++v) {
    if (v != root) out.push_back({v, parent[v]});
  }
  return out;
}

std::vector<std::vector<int>> SkeletonTree::children() const {
  std::vector<std::vector<int>> out(parent.size());
  for (int v = 0; v < static_cast<int>(parent.size()); ++v) {
    if (v != root) out[parent[v]].push_back(v);
  }
  return out;
}

std::vector<int> SkeletonTree::topological_order() const {
  const auto ch = children();
  std::vector<int> order;
  order.reserve(parent.size());
  order.push_back(root);
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (int c : ch[order[i]]) order.push_back(c);
  }
  if (order.size() != parent.size()) throw Error("SkeletonTree: not every node is reachable from the root");
  return order;
}

std::vector<int> SkeletonTree::chain(int node) const {
  std::vector<int> out;
  std::size_t guard = 0;
  while (node != root) {
    out.push_back(node);
    node = parent.at(node);
    if (++guard > parent.size()) throw Error("SkeletonTree: cycle detected");
  }
  std::reverse(out.begin(), out.end());
  return out;
}

void SkeletonTree::validate() const {
  const auto n = static_cast<int>(parent.size());
  if (n < 1) throw Error("SkeletonTree: empty");
  if (root < 0 || root >= n || parent[root] != root) throw Error("SkeletonTree: invalid root");
  if (joints.size() != parent.size()) throw Error("SkeletonTree: joint count mismatch");
  UnionFind uf(n);
  for (int v = 0; v < n; ++v) {
    if (v == root) continue;
    if (parent[v] < 0 || parent[v] >= n || parent[v] == v) throw Error("SkeletonTree: invalid parent index");
    if (!uf.unite(v, parent[v])) throw Error("SkeletonTree: cycle detected");
  }
  if (uf.components() != 1) throw Error("SkeletonTree: not connected");
}

SkeletonTree orient_tree(int num_nodes, std::span<const Edge> edges, int root) {
  if (static_cast<int>(edges.size()) != num_nodes - 1) throw Error("orient_tree: a tree needs exactly M-1 edges");
  const auto adj = adjacency(num_nodes, edges);
  SkeletonTree tree;
  tree.parent.assign(static_cast<std::size_t>(num_nodes), -1);
  tree.joints.assign(static_cast<std::size_t>(num_nodes), Vec3::Zero());
  tree.root = root;
  tree.parent[root] = root;
  std::queue<int> q;
  q.push(root);
  while (!q.empty()) {
    const int v = q.front();
    q.pop();
    for (int u : adj[v]) {
      if (tree.parent[u] < 0) {
        tree.parent[u] = v;
        q.push(u);
      }
    }
  }
  tree.validate();
  return tree;
}

void assign_joints(SkeletonTree& tree, const CandidateTable& table) {
  for (const auto& e : tree.edges()) {
    const CandidatePair* p = table.find(e.a, e.b);
    if (!p) throw Error("assign_joints: tree edge is not a candidate pair");
    tree.joints[e.a] = 0.5 * (p->j_ab + p->j_ba);
  }
}

SkeletonTree build_skeleton(int num_nodes, const CandidateTable& table) {
  const auto edges = minimum_spanning_edges(num_nodes, table.pairs());
  SkeletonTree tree = orient_tree(num_nodes, edges, select_root(num_nodes, edges));
  assign_joints(tree, table);
  return tree;
}

}  // namespace skelsplat
