// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Cholesky>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace skelsplat {

namespace {

using json = nlohmann::json;

std::span<double> flat(std::vector<Vec3>& v) { return {v.data()->data(), v.size() * 3}; }
std::span<const double> flat(const std::vector<Vec3>& v) { return {v.data()->data(), v.size() * 3}; }
std::span<double> flat(std::vector<Vec4>& v) { return {v.data()->data(), v.size() * 4}; }
std::span<const double> flat(const std::vector<Vec4>& v) { return {v.data()->data(), v.size() * 4}; }

AdamConfig adam_config(const LrSchedule& s, std::int64_t total) {
  AdamConfig c;
  c.schedule = {s.initial, s.final, std::max<std::int64_t>(total, 1)};
  return c;
}

void emit(const RunHooks& hooks, const json& line) {
  if (hooks.log) hooks.log(line.dump());
}

bool budget_spent(const RunHooks& hooks, std::int64_t ran) { return hooks.step_budget && ran >= *hooks.step_budget; }

void maybe_checkpoint(const RunHooks& hooks, const ProjectState& state) {
  if (hooks.checkpoint && hooks.checkpoint_period > 0 && state.step % hooks.checkpoint_period == 0)
    hooks.checkpoint(state);
}

std::vector<std::size_t> sample_times(std::mt19937_64& rng, std::size_t count, int batch) {
  std::uniform_int_distribution<std::size_t> pick(0, count - 1);
  std::vector<std::size_t> out(static_cast<std::size_t>(std::max(batch, 1)));
  for (auto& t : out) t = pick(rng);
  return out;
}

void check_finite(double loss, const char* stage, std::int64_t step) {
  if (!std::isfinite(loss))
    throw Error(std::string(stage) + " stage: loss is not finite at step " + std::to_string(step));
}

JointSolveOptions joint_options(const StageConfig& config) {
  JointSolveOptions o;
  o.relative_rank_tolerance = config.joint_rank_tolerance;
  return o;
}

// --- dynamic stage helpers -------------------------------------------------------

void reset_dynamic_optimizers(ProjectState& s, const StageConfig& c) {
  s.optimizers.clear();
  s.optimizers.emplace_back(adam_config(c.field_lr, c.dynamic_steps), block_sizes(s.field.net().parameter_blocks()));
  s.optimizers.emplace_back(adam_config(LrSchedule::constant(c.superpoint_lr), 1),
                            std::vector<std::size_t>{s.superpoints.size() * 3});
  s.optimizers.emplace_back(adam_config(LrSchedule::constant(c.logit_lr), 1),
                            std::vector<std::size_t>{s.weights.logits.size()});
}

void relabel(ProjectState& s, const GroundTruth& truth) {
  s.labels = label_superpoints(s.weights, s.superpoints, truth);
}

void refresh_skeleton(ProjectState& s, const StageConfig& c, const GroundTruth& truth) {
  if (s.table.empty()) s.table = CandidateTable(connected_candidates(s.superpoints, c.candidate_neighbors));
  const MotionSequence motion = cache_motion(s.field, s.superpoints, truth.times);
  s.table.update(motion, s.superpoints, joint_options(c));
  s.joint_edges = minimum_spanning_edges(static_cast<int>(s.superpoints.size()), s.table.pairs());
}

// Squared norm of dL_fit/dμ_i averaged over the training timestamps.
std::vector<double> position_grad_norms(const ProjectState& s, const GroundTruth& truth) {
  std::vector<double> out(s.gaussians.size(), 0.0);
  const double inv_t = 1.0 / static_cast<double>(truth.times.size());
  std::vector<Vec3> g;
  for (std::size_t f = 0; f < truth.times.size(); ++f) {
    const MotionSample m = s.field.eval_all(s.superpoints, truth.times[f]);
    const auto pred = lbs_positions(s.gaussians.positions, m, s.weights);
    g.assign(pred.size(), Vec3::Zero());
    l_traj_positions(pred, truth.trajectories[f], g);
    for (std::size_t i = 0; i < g.size(); ++i) out[i] += inv_t * g[i].squaredNorm();
  }
  return out;
}

void log_events(const RunHooks& hooks, const ControlReport& r, std::int64_t step) {
  for (const ControlEvent& e : r.events) {
    emit(hooks, {{"stage", "dynamic"},
                 {"step", step},
                 {"event", e.event},
                 {"index", e.index},
                 {"metric", e.metric},
                 {"threshold", e.threshold}});
  }
}

bool control_events(ProjectState& s, const StageConfig& c, const GroundTruth& truth, const RunHooks& hooks) {
  const std::int64_t step = s.step;
  if (c.control_period <= 0 || step == 0 || step % c.control_period != 0) return false;
  ControlThresholds th = c.thresholds;
  th.neighbors = c.skinning_neighbors;
  th.seed = c.seed + static_cast<std::uint64_t>(step);
  bool changed = false;
  std::vector<Vec3> gaussians = s.gaussians.positions;
  if (c.densify_window.contains(step)) {
    const ControlReport p = prune({s.superpoints, s.weights, gaussians}, th);
    log_events(hooks, p, step);
    changed |= p.changed();
    const auto g = position_grad_norms(s, truth);
    const ControlReport d = densify({s.superpoints, s.weights, gaussians}, th, g);
    log_events(hooks, d, step);
    changed |= d.changed();
  }
  if (c.merge_window.contains(step)) {
    const MotionSequence motion = cache_motion(s.field, s.superpoints, truth.times);
    const ControlReport r = merge({s.superpoints, s.weights, gaussians}, th, motion);
    log_events(hooks, r, step);
    changed |= r.changed();
    const ControlReport p = prune({s.superpoints, s.weights, gaussians}, th);
    log_events(hooks, p, step);
    changed |= p.changed();
  }
  if (changed) {
    s.table = CandidateTable(connected_candidates(s.superpoints, c.candidate_neighbors));
    s.joint_edges.clear();
    relabel(s, truth);
    // Field moments survive; superpoint and logit moments restart.
    s.optimizers[1].resize({s.superpoints.size() * 3});
    s.optimizers[2].resize({s.weights.logits.size()});
    emit(hooks, {{"stage", "dynamic"}, {"step", step}, {"event", "topology"}, {"superpoints", s.superpoints.size()}});
  }
  return changed;
}

// --- discovery helpers -----------------------------------------------------------

/// Least-squares fit of Ψ's output layer so its initial rotations match the
/// cached relative rotations of every edge.
void fit_psi_head(JointField& psi, const SkeletonTree& tree, const MotionSequence& cached) {
  std::vector<int> nodes;
  for (int v : tree.topological_order())
    if (v != tree.root) nodes.push_back(v);
  if (nodes.empty() || psi.net().num_layers() < 2) return;
  std::vector<VecX> inputs;
  std::vector<Vec4> targets;
  for (std::size_t f = 0; f < cached.size(); ++f) {
    for (int v : nodes) {
      const Mat3& rp = cached.samples[f].transforms[static_cast<std::size_t>(tree.parent[v])].rotation;
      const Mat3& rc = cached.samples[f].transforms[static_cast<std::size_t>(v)].rotation;
      const Mat3 rel = rp.transpose() * rc;
      UnitQuaternion q;
      try {
        q = matrix_to_quat(rel).canonical();
      } catch (const Error&) {
        continue;
      }
      if (q.w < 1e-3) continue;
      inputs.push_back(JointField::encode(tree.joints[static_cast<std::size_t>(v)], cached.times[f]));
      targets.emplace_back(0.0, q.x / q.w, q.y / q.w, q.z / q.w);
    }
  }
  if (inputs.empty()) return;
  MatX in(JointField::input_size(), static_cast<Eigen::Index>(inputs.size()));
  for (std::size_t q = 0; q < inputs.size(); ++q) in.col(static_cast<Eigen::Index>(q)) = inputs[q];
  MlpCache cache;
  psi.net().forward(in, &cache);
  const MatX& h = cache.inputs.back();
  const Eigen::Index width = h.rows(), samples = h.cols();
  MatX ha(width + 1, samples);
  ha.topRows(width) = h;
  ha.row(width).setOnes();
  MatX y(4, samples);
  for (Eigen::Index q = 0; q < samples; ++q) y.col(q) = targets[static_cast<std::size_t>(q)];
  MatX gram = ha * ha.transpose();
  const double ridge = 1e-10 * std::max(gram.trace() / static_cast<double>(width + 1), 1.0);
  gram.diagonal().array() += ridge;
  const MatX w = gram.ldlt().solve(ha * y.transpose()).transpose();  // 4 x (width + 1)
  Linear& head = psi.net().layers().back();
  head.weight = w.leftCols(width);
  head.bias = w.col(width);
}

std::vector<std::span<double>> discovery_blocks(ProjectState& s) {
  auto blocks = s.psi.net().parameter_blocks();
  blocks.push_back(flat(s.tree.joints));
  blocks.push_back(flat(s.psi.root_quats()));
  blocks.push_back(flat(s.psi.root_translations()));
  return blocks;
}

void snapshot_discovery(ProjectState& s, double loss) {
  s.best_loss = loss;
  s.best_psi = s.psi.net();
  s.best_joints = s.tree.joints;
  s.best_root_quats = s.psi.root_quats();
  s.best_root_translations = s.psi.root_translations();
}

void restore_discovery(ProjectState& s) {
  s.psi.net() = *s.best_psi;
  s.tree.joints = s.best_joints;
  s.psi.root_quats() = s.best_root_quats;
  s.psi.root_translations() = s.best_root_translations;
}

void snapshot_kinematic(ProjectState& s, double loss) {
  snapshot_discovery(s, loss);
  s.best_logits = s.weights.logits;
  s.best_positions = s.gaussians.positions;
}

void restore_kinematic(ProjectState& s) {
  restore_discovery(s);
  s.weights.logits = s.best_logits;
  s.gaussians.positions = s.best_positions;
}

void clear_snapshot(ProjectState& s) {
  s.best_loss = 0.0;
  s.best_psi.reset();
  s.best_joints.clear();
  s.best_root_quats.clear();
  s.best_root_translations.clear();
  s.best_logits.clear();
  s.best_positions.clear();
}

// --- kinematic helpers -----------------------------------------------------------

std::vector<std::span<double>> kinematic_psi_blocks(ProjectState& s) { return discovery_blocks(s); }

void reset_kinematic_optimizers(ProjectState& s, const StageConfig& c) {
  s.optimizers.clear();
  s.optimizers.emplace_back(adam_config(c.kinematic_lr, c.kinematic_steps), block_sizes(kinematic_psi_blocks(s)));
  s.optimizers.emplace_back(adam_config(LrSchedule::constant(c.kinematic_logit_lr), 1),
                            std::vector<std::size_t>{s.weights.logits.size()});
  s.optimizers.emplace_back(adam_config(LrSchedule::constant(c.canonical_lr), 1),
                            std::vector<std::size_t>{s.gaussians.size() * 3});
}

struct FrozenShape {
  std::size_t gaussians, superpoints;
  std::vector<int> parent;
};

}  // namespace

// --- config ------------------------------------------------------------------------

void StageConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("StageConfig: " + m); };
  if (dynamic_steps < 0 || discovery_steps < 0 || kinematic_steps < 0) fail("step counts must be non-negative");
  if (initial_superpoints < 2) fail("initial_superpoints must be at least 2");
  if (skinning_neighbors < 1 || candidate_neighbors < 1 || gaussian_neighbors < 1) fail("neighbor counts must be positive");
  if (batch_timestamps < 1) fail("batch_timestamps must be positive");
  if (skeleton_refresh < 1 || control_period < 1 || log_period < 1) fail("periods must be positive");
  if (joint_start < 0 || joint_start > dynamic_steps) fail("joint_start lies outside the dynamic stage");
  for (const auto* w : {&densify_window, &merge_window}) {
    if (w->begin < 0 || w->end < w->begin || w->end > dynamic_steps) fail("control window lies outside the dynamic stage");
  }
  if (field_width < 1 || field_depth < 1 || joint_field_width < 1 || joint_field_depth < 1) fail("network sizes must be positive");
  for (double lr : {field_lr.initial, field_lr.final, superpoint_lr, logit_lr, discovery_lr, kinematic_lr.initial,
                    kinematic_lr.final, kinematic_logit_lr, canonical_lr}) {
    if (!std::isfinite(lr) || lr < 0.0) fail("learning rates must be finite and non-negative");
  }
  if (!std::isfinite(joint_rank_tolerance) || joint_rank_tolerance < 0.0) fail("joint_rank_tolerance must be non-negative");
  loss.validate();
  thresholds.validate();
}

StageConfig StageConfig::scaled(double factor) const {
  auto sc = [factor](std::int64_t v) { return v <= 0 ? v : std::max<std::int64_t>(1, std::llround(v * factor)); };
  StageConfig c = *this;
  c.dynamic_steps = sc(dynamic_steps);
  c.discovery_steps = sc(discovery_steps);
  c.kinematic_steps = sc(kinematic_steps);
  c.joint_start = std::min(sc(joint_start), c.dynamic_steps);
  c.control_period = sc(control_period);
  c.skeleton_refresh = sc(skeleton_refresh);
  c.log_period = sc(log_period);
  c.densify_window = {std::min(sc(densify_window.begin), c.dynamic_steps), std::min(sc(densify_window.end), c.dynamic_steps)};
  c.merge_window = {std::min(sc(merge_window.begin), c.dynamic_steps), std::min(sc(merge_window.end), c.dynamic_steps)};
  return c;
}

namespace {

json lr_json(const LrSchedule& s) { return {{"initial", s.initial}, {"final", s.final}}; }

json config_json(const StageConfig& c) {
  const LossWeights& l = c.loss;
  const ControlThresholds& t = c.thresholds;
  return {{"dynamic_steps", c.dynamic_steps},
          {"discovery_steps", c.discovery_steps},
          {"kinematic_steps", c.kinematic_steps},
          {"initial_superpoints", c.initial_superpoints},
          {"skinning_neighbors", c.skinning_neighbors},
          {"candidate_neighbors", c.candidate_neighbors},
          {"gaussian_neighbors", c.gaussian_neighbors},
          {"batch_timestamps", c.batch_timestamps},
          {"joint_start", c.joint_start},
          {"skeleton_refresh", c.skeleton_refresh},
          {"control_period", c.control_period},
          {"densify_window", {c.densify_window.begin, c.densify_window.end}},
          {"merge_window", {c.merge_window.begin, c.merge_window.end}},
          {"field_width", c.field_width},
          {"field_depth", c.field_depth},
          {"joint_field_width", c.joint_field_width},
          {"joint_field_depth", c.joint_field_depth},
          {"field_lr", lr_json(c.field_lr)},
          {"superpoint_lr", c.superpoint_lr},
          {"logit_lr", c.logit_lr},
          {"discovery_lr", c.discovery_lr},
          {"kinematic_lr", lr_json(c.kinematic_lr)},
          {"kinematic_logit_lr", c.kinematic_logit_lr},
          {"canonical_lr", c.canonical_lr},
          {"joint_rank_tolerance", c.joint_rank_tolerance},
          {"log_period", c.log_period},
          {"seed", c.seed},
          {"loss",
           {{"fit", l.fit},
            {"joint", l.joint},
            {"arap", l.arap},
            {"smooth", l.smooth},
            {"sparse", l.sparse},
            {"ssim_mix", l.ssim_mix},
            {"discovery_transform", l.discovery_transform},
            {"discovery_probe", l.discovery_probe}}},
          {"thresholds",
           {{"prune", t.prune},
            {"grad", t.grad},
            {"merge", t.merge},
            {"clone", t.clone},
            {"max_superpoints", t.max_superpoints},
            {"min_superpoints", t.min_superpoints},
            {"merge_neighbors", t.merge_neighbors}}}};
}

class ConfigReader {
 public:
  ConfigReader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw Error("config: " + where() + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.push_back(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    const std::string field = child(key);
    if constexpr (std::is_same_v<T, double>) {
      if (!it->is_number()) throw Error("config: " + field + " must be a number");
      out = it->get<double>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!it->is_number_unsigned()) throw Error("config: " + field + " must be a non-negative integer");
      out = it->get<std::uint64_t>();
    } else {
      if (!it->is_number_integer()) throw Error("config: " + field + " must be an integer");
      out = it->get<T>();
    }
  }
  void read(const char* key, StepWindow& w) {
    seen_.push_back(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number_integer() || !(*it)[1].is_number_integer())
      throw Error("config: " + child(key) + " must be [begin, end]");
    w = {(*it)[0].get<std::int64_t>(), (*it)[1].get<std::int64_t>()};
  }
  void read(const char* key, LrSchedule& s) {
    seen_.push_back(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    ConfigReader r(*it, child(key));
    r.read("initial", s.initial);
    r.read("final", s.final);
    r.finish();
  }
  const json* object(const char* key) {
    seen_.push_back(key);
    auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }
  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        throw Error("config: unknown field " + child(it.key()));
    }
  }

 private:
  std::string where() const { return path_.empty() ? "document" : path_; }
  const json& node_;
  std::string path_;
  std::vector<std::string> seen_;
};

}  // namespace

std::string config_to_json(const StageConfig& config) { return config_json(config).dump(2); }

StageConfig config_from_json(std::string_view text, const std::string& root) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw Error(std::string("config: ") + e.what());
  }
  StageConfig c;
  ConfigReader r(doc, root);
  r.read("dynamic_steps", c.dynamic_steps);
  r.read("discovery_steps", c.discovery_steps);
  r.read("kinematic_steps", c.kinematic_steps);
  r.read("initial_superpoints", c.initial_superpoints);
  r.read("skinning_neighbors", c.skinning_neighbors);
  r.read("candidate_neighbors", c.candidate_neighbors);
  r.read("gaussian_neighbors", c.gaussian_neighbors);
  r.read("batch_timestamps", c.batch_timestamps);
  r.read("joint_start", c.joint_start);
  r.read("skeleton_refresh", c.skeleton_refresh);
  r.read("control_period", c.control_period);
  r.read("densify_window", c.densify_window);
  r.read("merge_window", c.merge_window);
  r.read("field_width", c.field_width);
  r.read("field_depth", c.field_depth);
  r.read("joint_field_width", c.joint_field_width);
  r.read("joint_field_depth", c.joint_field_depth);
  r.read("field_lr", c.field_lr);
  r.read("superpoint_lr", c.superpoint_lr);
  r.read("logit_lr", c.logit_lr);
  r.read("discovery_lr", c.discovery_lr);
  r.read("kinematic_lr", c.kinematic_lr);
  r.read("kinematic_logit_lr", c.kinematic_logit_lr);
  r.read("canonical_lr", c.canonical_lr);
  r.read("joint_rank_tolerance", c.joint_rank_tolerance);
  r.read("log_period", c.log_period);
  r.read("seed", c.seed);
  if (const json* l = r.object("loss")) {
    ConfigReader lr(*l, r.child("loss"));
    lr.read("fit", c.loss.fit);
    lr.read("joint", c.loss.joint);
    lr.read("arap", c.loss.arap);
    lr.read("smooth", c.loss.smooth);
    lr.read("sparse", c.loss.sparse);
    lr.read("ssim_mix", c.loss.ssim_mix);
    lr.read("discovery_transform", c.loss.discovery_transform);
    lr.read("discovery_probe", c.loss.discovery_probe);
    lr.finish();
  }
  if (const json* t = r.object("thresholds")) {
    ConfigReader tr(*t, r.child("thresholds"));
    tr.read("prune", c.thresholds.prune);
    tr.read("grad", c.thresholds.grad);
    tr.read("merge", c.thresholds.merge);
    tr.read("clone", c.thresholds.clone);
    tr.read("max_superpoints", c.thresholds.max_superpoints);
    tr.read("min_superpoints", c.thresholds.min_superpoints);
    tr.read("merge_neighbors", c.thresholds.merge_neighbors);
    tr.finish();
  }
  r.finish();
  c.validate();
  return c;
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Dynamic: return "dynamic";
    case Stage::Discovery: return "discovery";
    case Stage::Kinematic: return "kinematic";
    case Stage::Done: return "done";
  }
  return "unknown";
}

void ProjectState::validate() const {
  gaussians.check_consistent();
  weights.validate(gaussians.size(), superpoints.size());
  if (!labels.empty() && labels.size() != superpoints.size()) throw Error("ProjectState: labels do not match superpoints");
  if (stage >= Stage::Discovery && tree.size() != superpoints.size())
    throw Error("ProjectState: skeleton does not match superpoints");
}

// --- shared helpers ------------------------------------------------------------

MotionSequence cache_motion(const DeformField& field, std::span<const Vec3> superpoints, std::span<const double> times) {
  MotionSequence seq;
  seq.times.assign(times.begin(), times.end());
  for (double t : times) seq.samples.push_back(field.eval_all(superpoints, t));
  return seq;
}

std::vector<std::pair<int, int>> connected_candidates(std::span<const Vec3> superpoints, int k_prime) {
  auto pairs = candidate_pairs(superpoints, k_prime);
  const int m = static_cast<int>(superpoints.size());
  // Prim's algorithm on Euclidean distance, lowest index on ties.
  std::vector<bool> in(static_cast<std::size_t>(m), false);
  std::vector<double> best(static_cast<std::size_t>(m), std::numeric_limits<double>::infinity());
  std::vector<int> from(static_cast<std::size_t>(m), -1);
  if (m > 0) best[0] = 0.0;
  for (int it = 0; it < m; ++it) {
    int u = -1;
    for (int v = 0; v < m; ++v)
      if (!in[v] && (u < 0 || best[v] < best[u])) u = v;
    in[u] = true;
    if (from[u] >= 0) pairs.emplace_back(std::min(u, from[u]), std::max(u, from[u]));
    for (int v = 0; v < m; ++v) {
      if (in[v]) continue;
      const double d = (superpoints[u] - superpoints[v]).squaredNorm();
      if (d < best[v]) {
        best[v] = d;
        from[v] = u;
      }
    }
  }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  return pairs;
}

TrajectoryTargets make_targets(const GroundTruth& truth, std::span<const int> labels) {
  TrajectoryTargets t;
  t.times = truth.times;
  t.positions = truth.trajectories;
  if (!labels.empty()) {
    for (const MotionSample& links : truth.link_motion) {
      MotionSample s;
      s.transforms.reserve(labels.size());
      for (int l : labels) s.transforms.push_back(links.transforms.at(static_cast<std::size_t>(l)));
      t.superpoints.push_back(std::move(s));
    }
  }
  return t;
}

ProjectState initialize_state(const GroundTruth& truth, const StageConfig& config) {
  config.validate();
  ProjectState s;
  s.gaussians = truth.gaussians;
  const int m = std::min<int>(config.initial_superpoints, static_cast<int>(truth.gaussians.size()));
  if (m < 2) throw Error("initialize_state: need at least two Gaussians");
  for (int idx : farthest_point_sampling(truth.gaussians.positions, m, config.seed))
    s.superpoints.push_back(truth.gaussians.positions[static_cast<std::size_t>(idx)]);
  s.weights = make_skinning(s.gaussians.positions, s.superpoints, config.skinning_neighbors);
  s.field = DeformField(config.field_width, config.field_depth, config.seed + 1);
  s.rng.seed(config.seed + 2);
  relabel(s, truth);
  return s;
}

// --- stages ----------------------------------------------------------------------

bool run_dynamic_stage(ProjectState& s, const StageConfig& c, const GroundTruth& truth, const RunHooks& hooks) {
  if (s.stage != Stage::Dynamic) return true;
  c.validate();
  if (truth.gaussians.size() != s.gaussians.size()) throw Error("dynamic stage: state and ground truth disagree");
  const NeighborGraph ggraph = neighbor_graph(truth.gaussians.positions, c.gaussian_neighbors);
  if (s.optimizers.empty()) reset_dynamic_optimizers(s, c);
  if (s.labels.size() != s.superpoints.size()) relabel(s, truth);
  TrajectoryTargets targets = make_targets(truth, s.labels);

  std::int64_t ran = 0;
  while (s.step < c.dynamic_steps) {
    if (budget_spent(hooks, ran)) return false;
    if (control_events(s, c, truth, hooks)) {
      targets = make_targets(truth, s.labels);
      if (s.step >= c.joint_start) refresh_skeleton(s, c, truth);
    }
    if (s.step >= c.joint_start && (s.step - c.joint_start) % c.skeleton_refresh == 0) {
      refresh_skeleton(s, c, truth);
      const auto before = s.labels;
      relabel(s, truth);
      if (s.labels != before) targets = make_targets(truth, s.labels);
    }
    const auto idx = sample_times(s.rng, truth.times.size(), c.batch_timestamps);
    const NeighborGraph sgraph = neighbor_graph(s.superpoints, c.candidate_neighbors);
    DynamicTerms terms;
    terms.superpoint_graph = &sgraph;
    terms.gaussian_graph = &ggraph;
    if (s.step >= c.joint_start && !s.joint_edges.empty()) {
      terms.pairs = s.table.pairs();
      terms.tree_edges = s.joint_edges;
    }
    DynamicGradients g;
    const LossComponents comp = dynamic_objective(s.field, s.superpoints, s.weights, s.gaussians.positions, targets,
                                                  idx, terms, c.loss, &g);
    const double total = total_dynamic_loss(comp, c.loss);
    check_finite(total, "dynamic", s.step);

    auto fblocks = s.field.net().parameter_blocks();
    const auto fgrads = Mlp::gradient_blocks(g.field);
    s.optimizers[0].step(fblocks, fgrads);
    const std::span<double> sp[] = {flat(s.superpoints)};
    const std::span<const double> sg[] = {flat(g.superpoints)};
    s.optimizers[1].step(sp, sg);
    const std::span<double> lp[] = {s.weights.logits};
    const std::span<const double> lg[] = {g.logits};
    s.optimizers[2].step(lp, lg);

    s.last_loss = total;
    ++s.step;
    ++ran;
    if (s.step % c.log_period == 0 || s.step == c.dynamic_steps) {
      emit(hooks, {{"stage", "dynamic"},
                   {"step", s.step},
                   {"loss", total},
                   {"fit", comp.fit},
                   {"joint", comp.joint},
                   {"arap", comp.arap},
                   {"smooth", comp.smooth},
                   {"sparse", comp.sparse},
                   {"superpoints", s.superpoints.size()}});
    }
    maybe_checkpoint(hooks, s);
  }

  // Freeze Γ from a final refresh and cache Φ for discovery.
  refresh_skeleton(s, c, truth);
  relabel(s, truth);
  s.tree = build_skeleton(static_cast<int>(s.superpoints.size()), s.table);
  s.cached = cache_motion(s.field, s.superpoints, truth.times);
  // The reported loss is the full-sequence objective, not the last batch.
  {
    const NeighborGraph sgraph = neighbor_graph(s.superpoints, c.candidate_neighbors);
    DynamicTerms terms;
    terms.superpoint_graph = &sgraph;
    terms.gaussian_graph = &ggraph;
    terms.pairs = s.table.pairs();
    terms.tree_edges = s.joint_edges;
    const auto comp = dynamic_objective(s.field, s.superpoints, s.weights, s.gaussians.positions,
                                        make_targets(truth, s.labels), {}, terms, c.loss);
    s.stage_loss[0] = total_dynamic_loss(comp, c.loss);
    emit(hooks, {{"stage", "dynamic"},
                 {"event", "done"},
                 {"loss", s.stage_loss[0]},
                 {"fit", comp.fit},
                 {"joint", comp.joint},
                 {"superpoints", s.superpoints.size()}});
  }
  s.stage = Stage::Discovery;
  s.step = 0;
  s.optimizers.clear();
  return true;
}

bool run_discovery_stage(ProjectState& s, const StageConfig& c, const RunHooks& hooks) {
  if (s.stage == Stage::Dynamic) throw Error("discovery stage: missing skeleton (run the dynamic stage first)");
  if (s.stage != Stage::Discovery) return true;
  c.validate();
  if (s.tree.size() != s.superpoints.size() || s.cached.size() == 0)
    throw Error("discovery stage: missing skeleton");
  if (s.optimizers.empty()) {
    s.psi = JointField(c.joint_field_width, c.joint_field_depth, c.seed + 3, s.cached.times);
    for (std::size_t f = 0; f < s.cached.size(); ++f)
      s.psi.set_root(f, s.cached.samples[f].transforms[static_cast<std::size_t>(s.tree.root)]);
    fit_psi_head(s.psi, s.tree, s.cached);
    s.probes = make_probes(s.superpoints, c.seed + 4);
    s.optimizers.emplace_back(adam_config(LrSchedule::constant(c.discovery_lr), 1), block_sizes(discovery_blocks(s)));
    snapshot_discovery(s, discovery_objective(s.psi, s.tree, s.cached, s.probes, c.loss));
    emit(hooks, {{"stage", "discovery"}, {"step", 0}, {"loss", s.best_loss}});
  }

  std::int64_t ran = 0;
  while (s.step < c.discovery_steps) {
    if (budget_spent(hooks, ran)) return false;
    JointFieldGradients g;
    const double loss = discovery_objective(s.psi, s.tree, s.cached, s.probes, c.loss, &g);
    check_finite(loss, "discovery", s.step);
    if (loss < s.best_loss) snapshot_discovery(s, loss);
    auto blocks = discovery_blocks(s);
    auto grads = Mlp::gradient_blocks(g.field);
    grads.push_back(flat(g.joints));
    grads.push_back(flat(g.root_quats));
    grads.push_back(flat(g.root_translations));
    s.optimizers[0].step(blocks, grads);
    s.last_loss = loss;
    ++s.step;
    ++ran;
    if (s.step % c.log_period == 0 || s.step == c.discovery_steps)
      emit(hooks, {{"stage", "discovery"}, {"step", s.step}, {"loss", loss}, {"best", s.best_loss}});
    maybe_checkpoint(hooks, s);
  }

  const double final_loss = discovery_objective(s.psi, s.tree, s.cached, s.probes, c.loss);
  if (final_loss < s.best_loss) snapshot_discovery(s, final_loss);
  restore_discovery(s);
  s.stage_loss[1] = s.best_loss;
  emit(hooks, {{"stage", "discovery"}, {"event", "done"}, {"loss", s.best_loss}});
  clear_snapshot(s);
  s.stage = Stage::Kinematic;
  s.step = 0;
  s.optimizers.clear();
  return true;
}

bool run_kinematic_stage(ProjectState& s, const StageConfig& c, const GroundTruth& truth, const RunHooks& hooks) {
  if (s.stage == Stage::Dynamic || s.stage == Stage::Discovery)
    throw Error("kinematic stage: skeleton discovery has not finished");
  if (s.stage != Stage::Kinematic) return true;
  c.validate();
  if (s.psi.times().size() != truth.times.size()) throw Error("kinematic stage: joint field timestamps do not match");
  const NeighborGraph ggraph = neighbor_graph(truth.gaussians.positions, c.gaussian_neighbors);
  const TrajectoryTargets targets = make_targets(truth, s.labels);
  auto full_loss = [&] {
    return total_dynamic_loss(
        kinematic_objective(s.psi, s.tree, s.weights, s.gaussians.positions, targets, {}, &ggraph, c.loss), c.loss);
  };
  if (s.optimizers.empty()) {
    reset_kinematic_optimizers(s, c);
    snapshot_kinematic(s, full_loss());
    emit(hooks, {{"stage", "kinematic"}, {"step", 0}, {"loss", s.best_loss}});
  }
  const FrozenShape frozen{s.gaussians.size(), s.superpoints.size(), s.tree.parent};

  std::int64_t ran = 0;
  LossComponents comp;
  while (s.step < c.kinematic_steps) {
    if (budget_spent(hooks, ran)) return false;
    const auto idx = sample_times(s.rng, truth.times.size(), c.batch_timestamps);
    KinematicGradients g;
    comp = kinematic_objective(s.psi, s.tree, s.weights, s.gaussians.positions, targets, idx, &ggraph, c.loss, &g);
    const double total = total_dynamic_loss(comp, c.loss);
    check_finite(total, "kinematic", s.step);

    auto blocks = kinematic_psi_blocks(s);
    auto grads = Mlp::gradient_blocks(g.kinematic.field);
    grads.push_back(flat(g.kinematic.joints));
    grads.push_back(flat(g.kinematic.root_quats));
    grads.push_back(flat(g.kinematic.root_translations));
    s.optimizers[0].step(blocks, grads);
    const std::span<double> lp[] = {s.weights.logits};
    const std::span<const double> lg[] = {g.logits};
    s.optimizers[1].step(lp, lg);
    const std::span<double> cp[] = {flat(s.gaussians.positions)};
    const std::span<const double> cg[] = {flat(g.canonical)};
    s.optimizers[2].step(cp, cg);
    assert(s.gaussians.size() == frozen.gaussians && s.superpoints.size() == frozen.superpoints &&
           s.tree.parent == frozen.parent);

    s.last_loss = total;
    ++s.step;
    ++ran;
    if (s.step % c.log_period == 0 || s.step == c.kinematic_steps) {
      // Small gradients near an optimum still give lr-sized Adam steps, so
      // the stage keeps the best full-sequence model it has seen.
      const double full = full_loss();
      if (full < s.best_loss) snapshot_kinematic(s, full);
      emit(hooks, {{"stage", "kinematic"},
                   {"step", s.step},
                   {"loss", total},
                   {"fit", comp.fit},
                   {"full", full},
                   {"best", s.best_loss}});
    }
    maybe_checkpoint(hooks, s);
  }
  restore_kinematic(s);
  const auto full = kinematic_objective(s.psi, s.tree, s.weights, s.gaussians.positions, targets, {}, &ggraph, c.loss);
  s.stage_loss[2] = total_dynamic_loss(full, c.loss);
  emit(hooks, {{"stage", "kinematic"}, {"event", "done"}, {"loss", s.stage_loss[2]}, {"fit", full.fit}});
  clear_snapshot(s);
  s.stage = Stage::Done;
  s.step = 0;
  s.optimizers.clear();
  return true;
}

bool run_pipeline(ProjectState& s, const StageConfig& c, const GroundTruth& truth, const RunHooks& hooks, Stage until) {
  // A step budget covers the whole call, not each stage.
  RunHooks h = hooks;
  auto stage_steps = [&](Stage st) {
    switch (st) {
      case Stage::Dynamic: return c.dynamic_steps;
      case Stage::Discovery: return c.discovery_steps;
      default: return c.kinematic_steps;
    }
  };
  while (s.stage < until) {
    const Stage st = s.stage;
    const std::int64_t before = s.step;
    bool finished = false;
    try {
      if (st == Stage::Dynamic) finished = run_dynamic_stage(s, c, truth, h);
      else if (st == Stage::Discovery) finished = run_discovery_stage(s, c, h);
      else finished = run_kinematic_stage(s, c, truth, h);
    } catch (const Error& e) {
      throw Error(std::string(stage_name(st)) + ": " + e.what());
    }
    if (!finished) return false;
    if (h.step_budget) h.step_budget = std::max<std::int64_t>(0, *h.step_budget - (stage_steps(st) - before));
  }
  return true;
}

// --- evaluation --------------------------------------------------------------------

KinematicPose truth_pose_for(const ProjectState& s, const GroundTruth& truth, double t) {
  if (s.tree.size() != s.superpoints.size() || s.labels.size() != s.superpoints.size())
    throw Error("truth_pose_for: model has no skeleton");
  const MotionSample links = truth.links_at(t);
  KinematicPose pose = KinematicPose::identity(s.tree.size());
  pose.root = links.transforms[static_cast<std::size_t>(s.labels[static_cast<std::size_t>(s.tree.root)])];
  for (std::size_t v = 0; v < s.tree.size(); ++v) {
    if (static_cast<int>(v) == s.tree.root) continue;
    const Mat3& rp = links.transforms[static_cast<std::size_t>(s.labels[static_cast<std::size_t>(s.tree.parent[v])])].rotation;
    const Mat3& rc = links.transforms[static_cast<std::size_t>(s.labels[v])].rotation;
    pose.joints[v] = matrix_to_quat(rp.transpose() * rc);
  }
  return pose;
}

namespace {

// World rotation of every superpoint per training timestamp.
std::vector<std::vector<Mat3>> world_rotations(const ProjectState& s) {
  const bool fitted = s.stage != Stage::Dynamic && s.stage != Stage::Discovery && s.psi.net().num_layers() > 0;
  std::vector<std::vector<Mat3>> out;
  if (fitted) {
    for (double t : s.psi.times()) {
      const MotionSample m = forward_kinematics(s.tree, eval_joint_field(s.psi, s.tree, t));
      auto& r = out.emplace_back();
      for (const auto& tr : m.transforms) r.push_back(tr.rotation);
    }
  } else {
    for (const MotionSample& m : s.cached.samples) {
      auto& r = out.emplace_back();
      for (const auto& tr : m.transforms) r.push_back(tr.rotation);
    }
  }
  for (const auto& r : out)
    if (r.size() != s.superpoints.size()) throw Error("articulation: motion does not cover every superpoint");
  return out;
}

double rotation_angle(const Mat3& r) { return std::acos(std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0)); }

}  // namespace

std::vector<double> joint_motion_range(const ProjectState& s) {
  const std::size_t m = s.tree.size();
  if (m == 0) return {};
  if (m != s.superpoints.size()) throw Error("joint_motion_range: tree does not match the superpoints");
  std::vector<double> range(m, 0.0);
  for (const auto& rot : world_rotations(s)) {
    for (std::size_t c = 0; c < m; ++c) {
      if (static_cast<int>(c) == s.tree.root) continue;
      const auto p = static_cast<std::size_t>(s.tree.parent[c]);
      range[c] = std::max(range[c], rotation_angle(rot[p].transpose() * rot[c]));
    }
  }
  return range;
}

std::vector<int> rigid_parts(const ProjectState& s, double min_angle) {
  const int m = static_cast<int>(s.superpoints.size());
  const auto rots = world_rotations(s);
  UnionFind uf(m);
  for (int a = 0; a < m; ++a) {
    for (int b = a + 1; b < m; ++b) {
      bool rigid = true;
      for (const auto& r : rots) {
        if (rotation_angle(r[static_cast<std::size_t>(a)].transpose() * r[static_cast<std::size_t>(b)]) > min_angle) {
          rigid = false;
          break;
        }
      }
      if (rigid) uf.unite(a, b);
    }
  }
  std::vector<int> part(static_cast<std::size_t>(m));
  std::map<int, int> ids;
  for (int a = 0; a < m; ++a) part[static_cast<std::size_t>(a)] = ids.emplace(uf.find(a), static_cast<int>(ids.size())).first->second;
  return part;
}

std::vector<PartJoint> part_joints(const ProjectState& s, double min_angle) {
  if (s.tree.size() == 0) return {};
  if (s.tree.size() != s.superpoints.size()) throw Error("part_joints: tree does not match the superpoints");
  const auto part = rigid_parts(s, min_angle);
  std::vector<PartJoint> joints;
  for (int c : s.tree.topological_order()) {
    if (c == s.tree.root) continue;
    const int pc = part[static_cast<std::size_t>(c)];
    const int pp = part[static_cast<std::size_t>(s.tree.parent[static_cast<std::size_t>(c)])];
    if (pc == pp) continue;
    auto it = std::find_if(joints.begin(), joints.end(), [&](const PartJoint& j) {
      return (j.parent_part == pp && j.child_part == pc) || (j.parent_part == pc && j.child_part == pp);
    });
    if (it == joints.end()) it = joints.insert(joints.end(), PartJoint{pp, pc, {}});
    it->nodes.push_back(c);
  }
  return joints;
}

PipelineReport evaluate(const ProjectState& s, const GroundTruth& truth, int render_size) {
  PipelineReport r;
  r.stage = s.stage;
  r.superpoints = s.superpoints.size();
  r.joints = s.tree.size() > 0 ? s.tree.size() - 1 : 0;
  if (s.tree.size() == s.superpoints.size() && (s.stage == Stage::Kinematic || s.stage == Stage::Done || !s.cached.samples.empty()))
    r.articulated_joints = part_joints(s).size();
  r.dynamic_loss = s.stage_loss[0];
  r.discovery_loss = s.stage_loss[1];
  r.kinematic_loss = s.stage_loss[2];
  r.bbox_diagonal = truth.bbox_diagonal();
  const bool kinematic = (s.stage == Stage::Kinematic || s.stage == Stage::Done) && s.psi.times().size() == truth.times.size();
  const auto labels = s.labels.size() == s.superpoints.size() ? s.labels : label_superpoints(s.weights, s.superpoints, truth);

  // Between the stages Φ's motion lives in the cache.
  const bool use_cache = s.stage == Stage::Discovery && s.cached.size() == truth.times.size();
  if (!kinematic && !use_cache && s.field.net().num_layers() == 0) throw Error("evaluate: model has no motion");
  auto motion_at = [&](std::size_t f) {
    if (kinematic) return forward_kinematics(s.tree, eval_joint_field(s.psi, s.tree, truth.times[f]));
    if (use_cache) return s.cached.samples[f];
    return s.field.eval_all(s.superpoints, truth.times[f]);
  };
  double gsq = 0.0, ssq = 0.0;
  for (std::size_t f = 0; f < truth.times.size(); ++f) {
    const MotionSample m = motion_at(f);
    const auto pred = lbs_positions(s.gaussians.positions, m, s.weights);
    for (std::size_t i = 0; i < pred.size(); ++i) gsq += (pred[i] - truth.trajectories[f][i]).squaredNorm();
    for (std::size_t j = 0; j < s.superpoints.size(); ++j) {
      const RigidTransform& gt = truth.link_motion[f].transforms[static_cast<std::size_t>(labels[j])];
      ssq += (m.transforms[j].apply(s.superpoints[j]) - gt.apply(s.superpoints[j])).squaredNorm();
    }
  }
  const double nt = static_cast<double>(truth.times.size());
  r.trajectory_rmse = std::sqrt(gsq / (nt * static_cast<double>(s.gaussians.size())));
  r.superpoint_rmse = std::sqrt(ssq / (nt * static_cast<double>(s.superpoints.size())));
  if (s.tree.size() == s.superpoints.size() && !s.superpoints.empty())
    r.skeleton = eval_skeleton(s.tree, s.weights, s.superpoints, truth);

  if (render_size > 0 && (kinematic || s.field.net().num_layers() > 0)) {
    const Camera cam = default_camera(truth, render_size, render_size);
    double p = 0.0, q = 0.0;
    const auto held = truth.spec.held_out_times();
    for (double t : held) {
      GaussianSet posed;
      if (kinematic) {
        posed = repose(s.gaussians, s.weights, s.tree, eval_joint_field(s.psi, s.tree, t));
      } else {
        posed = lbs_deform(s.gaussians, s.field.eval_all(s.superpoints, t), s.weights);
      }
      const Image a = render(posed, cam, Vec3::Ones());
      const Image b = render_truth(truth, t, cam);
      p += std::min(psnr(a, b), 100.0);
      q += ssim(a, b);
    }
    r.psnr = p / static_cast<double>(held.size());
    r.ssim = q / static_cast<double>(held.size());
  }
  return r;
}

std::string report_to_json(const PipelineReport& r) {
  json doc = {{"stage", stage_name(r.stage)},
              {"superpoints", r.superpoints},
              {"joints", r.joints},
              {"articulated_joints", r.articulated_joints},
              {"dynamic_loss", r.dynamic_loss},
              {"discovery_loss", r.discovery_loss},
              {"kinematic_loss", r.kinematic_loss},
              {"trajectory_rmse", r.trajectory_rmse},
              {"superpoint_rmse", r.superpoint_rmse},
              {"bbox_diagonal", r.bbox_diagonal}};
  if (r.skeleton) {
    doc["skeleton"] = {{"topology_match", r.skeleton->topology_match},
                       {"joint_rmse", std::isfinite(r.skeleton->joint_rmse) ? json(r.skeleton->joint_rmse) : json()},
                       {"part_iou", r.skeleton->part_iou},
                       {"predicted_edges", r.skeleton->predicted_edges},
                       {"truth_edges", r.skeleton->truth_edges},
                       {"matched_edges", r.skeleton->matched_edges}};
  }
  if (r.psnr) doc["psnr"] = *r.psnr;
  if (r.ssim) doc["ssim"] = *r.ssim;
  return doc.dump(2);
}

// --- checkpoints ---------------------------------------------------------------------

namespace {

constexpr char kStateMagic[8] = {'S', 'K', 'S', 'T', 'A', 'T', 'E', '\1'};
constexpr std::uint32_t kStateVersion = 1;

void write_i64(std::ostream& out, std::int64_t v) { write_u64(out, static_cast<std::uint64_t>(v)); }
std::int64_t read_i64(std::istream& in) { return static_cast<std::int64_t>(read_u64(in)); }

void write_vec3s(std::ostream& out, const std::vector<Vec3>& v) {
  write_u64(out, v.size());
  if (!v.empty()) write_f64s(out, flat(v));
}
std::vector<Vec3> read_vec3s(std::istream& in) {
  std::vector<Vec3> v(read_u64(in));
  if (!v.empty()) read_f64s(in, flat(v));
  return v;
}
void write_vec4s(std::ostream& out, const std::vector<Vec4>& v) {
  write_u64(out, v.size());
  if (!v.empty()) write_f64s(out, flat(v));
}
std::vector<Vec4> read_vec4s(std::istream& in) {
  std::vector<Vec4> v(read_u64(in));
  if (!v.empty()) read_f64s(in, flat(v));
  return v;
}
void write_doubles(std::ostream& out, const std::vector<double>& v) {
  write_u64(out, v.size());
  write_f64s(out, v);
}
std::vector<double> read_doubles(std::istream& in) {
  std::vector<double> v(read_u64(in));
  read_f64s(in, v);
  return v;
}
void write_ints(std::ostream& out, const std::vector<int>& v) {
  write_u64(out, v.size());
  for (int x : v) write_u32(out, static_cast<std::uint32_t>(x));
}
std::vector<int> read_ints(std::istream& in) {
  std::vector<int> v(read_u64(in));
  for (int& x : v) x = static_cast<int>(read_u32(in));
  return v;
}
void write_transform(std::ostream& out, const RigidTransform& t) {
  write_f64s(out, {t.rotation.data(), 9});
  write_f64s(out, {t.translation.data(), 3});
}
RigidTransform read_transform(std::istream& in) {
  RigidTransform t;
  read_f64s(in, {t.rotation.data(), 9});
  read_f64s(in, {t.translation.data(), 3});
  return t;
}
void write_optional_mlp(std::ostream& out, const Mlp* net) {
  const bool has = net && net->num_layers() > 0;
  write_u32(out, has ? 1 : 0);
  if (has) write_mlp(out, *net);
}
std::optional<Mlp> read_optional_mlp(std::istream& in) {
  if (read_u32(in) == 0) return std::nullopt;
  return read_mlp(in);
}
void write_tree(std::ostream& out, const SkeletonTree& t) {
  write_ints(out, t.parent);
  write_vec3s(out, t.joints);
  write_u32(out, static_cast<std::uint32_t>(t.root));
}
SkeletonTree read_tree(std::istream& in) {
  SkeletonTree t;
  t.parent = read_ints(in);
  t.joints = read_vec3s(in);
  t.root = static_cast<int>(read_u32(in));
  return t;
}

}  // namespace

void write_state(std::ostream& out, const ProjectState& s) {
  out.write(kStateMagic, sizeof kStateMagic);
  write_u32(out, kStateVersion);
  write_u32(out, static_cast<std::uint32_t>(s.stage));
  write_i64(out, s.step);

  const GaussianSet& g = s.gaussians;
  write_u32(out, static_cast<std::uint32_t>(g.sh_degree()));
  write_vec3s(out, g.positions);
  std::vector<Vec4> rot;
  for (const auto& q : g.rotations) rot.push_back(q.as_vector());
  write_vec4s(out, rot);
  write_vec3s(out, g.log_scales);
  write_doubles(out, g.opacity_logits);
  write_doubles(out, g.sh);

  write_vec3s(out, s.superpoints);
  write_u32(out, static_cast<std::uint32_t>(s.weights.k));
  write_ints(out, s.weights.neighbors);
  write_doubles(out, s.weights.logits);
  write_optional_mlp(out, &s.field.net());
  write_ints(out, s.labels);

  write_u64(out, s.table.pairs().size());
  for (const CandidatePair& p : s.table.pairs()) {
    write_u32(out, static_cast<std::uint32_t>(p.a));
    write_u32(out, static_cast<std::uint32_t>(p.b));
    write_f64s(out, {p.j_ab.data(), 3});
    write_f64s(out, {p.j_ba.data(), 3});
    for (double v : {p.d_ab, p.d_ba, p.distance, p.smoothed}) write_f64(out, v);
    write_u32(out, p.degenerate ? 1 : 0);
    write_u32(out, static_cast<std::uint32_t>(p.updates));
  }
  write_u64(out, s.joint_edges.size());
  for (const Edge& e : s.joint_edges) {
    write_u32(out, static_cast<std::uint32_t>(e.a));
    write_u32(out, static_cast<std::uint32_t>(e.b));
  }
  write_tree(out, s.tree);

  write_doubles(out, s.cached.times);
  write_u64(out, s.cached.samples.size());
  for (const MotionSample& m : s.cached.samples) {
    write_u64(out, m.size());
    for (const RigidTransform& t : m.transforms) write_transform(out, t);
  }

  write_optional_mlp(out, &s.psi.net());
  write_doubles(out, s.psi.times());
  write_vec4s(out, s.psi.root_quats());
  write_vec3s(out, s.psi.root_translations());
  write_vec3s(out, s.probes);

  write_u64(out, s.optimizers.size());
  for (const Adam& a : s.optimizers) a.write(out);
  std::ostringstream rng;
  rng << s.rng;
  const std::string rs = rng.str();
  write_u64(out, rs.size());
  out.write(rs.data(), static_cast<std::streamsize>(rs.size()));

  write_f64(out, s.best_loss);
  write_optional_mlp(out, s.best_psi ? &*s.best_psi : nullptr);
  write_vec3s(out, s.best_joints);
  write_vec4s(out, s.best_root_quats);
  write_vec3s(out, s.best_root_translations);
  write_doubles(out, s.best_logits);
  write_vec3s(out, s.best_positions);
  write_f64(out, s.last_loss);
  for (double v : s.stage_loss) write_f64(out, v);
  if (!out) throw Error("write_state: stream failure");
}

ProjectState read_state(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + 8, kStateMagic)) throw Error("read_state: not a project checkpoint");
  if (read_u32(in) != kStateVersion) throw Error("read_state: unsupported checkpoint version");
  ProjectState s;
  const std::uint32_t stage = read_u32(in);
  if (stage > static_cast<std::uint32_t>(Stage::Done)) throw Error("read_state: bad stage marker");
  s.stage = static_cast<Stage>(stage);
  s.step = read_i64(in);

  GaussianSet g(static_cast<int>(read_u32(in)));
  g.positions = read_vec3s(in);
  for (const Vec4& q : read_vec4s(in)) g.rotations.push_back(UnitQuaternion::from_vector(q));
  g.log_scales = read_vec3s(in);
  g.opacity_logits = read_doubles(in);
  g.sh = read_doubles(in);
  g.check_consistent();
  s.gaussians = std::move(g);

  s.superpoints = read_vec3s(in);
  s.weights.k = static_cast<int>(read_u32(in));
  s.weights.neighbors = read_ints(in);
  s.weights.logits = read_doubles(in);
  if (auto net = read_optional_mlp(in)) s.field = DeformField(std::move(*net));
  s.labels = read_ints(in);

  const std::uint64_t npairs = read_u64(in);
  std::vector<CandidatePair> pairs(npairs);
  std::vector<std::pair<int, int>> keys;
  for (CandidatePair& p : pairs) {
    p.a = static_cast<int>(read_u32(in));
    p.b = static_cast<int>(read_u32(in));
    read_f64s(in, {p.j_ab.data(), 3});
    read_f64s(in, {p.j_ba.data(), 3});
    p.d_ab = read_f64(in);
    p.d_ba = read_f64(in);
    p.distance = read_f64(in);
    p.smoothed = read_f64(in);
    p.degenerate = read_u32(in) != 0;
    p.updates = static_cast<int>(read_u32(in));
    keys.emplace_back(p.a, p.b);
  }
  if (!keys.empty()) {
    s.table = CandidateTable(keys);
    s.table.pairs() = pairs;
  }
  const std::uint64_t nedges = read_u64(in);
  for (std::uint64_t e = 0; e < nedges; ++e) {
    const int a = static_cast<int>(read_u32(in));
    const int b = static_cast<int>(read_u32(in));
    s.joint_edges.push_back({a, b});
  }
  s.tree = read_tree(in);

  s.cached.times = read_doubles(in);
  const std::uint64_t nsamples = read_u64(in);
  for (std::uint64_t f = 0; f < nsamples; ++f) {
    MotionSample m;
    m.transforms.resize(read_u64(in));
    for (auto& t : m.transforms) t = read_transform(in);
    s.cached.samples.push_back(std::move(m));
  }

  auto psi_net = read_optional_mlp(in);
  auto psi_times = read_doubles(in);
  auto rq = read_vec4s(in);
  auto rt = read_vec3s(in);
  if (psi_net) {
    s.psi = JointField(std::move(*psi_net), std::move(psi_times));
    s.psi.root_quats() = std::move(rq);
    s.psi.root_translations() = std::move(rt);
  }
  s.probes = read_vec3s(in);

  const std::uint64_t nopt = read_u64(in);
  for (std::uint64_t o = 0; o < nopt; ++o) s.optimizers.push_back(Adam::read(in));
  std::string rs(read_u64(in), '\0');
  in.read(rs.data(), static_cast<std::streamsize>(rs.size()));
  std::istringstream rng(rs);
  rng >> s.rng;

  s.best_loss = read_f64(in);
  s.best_psi = read_optional_mlp(in);
  s.best_joints = read_vec3s(in);
  s.best_root_quats = read_vec4s(in);
  s.best_root_translations = read_vec3s(in);
  s.best_logits = read_doubles(in);
  s.best_positions = read_vec3s(in);
  s.last_loss = read_f64(in);
  for (double& v : s.stage_loss) v = read_f64(in);
  if (!in) throw Error("read_state: truncated checkpoint");
  s.validate();
  return s;
}

void save_state(const ProjectState& state, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp);
    write_state(out, state);
  }
  std::filesystem::rename(tmp, path);
}

ProjectState load_state(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_state(in);
}

}  // namespace skelsplat
