// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/cli/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

namespace skelsplat::cli {

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw Error("cannot write " + path.string());
}

void write_png_bytes(const fs::path& path, const std::vector<std::uint8_t>& png) {
  write_file(path, std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
}

Stage next_stage(Stage s) { return static_cast<Stage>(static_cast<int>(s) + 1); }

void print_report(const PipelineReport& r, std::ostream& out) {
  out << "stage " << stage_name(r.stage) << ": " << r.superpoints << " superpoints, " << r.joints << " tree edges, "
      << r.articulated_joints << " articulated joints\n";
  out << "trajectory rmse " << r.trajectory_rmse << ", superpoint rmse " << r.superpoint_rmse << " (bbox diagonal "
      << r.bbox_diagonal << ")\n";
  if (r.skeleton)
    out << "topology match " << (r.skeleton->topology_match ? "true" : "false") << ", joint rmse "
        << r.skeleton->joint_rmse << ", part iou " << r.skeleton->part_iou << "\n";
  if (r.psnr) out << "held-out psnr " << *r.psnr << " dB, ssim " << *r.ssim << "\n";
}

void write_exports(const Project& project, const ProjectState& s) {
  const fs::path dir = project.exports();
  fs::create_directories(dir);
  save_ply(s.gaussians, dir / "model.ply");
  write_file(dir / "skeleton.json",
             skeleton_to_json(s.tree, joint_motion_range(s), rigid_parts(s)).dump(2) + "\n");
}

}  // namespace

Project cmd_synth(const SynthOptions& o, std::ostream& out) {
  if (o.preset.empty() == o.spec_file.empty()) throw Error("synth: give exactly one of a preset or a spec file");
  if (o.superpoints < 2) throw Error("synth: need at least 2 superpoints");
  if (!(o.schedule_scale > 0.0)) throw Error("synth: schedule scale must be positive");
  ArticulatedSpec spec = o.preset.empty() ? load_spec(o.spec_file) : preset(o.preset, o.seed.value_or(0));
  if (o.seed) spec.seed = *o.seed;
  const GroundTruth truth = generate(spec);

  ProjectConfig config;
  config.stages = o.schedule_scale == 1.0 ? StageConfig{} : StageConfig{}.scaled(o.schedule_scale);
  config.stages.initial_superpoints = o.superpoints;
  config.stages.seed = spec.seed;
  const Project project = Project::create(o.out, config, truth, o.frames);
  out << "wrote " << spec.name << " (" << truth.num_links() << " links, " << truth.gaussians.size() << " Gaussians, "
      << truth.times.size() << " timestamps) to " << o.out.string() << "\n";
  return project;
}

TrainResult cmd_train(const Project& project, const TrainOptions& o, std::ostream& out) {
  const ProjectConfig& cfg = project.config();
  const GroundTruth truth = load_ground_truth(project.truth_dir());
  const bool resume = !o.fresh && fs::exists(project.checkpoint());
  ProjectState state = resume ? load_state(project.checkpoint()) : initialize_state(truth, cfg.stages);
  if (resume) out << "resuming at " << stage_name(state.stage) << " step " << state.step << "\n";

  Stage until = Stage::Done;
  if (o.only) {
    if (state.stage != *o.only)
      throw Error(std::string("cannot run the ") + stage_name(*o.only) + " stage: project is at the " +
                  stage_name(state.stage) + " stage");
    until = next_stage(*o.only);
  } else if (o.stop_after) {
    until = next_stage(*o.stop_after);
  }

  fs::create_directories(project.checkpoint().parent_path());
  std::ofstream log(project.log(), resume ? std::ios::app : std::ios::trunc);
  if (!log) throw Error("cannot write " + project.log().string());
  RunHooks hooks;
  hooks.log = [&](const std::string& line) { log << line << '\n' << std::flush; };
  hooks.checkpoint = [&](const ProjectState& s) { save_state(s, project.checkpoint()); };
  hooks.checkpoint_period = cfg.checkpoint_period;
  hooks.step_budget = o.step_budget;

  run_pipeline(state, cfg.stages, truth, hooks, until);
  save_state(state, project.checkpoint());

  TrainResult result{state.stage, state.step, std::nullopt};
  out << "checkpoint at " << stage_name(state.stage) << " step " << state.step << "\n";
  if (state.stage == Stage::Done) {
    const PipelineReport report = evaluate(state, truth, cfg.eval_render_size);
    write_file(project.report(), report_to_json(report) + "\n");
    write_exports(project, state);
    print_report(report, out);
    result.report = report;
  }
  return result;
}

PipelineReport cmd_eval(const Project& project, std::ostream& out) {
  if (!fs::exists(project.checkpoint())) throw Error("no checkpoint yet; run train first");
  const GroundTruth truth = load_ground_truth(project.truth_dir());
  const ProjectState state = load_state(project.checkpoint());
  const PipelineReport report = evaluate(state, truth, project.config().eval_render_size);
  print_report(report, out);
  return report;
}

LookAt resolve_view(const Project& project, const ViewOptions& v) {
  LookAt cam = project.camera(v.camera);
  if (v.width) cam.width = *v.width;
  if (v.height) cam.height = *v.height;
  if (cam.width < 1 || cam.height < 1 || cam.width > kMaxImageSize || cam.height > kMaxImageSize)
    throw Error("image size must lie in [1, " + std::to_string(kMaxImageSize) + "]");
  return cam;
}

KinematicPose read_pose_file(const fs::path& path, const Model& model) {
  try {
    return pose_from_json(parse_document(read_file(path), path.string()), model.tree, "");
  } catch (const DocumentError& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

RenderResult cmd_render(const Project& project, const RenderOptions& o, std::ostream& out) {
  if (o.t && o.pose_file) throw Error("render: give at most one of a time and a pose file");
  const Model model = load_model(project);
  const LookAt cam = resolve_view(project, o.view);
  KinematicPose pose = KinematicPose::identity(model.tree.size());
  if (o.t) {
    if (!std::isfinite(*o.t)) throw Error("render: time must be finite");
    pose = model.pose_at(*o.t);
  } else if (o.pose_file) {
    pose = read_pose_file(*o.pose_file, model);
  }
  const auto png = render_pose_png(model, cam, pose, o.view.background);
  write_png_bytes(o.out, png);
  out << "wrote " << o.out.string() << " (" << cam.width << "x" << cam.height << ")\n";

  RenderResult result;
  if (o.t && fs::exists(project.truth_dir() / "truth.json")) {
    const GroundTruth truth = load_ground_truth(project.truth_dir());
    // Compare what was written, after 8-bit quantization.
    const Image ours = decode_png(png);
    const Image ref = decode_png(encode_png(render_truth(truth, *o.t, cam.camera(), o.view.background)));
    result.psnr = psnr(ours, ref);
    result.ssim = ssim(ours, ref);
    out << "psnr " << *result.psnr << " dB, ssim " << *result.ssim << " against the ground truth at t = " << *o.t
        << "\n";
  }
  return result;
}

std::vector<fs::path> cmd_repose(const Project& project, const ReposeOptions& o, std::ostream& out) {
  if (o.frames < 1) throw Error("repose: need at least one frame");
  const Model model = load_model(project);
  const LookAt cam = resolve_view(project, o.view);
  const KinematicPose a = read_pose_file(o.pose_a, model);
  const KinematicPose b = read_pose_file(o.pose_b, model);
  fs::create_directories(o.out_dir);
  std::vector<fs::path> written;
  for (int i = 0; i < o.frames; ++i) {
    const double u = o.frames == 1 ? 0.0 : static_cast<double>(i) / (o.frames - 1);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04d.png", i);
    const fs::path path = o.out_dir / name;
    write_png_bytes(path, render_pose_png(model, cam, interpolate_poses(a, b, u), o.view.background));
    written.push_back(path);
  }
  out << "wrote " << written.size() << " frames to " << o.out_dir.string() << "\n";
  return written;
}

}  // namespace skelsplat::cli
