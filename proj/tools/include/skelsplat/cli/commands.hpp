// SPDX-License-Identifier: Apache-2.0
//
// The skelsplat subcommands as plain functions, so tests can drive them
// without a process boundary. Progress goes to `out`.
#pragma once

#include "skelsplat/cli/model.hpp"
#include "skelsplat/cli/project.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace skelsplat::cli {

struct SynthOptions {
  std::string preset;   // one of preset_names(), or empty with spec_file
  fs::path spec_file;
  std::optional<std::uint64_t> seed;  // overrides the spec's seed
  fs::path out;
  bool frames = false;  // also write ground-truth PNGs
  int superpoints = 64; // initial superpoint count written to the config
  double schedule_scale = 1.0;
};
Project cmd_synth(const SynthOptions& options, std::ostream& out);

struct TrainOptions {
  /// Run only this stage; the state must already be at it.
  std::optional<Stage> only;
  /// Stop once this stage has finished.
  std::optional<Stage> stop_after;
  std::optional<std::int64_t> step_budget;
  bool fresh = false;  // ignore an existing checkpoint
};
struct TrainResult {
  Stage stage = Stage::Dynamic;
  std::int64_t step = 0;
  std::optional<PipelineReport> report;  // once every stage has finished
};
TrainResult cmd_train(const Project& project, const TrainOptions& options, std::ostream& out);

/// Metrics for the checkpoint, whatever its stage.
PipelineReport cmd_eval(const Project& project, std::ostream& out);

struct ViewOptions {
  std::string camera = "default";
  std::optional<int> width;
  std::optional<int> height;
  Vec3 background = Vec3::Ones();
};
LookAt resolve_view(const Project& project, const ViewOptions& view);
/// Reads a pose document for the model's skeleton.
KinematicPose read_pose_file(const fs::path& path, const Model& model);

struct RenderOptions {
  ViewOptions view;
  std::optional<double> t;           // pose from Ψ at t
  std::optional<fs::path> pose_file; // or an explicit pose document
  fs::path out;
};
struct RenderResult {
  std::optional<double> psnr;  // against the ground-truth render, with t
  std::optional<double> ssim;
};
/// Without t or a pose file renders the canonical (identity) pose.
RenderResult cmd_render(const Project& project, const RenderOptions& options, std::ostream& out);

struct ReposeOptions {
  ViewOptions view;
  fs::path pose_a;
  fs::path pose_b;
  int frames = 10;
  fs::path out_dir;
};
/// Frame i uses u = i / (frames - 1); returns the written paths.
std::vector<fs::path> cmd_repose(const Project& project, const ReposeOptions& options, std::ostream& out);

}  // namespace skelsplat::cli
