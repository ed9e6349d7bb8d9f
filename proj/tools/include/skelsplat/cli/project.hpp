// SPDX-License-Identifier: Apache-2.0
//
// Project directory: project.json, ground truth, checkpoints, run log,
// report and exports.
//
//   <dir>/project.json
//   <dir>/truth/                canonical.ply, truth.json, frames/
//   <dir>/checkpoints/state.bin
//   <dir>/run.log               one JSON object per line
//   <dir>/report.json
//   <dir>/exports/              model.ply, skeleton.json
#pragma once

#include "skelsplat/pipeline.hpp"
#include "skelsplat/splat_render.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace skelsplat::cli {

namespace fs = std::filesystem;

struct ProjectPaths {
  fs::path truth = "truth";
  fs::path checkpoint = "checkpoints/state.bin";
  fs::path log = "run.log";
  fs::path report = "report.json";
  fs::path exports = "exports";
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
};

struct ProjectConfig {
  static constexpr int kVersion = 1;

  ProjectPaths paths;
  StageConfig stages;
  /// Named look-at cameras; "default" always exists after validation.
  std::map<std::string, LookAt> cameras;
  /// Square render size for the held-out PSNR / SSIM in the report (0 skips).
  int eval_render_size = 256;
  std::int64_t checkpoint_period = 500;
  ServiceConfig service;

  /// Throws Error naming the field.
  void validate() const;
};

std::string project_to_json(const ProjectConfig& config);
/// Unknown fields and type errors are reported with their dotted path.
ProjectConfig project_from_json(std::string_view text);

class Project {
 public:
  static constexpr const char* kConfigFile = "project.json";

  /// Reads and validates <dir>/project.json.
  static Project open(const fs::path& dir);
  /// Writes the ground truth and project.json into a new or empty directory.
  static Project create(const fs::path& dir, const ProjectConfig& config, const GroundTruth& truth,
                        bool frames = false);

  const fs::path& dir() const { return dir_; }
  const ProjectConfig& config() const { return config_; }
  fs::path path(const fs::path& relative) const { return relative.is_absolute() ? relative : dir_ / relative; }
  fs::path truth_dir() const { return path(config_.paths.truth); }
  fs::path checkpoint() const { return path(config_.paths.checkpoint); }
  fs::path log() const { return path(config_.paths.log); }
  fs::path report() const { return path(config_.paths.report); }
  fs::path exports() const { return path(config_.paths.exports); }
  /// Throws Error on an unknown name.
  const LookAt& camera(const std::string& name) const;

 private:
  fs::path dir_;
  ProjectConfig config_;
};

}  // namespace skelsplat::cli
