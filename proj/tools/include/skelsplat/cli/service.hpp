// SPDX-License-Identifier: Apache-2.0
//
// HTTP render / pose service over one project (read-only).
//
//   GET  /health              version and model hash
//   GET  /model               skeleton, articulated joints, bounds, timestamps
//   GET  /pose?t=<time>       pose document from Ψ
//   POST /render              {camera, pose, background} -> image/png
//   POST /interpolate         {poseA, poseB, u} -> pose document
//
// Errors are JSON {"error": {status, path, message}}: 400 for documents that
// break the schema, 404 until a trained model exists, 422 for poses that do
// not fit the skeleton.
#pragma once

#include "skelsplat/cli/model.hpp"
#include "skelsplat/cli/project.hpp"

#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

namespace httplib {
class Server;
}

namespace skelsplat::cli {

const char* version();

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

class Service {
 public:
  /// Throws Error when `project` has no project.json. The model itself is
  /// loaded lazily and reloaded when the checkpoint file changes.
  explicit Service(const fs::path& project_dir);

  Response health();
  Response model();
  Response pose(const std::optional<std::string>& t);
  Response render(std::string_view body);
  Response interpolate(std::string_view body);

  /// Registers the routes (and permissive CORS headers for the browser UI).
  void mount(httplib::Server& server);

  /// nullptr while no trained model is available.
  std::shared_ptr<const Model> current();
  const Project& project() const { return project_; }

 private:
  Project project_;
  std::mutex mutex_;
  std::shared_ptr<const Model> model_;
  std::optional<fs::file_time_type> seen_;
  std::string load_error_ = "no trained model";
};

}  // namespace skelsplat::cli
