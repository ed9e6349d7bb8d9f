// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/cli/project.hpp"

#include "skelsplat/cli/documents.hpp"

#include <fstream>
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

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw Error("cannot write " + path.string());
}

fs::path read_path(FieldReader& r, const char* key, const fs::path& fallback) {
  const std::string s = r.string(key, fallback.string());
  if (s.empty()) throw DocumentError(kBadRequest, r.child(key), "must not be empty");
  return s;
}

}  // namespace

void ProjectConfig::validate() const {
  stages.validate();
  if (!cameras.contains("default")) throw Error("project: cameras.default is required");
  for (const auto& [name, cam] : cameras) cam.camera();
  if (eval_render_size < 0 || eval_render_size > kMaxImageSize)
    throw Error("project: eval_render_size must lie in [0, " + std::to_string(kMaxImageSize) + "]");
  if (checkpoint_period < 0) throw Error("project: checkpoint_period must not be negative");
  if (service.port < 0 || service.port > 65535) throw Error("project: service.port must lie in [0, 65535]");
  if (service.host.empty()) throw Error("project: service.host must not be empty");
}

std::string project_to_json(const ProjectConfig& c) {
  json cameras = json::object();
  for (const auto& [name, cam] : c.cameras) cameras[name] = camera_to_json(cam);
  const json doc = {{"version", ProjectConfig::kVersion},
                    {"paths",
                     {{"truth", c.paths.truth.string()},
                      {"checkpoint", c.paths.checkpoint.string()},
                      {"log", c.paths.log.string()},
                      {"report", c.paths.report.string()},
                      {"exports", c.paths.exports.string()}}},
                    {"stages", json::parse(config_to_json(c.stages))},
                    {"cameras", std::move(cameras)},
                    {"eval_render_size", c.eval_render_size},
                    {"checkpoint_period", c.checkpoint_period},
                    {"service", {{"host", c.service.host}, {"port", c.service.port}}}};
  return doc.dump(2) + "\n";
}

ProjectConfig project_from_json(std::string_view text) {
  ProjectConfig c;
  try {
    const json doc = parse_document(text, "project");
    FieldReader r(doc, "");
    const int version = r.integer("version", ProjectConfig::kVersion);
    if (version != ProjectConfig::kVersion)
      throw DocumentError(kBadRequest, "version", "unsupported version " + std::to_string(version));
    if (const json* p = r.find("paths")) {
      FieldReader pr(*p, "paths");
      c.paths.truth = read_path(pr, "truth", c.paths.truth);
      c.paths.checkpoint = read_path(pr, "checkpoint", c.paths.checkpoint);
      c.paths.log = read_path(pr, "log", c.paths.log);
      c.paths.report = read_path(pr, "report", c.paths.report);
      c.paths.exports = read_path(pr, "exports", c.paths.exports);
      pr.finish();
    }
    if (const json* s = r.find("stages")) c.stages = config_from_json(s->dump(), "stages");
    if (const json* cams = r.find("cameras")) {
      if (!cams->is_object()) throw DocumentError(kBadRequest, "cameras", "must be an object");
      for (auto it = cams->begin(); it != cams->end(); ++it)
        c.cameras[it.key()] = camera_from_json(it.value(), "cameras." + it.key());
    }
    c.eval_render_size = r.integer("eval_render_size", c.eval_render_size);
    c.checkpoint_period = r.integer64("checkpoint_period", c.checkpoint_period);
    if (const json* s = r.find("service")) {
      FieldReader sr(*s, "service");
      c.service.host = sr.string("host", c.service.host);
      c.service.port = sr.integer("port", c.service.port);
      sr.finish();
    }
    r.finish();
  } catch (const DocumentError& e) {
    throw Error(std::string("project: ") + e.what());
  }
  c.validate();
  return c;
}

Project Project::open(const fs::path& dir) {
  const fs::path file = dir / kConfigFile;
  if (!fs::exists(file)) throw Error(dir.string() + " is not a project (no " + kConfigFile + ")");
  Project p;
  p.dir_ = dir;
  p.config_ = project_from_json(read_file(file));
  return p;
}

Project Project::create(const fs::path& dir, const ProjectConfig& config, const GroundTruth& truth, bool frames) {
  if (fs::exists(dir / kConfigFile)) throw Error(dir.string() + " already holds a project");
  Project p;
  p.dir_ = dir;
  p.config_ = config;
  if (!p.config_.cameras.contains("default")) p.config_.cameras["default"] = default_view(truth);
  p.config_.validate();
  fs::create_directories(dir);
  save_ground_truth(truth, p.truth_dir(), frames);
  write_file(dir / kConfigFile, project_to_json(p.config_));
  return p;
}

const LookAt& Project::camera(const std::string& name) const {
  auto it = config_.cameras.find(name);
  if (it == config_.cameras.end()) throw Error("unknown camera '" + name + "'");
  return it->second;
}

}  // namespace skelsplat::cli
