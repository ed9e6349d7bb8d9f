// SPDX-License-Identifier: Apache-2.0
#include "skelsplat/cli/service.hpp"

#include <httplib.h>

#include <charconv>
#include <cmath>

#ifndef SKELSPLAT_VERSION
#define SKELSPLAT_VERSION "0.0.0"
#endif

namespace skelsplat::cli {

const char* version() { return SKELSPLAT_VERSION; }

namespace {

Response json_response(const json& doc, int status = 200) { return {status, "application/json", doc.dump()}; }

Response error_response(int status, const std::string& path, const std::string& message) {
  json err = {{"status", status}, {"message", message}};
  if (!path.empty()) err["path"] = path;
  return json_response({{"error", std::move(err)}}, status);
}

Response not_loaded(const std::string& why) { return error_response(kNotFound, "", why); }

// Runs a handler body, mapping document errors to their status.
template <typename F>
Response guarded(F&& f) {
  try {
    return f();
  } catch (const DocumentError& e) {
    return error_response(e.status(), e.path(), e.reason());
  } catch (const Error& e) {
    return error_response(500, "", e.what());
  }
}

Vec3 background_from(FieldReader& r) {
  const Vec3 bg = r.vec3("background", Vec3::Ones());
  for (int i = 0; i < 3; ++i)
    if (bg[i] < 0.0 || bg[i] > 1.0)
      throw DocumentError(kBadRequest, r.child("background") + "[" + std::to_string(i) + "]", "must lie in [0, 1]");
  return bg;
}

}  // namespace

Service::Service(const fs::path& project_dir) : project_(Project::open(project_dir)) {}

std::shared_ptr<const Model> Service::current() {
  std::lock_guard lock(mutex_);
  std::error_code ec;
  const auto stamp = fs::last_write_time(project_.checkpoint(), ec);
  if (ec) {
    if (!model_) load_error_ = "no trained model: " + project_.checkpoint().string() + " does not exist";
    return model_;
  }
  if (seen_ && *seen_ == stamp) return model_;
  seen_ = stamp;
  try {
    model_ = std::make_shared<const Model>(load_model(project_));
  } catch (const Error& e) {
    // Keep serving the previous model while training writes checkpoints.
    if (!model_) load_error_ = e.what();
  }
  return model_;
}

Response Service::health() {
  const auto m = current();
  return json_response({{"schema", "skelsplat.health/1"},
                        {"version", version()},
                        {"model_loaded", m != nullptr},
                        {"model_hash", m ? json(m->hash) : json()}});
}

Response Service::model() {
  const auto m = current();
  if (!m) return not_loaded(load_error_);
  return json_response(model_to_json(*m));
}

Response Service::pose(const std::optional<std::string>& t) {
  const auto m = current();
  if (!m) return not_loaded(load_error_);
  if (!t) return error_response(kBadRequest, "t", "is required");
  double value = 0.0;
  const char* end = t->data() + t->size();
  const auto [ptr, ec] = std::from_chars(t->data(), end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) return error_response(kBadRequest, "t", "must be a finite number");
  json doc = pose_to_json(m->pose_at(value), m->tree);
  doc["t"] = value;
  return json_response(doc);
}

Response Service::render(std::string_view body) {
  const auto m = current();
  if (!m) return not_loaded(load_error_);
  return guarded([&] {
    const json doc = parse_document(body, "request body");
    FieldReader r(doc, "");
    const json* cam_node = r.find("camera");
    const LookAt cam = cam_node ? camera_from_json(*cam_node, "camera") : project_.camera("default");
    const json* pose_node = r.find("pose");
    const KinematicPose pose = pose_node ? pose_from_json(*pose_node, m->tree, "pose") : KinematicPose::identity(m->tree.size());
    const Vec3 bg = background_from(r);
    r.finish();
    const auto png = render_pose_png(*m, cam, pose, bg);
    return Response{200, "image/png", std::string(png.begin(), png.end())};
  });
}

Response Service::interpolate(std::string_view body) {
  const auto m = current();
  if (!m) return not_loaded(load_error_);
  return guarded([&] {
    const json doc = parse_document(body, "request body");
    FieldReader r(doc, "");
    const KinematicPose a = pose_from_json(r.require("poseA"), m->tree, "poseA");
    const KinematicPose b = pose_from_json(r.require("poseB"), m->tree, "poseB");
    const double u = r.number("u");
    r.finish();
    if (u < 0.0 || u > 1.0) throw DocumentError(kBadRequest, "u", "must lie in [0, 1]");
    return json_response(pose_to_json(interpolate_poses(a, b, u), m->tree));
  });
}

void Service::mount(httplib::Server& server) {
  auto send = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server.set_payload_max_length(std::size_t{1} << 20);
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.Get("/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
  server.Get("/model", [this, send](const httplib::Request&, httplib::Response& res) { send(res, model()); });
  server.Get("/pose", [this, send](const httplib::Request& req, httplib::Response& res) {
    std::optional<std::string> t;
    if (req.has_param("t")) t = req.get_param_value("t");
    send(res, pose(t));
  });
  server.Post("/render", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, render(req.body)); });
  server.Post("/interpolate",
              [this, send](const httplib::Request& req, httplib::Response& res) { send(res, interpolate(req.body)); });
}

}  // namespace skelsplat::cli
