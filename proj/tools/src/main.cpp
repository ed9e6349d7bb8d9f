// SPDX-License-Identifier: Apache-2.0
//
// skelsplat: synthetic scenes, training, rendering and the pose service.
#include "skelsplat/cli/commands.hpp"
#include "skelsplat/cli/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <iostream>
#include <map>

using namespace skelsplat;
using namespace skelsplat::cli;

namespace {

const std::map<std::string, Stage> kStages{
    {"dynamic", Stage::Dynamic}, {"discovery", Stage::Discovery}, {"kinematic", Stage::Kinematic}};

void add_view(CLI::App* cmd, ViewOptions& view, std::vector<double>& background) {
  cmd->add_option("--camera", view.camera, "Camera preset from project.json")->capture_default_str();
  cmd->add_option("--width", view.width, "Override the camera width (pixels)")->check(CLI::Range(1, kMaxImageSize));
  cmd->add_option("--height", view.height, "Override the camera height (pixels)")->check(CLI::Range(1, kMaxImageSize));
  cmd->add_option("--background", background, "Background color r g b in [0, 1]")
      ->expected(3)
      ->check(CLI::Range(0.0, 1.0));
}

void apply_background(ViewOptions& view, const std::vector<double>& bg) {
  if (bg.size() == 3) view.background = Vec3(bg[0], bg[1], bg[2]);
}

std::string preset_list() {
  std::string s;
  for (const auto& n : preset_names()) s += (s.empty() ? "" : ", ") + n;
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Articulated Gaussian reconstruction with skeleton discovery"};
  app.set_version_flag("--version", version());
  app.require_subcommand(1);

  SynthOptions synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic articulated scene as a new project");
  auto* preset_opt = c_synth->add_option("--preset", synth.preset, "Built-in scene: " + preset_list());
  auto* spec_opt = c_synth->add_option("--spec", synth.spec_file, "Scene spec document (JSON)")->check(CLI::ExistingFile);
  preset_opt->excludes(spec_opt);
  c_synth->add_option("--out", synth.out, "Project directory to create")->required();
  c_synth->add_option("--seed", synth.seed, "Seed for sampling and random trees");
  c_synth->add_flag("--frames", synth.frames, "Also write ground-truth PNG frames");
  c_synth->add_option("--superpoints", synth.superpoints, "Initial superpoint count")->capture_default_str();
  c_synth->add_option("--schedule-scale", synth.schedule_scale, "Scale every step count of the schedule")
      ->capture_default_str();

  fs::path dir;
  TrainOptions train;
  std::string stop_after;
  std::int64_t budget = 0;
  auto* c_train = app.add_subcommand("train", "Run the remaining training stages, resuming from the checkpoint");
  c_train->add_option("project", dir, "Project directory")->required();
  c_train->add_option("--budget", budget, "Stop after this many steps (checkpointed)")->check(CLI::PositiveNumber);
  c_train->add_flag("--fresh", train.fresh, "Ignore an existing checkpoint");
  c_train->add_option("--stop-after", stop_after, "Stop once this stage has finished")
      ->check(CLI::IsMember({"dynamic", "discovery", "kinematic"}));

  auto* c_discover = app.add_subcommand("discover", "Run only the skeleton discovery stage");
  c_discover->add_option("project", dir, "Project directory")->required();
  c_discover->add_option("--budget", budget, "Stop after this many steps (checkpointed)")->check(CLI::PositiveNumber);
  auto* c_kinefit = app.add_subcommand("kinefit", "Run only the kinematic fitting stage");
  c_kinefit->add_option("project", dir, "Project directory")->required();
  c_kinefit->add_option("--budget", budget, "Stop after this many steps (checkpointed)")->check(CLI::PositiveNumber);

  auto* c_eval = app.add_subcommand("eval", "Print metrics of the current checkpoint");
  c_eval->add_option("project", dir, "Project directory")->required();

  RenderOptions render;
  std::vector<double> background;
  auto* c_render = app.add_subcommand("render", "Render the trained model (canonical pose by default)");
  c_render->add_option("project", dir, "Project directory")->required();
  c_render->add_option("--out", render.out, "Output PNG")->required();
  auto* t_opt = c_render->add_option("--t", render.t, "Pose from the joint field at this time; reports PSNR");
  auto* pose_opt = c_render->add_option("--pose", render.pose_file, "Pose document (JSON)")->check(CLI::ExistingFile);
  t_opt->excludes(pose_opt);
  add_view(c_render, render.view, background);

  ReposeOptions repose;
  auto* c_repose = app.add_subcommand("repose", "Render frames interpolating between two poses");
  c_repose->add_option("project", dir, "Project directory")->required();
  c_repose->add_option("--pose-a", repose.pose_a, "First pose document")->required()->check(CLI::ExistingFile);
  c_repose->add_option("--pose-b", repose.pose_b, "Last pose document")->required()->check(CLI::ExistingFile);
  c_repose->add_option("--frames", repose.frames, "Number of frames")->capture_default_str()->check(CLI::PositiveNumber);
  c_repose->add_option("--out-dir", repose.out_dir, "Output directory")->required();
  add_view(c_repose, repose.view, background);

  std::optional<int> port;
  std::optional<std::string> host;
  auto* c_serve = app.add_subcommand("serve", "Serve the HTTP render / pose API");
  c_serve->add_option("project", dir, "Project directory")->required();
  c_serve->add_option("--port", port, "Port (default from project.json)")->check(CLI::Range(0, 65535));
  c_serve->add_option("--host", host, "Bind address (default from project.json)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_synth) {
      if (synth.preset.empty() && synth.spec_file.empty()) throw Error("synth: give --preset or --spec");
      cmd_synth(synth, std::cout);
    } else if (*c_train || *c_discover || *c_kinefit) {
      if (budget > 0) train.step_budget = budget;
      if (!stop_after.empty()) train.stop_after = kStages.at(stop_after);
      if (*c_discover) train.only = Stage::Discovery;
      if (*c_kinefit) train.only = Stage::Kinematic;
      cmd_train(Project::open(dir), train, std::cout);
    } else if (*c_eval) {
      cmd_eval(Project::open(dir), std::cout);
    } else if (*c_render) {
      apply_background(render.view, background);
      cmd_render(Project::open(dir), render, std::cout);
    } else if (*c_repose) {
      apply_background(repose.view, background);
      cmd_repose(Project::open(dir), repose, std::cout);
    } else if (*c_serve) {
      Service service(dir);
      const ServiceConfig& sc = service.project().config().service;
      httplib::Server server;
      service.mount(server);
      const std::string h = host.value_or(sc.host);
      const int p = port.value_or(sc.port);
      const int bound = p == 0 ? server.bind_to_any_port(h) : (server.bind_to_port(h, p) ? p : -1);
      if (bound < 0) throw Error("cannot bind " + h + ":" + std::to_string(p));
      std::cout << "serving " << dir.string() << " on http://" << h << ":" << bound << std::endl;
      if (!server.listen_after_bind()) throw Error("server stopped unexpectedly");
    }
  } catch (const std::exception& e) {
    std::cerr << "skelsplat: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
