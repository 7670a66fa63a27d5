// Copyright 2026 The DeSA Simulator Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <string>

#include <CLI11.hpp>

#include "desa/cli.hpp"

int main(int argc, char** argv) {
  desa::cli::CliOptions o;
  CLI::App app{"Decentralized federated learning with synthetic anchors"};
  app.require_subcommand(1);

  std::string config, out = ".";
  std::uint64_t seed = 0;
  std::string data, anchors, run;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON configuration file");
    sub->add_option("--out", out, "Output directory")->capture_default_str();
    sub->add_option("--seed", seed, "Master seed (overrides the config)");
    sub->add_option("--set", o.overrides, "Override a config key, e.g. run.lambda_kd=0")
        ->allow_extra_args(false);
  };
  auto with_inputs = [&](CLI::App* sub) {
    sub->add_option("--data", data, "Suite directory written by gen-data");
    sub->add_flag("--force", o.force, "Accept inputs produced by a different configuration");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the per-client suite");
  common(gen);

  auto* dis = app.add_subcommand("distill", "Distil per-client anchor sets");
  common(dis);
  with_inputs(dis);
  dis->add_flag("--dp", o.dp, "Use clipped and noised gradients");

  auto* rn = app.add_subcommand("run", "Run a federated experiment");
  common(rn);
  with_inputs(rn);
  rn->add_option("--anchors", anchors, "Anchor directory written by distill");

  auto* ev = app.add_subcommand("eval", "Evaluate saved checkpoints on every client");
  common(ev);
  with_inputs(ev);
  ev->add_option("--run", run, "Run directory holding checkpoints/")->required();
  ev->add_option("--anchors", anchors, "Anchor directory; enables the bound probe");

  auto* ca = app.add_subcommand("comm-audit", "Count communicated parameters");
  common(ca);
  ca->add_flag("--cifar-scale", o.cifar_scale, "Use the CIFAR-scale inputs instead of the config");

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every loss");
  common(gc);
  gc->add_flag("--full-width", o.full_width, "Check the configured widths instead of tiny ones");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  for (auto* sub : app.get_subcommands()) o.subcommand = sub->get_name();
  if (!config.empty()) o.config_path = config;
  o.out_dir = out;
  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed")) o.seed = seed;
  }
  if (!data.empty()) o.data_dir = data;
  if (!anchors.empty()) o.anchors_dir = anchors;
  if (!run.empty()) o.run_dir = run;
  return desa::cli::run_command(o);
}
