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

#pragma once

// Subcommand implementations behind the `desa` executable. Argument parsing
// lives in the tool; every command here takes resolved options, writes its
// artifacts with a single writer, and reports failures through exceptions
// that `exit_code_for` maps onto process exit codes.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "desa/checkpoint.hpp"
#include "desa/config.hpp"
#include "desa/datasets.hpp"
#include "desa/distill.hpp"
#include "desa/errors.hpp"
#include "desa/eval.hpp"
#include "desa/gradcheck.hpp"
#include "desa/protocol.hpp"

namespace desa::cli {

struct CliOptions {
  std::string subcommand;
  std::optional<std::filesystem::path> config_path;
  std::vector<std::string> overrides;
  std::filesystem::path out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> data_dir;
  std::optional<std::filesystem::path> anchors_dir;
  std::optional<std::filesystem::path> run_dir;
  bool dp = false;
  bool force = false;
  bool cifar_scale = false;
  bool full_width = false;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 2;
  return 1;
}

namespace detail {

inline ExperimentConfig resolve(const CliOptions& o) {
  std::vector<std::string> overrides = o.overrides;
  if (o.dp) overrides.push_back("distill.dp.enabled=true");
  return load_config(o.config_path, overrides, o.seed);
}

inline void ensure_out_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw ValidationError("output directory " + dir.string() + " is not writable");
  }
  const auto probe = dir / ".desa-write-probe";
  {
    std::ofstream os(probe);
    if (!os) throw ValidationError("output directory " + dir.string() + " is not writable");
  }
  std::filesystem::remove(probe, ec);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void check_hash(const std::string& what, const std::string& stored,
                       const std::string& expected, bool force) {
  if (stored == expected) return;
  if (force) {
    std::cerr << "warning: " << what << " hash " << stored << " does not match " << expected
              << "; continuing because of --force\n";
    return;
  }
  throw ValidationError(what + " was produced by a different configuration (hash " + stored +
                        ", expected " + expected + "); rerun it or pass --force");
}

inline std::vector<ClientData> obtain_suite(const ExperimentConfig& cfg, const CliOptions& o) {
  if (!o.data_dir) return build_suite(cfg);
  LoadedSuite s = load_suite(*o.data_dir / "manifest.json");
  check_hash("suite " + o.data_dir->string(), s.manifest.value("suite_hash", std::string()),
             cfg.suite_hash(), o.force);
  return std::move(s.clients);
}

inline std::string anchor_stem(std::size_t client) {
  return "client_" + std::to_string(client) + "_anchors";
}

inline std::vector<AnchorSet> obtain_anchors(const ExperimentConfig& cfg, const CliOptions& o,
                                             const std::vector<ClientData>& suite) {
  if (!o.anchors_dir) return distill_clients(cfg, suite);
  const nlohmann::json manifest = read_json(*o.anchors_dir / "anchors.json");
  check_hash("anchors " + o.anchors_dir->string(),
             manifest.value("anchors_hash", std::string()), cfg.anchors_hash(), o.force);
  std::vector<AnchorSet> out;
  for (const auto& stem : manifest.at("clients")) {
    out.push_back(load_anchors(*o.anchors_dir / stem.get<std::string>()).anchors);
  }
  if (out.size() != suite.size()) {
    throw ValidationError("anchors directory holds " + std::to_string(out.size()) +
                          " clients, suite has " + std::to_string(suite.size()));
  }
  return out;
}

inline nlohmann::json hashes(const ExperimentConfig& cfg) {
  return {{"config_hash", cfg.hash()},
          {"suite_hash", cfg.suite_hash()},
          {"anchors_hash", cfg.anchors_hash()}};
}

inline nlohmann::json matrix_json(const AccuracyMatrix& m) {
  nlohmann::json j = {{"values", m.values},
                      {"global_average", m.global_average()},
                      {"local_average", m.local_average()}};
  std::vector<double> per_model;
  for (std::size_t i = 0; i < m.size(); ++i) per_model.push_back(m.model_average(i));
  j["model_average"] = per_model;
  return j;
}

inline void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& m,
                               const std::string& config_hash) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path.string());
  os << "# config_hash=" << config_hash << '\n';
  os << "model";
  for (std::size_t j = 0; j < m.size(); ++j) os << ",client_" << j;
  os << '\n';
  for (std::size_t i = 0; i < m.size(); ++i) {
    os << i;
    for (double v : m.values[i]) os << ',' << fmt(v);
    os << '\n';
  }
}

struct CommPreset {
  std::string name;
  CommAuditInput input;
};

// Inputs stated for the CIFAR-scale comparison: 3x32x32 anchor images,
// IPC 50, ten classes, 100 rounds; ConvNet has 320K parameters and AlexNet
// 1.87M.
inline std::vector<CommPreset> cifar_presets() {
  return {
      {"desa", {Algorithm::desa, 0, 3 * 32 * 32, 50, 10, 10, 100}},
      {"fedavg-convnet", {Algorithm::fedavg, 320000, 0, 0, 0, 0, 100}},
      {"fedavg-alexnet", {Algorithm::fedavg, 1870000, 0, 0, 0, 0, 100}},
  };
}

inline std::vector<CommPreset> config_presets(const ExperimentConfig& cfg) {
  const std::size_t dim = cfg.data.dim, k = cfg.data.num_classes;
  std::vector<CommPreset> out{
      {"desa", {Algorithm::desa, 0, dim, cfg.distill.ipc, k, k, cfg.run.rounds}}};
  for (const std::string arch : {"arch-S", "arch-L"}) {
    const Model m = init_model(cfg.run.zoo.make(arch, dim, k), 0);
    out.push_back({"fedavg-" + arch, {Algorithm::fedavg, m.parameter_count(), 0, 0, 0, 0,
                                      cfg.run.rounds}});
  }
  return out;
}

}  // namespace detail

inline int cmd_gen_data(const CliOptions& o) {
  const ExperimentConfig cfg = detail::resolve(o);
  detail::ensure_out_dir(o.out_dir);
  const auto suite = build_suite(cfg);
  nlohmann::json prov = detail::hashes(cfg);
  prov["config"] = cfg.resolved;
  save_suite(o.out_dir, suite, prov);
  std::cout << "wrote " << suite.size() << " clients to " << o.out_dir.string() << '\n';
  return 0;
}

inline int cmd_distill(const CliOptions& o) {
  const ExperimentConfig cfg = detail::resolve(o);
  detail::ensure_out_dir(o.out_dir);
  const auto suite = detail::obtain_suite(cfg, o);
  std::vector<DistillTrace> traces;
  std::vector<AnchorSet> anchors;
  try {
    anchors = distill_clients(cfg, suite, &traces);
  } catch (const NumericError& e) {
    throw NumericError(std::string("distill: ") + e.what());
  }
  nlohmann::json manifest = detail::hashes(cfg);
  manifest["dp"] = cfg.distill.dp.has_value();
  manifest["clients"] = nlohmann::json::array();
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const std::string stem = detail::anchor_stem(i);
    nlohmann::json meta = detail::hashes(cfg);
    meta["client"] = i;
    meta["dp"] = cfg.distill.dp.has_value();
    const auto& obj = traces[i].objective;
    if (!obj.empty()) {
      meta["objective_start"] = obj.front();
      meta["objective_end"] = obj.back();
    }
    save_anchors(o.out_dir / stem, anchors[i], meta);
    manifest["clients"].push_back(stem);
  }
  detail::write_json(o.out_dir / "anchors.json", manifest);
  std::cout << "wrote anchors for " << anchors.size() << " clients to " << o.out_dir.string()
            << '\n';
  return 0;
}

inline int cmd_run(const CliOptions& o) {
  const auto started = std::chrono::steady_clock::now();
  const std::string started_at = detail::utc_now();
  const ExperimentConfig cfg = detail::resolve(o);
  detail::ensure_out_dir(o.out_dir);
  const auto suite = detail::obtain_suite(cfg, o);
  std::vector<AnchorSet> anchors;
  if (cfg.run.uses_anchors()) {
    try {
      anchors = detail::obtain_anchors(cfg, o, suite);
    } catch (const NumericError& e) {
      throw NumericError(std::string("distill: ") + e.what());
    }
  }
  ExperimentReport rep;
  try {
    rep = run_experiment(cfg.run, suite, anchors);
  } catch (const NumericError& e) {
    throw NumericError(std::string("run: ") + e.what());
  }
  const std::string hash = cfg.hash();

  {
    std::ofstream os(o.out_dir / "metrics.csv");
    if (!os) throw ValidationError("cannot write metrics.csv");
    os << "# config_hash=" << hash << '\n';
    os << "round,client,sampled,steps,ce,reg,kd,total\n";
    for (const auto& r : rep.rounds) {
      for (const auto& c : r.clients) {
        os << r.round << ',' << c.client << ',' << (c.sampled ? 1 : 0) << ',' << c.steps << ','
           << detail::fmt(c.mean.ce) << ',' << detail::fmt(c.mean.reg) << ','
           << detail::fmt(c.mean.kd) << ',' << detail::fmt(c.total) << '\n';
      }
    }
  }

  const auto ckpt_dir = o.out_dir / "checkpoints";
  std::filesystem::create_directories(ckpt_dir);
  nlohmann::json ckpts = nlohmann::json::array();
  for (std::size_t i = 0; i < rep.final_models.size(); ++i) {
    const std::string stem = "client_" + std::to_string(i);
    save_checkpoint(ckpt_dir / stem, rep.final_models[i],
                    {{"config_hash", hash}, {"client", i}});
    ckpts.push_back("checkpoints/" + stem);
  }

  std::uint64_t scalars = 0, messages = 0;
  for (const auto& t : rep.traffic) {
    scalars += t.scalars;
    messages += t.messages;
  }
  nlohmann::json report = detail::hashes(cfg);
  report["config"] = cfg.resolved;
  report["algorithm"] = to_string(cfg.run.algorithm);
  report["rounds"] = rep.rounds.size();
  report["accuracy"] = detail::matrix_json(rep.accuracy);
  report["checkpoints"] = ckpts;
  report["traffic"] = {{"messages", messages}, {"scalars_sent", scalars}};
  if (rep.global_anchors) report["global_anchor_records"] = rep.global_anchors->size();
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  report["timing"] = {{"started_at", started_at},
                      {"finished_at", detail::utc_now()},
                      {"wall_seconds", wall}};
  detail::write_json(o.out_dir / "report.json", report);
  std::cout << "global accuracy " << rep.accuracy.global_average() << ", local accuracy "
            << rep.accuracy.local_average() << '\n';
  return 0;
}

inline int cmd_eval(const CliOptions& o) {
  if (!o.run_dir) throw ConfigError("eval: --run DIR is required");
  const ExperimentConfig cfg = detail::resolve(o);
  detail::ensure_out_dir(o.out_dir);
  const auto suite = detail::obtain_suite(cfg, o);
  const std::string hash = cfg.hash();
  std::vector<Model> models;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const auto stem = *o.run_dir / "checkpoints" / ("client_" + std::to_string(i));
    LoadedCheckpoint ck = load_checkpoint(stem);
    detail::check_hash("checkpoint " + stem.string(),
                       ck.meta.value("config_hash", std::string()), hash, o.force);
    models.push_back(std::move(ck.model));
  }
  const AccuracyMatrix m = evaluate_all(models, suite);
  detail::write_accuracy_csv(o.out_dir / "accuracy.csv", m, hash);
  nlohmann::json out = detail::hashes(cfg);
  out["accuracy"] = detail::matrix_json(m);
  if (o.anchors_dir) {
    const auto anchors = detail::obtain_anchors(cfg, o, suite);
    const AnchorSet global = merge_anchors(anchors, cfg.run.merge_mode);
    try {
      const BoundProbeReport p =
          bound_probe(pooled(suite, Split::train), global.as_dataset(), std::nullopt, cfg.probe);
      out["bound_probe"] = {{"est_synth_label_error", p.est_synth_label_error},
                            {"proxy_divergence", p.proxy_divergence},
                            {"domain_classifier_accuracy", p.domain_classifier_accuracy},
                            {"oracle_train_accuracy", p.oracle_train_accuracy},
                            {"alpha_local", p.alpha_local},
                            {"alpha_synth", p.alpha_synth},
                            {"alpha_kd", p.alpha_kd}};
    } catch (const NumericError& e) {
      throw NumericError(std::string("bound probe: ") + e.what());
    }
  }
  detail::write_json(o.out_dir / "eval.json", out);
  std::cout << "global accuracy " << m.global_average() << ", local accuracy "
            << m.local_average() << '\n';
  return 0;
}

inline int cmd_comm_audit(const CliOptions& o) {
  const ExperimentConfig cfg = detail::resolve(o);
  detail::ensure_out_dir(o.out_dir);
  const auto presets = o.cifar_scale ? detail::cifar_presets() : detail::config_presets(cfg);
  nlohmann::json out = {{"config_hash", cfg.hash()},
                        {"inputs", o.cifar_scale ? "cifar-scale" : "config"},
                        {"ledgers", nlohmann::json::array()}};
  for (const auto& p : presets) {
    const CommLedger l = comm_audit(p.input);
    out["ledgers"].push_back({{"name", p.name},
                              {"algorithm", to_string(p.input.algorithm)},
                              {"pre_fl_params", l.pre_fl_params},
                              {"per_round_params", l.per_round_params},
                              {"rounds", l.rounds},
                              {"total", l.total},
                              {"total_display", format_millions(l.total)}});
    std::printf("%-16s pre-FL %12llu  per-round %10llu  rounds %4llu  total %12llu (%s)\n",
                p.name.c_str(), static_cast<unsigned long long>(l.pre_fl_params),
                static_cast<unsigned long long>(l.per_round_params),
                static_cast<unsigned long long>(l.rounds),
                static_cast<unsigned long long>(l.total), format_millions(l.total).c_str());
  }
  detail::write_json(o.out_dir / "comm_audit.json", out);
  return 0;
}

inline int cmd_grad_check(const CliOptions& o) {
  const ExperimentConfig cfg = detail::resolve(o);
  detail::ensure_out_dir(o.out_dir);
  GradCheckSetup setup;
  setup.seed = cfg.seed;
  if (o.full_width) setup.zoo = cfg.run.zoo;
  const auto results = run_grad_checks(setup, cfg.run.coef);
  bool all = true;
  nlohmann::json rows = nlohmann::json::array();
  std::printf("%-12s %-8s %-14s %s\n", "loss", "arch", "max_rel_error", "result");
  for (const auto& r : results) {
    all = all && r.passed;
    std::printf("%-12s %-8s %-14.3e %s\n", r.loss.c_str(), r.arch.c_str(), r.max_rel_error,
                r.passed ? "PASS" : "FAIL");
    rows.push_back({{"loss", r.loss},
                    {"arch", r.arch},
                    {"max_rel_error", r.max_rel_error},
                    {"passed", r.passed}});
  }
  detail::write_json(o.out_dir / "grad_check.json",
                     {{"config_hash", cfg.hash()},
                      {"tolerance", setup.tolerance},
                      {"eps", setup.eps},
                      {"results", rows}});
  if (!all) {
    std::cerr << "grad-check: at least one gradient exceeds tolerance " << setup.tolerance
              << '\n';
    return 2;
  }
  return 0;
}

inline int dispatch(const CliOptions& o) {
  if (o.subcommand == "gen-data") return cmd_gen_data(o);
  if (o.subcommand == "distill") return cmd_distill(o);
  if (o.subcommand == "run") return cmd_run(o);
  if (o.subcommand == "eval") return cmd_eval(o);
  if (o.subcommand == "comm-audit") return cmd_comm_audit(o);
  if (o.subcommand == "grad-check") return cmd_grad_check(o);
  throw ConfigError("unknown subcommand '" + o.subcommand + "'");
}

// Runs a command and converts library exceptions into exit codes.
inline int run_command(const CliOptions& o) {
  try {
    return dispatch(o);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

}  // namespace desa::cli
