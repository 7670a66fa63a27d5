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

// Strict JSON experiment configuration. A user file is merged over the
// built-in defaults; any key that is not already present in the defaults is
// rejected, as is a value whose JSON type differs from the default's.
// `--set a.b=value` overrides follow the same rules.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "desa/datasets.hpp"
#include "desa/distill.hpp"
#include "desa/errors.hpp"
#include "desa/eval.hpp"
#include "desa/parallel.hpp"
#include "desa/protocol.hpp"
#include "desa/rng.hpp"

namespace desa {

struct ExperimentConfig {
  std::uint64_t seed = 0;
  SuiteConfig data;
  DistillConfig distill;
  RunConfig run;
  ProbeConfig probe;
  nlohmann::json resolved;  // defaults with every override applied

  std::string hash() const;
  std::string suite_hash() const;
  std::string anchors_hash() const;
};

inline nlohmann::json default_config_json() {
  const SuiteConfig d;
  const DistillConfig s;
  const DpConfig dp;
  const RunConfig r;
  const ProbeConfig p;
  return {
      {"seed", std::uint64_t{0}},
      {"data",
       {{"n_clients", d.n_clients},
        {"samples_per_client", d.samples_per_client},
        {"num_classes", d.num_classes},
        {"dim", d.dim},
        {"base", "gaussian_blobs"},
        {"radius", d.radius},
        {"noise_std", d.noise_std},
        {"rotation_step_deg", d.rotation_step_deg},
        {"translation", nlohmann::json::array()},
        {"dirichlet_beta", nullptr}}},
      {"distill",
       {{"ipc", s.ipc},
        {"iterations", s.iterations},
        {"lr", s.lr},
        {"momentum", s.momentum},
        {"batch_size", s.batch_size},
        {"encoder", "random_mlp"},
        {"encoder_min_width", s.encoder_min_width},
        {"encoder_max_width", s.encoder_max_width},
        {"init", "real"},
        {"dp",
         {{"enabled", false},
          {"clip_norm", dp.clip_norm},
          {"noise_sigma", dp.noise_sigma},
          {"batch_size", dp.batch_size}}}}},
      {"run",
       {{"algorithm", "desa"},
        {"rounds", r.rounds},
        {"local_epochs", r.local_epochs},
        {"batch_size", r.batch_size},
        {"lr", r.lr},
        {"client_sample_ratio", r.client_sample_ratio},
        {"lambda_reg", r.coef.lambda_reg},
        {"lambda_kd", r.coef.lambda_kd},
        {"tau_temp", r.coef.tau_temp},
        {"normalize_embeddings", r.coef.normalize_embeddings},
        {"anchor_ce", r.anchor_ce},
        {"anchor_batch_ratio", r.anchor_batch_ratio},
        {"merge", "average"},
        {"topology", "full"},
        {"topology_degree", r.topology_degree},
        {"archs", r.archs},
        {"shared_init", r.shared_init},
        {"fedavg_weight_by_size", r.fedavg_weight_by_size}}},
      {"models",
       {{"small_width", r.zoo.small_width},
        {"large_width", r.zoo.large_width},
        {"large_embed", r.zoo.large_embed}}},
      {"probe",
       {{"oracle_hidden", p.oracle_hidden},
        {"oracle_epochs", p.oracle_epochs},
        {"oracle_lr", p.oracle_lr},
        {"domain_width", p.domain_width},
        {"domain_epochs", p.domain_epochs},
        {"domain_lr", p.domain_lr},
        {"batch_size", p.batch_size}}},
  };
}

namespace detail {

inline bool json_kind_matches(const nlohmann::json& def, const nlohmann::json& v) {
  if (def.is_null()) return v.is_null() || v.is_number();
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_unsigned()) return v.is_number_unsigned();
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  return def.type() == v.type();
}

inline std::string json_kind_name(const nlohmann::json& def) {
  if (def.is_null()) return "number or null";
  if (def.is_boolean()) return "boolean";
  if (def.is_number_unsigned()) return "non-negative integer";
  if (def.is_number_integer()) return "integer";
  if (def.is_number()) return "number";
  return def.type_name();
}

inline void check_array_items(const std::string& path, const nlohmann::json& def,
                              const nlohmann::json& v) {
  for (const auto& item : v) {
    const bool ok = def.empty() ? item.is_number() : json_kind_matches(def.front(), item);
    if (!ok) throw ConfigError(path + ": array element has the wrong type");
  }
}

inline void merge_strict(nlohmann::json& base, const nlohmann::json& user,
                         const std::string& prefix) {
  if (!user.is_object()) throw ConfigError((prefix.empty() ? "config" : prefix) +
                                           ": expected an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    nlohmann::json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), path);
      continue;
    }
    if (!json_kind_matches(slot, it.value())) {
      throw ConfigError(path + ": expected " + json_kind_name(slot) + ", got " +
                        it.value().dump());
    }
    if (slot.is_array()) check_array_items(path, slot, it.value());
    // Real-valued slots are stored as doubles so that `1` and `1.0` hash alike.
    const bool real_slot = slot.is_null() || slot.is_number_float();
    slot = it.value();
    if (real_slot && slot.is_number()) slot = slot.get<double>();
  }
}

inline std::vector<std::string> split_path(const std::string& key) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    parts.push_back(key.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (const auto& p : parts) {
    if (p.empty()) throw ConfigError("malformed override key '" + key + "'");
  }
  return parts;
}

// Applies `key=value`; the value is read as JSON and falls back to a string.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must look like key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  const auto parts = split_path(key);
  nlohmann::json patch = value;
  for (std::size_t i = parts.size(); i-- > 0;) patch = nlohmann::json{{parts[i], patch}};
  merge_strict(cfg, patch, "");
}

template <class E>
E parse_choice(const nlohmann::json& j, const std::string& field,
               std::initializer_list<std::pair<const char*, E>> choices) {
  const auto s = j.get<std::string>();
  std::string names;
  for (const auto& [name, value] : choices) {
    if (s == name) return value;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError(field + ": unknown value '" + s + "' (expected one of " + names + ")");
}

inline double positive_or_throw(double v, const std::string& field) {
  if (!(v > 0.0)) throw ConfigError(field + " must be > 0");
  return v;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string hash_json(const nlohmann::json& j) { return hex64(fnv1a64(j.dump())); }

}  // namespace detail

// Builds typed settings from a fully resolved JSON document. Range errors are
// reported as ConfigError with the dotted field name.
inline ExperimentConfig config_from_resolved(nlohmann::json resolved) {
  ExperimentConfig c;
  const auto& j = resolved;
  c.seed = j.at("seed").get<std::uint64_t>();

  const auto& d = j.at("data");
  c.data.n_clients = d.at("n_clients").get<std::size_t>();
  c.data.samples_per_client = d.at("samples_per_client").get<std::size_t>();
  c.data.num_classes = d.at("num_classes").get<std::size_t>();
  c.data.dim = d.at("dim").get<std::size_t>();
  c.data.base = detail::parse_choice<BaseDistribution>(
      d.at("base"), "data.base",
      {{"gaussian_blobs", BaseDistribution::gaussian_blobs},
       {"two_arcs", BaseDistribution::two_arcs}});
  c.data.radius = d.at("radius").get<double>();
  c.data.noise_std = d.at("noise_std").get<double>();
  c.data.rotation_step_deg = d.at("rotation_step_deg").get<double>();
  c.data.translation = d.at("translation").get<std::vector<double>>();
  if (!d.at("dirichlet_beta").is_null()) {
    c.data.dirichlet_beta = d.at("dirichlet_beta").get<double>();
  }
  c.data.seed = c.seed;

  const auto& s = j.at("distill");
  c.distill.ipc = s.at("ipc").get<std::size_t>();
  c.distill.iterations = s.at("iterations").get<std::size_t>();
  c.distill.lr = s.at("lr").get<double>();
  c.distill.momentum = s.at("momentum").get<double>();
  c.distill.batch_size = s.at("batch_size").get<std::size_t>();
  c.distill.encoder = detail::parse_choice<EncoderKind>(
      s.at("encoder"), "distill.encoder",
      {{"random_mlp", EncoderKind::random_mlp}, {"identity", EncoderKind::identity}});
  c.distill.encoder_min_width = s.at("encoder_min_width").get<std::size_t>();
  c.distill.encoder_max_width = s.at("encoder_max_width").get<std::size_t>();
  c.distill.init = detail::parse_choice<AnchorInit>(
      s.at("init"), "distill.init", {{"real", AnchorInit::real}, {"noise", AnchorInit::noise}});
  const auto& dp = s.at("dp");
  if (dp.at("enabled").get<bool>()) {
    c.distill.dp = DpConfig{dp.at("clip_norm").get<double>(), dp.at("noise_sigma").get<double>(),
                            dp.at("batch_size").get<std::size_t>()};
  }

  const auto& r = j.at("run");
  c.run.algorithm = detail::parse_choice<Algorithm>(
      r.at("algorithm"), "run.algorithm",
      {{"desa", Algorithm::desa},
       {"standalone", Algorithm::standalone},
       {"fedavg", Algorithm::fedavg},
       {"logit-only", Algorithm::logit_only}});
  c.run.rounds = r.at("rounds").get<std::size_t>();
  c.run.local_epochs = r.at("local_epochs").get<std::size_t>();
  c.run.batch_size = r.at("batch_size").get<std::size_t>();
  c.run.lr = r.at("lr").get<double>();
  c.run.client_sample_ratio = r.at("client_sample_ratio").get<double>();
  c.run.coef.lambda_reg = r.at("lambda_reg").get<double>();
  c.run.coef.lambda_kd = r.at("lambda_kd").get<double>();
  c.run.coef.tau_temp = r.at("tau_temp").get<double>();
  c.run.coef.normalize_embeddings = r.at("normalize_embeddings").get<bool>();
  c.run.anchor_ce = r.at("anchor_ce").get<bool>();
  c.run.anchor_batch_ratio = r.at("anchor_batch_ratio").get<double>();
  c.run.merge_mode = detail::parse_choice<MergeMode>(
      r.at("merge"), "run.merge", {{"average", MergeMode::average}, {"union", MergeMode::union_}});
  c.run.topology = detail::parse_choice<TopologyKind>(
      r.at("topology"), "run.topology",
      {{"full", TopologyKind::full},
       {"ring", TopologyKind::ring},
       {"random-k", TopologyKind::random_k}});
  c.run.topology_degree = r.at("topology_degree").get<std::size_t>();
  c.run.archs = r.at("archs").get<std::vector<std::string>>();
  c.run.shared_init = r.at("shared_init").get<bool>();
  c.run.fedavg_weight_by_size = r.at("fedavg_weight_by_size").get<bool>();
  c.run.seed = c.seed;
  c.run.workers = workers_from_env();

  const auto& m = j.at("models");
  c.run.zoo.small_width = m.at("small_width").get<std::size_t>();
  c.run.zoo.large_width = m.at("large_width").get<std::size_t>();
  c.run.zoo.large_embed = m.at("large_embed").get<std::size_t>();

  const auto& p = j.at("probe");
  c.probe.oracle_hidden = p.at("oracle_hidden").get<std::vector<std::size_t>>();
  c.probe.oracle_epochs = p.at("oracle_epochs").get<std::size_t>();
  c.probe.oracle_lr = detail::positive_or_throw(p.at("oracle_lr").get<double>(), "probe.oracle_lr");
  c.probe.domain_width = p.at("domain_width").get<std::size_t>();
  c.probe.domain_epochs = p.at("domain_epochs").get<std::size_t>();
  c.probe.domain_lr = detail::positive_or_throw(p.at("domain_lr").get<double>(), "probe.domain_lr");
  c.probe.batch_size = p.at("batch_size").get<std::size_t>();
  c.probe.seed = c.seed;
  c.probe.lambda_reg = c.run.coef.lambda_reg;
  c.probe.lambda_kd = c.run.coef.lambda_kd;

  // Field-level validation surfaces as configuration errors.
  try {
    c.data.validate();
    c.distill.validate();
    c.run.validate();
    for (const auto& a : c.run.archs) c.run.zoo.make(a, c.data.dim, c.data.num_classes);
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  if (c.probe.batch_size == 0) throw ConfigError("probe.batch_size must be >= 1");
  c.resolved = std::move(resolved);
  return c;
}

inline ExperimentConfig resolve_config(const nlohmann::json& user,
                                       const std::vector<std::string>& overrides = {},
                                       std::optional<std::uint64_t> seed = {}) {
  nlohmann::json cfg = default_config_json();
  detail::merge_strict(cfg, user, "");
  for (const auto& o : overrides) detail::apply_override(cfg, o);
  if (seed) cfg["seed"] = *seed;
  return config_from_resolved(std::move(cfg));
}

inline ExperimentConfig load_config(const std::optional<std::filesystem::path>& path,
                                    const std::vector<std::string>& overrides = {},
                                    std::optional<std::uint64_t> seed = {}) {
  nlohmann::json user = nlohmann::json::object();
  if (path) {
    std::ifstream is(*path);
    if (!is) throw ConfigError("cannot open config file " + path->string());
    try {
      user = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path->string() + ": " + e.what());
    }
  }
  return resolve_config(user, overrides, seed);
}

inline std::string ExperimentConfig::hash() const { return detail::hash_json(resolved); }

// Hash of the inputs that determine the generated suite.
inline std::string ExperimentConfig::suite_hash() const {
  return detail::hash_json({{"seed", resolved.at("seed")}, {"data", resolved.at("data")}});
}

// Hash of the inputs that determine the distilled anchors.
inline std::string ExperimentConfig::anchors_hash() const {
  return detail::hash_json({{"seed", resolved.at("seed")},
                            {"data", resolved.at("data")},
                            {"distill", resolved.at("distill")}});
}

// ---------------------------------------------------------------------------
// Pipeline stages shared by the command line and the acceptance checks.

inline std::vector<ClientData> build_suite(const ExperimentConfig& cfg) {
  return generate_suite(cfg.data);
}

inline DistillConfig client_distill_config(const ExperimentConfig& cfg, std::size_t client) {
  DistillConfig dc = cfg.distill;
  dc.seed = derive_seed(cfg.seed, "distill", {client});
  return dc;
}

// Distils every client's anchors; DP mode follows cfg.distill.dp.
inline std::vector<AnchorSet> distill_clients(const ExperimentConfig& cfg,
                                              const std::vector<ClientData>& suite,
                                              std::vector<DistillTrace>* traces = nullptr) {
  std::vector<AnchorSet> out(suite.size());
  if (traces) traces->resize(suite.size());
  parallel_for(suite.size(), cfg.run.workers, [&](std::size_t i) {
    const DistillConfig dc = client_distill_config(cfg, i);
    DistillTrace* tr = traces ? &(*traces)[i] : nullptr;
    out[i] = dc.dp ? distill_dp(suite[i].train, dc, tr) : distill(suite[i].train, dc, tr);
  });
  return out;
}

}  // namespace desa
