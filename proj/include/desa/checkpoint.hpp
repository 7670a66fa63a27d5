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

// Model checkpoints: a flat list of named tensors in a small binary
// container plus a JSON sidecar carrying the ArchSpec and provenance.
//
// Container layout (all integers little-endian):
//   "DESACKPT"            8-byte magic
//   u32 version           currently 1
//   u32 tensor_count
//   per tensor:
//     u32 name_len, name bytes (UTF-8, no terminator)
//     u32 rank, u64 dims[rank]
//     f64 payload[prod(dims)]  (IEEE-754 binary64, little-endian)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "desa/errors.hpp"
#include "desa/models.hpp"

namespace desa {

inline constexpr char kCheckpointMagic[8] = {'D', 'E', 'S', 'A',
                                              'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline std::vector<NamedTensor> named_tensors(const Params& p) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    out.push_back({"encoder." + std::to_string(i) + ".weight",
                   p.encoder[i].weight});
    out.push_back({"encoder." + std::to_string(i) + ".bias",
                   p.encoder[i].bias});
  }
  out.push_back({"head.weight", p.head.weight});
  out.push_back({"head.bias", p.head.bias});
  return out;
}

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<unsigned char>(v >> (8 * i));
  }
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const std::string& what) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) {
    throw ParseError("checkpoint: truncated while reading " + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(buf[i]) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline void write_tensor_container(const std::filesystem::path& path,
                                   const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    detail::put_le<std::uint32_t>(os,
                                  static_cast<std::uint32_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape()) {
      detail::put_le<std::uint64_t>(os, d);
    }
    for (double v : nt.tensor.values()) {
      detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
  }
  if (!os) throw ValidationError("write failed: " + path.string());
}

inline std::vector<NamedTensor> read_tensor_container(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw ParseError("checkpoint " + path.string() + ": bad magic");
  }
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint " + path.string() + ": unsupported version " +
                     std::to_string(version));
  }
  const auto count = detail::get_le<std::uint32_t>(is, "tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = detail::get_le<std::uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw ParseError("checkpoint: truncated tensor name");
    }
    const auto rank = detail::get_le<std::uint32_t>(is, name + " rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(is, name + " dims"));
    }
    std::vector<double> data(shape_product(shape));
    for (double& v : data) {
      v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is, name + " payload"));
    }
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

inline nlohmann::json arch_to_json(const ArchSpec& s) {
  return {{"arch_id", s.arch_id},
          {"input_dim", s.input_dim},
          {"hidden_dims", s.hidden_dims},
          {"embed_dim", s.embed_dim},
          {"num_classes", s.num_classes}};
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
  ArchSpec s;
  s.arch_id = j.at("arch_id").get<std::string>();
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
  s.embed_dim = j.at("embed_dim").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.validate();
  return s;
}

// Writes `<stem>.bin` and `<stem>.json`. `meta` is merged into the sidecar.
inline void save_checkpoint(const std::filesystem::path& stem,
                            const Model& model,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  write_tensor_container(stem.string() + ".bin", named_tensors(model.params));
  nlohmann::json side = meta;
  side["arch"] = arch_to_json(model.spec);
  side["parameter_count"] = model.parameter_count();
  std::ofstream os(stem.string() + ".json");
  os << side.dump(2) << '\n';
}

struct LoadedCheckpoint {
  Model model;
  nlohmann::json meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& stem) {
  std::ifstream js(stem.string() + ".json");
  if (!js) throw ValidationError("missing checkpoint sidecar " + stem.string() + ".json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint sidecar: " + std::string(e.what()));
  }
  LoadedCheckpoint out{Model{arch_from_json(meta.at("arch")), {}}, meta};
  // Shapes come from a freshly built skeleton; the container must match it.
  out.model.params = init_model(out.model.spec, 0).params;
  auto expected = named_tensors(out.model.params);
  auto stored = read_tensor_container(stem.string() + ".bin");
  if (stored.size() != expected.size()) {
    throw ParseError("checkpoint " + stem.string() + ": expected " +
                     std::to_string(expected.size()) + " tensors, found " +
                     std::to_string(stored.size()));
  }
  std::size_t k = 0;
  out.model.params.for_each_tensor([&](Tensor& t) {
    if (stored[k].name != expected[k].name ||
        stored[k].tensor.shape() != t.shape()) {
      throw ParseError("checkpoint " + stem.string() + ": tensor " +
                       stored[k].name + " does not match " + expected[k].name +
                       shape_string(t.shape()));
    }
    t = std::move(stored[k].tensor);
    ++k;
  });
  return out;
}

}  // namespace desa
