#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "relay/complexity.hpp"
#include "relay/io.hpp"
#include "relay/model.hpp"

namespace relay {

inline const char* to_string(ParamGroup g) { return g == ParamGroup::backbone ? "backbone" : "added"; }

/// Writes tensors/<name>.rtns for every parameter and manifest.json holding
/// the model config, dtype, per-tensor metadata and group totals. Output
/// bytes depend only on the parameter values.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& dir, const RelayModel<Scalar>& model,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir / "tensors");
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t backbone = 0, added = 0;
  for (const auto& p : model.named_parameters()) {
    const std::string file = "tensors/" + p.name + ".rtns";
    save_tensor(dir / file, p.tensor);
    (p.group == ParamGroup::backbone ? backbone : added) += p.tensor.size();
    tensors.push_back({{"name", p.name},
                       {"file", file},
                       {"shape", p.tensor.shape()},
                       {"group", to_string(p.group)},
                       {"elements", p.tensor.size()}});
  }
  nlohmann::json manifest{{"format", "relay-checkpoint"},
                          {"version", 1},
                          {"dtype", ScalarTraits<Scalar>::name},
                          {"model", model.config},
                          {"tensors", tensors},
                          {"parameters", {{"backbone", backbone}, {"added", added}}},
                          {"extra", extra}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw FormatError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no manifest.json in " + dir.string());
  auto manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != "relay-checkpoint") throw FormatError("not a relay checkpoint: " + dir.string());
  return manifest;
}

/// Parameter totals summed from the manifest's tensor list.
inline ParamCount manifest_param_count(const nlohmann::json& manifest) {
  ParamCount c;
  for (const auto& t : manifest.at("tensors")) {
    (t.at("group").get<std::string>() == "backbone" ? c.backbone : c.added) += t.at("elements").get<std::uint64_t>();
  }
  return c;
}

/// Rebuilds the model from the manifest config and overwrites every
/// parameter from its tensor file. Stored values are converted to `Scalar`.
template <typename Scalar>
RelayModel<Scalar> load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  const auto config = manifest.at("model").get<ModelConfig>();
  config.validate();
  auto model = RelayModel<Scalar>::init(config, 0);
  std::map<std::string, std::string> files;
  for (const auto& t : manifest.at("tensors")) files[t.at("name")] = t.at("file");
  for (auto& p : model.named_parameters()) {
    const auto it = files.find(p.name);
    if (it == files.end()) throw FormatError("checkpoint is missing " + p.name);
    const auto raw = load_rtns_file(dir / it->second);
    if (raw.shape != p.tensor.shape()) {
      throw FormatError("checkpoint tensor " + p.name + " has shape " + relay::to_string(raw.shape) + ", expected " +
                        relay::to_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Scalar>(raw.values[i]);
  }
  return model;
}

}  // namespace relay
