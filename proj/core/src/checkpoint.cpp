#include "diredi/checkpoint.hpp"

#include <map>

#include "diredi/error.hpp"
#include "diredi/tensor_archive.hpp"

namespace diredi {
namespace {

std::pair<nlohmann::json, std::vector<NamedTensor>> encode(const Detector& detector) {
  std::map<std::string, torch::Tensor> tensors;
  std::vector<std::string> buffers;
  for (const auto& item : detector->named_parameters()) tensors[item.key()] = item.value().detach();
  for (const auto& item : detector->named_buffers()) {
    tensors[item.key()] = item.value().detach();
    buffers.push_back(item.key());
  }
  std::vector<NamedTensor> blobs;
  for (const auto& [name, t] : tensors) blobs.push_back({name, t.to(torch::kFloat32)});
  nlohmann::json manifest = {{"kind", "checkpoint"},
                             {"config", detector->config().to_json()},
                             {"seed", detector->seed()},
                             {"parameter_count", detector->parameter_count()},
                             {"buffers", buffers},
                             {"provenance", detector->provenance()}};
  return {std::move(manifest), std::move(blobs)};
}

}  // namespace

void save_checkpoint(const Detector& detector, const std::filesystem::path& path) {
  auto [manifest, blobs] = encode(detector);
  write_archive(path, kCheckpointKind, std::move(manifest), blobs);
}

std::size_t checkpoint_size_bytes(const Detector& detector) {
  auto [manifest, blobs] = encode(detector);
  return encode_archive(kCheckpointKind, std::move(manifest), blobs).size();
}

Detector load_checkpoint(const std::filesystem::path& path) {
  Archive ar = read_archive(path, kCheckpointKind);
  DetectorConfig cfg;
  std::uint64_t seed = 0;
  try {
    cfg = DetectorConfig::from_json(ar.manifest.at("config"));
    seed = ar.manifest.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + path.string() + "': " + e.what());
  }
  Detector det = build_detector(cfg, seed);
  if (ar.manifest.contains("provenance")) det->provenance() = ar.manifest["provenance"];

  std::map<std::string, torch::Tensor> stored;
  for (auto& nt : ar.tensors) stored[nt.name] = std::move(nt.value);

  torch::NoGradGuard guard;
  std::size_t used = 0;
  auto restore = [&](const std::string& name, torch::Tensor& dst) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ShapeError("checkpoint '" + path.string() + "' lacks tensor '" + name + "'");
    if (it->second.sizes() != dst.sizes()) {
      throw ShapeError("checkpoint '" + path.string() + "': tensor '" + name + "' has shape " +
                       c10::str(it->second.sizes()) + ", model expects " + c10::str(dst.sizes()));
    }
    dst.copy_(it->second.to(dst.scalar_type()));
    ++used;
  };
  for (auto& item : det->named_parameters()) restore(item.key(), item.value());
  for (auto& item : det->named_buffers()) restore(item.key(), item.value());
  if (used != stored.size()) {
    throw ShapeError("checkpoint '" + path.string() + "' holds tensors the config does not account for");
  }
  det->eval();
  return det;
}

}  // namespace diredi
