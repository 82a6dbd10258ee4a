#include "diredi/packet.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <set>

#include "diredi/error.hpp"
#include "diredi/hash.hpp"
#include "diredi/tensor_archive.hpp"

namespace diredi {
namespace {

const std::set<std::string>& manifest_keys() {
  static const std::set<std::string> kKeys{"format_version",  "architecture_digest",
                                           "class_plan",      "emulation_plan",
                                           "customer_plan",   "gamma_delta",
                                           "created",         "presumed_dataset_fingerprint",
                                           "payload_checksum", "tensors"};
  return kKeys;
}

std::string payload_checksum(const WeightSet& delta) {
  Sha256 h;
  for (const auto& e : delta.entries()) {
    const auto& t = e.value;
    h.update(std::span(static_cast<const std::byte*>(t.data_ptr()), static_cast<std::size_t>(t.nbytes())));
  }
  return to_hex(h.finish());
}

}  // namespace

nlohmann::json PacketManifest::to_json() const {
  return {{"format_version", kPacketFormatVersion},
          {"architecture_digest", architecture_digest},
          {"class_plan", class_plan},
          {"emulation_plan", emulation_plan},
          {"customer_plan", customer_plan},
          {"gamma_delta", gamma_delta},
          {"created", created},
          {"presumed_dataset_fingerprint", presumed_dataset_fingerprint},
          {"payload_checksum", payload_checksum}};
}

PacketManifest PacketManifest::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("packet manifest is not an object");
  for (const auto& [key, value] : j.items()) {
    if (!manifest_keys().contains(key)) throw FormatError("packet manifest: key '" + key + "' is not allowed");
  }
  PacketManifest m;
  try {
    if (j.at("format_version").get<int>() != kPacketFormatVersion) {
      throw FormatError("packet manifest: unsupported format version");
    }
    m.architecture_digest = j.at("architecture_digest").get<std::string>();
    m.class_plan = j.at("class_plan").get<std::vector<std::string>>();
    m.emulation_plan = j.at("emulation_plan").get<std::vector<std::string>>();
    m.customer_plan = j.at("customer_plan").get<std::vector<std::string>>();
    m.gamma_delta = j.at("gamma_delta").get<double>();
    m.created = j.at("created").get<std::string>();
    m.presumed_dataset_fingerprint = j.at("presumed_dataset_fingerprint").get<std::string>();
    m.payload_checksum = j.at("payload_checksum").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("packet manifest: ") + e.what());
  }
  return m;
}

bool operator==(const KnowledgePacket& a, const KnowledgePacket& b) {
  return a.manifest == b.manifest && a.delta == b.delta;
}

std::vector<std::string> anonymize_categories(const std::vector<std::string>& categories,
                                              const std::set<std::string>& shareable,
                                              std::map<std::string, std::string>& aliases) {
  std::map<std::string, std::string> reverse;
  for (const auto& [token, name] : aliases) reverse[name] = token;
  std::vector<std::string> out;
  for (const auto& c : categories) {
    if (shareable.contains(c)) {
      out.push_back(c);
      continue;
    }
    auto it = reverse.find(c);
    if (it == reverse.end()) {
      const std::string token = "novel-" + std::to_string(aliases.size());
      aliases[token] = c;
      it = reverse.emplace(c, token).first;
    }
    out.push_back(it->second);
  }
  return out;
}

std::string packet_timestamp() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(env, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<std::byte> encode_packet(const KnowledgePacket& packet) {
  if (architecture_digest(packet.delta) != packet.manifest.architecture_digest) {
    throw DigestMismatchError("packet: delta does not match the manifest's architecture digest");
  }
  PacketManifest m = packet.manifest;
  m.payload_checksum = payload_checksum(packet.delta);
  std::vector<NamedTensor> tensors;
  for (const auto& e : packet.delta.entries()) tensors.push_back({e.name, e.value});
  return encode_archive(kPacketKind, m.to_json(), tensors);
}

KnowledgePacket decode_packet(std::span<const std::byte> bytes) {
  Archive ar = decode_archive(bytes, kPacketKind);
  KnowledgePacket p;
  p.manifest = PacketManifest::from_json(ar.manifest);
  for (auto& nt : ar.tensors) {
    if (nt.value.scalar_type() != torch::kFloat64) throw FormatError("packet: tensor '" + nt.name + "' is not f64");
    p.delta.insert(nt.name, nt.value);
  }
  if (payload_checksum(p.delta) != p.manifest.payload_checksum) throw ChecksumError("packet: payload checksum mismatch");
  if (architecture_digest(p.delta) != p.manifest.architecture_digest) {
    throw DigestMismatchError("packet: tensors do not match the manifest's architecture digest");
  }
  return p;
}

void serialize_packet(const KnowledgePacket& packet, const std::filesystem::path& path) {
  const auto bytes = encode_packet(packet);
  write_file_bytes(path, bytes);
}

KnowledgePacket deserialize_packet(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_packet(bytes);
}

WeightSet noise_like(const WeightSet& delta, std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  WeightSet out;
  for (const auto& e : delta.entries()) {
    auto noise = at::normal(0.0, 1.0, e.value.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat64));
    const double target = e.value.norm().item<double>();
    const double have = noise.norm().item<double>();
    out.insert(e.name, have > 0.0 ? noise * (target / have) : noise * 0.0);
  }
  return out;
}

}  // namespace diredi
