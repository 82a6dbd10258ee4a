#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "diredi/weights.hpp"

namespace diredi {

inline constexpr const char* kPacketKind = "KPKT";
inline constexpr int kPacketFormatVersion = 1;

// The only metadata that leaves the customer. Serialisation writes exactly
// these keys and parsing rejects any other key.
struct PacketManifest {
  std::string architecture_digest;
  // Head-row order of the delta. Categories the receiver does not know are
  // replaced by opaque tokens ("novel-0", ...).
  std::vector<std::string> class_plan;
  std::vector<std::string> emulation_plan;  // tutor 1, same token scheme
  std::vector<std::string> customer_plan;   // tutor 2, same token scheme
  double gamma_delta = 1.0;
  std::string created;  // ISO-8601 UTC
  std::string presumed_dataset_fingerprint;
  std::string payload_checksum;  // SHA-256 of the tensor payload, filled on write

  nlohmann::json to_json() const;
  static PacketManifest from_json(const nlohmann::json& j);
  friend bool operator==(const PacketManifest&, const PacketManifest&) = default;
};

struct KnowledgePacket {
  WeightSet delta;
  PacketManifest manifest;
};

bool operator==(const KnowledgePacket& a, const KnowledgePacket& b);

// Token substitution for categories outside `shareable`. Returns the
// rewritten list; `aliases` receives token -> real name.
std::vector<std::string> anonymize_categories(const std::vector<std::string>& categories,
                                              const std::set<std::string>& shareable,
                                              std::map<std::string, std::string>& aliases);

// Current UTC time, or SOURCE_DATE_EPOCH when set.
std::string packet_timestamp();

std::vector<std::byte> encode_packet(const KnowledgePacket& packet);
KnowledgePacket decode_packet(std::span<const std::byte> bytes);

// Writes atomically (temporary file + rename).
void serialize_packet(const KnowledgePacket& packet, const std::filesystem::path& path);
// Throws TruncationError, ChecksumError, FormatError, or
// DigestMismatchError when the tensors do not fit the recorded digest.
KnowledgePacket deserialize_packet(const std::filesystem::path& path);

// Replaces each delta tensor by Gaussian noise of the same Frobenius norm.
// Testing hook for the verification gate.
WeightSet noise_like(const WeightSet& delta, std::uint64_t seed);

}  // namespace diredi
