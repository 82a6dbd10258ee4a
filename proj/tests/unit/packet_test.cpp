#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>

#include "diredi/error.hpp"
#include "diredi/packet.hpp"
#include "diredi/tensor_archive.hpp"
#include "test_util.hpp"

namespace diredi {
namespace {

const std::vector<std::string> kPresumed{"disc", "square"};

// Emulation tutor on the presumed plan, customer tutor with one private class.
KnowledgePacket make_packet(std::map<std::string, std::string>& aliases, int neck_channels = 8) {
  auto t1 = build_detector(testing::tiny_config(kPresumed, neck_channels), 1);
  auto t2 = with_categories(build_detector(testing::tiny_config(kPresumed, neck_channels), 2),
                            {"disc", "square", "starfish"}, 3);
  const std::vector<std::string> plan{"disc", "square", "starfish"};
  KnowledgePacket p;
  p.delta = compute_delta(extract_weights(align_to_categories(t1, plan), {Part::neck, Part::head}),
                          extract_weights(align_to_categories(t2, plan), {Part::neck, Part::head}), 1.0);
  const std::set<std::string> shareable(kPresumed.begin(), kPresumed.end());
  p.manifest.class_plan = anonymize_categories(plan, shareable, aliases);
  p.manifest.emulation_plan = anonymize_categories(t1->config().categories, shareable, aliases);
  p.manifest.customer_plan = anonymize_categories(t2->config().categories, shareable, aliases);
  p.manifest.architecture_digest = architecture_digest(p.delta);
  p.manifest.created = "2024-01-01T00:00:00Z";
  p.manifest.presumed_dataset_fingerprint = std::string(64, 'a');
  return p;
}

TEST(Anonymize, ReplacesOnlyUnsharedNames) {
  std::map<std::string, std::string> aliases;
  const auto out = anonymize_categories({"disc", "cat", "dog", "cat"}, {"disc"}, aliases);
  EXPECT_EQ(out, (std::vector<std::string>{"disc", "novel-0", "novel-1", "novel-0"}));
  EXPECT_EQ(aliases.at("novel-0"), "cat");
  EXPECT_EQ(aliases.at("novel-1"), "dog");
  // Stable across calls sharing the alias map.
  EXPECT_EQ(anonymize_categories({"dog"}, {"disc"}, aliases), (std::vector<std::string>{"novel-1"}));
}

TEST(Packet, RoundTripIsBitExact) {
  std::map<std::string, std::string> aliases;
  const auto p = make_packet(aliases);
  testing::TempDir dir;
  serialize_packet(p, dir / "k.pkt");
  const auto back = deserialize_packet(dir / "k.pkt");
  EXPECT_TRUE(back.delta == p.delta);
  EXPECT_FALSE(back.manifest.payload_checksum.empty());
  auto sent = p;
  sent.manifest.payload_checksum = back.manifest.payload_checksum;
  EXPECT_TRUE(back == sent);
  for (const auto& e : back.delta.entries()) {
    EXPECT_TRUE(testing::bit_equal(e.value, p.delta.find(e.name)->value)) << e.name;
  }
  // Re-encoding the decoded packet reproduces the bytes.
  EXPECT_EQ(encode_packet(back), read_file_bytes(dir / "k.pkt"));
}

TEST(Packet, EverySingleByteCorruptionIsDetected) {
  std::map<std::string, std::string> aliases;
  auto bytes = encode_packet(make_packet(aliases, 4));
  ASSERT_LT(bytes.size(), 200000u) << "fixture grew; keep the exhaustive loop cheap";
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const auto orig = bytes[i];
    bytes[i] = orig ^ std::byte{0x5a};
    EXPECT_THROW(decode_packet(bytes), Error) << "byte " << i;
    bytes[i] = orig;
  }
  EXPECT_NO_THROW(decode_packet(bytes));
}

TEST(Packet, TruncationIsDetected) {
  std::map<std::string, std::string> aliases;
  auto bytes = encode_packet(make_packet(aliases, 4));
  for (std::size_t keep : {std::size_t{0}, std::size_t{3}, std::size_t{19}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::byte> cut(bytes.begin(), bytes.begin() + static_cast<long>(keep));
    EXPECT_THROW(decode_packet(cut), IoError) << keep;
  }
}

TEST(Packet, ContainsNoPrivateCategoryNames) {
  std::map<std::string, std::string> aliases;
  const auto p = make_packet(aliases);
  const auto bytes = encode_packet(p);
  std::string text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  std::transform(text.begin(), text.end(), text.begin(), [](char c) { return static_cast<char>(std::tolower(c)); });
  EXPECT_EQ(text.find("starfish"), std::string::npos);
  EXPECT_NE(text.find("novel-0"), std::string::npos);
  EXPECT_NE(text.find("disc"), std::string::npos);
  EXPECT_EQ(aliases.at("novel-0"), "starfish");
}

TEST(Packet, ManifestRejectsUnknownKeys) {
  std::map<std::string, std::string> aliases;
  auto j = make_packet(aliases).manifest.to_json();
  EXPECT_NO_THROW(PacketManifest::from_json(j));
  j["customer_notes"] = "private";
  EXPECT_THROW(PacketManifest::from_json(j), FormatError);
}

TEST(Packet, EncodeRefusesDigestMismatch) {
  std::map<std::string, std::string> aliases;
  auto p = make_packet(aliases);
  p.manifest.architecture_digest = std::string(64, '0');
  EXPECT_THROW(encode_packet(p), DigestMismatchError);
}

TEST(Packet, WrongKindIsFormatError) {
  const auto bytes = encode_archive("CKPT", nlohmann::json::object(), {{"head.x", torch::zeros({2})}});
  EXPECT_THROW(decode_packet(bytes), FormatError);
}

TEST(Packet, TimestampHonoursSourceDateEpoch) {
  ::setenv("SOURCE_DATE_EPOCH", "0", 1);
  EXPECT_EQ(packet_timestamp(), "1970-01-01T00:00:00Z");
  ::unsetenv("SOURCE_DATE_EPOCH");
  EXPECT_NE(packet_timestamp(), "1970-01-01T00:00:00Z");
}

TEST(NoiseLike, MatchesNormsAndIsSeeded) {
  std::map<std::string, std::string> aliases;
  const auto delta = make_packet(aliases).delta;
  const auto a = noise_like(delta, 7);
  const auto b = noise_like(delta, 7);
  const auto c = noise_like(delta, 8);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  EXPECT_EQ(architecture_digest(a), architecture_digest(delta));
  for (const auto& e : a.entries()) {
    EXPECT_NEAR(e.value.norm().item<double>(), delta.find(e.name)->value.norm().item<double>(), 1e-9);
  }
}

}  // namespace
}  // namespace diredi
