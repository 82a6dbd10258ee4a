#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

namespace diredi {

// Container shared by checkpoints and knowledge packets.
//
// Byte layout (all integers little-endian):
//
//   [0, 4)    magic "DRDI"
//   [4, 8)    kind tag, e.g. "CKPT" or "KPKT"
//   [8, 12)   u32 format version
//   [12, 20)  u64 manifest length M
//   [20, 20+M)            manifest, UTF-8 JSON
//   [20+M, 28+M)          u64 payload length P
//   [28+M, 28+M+P)        payload: tensor blobs, row-major, little-endian
//   [28+M+P, 60+M+P)      SHA-256 over every preceding byte
//
// The manifest carries a "tensors" array of {name, shape, dtype, offset,
// nbytes}; dtype is "f32" or "f64". Callers own every other manifest key.
inline constexpr std::uint32_t kArchiveFormatVersion = 1;

struct NamedTensor {
  std::string name;
  torch::Tensor value;
};

struct Archive {
  std::string kind;
  std::uint32_t format_version = kArchiveFormatVersion;
  nlohmann::json manifest;
  std::vector<NamedTensor> tensors;
};

// Encodes tensors (float32 or float64, any device-local contiguous layout)
// behind the manifest. The "tensors" key of `manifest` is overwritten.
std::vector<std::byte> encode_archive(const std::string& kind, nlohmann::json manifest,
                                      const std::vector<NamedTensor>& tensors);

// Throws TruncationError, ChecksumError, or FormatError.
Archive decode_archive(std::span<const std::byte> bytes, const std::string& expected_kind);

void write_archive(const std::filesystem::path& path, const std::string& kind,
                   nlohmann::json manifest, const std::vector<NamedTensor>& tensors);
Archive read_archive(const std::filesystem::path& path, const std::string& expected_kind);

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes);
std::string file_digest(const std::filesystem::path& path);

}  // namespace diredi
