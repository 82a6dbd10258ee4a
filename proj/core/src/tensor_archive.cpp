#include "diredi/tensor_archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "diredi/error.hpp"
#include "diredi/hash.hpp"

namespace diredi {
namespace {

constexpr std::size_t kHeaderBytes = 20;
constexpr std::size_t kDigestBytes = 32;

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::vector<std::byte>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_le(std::span<const std::byte> bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

std::string dtype_tag(const torch::Tensor& t) {
  if (t.scalar_type() == torch::kFloat32) return "f32";
  if (t.scalar_type() == torch::kFloat64) return "f64";
  throw FormatError("archive: unsupported tensor dtype " + std::string(c10::toString(t.scalar_type())));
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
  if (tag == "f32") return torch::kFloat32;
  if (tag == "f64") return torch::kFloat64;
  throw FormatError("archive: unknown dtype tag '" + tag + "'");
}

// Copies element bytes into `out` in little-endian order.
void append_le(std::vector<std::byte>& out, const torch::Tensor& t) {
  auto c = t.contiguous().cpu();
  const auto* src = static_cast<const std::byte*>(c.data_ptr());
  const std::size_t n = static_cast<std::size_t>(c.numel());
  const std::size_t width = c.element_size();
  const std::size_t start = out.size();
  out.resize(start + n * width);
  std::memcpy(out.data() + start, src, n * width);
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < n; ++i) {
      std::reverse(out.begin() + start + i * width, out.begin() + start + (i + 1) * width);
    }
  }
}

}  // namespace

std::vector<std::byte> encode_archive(const std::string& kind, nlohmann::json manifest,
                                      const std::vector<NamedTensor>& tensors) {
  if (kind.size() != 4) throw FormatError("archive: kind tag must be 4 bytes");

  std::vector<std::byte> payload;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& nt : tensors) {
    const auto offset = payload.size();
    append_le(payload, nt.value);
    index.push_back({{"name", nt.name},
                     {"shape", nt.value.sizes().vec()},
                     {"dtype", dtype_tag(nt.value)},
                     {"offset", offset},
                     {"nbytes", payload.size() - offset}});
  }
  manifest["tensors"] = std::move(index);
  const std::string text = manifest.dump(1);

  std::vector<std::byte> out;
  out.reserve(kHeaderBytes + text.size() + 8 + payload.size() + kDigestBytes);
  for (char c : std::string("DRDI") + kind) out.push_back(static_cast<std::byte>(c));
  put_u32(out, kArchiveFormatVersion);
  put_u64(out, text.size());
  for (char c : text) out.push_back(static_cast<std::byte>(c));
  put_u64(out, payload.size());
  out.insert(out.end(), payload.begin(), payload.end());
  const Digest d = sha256(out);
  for (auto b : d) out.push_back(static_cast<std::byte>(b));
  return out;
}

Archive decode_archive(std::span<const std::byte> bytes, const std::string& expected_kind) {
  if (bytes.size() < kHeaderBytes) throw TruncationError("archive: file shorter than header");
  std::string magic(4, '\0');
  std::string kind(4, '\0');
  for (int i = 0; i < 4; ++i) {
    magic[i] = static_cast<char>(bytes[i]);
    kind[i] = static_cast<char>(bytes[4 + i]);
  }
  if (magic != "DRDI") throw FormatError("archive: bad magic");
  if (kind != expected_kind) {
    throw FormatError("archive: expected kind '" + expected_kind + "', found '" + kind + "'");
  }
  Archive ar;
  ar.kind = kind;
  ar.format_version = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
  if (ar.format_version != kArchiveFormatVersion) {
    throw FormatError("archive: unsupported format version " + std::to_string(ar.format_version));
  }
  const std::uint64_t mlen = get_le(bytes, 12, 8);
  if (mlen > bytes.size() || kHeaderBytes + mlen + 8 > bytes.size()) {
    throw TruncationError("archive: manifest extends past end of file");
  }
  const std::size_t payload_len_at = kHeaderBytes + mlen;
  const std::uint64_t plen = get_le(bytes, payload_len_at, 8);
  const std::size_t payload_at = payload_len_at + 8;
  if (plen > bytes.size() || payload_at + plen + kDigestBytes > bytes.size()) {
    throw TruncationError("archive: payload or checksum extends past end of file");
  }
  const std::size_t digest_at = payload_at + plen;
  if (digest_at + kDigestBytes != bytes.size()) {
    throw FormatError("archive: trailing bytes after checksum");
  }
  const Digest actual = sha256(bytes.first(digest_at));
  for (std::size_t i = 0; i < kDigestBytes; ++i) {
    if (std::to_integer<std::uint8_t>(bytes[digest_at + i]) != actual[i]) {
      throw ChecksumError("archive: checksum mismatch");
    }
  }

  const std::string text(reinterpret_cast<const char*>(bytes.data() + kHeaderBytes), mlen);
  try {
    ar.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive: manifest is not valid JSON: ") + e.what());
  }
  if (!ar.manifest.contains("tensors") || !ar.manifest["tensors"].is_array()) {
    throw FormatError("archive: manifest lacks a tensor index");
  }
  const auto payload = bytes.subspan(payload_at, plen);
  for (const auto& entry : ar.manifest["tensors"]) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto dtype = dtype_from_tag(entry.at("dtype").get<std::string>());
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    const std::uint64_t expect = static_cast<std::uint64_t>(t.numel()) * t.element_size();
    if (expect != nbytes) throw FormatError("archive: tensor '" + name + "' size disagrees with shape");
    if (offset > plen || nbytes > plen - offset) {
      throw FormatError("archive: tensor '" + name + "' lies outside the payload");
    }
    std::memcpy(t.data_ptr(), payload.data() + offset, nbytes);
    if constexpr (std::endian::native == std::endian::big) {
      auto* p = static_cast<std::byte*>(t.data_ptr());
      const auto w = t.element_size();
      for (std::int64_t i = 0; i < t.numel(); ++i) std::reverse(p + i * w, p + (i + 1) * w);
    }
    ar.tensors.push_back({name, std::move(t)});
  }
  return ar;
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::byte> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("short read on '" + path.string() + "'");
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write-then-rename so a crashed run never leaves a half-written artifact.
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed on '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

void write_archive(const std::filesystem::path& path, const std::string& kind,
                   nlohmann::json manifest, const std::vector<NamedTensor>& tensors) {
  write_file_bytes(path, encode_archive(kind, std::move(manifest), tensors));
}

Archive read_archive(const std::filesystem::path& path, const std::string& expected_kind) {
  return decode_archive(read_file_bytes(path), expected_kind);
}

std::string file_digest(const std::filesystem::path& path) {
  return to_hex(sha256(read_file_bytes(path)));
}

}  // namespace diredi
