#pragma once

#include <filesystem>

#include "diredi/detector.hpp"

namespace diredi {

inline constexpr const char* kCheckpointKind = "CKPT";

// Writes parameters and normalisation buffers as float32 blobs behind a JSON
// manifest holding the config, seed and training provenance.
void save_checkpoint(const Detector& detector, const std::filesystem::path& path);

// Fails with ChecksumError/TruncationError/FormatError on a damaged file and
// ShapeError when a tensor does not fit the recorded config.
Detector load_checkpoint(const std::filesystem::path& path);

// Size of the checkpoint encoding, without touching the filesystem.
std::size_t checkpoint_size_bytes(const Detector& detector);

}  // namespace diredi
