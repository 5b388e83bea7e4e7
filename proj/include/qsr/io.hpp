#pragma once

// On-disk formats: flat little-endian float32 volumes with a JSON sidecar,
// FSL-style bvals/bvecs text, and content hashing.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/dwi.hpp"

namespace qsr::io {

namespace fs = std::filesystem;

/// Raw payload plus the sidecar fields.
struct VolumeFile {
  std::vector<std::size_t> dims;
  std::vector<float> data;
  bool b0_normalized = true;
  nlohmann::json extra = nlohmann::json::object();
};

/// Sidecar lives next to the payload as `<path>.json`.
fs::path sidecar_path(const fs::path& payload);

void write_volume(const fs::path& path, const VolumeFile& volume);
VolumeFile read_volume(const fs::path& path);

/// Slices stacked as [slices, height, width, dirs].
VolumeFile pack_slices(std::span<const DwiVolume> slices);
std::vector<DwiVolume> unpack_slices(const VolumeFile& file, const GradientTable& table);

/// `bvals`: one row of N values. `bvecs`: three rows of N components.
void write_fsl_table(const fs::path& bvals, const fs::path& bvecs, const GradientTable& table);
GradientTable read_fsl_table(const fs::path& bvals, const fs::path& bvecs);

std::vector<unsigned char> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, std::span<const unsigned char> bytes);
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);
nlohmann::json read_json(const fs::path& path);
void write_json(const fs::path& path, const nlohmann::json& j);

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const fs::path& path);

}  // namespace qsr::io
