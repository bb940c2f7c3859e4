#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "staincycle/image.hpp"

namespace staincycle::io {

inline constexpr int kSchemaVersion = 1;

// ---- image codec -----------------------------------------------------------

// Affine map [-1,1] -> [0,255] with round-half-even, encoded as 8-bit RGB PNG.
// decode(encode(x)) differs from x by at most 1/255 per element.
// Out-of-range input throws; callers clamp explicitly if they mean to.
std::vector<std::uint8_t> encode_image(const ImagePatch& patch);
ImagePatch decode_image(const std::vector<std::uint8_t>& png_bytes);

void save_image(const std::filesystem::path& path, const ImagePatch& patch);
ImagePatch load_image(const std::filesystem::path& path);

// Binary masks as 1-bit PNG.
void save_mask(const std::filesystem::path& path, const torch::Tensor& mask);
torch::Tensor load_mask(const std::filesystem::path& path);  // bool HxW

// ---- hashing ----------------------------------------------------------------

std::uint64_t fnv1a(const void* data, std::size_t n);
std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes);
std::uint64_t file_hash(const std::filesystem::path& path);

// Hash of the canonical (key-sorted) serialization; stable under key-order
// permutation of the input document.
std::uint64_t config_hash(const nlohmann::json& config);

// ---- manifests --------------------------------------------------------------

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::string role;  // imageA | imageB | mask
  std::uint64_t seed = 0;
  std::string split;
};

struct Manifest {
  int schema_version = kSchemaVersion;
  std::uint64_t config_hash = 0;
  std::vector<ManifestEntry> entries;

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
};

// Atomic write-then-rename.
void atomic_write(const std::filesystem::path& path, const std::string& contents);

void save_manifest(const std::filesystem::path& path, const Manifest& m);
// Verifies that every referenced file exists relative to the manifest.
Manifest load_manifest(const std::filesystem::path& path);

// ---- checkpoints -------------------------------------------------------------

// A checkpoint directory holds one .pt file per named module plus meta.json
// carrying the schema version, a content checksum per file, and caller
// metadata. load_checkpoint verifies checksums and the schema version.
void save_checkpoint(const std::filesystem::path& dir,
                     const std::map<std::string, std::shared_ptr<torch::nn::Module>>& modules,
                     const nlohmann::json& meta);
// Loads parameters into the given (already constructed) modules; returns meta.
nlohmann::json load_checkpoint(const std::filesystem::path& dir,
                               const std::map<std::string, std::shared_ptr<torch::nn::Module>>& modules);
nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir);

}  // namespace staincycle::io
