#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace vlfuzz::images {

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct Image {
  int width = 0;
  int height = 0;
  std::string pixels;

  std::uint8_t at(int x, int y, int c) const {
    return static_cast<std::uint8_t>(pixels[static_cast<std::size_t>((y * width + x) * 3 + c)]);
  }
};

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary P6 with maxval 255. Comments in the header are accepted.
Image decode_ppm(std::string_view bytes);
std::string encode_ppm(const Image& img);
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);

// Content id: SHA-256 of the decoded pixel bytes.
std::string image_id(const Image& img);

enum class Split { Train, Validation, Holdout };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

enum class PerturbationKind { HorizontalFlip, GaussianNoise };
std::string to_string(PerturbationKind k);
PerturbationKind perturbation_from_string(const std::string& s);

struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::HorizontalFlip;
  double noise_sigma = 0.0;  // fraction of full scale, noise only
  std::uint64_t rng_seed = 0;

  void validate() const;
};

nlohmann::json to_json(const PerturbationSpec& p);
PerturbationSpec perturbation_from_json(const nlohmann::json& j);

Image apply_perturbation(const Image& img, const PerturbationSpec& spec);

struct ImageRef {
  std::string id;
  std::string path;
  int width = 0;
  int height = 0;
  Split split = Split::Train;
  std::optional<std::string> parent_id;
  std::optional<PerturbationSpec> perturbation;
};

nlohmann::json to_json(const ImageRef& r);
ImageRef image_ref_from_json(const nlohmann::json& j);

struct LoadStats {
  int files_seen = 0;
  int skipped = 0;     // undecodable
  int duplicates = 0;  // same pixels as an earlier file
  std::vector<std::string> warnings;
};

class ImagePool {
 public:
  ImagePool() = default;
  ImagePool(const ImagePool&) = delete;
  ImagePool& operator=(const ImagePool&) = delete;
  ImagePool(ImagePool&& other) noexcept;
  ImagePool& operator=(ImagePool&& other) noexcept;

  // Scans dir for *.ppm files (sorted by name), collapses duplicate pixel
  // content, and assigns splits by a seeded shuffle of the content ids.
  static ImagePool load(const std::filesystem::path& dir, std::array<double, 3> split_fractions,
                        std::uint64_t rng_seed, LoadStats* stats = nullptr);

  std::vector<ImageRef> images() const;
  std::vector<ImageRef> split(Split s) const;
  std::optional<ImageRef> find(const std::string& id) const;
  const ImageRef& get(const std::string& id) const;
  std::size_t size() const;

  Image pixels(const std::string& id) const;

  // Writes the derived image to blob_dir/<id>.ppm and registers it under the
  // parent's split. Registering the same derivation twice is a no-op.
  ImageRef register_derived(const std::string& parent_id, const PerturbationSpec& spec,
                            const std::filesystem::path& blob_dir);

  // Follows parent links to the original image.
  std::string root_of(const std::string& id) const;

  // Line-delimited records: id, path, parent_id, perturbation, split.
  std::string manifest_jsonl() const;

 private:
  mutable std::mutex mu_;
  std::vector<std::string> order_;
  std::map<std::string, ImageRef> refs_;
};

}  // namespace vlfuzz::images
