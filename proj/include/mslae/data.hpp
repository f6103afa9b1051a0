#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mslae/ops.hpp"
#include "mslae/tensor.hpp"

namespace mslae {

enum class Split { train, test };
const char* to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestEntry {
  std::filesystem::path image;
  std::filesystem::path mask;
  std::optional<std::filesystem::path> fov;
};

/// JSON listing: {"name", "split", "entries": [{"image", "mask", "fov"?}]}.
/// Relative paths resolve against the manifest's directory.
struct DatasetManifest {
  std::string name;
  Split split = Split::train;
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct Sample {
  std::string id;
  Tensor image;              // 1 x 3 x H x W, [0, 1] (or standardized)
  Tensor mask;               // 1 x 1 x H x W, {0, 1}
  std::optional<Tensor> fov;  // 1 x 1 x H x W, {0, 1}

  Hw size() const { return {image.shape().h, image.shape().w}; }
};

/// Grayscale annotations are thresholded at 0.5.
Tensor binarize_mask(const Tensor& gray);

Sample load_sample(const ManifestEntry& entry, const std::filesystem::path& base_dir);
/// Loads every entry; on any failure throws one error listing each bad entry.
std::vector<Sample> load_dataset(const DatasetManifest& manifest);

// ---- augmentation -----------------------------------------------------------

struct AugmentationConfig {
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double shift_frac = 0.1;
  uint64_t seed = 0;

  void validate() const;
  bool operator==(const AugmentationConfig&) const = default;
};

struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  int64_t dy = 0;  // rows moved down
  int64_t dx = 0;  // columns moved right
  bool operator==(const AugmentDraw&) const = default;
};

/// Deterministic in (cfg.seed, epoch, index): shifts are uniform integers in
/// [-floor(frac*H), floor(frac*H)] x [-floor(frac*W), floor(frac*W)].
AugmentDraw draw_augmentation(const AugmentationConfig& cfg, Hw size, uint64_t epoch, uint64_t index);

Tensor hflip(const Tensor& x);
Tensor vflip(const Tensor& x);
// Vacated pixels become 0; content moved past the border is dropped.
Tensor shift(const Tensor& x, int64_t dy, int64_t dx);

/// Flips, then shifts, applied identically to image, mask and FOV.
Sample augment(const Sample& sample, const AugmentDraw& draw);

// ---- patches -----------------------------------------------------------------

struct PatchRect {
  int64_t y = 0;
  int64_t x = 0;
  int64_t h = 0;
  int64_t w = 0;
  bool operator==(const PatchRect&) const = default;
};

/// Row/column starts step by `stride`; a final patch is aligned to the
/// bottom/right border when the steps do not reach it.
std::vector<PatchRect> patch_grid(Hw image, Hw patch, Hw stride);
Tensor crop_patch(const Tensor& x, const PatchRect& rect);

struct SamplePatch {
  PatchRect rect;
  Sample sample;
};
std::vector<SamplePatch> extract_patches(const Sample& sample, Hw patch, Hw stride);

struct TensorPatch {
  PatchRect rect;
  Tensor value;  // N x C x rect.h x rect.w
};
/// Averages overlapping patches; every pixel of `full` must be covered.
Tensor stitch(const std::vector<TensorPatch>& patches, Hw full);

// ---- normalization -------------------------------------------------------------

enum class NormalizeMode { per_image_standardize, none };
const char* to_string(NormalizeMode mode);
NormalizeMode parse_normalize_mode(const std::string& text);

/// Per channel zero mean / unit (population) variance over FOV pixels, or all
/// pixels without a FOV. Constant channels are left as is and reported in
/// `warnings`.
Sample normalize(const Sample& sample, NormalizeMode mode, std::vector<std::string>* warnings = nullptr);

// ---- synthetic data ---------------------------------------------------------------

/// Fundus-like image with dark curvilinear vessels, vignetting and noise,
/// a circular FOV and the exact vessel mask.
Sample synthetic_vessel_sample(Hw size, uint64_t seed, const std::string& id = "synthetic");

}  // namespace mslae
