#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "saliency/network.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

enum class Split { train, test };

std::string to_string(Split split);

/// Images are stored N x H x W x channels with values normalised to [0, 1].
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  Split split = Split::train;
  std::size_t classes = 0;
  /// Optional N x H x W ground-truth relevance (1 inside the informative region).
  Tensor masks;

  std::size_t size() const { return labels.size(); }
  ActivationShape image_shape() const;
  /// Sample i as a [1, C, H, W] tensor.
  Tensor image(std::size_t i) const;
  /// Samples as a [n, C, H, W] batch.
  Tensor batch(std::span<const std::size_t> indices) const;
  /// Ground-truth mask of sample i as an [H, W] tensor.
  Tensor mask(std::size_t i) const;
  bool has_masks() const { return !masks.empty(); }

  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset head(std::size_t n) const;

  /// Checks labels < classes and N >= 1.
  void validate() const;
};

/// Raised for malformed IDX content; `offset` is the first offending byte.
class IdxFormatError : public std::runtime_error {
 public:
  IdxFormatError(const std::string& path, std::size_t offset, const std::string& what);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> values;
};

/// Unsigned-byte IDX file (any rank).
IdxArray read_idx(const std::string& path);
void write_idx(const std::string& path, const IdxArray& array);

/// Reads an image file (magic 0x00000803) and a label file (0x00000801).
Dataset ingest_idx(const std::string& images_path, const std::string& labels_path, Split split,
                   std::size_t classes = 0);

/// Writes images (rounded to bytes) and labels in the MNIST encoding.
void export_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path);

struct PatchDatasetOptions {
  std::size_t image_size = 16;
  std::size_t channels = 1;
  double background_max = 0.3;
  double patch_min = 0.7;
};

/// Images of dim uniform noise with one bright square patch. The image is split
/// into a g x g grid of cells (g = ceil(sqrt(classes))); the label is the cell
/// containing the patch, and the mask marks the patch pixels.
Dataset synth_patch_dataset(std::uint64_t seed, std::size_t count, std::size_t classes,
                            Split split = Split::train, PatchDatasetOptions options = {});

/// Train/test pair named by a dataset manifest.
struct DatasetPair {
  Dataset train;
  Dataset test;
};

/// Structured key-value manifest, either
///   [train] images=... labels=...   [test] images=... labels=...   (classes= under [dataset])
/// or
///   [synthetic] seed=... train=... test=... size=... classes=... channels=...
/// Relative paths resolve against the manifest directory.
DatasetPair load_dataset_manifest(const std::string& path);

}  // namespace saliency
