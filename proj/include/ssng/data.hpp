#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssng/dsprites.hpp"
#include "ssng/rng.hpp"

namespace ssng::data {

enum class DatasetKind { FashionMnist, Cifar10, DSprites, DSpritesProcedural };

DatasetKind parse_dataset_kind(const std::string& name);
std::string to_string(DatasetKind kind);

struct FileChecksum {
  std::string path;
  std::string sha256;
};

std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(const void* data, size_t n);

// Indexed in-memory image collection. Pixels are kept as uint8 and scaled to
// [0, 1] on access: /255 for FashionMNIST and CIFAR-10, /1 for dSprites
// (already binary).
struct ImageDataset {
  std::string name;
  torch::Tensor images;      // uint8 (N, C, H, W)
  torch::Tensor labels;      // int64 (N), undefined for dSprites
  torch::Tensor factors;     // int64 (N, 5), dSprites only
  torch::Tensor object_ids;  // int64 (N): index into the source corpus
  double pixel_scale = 1.0 / 255.0;
  std::shared_ptr<const DSpritesSource> sprites;  // set for dSprites corpora

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  int64_t channels() const { return images.size(1); }
  int64_t height() const { return images.size(2); }
  int64_t width() const { return images.size(3); }
  bool has_labels() const { return labels.defined(); }
  bool has_factors() const { return factors.defined(); }

  // float32 (C, H, W) in [0, 1]
  torch::Tensor image(int64_t i) const;
  // float32 (B, C, H, W) in [0, 1]
  torch::Tensor batch(const std::vector<int64_t>& indices) const;
  FactorVector factor_vector(int64_t i) const;
  ImageDataset subset(const std::vector<int64_t>& indices) const;
};

struct LoadOptions {
  int64_t subset_size = 0;  // 0 = everything; otherwise a seeded random subset of train
  uint64_t seed = 0;
};

struct LoadedDataset {
  DatasetKind kind;
  ImageDataset train;
  std::optional<ImageDataset> test;  // absent for dSprites
  std::vector<FileChecksum> checksums;
  std::string provenance;
};

// Reads the standard distribution files under `root`:
//   fashionmnist: {train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz] in root,
//                 root/fashionmnist, root/FashionMNIST/raw
//   cifar10:      root/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
//   dsprites:     root/dsprites/dsprites_ndarray_co1sh3sc6or40x32y32_64x64.npz
//   dsprites_procedural: rendered in process, no files
// Throws DataError with a remediation hint when files are missing or corrupt.
LoadedDataset load_dataset(const std::string& name, const std::filesystem::path& root,
                           const LoadOptions& opts = {});

// Builds a dSprites dataset over explicit flat indices of a source.
ImageDataset make_dsprites_dataset(std::shared_ptr<const DSpritesSource> source,
                                   const std::vector<int64_t>& flat_indices, std::string name);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool enabled = true;
  double crop_min_scale = 0.2;
  double crop_max_scale = 1.0;
  double hflip_prob = 0.5;
  // Color jitter and grayscale apply to 3-channel images only.
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double grayscale_prob = 0.2;

  static AugmentConfig for_dataset(DatasetKind kind);
  static AugmentConfig identity();
};

// One stochastic view of a (C, H, W) float image.
torch::Tensor augment(const torch::Tensor& image, const AugmentConfig& cfg, Rng& rng);

struct ViewPair {
  torch::Tensor xA;
  torch::Tensor xB;
  int64_t object_index = 0;
  std::optional<FactorVector> factors;
};

// Two independent augmentations of the same item. The streams are derived
// from (seed, epoch, index, view), so the pair does not depend on visit order.
ViewPair make_augmented_pair(const ImageDataset& ds, int64_t index, const AugmentConfig& cfg,
                             uint64_t seed, uint64_t epoch);

enum class ViewPolicy { FactorJitter, DualAugment };
ViewPolicy parse_view_policy(const std::string& name);
std::string to_string(ViewPolicy policy);

inline constexpr int64_t kMaxJitterSteps = 2;

// Second viewpoint of a dSprites object: same shape and scale, orientation,
// posX and posY each shifted by a uniform offset in [-2, 2] steps (orientation
// wraps, positions clamp). factor_jitter keeps xA as the indexed image.
ViewPair make_viewpoint_pair(const ImageDataset& ds, int64_t index, ViewPolicy policy,
                             const AugmentConfig& aug, uint64_t seed, uint64_t epoch);

// Factor vector of the jittered partner, exposed for tests.
FactorVector jitter_factors(const FactorVector& f, const FactorGrid& grid, Rng& rng);

struct PairBatch {
  torch::Tensor xA;            // float (B, C, H, W)
  torch::Tensor xB;            // float (B, C, H, W)
  torch::Tensor object_index;  // int64 (B)
  torch::Tensor factors;       // int64 (B, 5) or undefined
};

PairBatch make_augmented_batch(const ImageDataset& ds, const std::vector<int64_t>& indices,
                               const AugmentConfig& cfg, uint64_t seed, uint64_t epoch);
PairBatch make_viewpoint_batch(const ImageDataset& ds, const std::vector<int64_t>& indices,
                               ViewPolicy policy, const AugmentConfig& aug, uint64_t seed,
                               uint64_t epoch);

// ---------------------------------------------------------------------------
// Unseen split

struct SplitSpec {
  double holdout_fraction = 0.1;  // fraction of (shape, scale) combinations held out
  uint64_t seed = 0;
};

struct Split {
  std::vector<int64_t> train;  // positions within the dataset
  std::vector<int64_t> eval;
  std::vector<std::pair<int64_t, int64_t>> held_out;  // (shape, scale) combinations
};

// Holds out every item whose (shape, scale) combination falls in a seeded
// random subset of combinations. Throws ConfigError if the holdout would
// remove every value of shape or of scale from training.
Split split_unseen(const ImageDataset& ds, const SplitSpec& spec);

// Deterministic shuffled minibatches of positions [0, n).
std::vector<std::vector<int64_t>> make_batches(const std::vector<int64_t>& positions,
                                               int64_t batch_size, uint64_t seed, uint64_t epoch,
                                               bool drop_last = false);

}  // namespace ssng::data
