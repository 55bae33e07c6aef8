#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "boss/random.hpp"
#include "boss/tensor.hpp"

namespace boss {

enum class SplitId { nas_train, nas_val, oracle_train, oracle_test };

std::string split_name(SplitId id);

/// Images and labels before splitting. Pixels in [0,1], [n,3,H,W].
struct RawDataset {
  Tensor images;
  std::vector<int> labels;
  int class_count = 0;
  std::string source;
};

struct DatasetSplit {
  SplitId id = SplitId::nas_train;
  Tensor images;
  std::vector<int> labels;
  int class_count = 0;
  // provenance
  std::string source;
  std::uint64_t seed = 0;
  std::vector<std::size_t> indices;  // rows of the source dataset

  std::size_t size() const { return labels.size(); }
};

struct SplitSizes {
  std::size_t nas_train = 1024;
  std::size_t nas_val = 512;
  std::size_t oracle_train = 1024;
  std::size_t oracle_test = 512;

  bool operator==(const SplitSizes&) const = default;
};

struct Dataset {
  std::array<DatasetSplit, 4> splits;
  const DatasetSplit& split(SplitId id) const { return splits[static_cast<std::size_t>(id)]; }
};

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Each record: label byte then 1024 R, 1024 G, 1024 B bytes (row-major
/// 32x32). Pixels are scaled by 1/255.
RawDataset load_cifar10_binary(const std::vector<std::filesystem::path>& paths);
RawDataset parse_cifar10_bytes(std::span<const unsigned char> bytes, const std::string& source = "memory");

struct SyntheticOptions {
  double amplitude = 0.007;          // base grating amplitude
  double amplitude_jitter = 0.083;   // plus U[0, jitter)
  double orientation_jitter = 0.35;  // fraction of the class spacing, each side
  double noise = 0.05;               // pixel noise sigma

  bool operator==(const SyntheticOptions&) const = default;
};

/// Oriented sinusoidal gratings; the class fixes (orientation, frequency).
/// Labels are balanced within one and shuffled.
RawDataset generate_synthetic(std::uint64_t seed, std::size_t n, int class_count = 8,
                              const SyntheticOptions& options = {});

/// Cuts four disjoint splits from a seeded permutation of the rows.
Dataset partition(const RawDataset& raw, const SplitSizes& sizes, std::uint64_t seed);

struct AugmentPolicy {
  bool crop = true;       // pad 4, random 32x32 crop
  bool flip = true;       // p = 0.5
  bool color = true;      // brightness and contrast factors in [0.6, 1.4]
  bool grayscale = true;  // p = 0.2

  static AugmentPolicy none() { return {false, false, false, false}; }
  bool empty() const { return !crop && !flip && !color && !grayscale; }
  bool operator==(const AugmentPolicy&) const = default;
};

/// What augment() drew, for replay.
struct AugmentRecord {
  int dy = 0, dx = 0;  // crop offset into the padded canvas, in [0, 8]
  bool flipped = false;
  double brightness = 1.0;
  double contrast = 1.0;
  bool gray = false;
};

/// Augments one [3,H,W] image held in `image` (length 3*H*W) in place.
/// Empty policies draw nothing from rng.
AugmentRecord augment(std::span<double> image, std::size_t height, std::size_t width, const AugmentPolicy& policy,
                      Rng& rng);
void horizontal_flip(std::span<double> image, std::size_t height, std::size_t width);

struct ChannelStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

ChannelStats channel_stats(const Tensor& images);
void normalize_in_place(Tensor& images, const ChannelStats& stats);

/// Gathers rows of a split, augments each with the policy, then normalizes.
Tensor make_batch(const DatasetSplit& split, std::span<const std::size_t> rows, const AugmentPolicy& policy,
                  const ChannelStats& stats, Rng& rng);
std::vector<int> gather_labels(const DatasetSplit& split, std::span<const std::size_t> rows);

}  // namespace boss
