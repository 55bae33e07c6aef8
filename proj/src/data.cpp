#include "boss/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace boss {

std::string split_name(SplitId id) {
  switch (id) {
    case SplitId::nas_train: return "nas-train";
    case SplitId::nas_val: return "nas-val";
    case SplitId::oracle_train: return "oracle-train";
    case SplitId::oracle_test: return "oracle-test";
  }
  return "?";
}

RawDataset parse_cifar10_bytes(std::span<const unsigned char> bytes, const std::string& source) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t complete = bytes.size() / kCifarRecordBytes;
    throw std::invalid_argument(source + ": truncated record at byte offset " +
                                std::to_string(complete * kCifarRecordBytes) + " (file length " +
                                std::to_string(bytes.size()) + " is not a multiple of 3073)");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  RawDataset raw;
  raw.class_count = 10;
  raw.source = source;
  raw.images = Tensor({n, 3, 32, 32});
  raw.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t offset = i * kCifarRecordBytes;
    const unsigned label = bytes[offset];
    if (label > 9) {
      throw std::invalid_argument(source + ": label byte " + std::to_string(label) + " > 9 at byte offset " +
                                  std::to_string(offset));
    }
    raw.labels[i] = static_cast<int>(label);
    for (std::size_t p = 0; p < 3072; ++p) raw.images.data[i * 3072 + p] = bytes[offset + 1 + p] / 255.0;
  }
  return raw;
}

RawDataset load_cifar10_binary(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw std::invalid_argument("cifar10: no input files");
  RawDataset all;
  all.class_count = 10;
  std::vector<double> pixels;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cifar10: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    RawDataset part = parse_cifar10_bytes(bytes, path.string());
    pixels.insert(pixels.end(), part.images.data.begin(), part.images.data.end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
    all.source += (all.source.empty() ? "cifar10:" : ",") + path.filename().string();
  }
  all.images = Tensor({all.labels.size(), 3, 32, 32}, std::move(pixels));
  return all;
}

RawDataset generate_synthetic(std::uint64_t seed, std::size_t n, int class_count, const SyntheticOptions& options) {
  if (class_count < 2) throw std::invalid_argument("synthetic: class count must be >= 2");
  if (n < static_cast<std::size_t>(class_count)) throw std::invalid_argument("synthetic: n below class count");
  constexpr std::size_t side = 32;
  constexpr double pi = std::numbers::pi;
  RawDataset raw;
  raw.class_count = class_count;
  raw.source = "synthetic:seed=" + std::to_string(seed) + ",n=" + std::to_string(n) +
               ",classes=" + std::to_string(class_count);
  raw.images = Tensor({n, 3, side, side});
  raw.labels.resize(n);

  Rng rng(derive_seed(seed, "synthetic"));
  for (std::size_t i = 0; i < n; ++i) raw.labels[i] = static_cast<int>(i % static_cast<std::size_t>(class_count));
  for (std::size_t i = n; i > 1; --i) std::swap(raw.labels[i - 1], raw.labels[uniform_index(rng, i)]);

  const double spacing = pi / class_count;
  for (std::size_t i = 0; i < n; ++i) {
    const int c = raw.labels[i];
    const double theta = spacing * c + (uniform_unit(rng) - 0.5) * 2.0 * options.orientation_jitter * spacing;
    const double cycles = (c % 2 == 0 ? 3.0 : 5.0) * (0.9 + 0.2 * uniform_unit(rng));
    const double phase = 2.0 * pi * uniform_unit(rng);
    const double amplitude = options.amplitude + options.amplitude_jitter * uniform_unit(rng);
    std::array<double, 3> tint;
    for (double& t : tint) t = 0.6 + 0.4 * uniform_unit(rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    double* img = raw.images.data.data() + i * 3 * side * side;
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) / side;
        const double wave = std::sin(2.0 * pi * cycles * u + phase);
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double v = 0.5 + amplitude * tint[ch] * wave + options.noise * standard_normal(rng);
          img[(ch * side + y) * side + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return raw;
}

Dataset partition(const RawDataset& raw, const SplitSizes& sizes, std::uint64_t seed) {
  const std::size_t n = raw.labels.size();
  const std::array<std::size_t, 4> want{sizes.nas_train, sizes.nas_val, sizes.oracle_train, sizes.oracle_test};
  const std::size_t total = std::accumulate(want.begin(), want.end(), std::size_t{0});
  if (total > n) {
    throw std::invalid_argument("partition: splits need " + std::to_string(total) + " samples, source " + raw.source +
                                " has " + std::to_string(n));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "partition"));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);

  const std::size_t per = raw.images.size() / std::max<std::size_t>(n, 1);
  Shape shape = raw.images.shape;
  Dataset ds;
  std::size_t pos = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    DatasetSplit& split = ds.splits[s];
    split.id = static_cast<SplitId>(s);
    split.class_count = raw.class_count;
    split.source = raw.source;
    split.seed = seed;
    split.indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                         perm.begin() + static_cast<std::ptrdiff_t>(pos + want[s]));
    pos += want[s];
    shape[0] = want[s];
    if (want[s] == 0) continue;
    split.images = Tensor(shape);
    split.labels.resize(want[s]);
    for (std::size_t i = 0; i < want[s]; ++i) {
      const std::size_t row = split.indices[i];
      std::copy_n(raw.images.data.begin() + static_cast<std::ptrdiff_t>(row * per), per,
                  split.images.data.begin() + static_cast<std::ptrdiff_t>(i * per));
      split.labels[i] = raw.labels[row];
    }
  }
  return ds;
}

void horizontal_flip(std::span<double> image, std::size_t height, std::size_t width) {
  const std::size_t channels = image.size() / (height * width);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      double* row = image.data() + (c * height + y) * width;
      std::reverse(row, row + width);
    }
  }
}

AugmentRecord augment(std::span<double> image, std::size_t height, std::size_t width, const AugmentPolicy& policy,
                      Rng& rng) {
  AugmentRecord rec;
  if (policy.empty()) return rec;
  const std::size_t channels = image.size() / (height * width);
  const std::size_t plane = height * width;
  if (policy.crop) {
    constexpr int pad = 4;
    rec.dy = static_cast<int>(uniform_index(rng, 2 * pad + 1));
    rec.dx = static_cast<int>(uniform_index(rng, 2 * pad + 1));
    std::vector<double> src(image.begin(), image.end());
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
          const long sy = static_cast<long>(y) + rec.dy - pad;
          const long sx = static_cast<long>(x) + rec.dx - pad;
          const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(height) && sx < static_cast<long>(width);
          image[c * plane + y * width + x] =
              inside ? src[c * plane + static_cast<std::size_t>(sy) * width + static_cast<std::size_t>(sx)] : 0.0;
        }
      }
    }
  }
  if (policy.flip) {
    rec.flipped = uniform_unit(rng) < 0.5;
    if (rec.flipped) horizontal_flip(image, height, width);
  }
  if (policy.color) {
    rec.brightness = 0.6 + 0.8 * uniform_unit(rng);
    rec.contrast = 0.6 + 0.8 * uniform_unit(rng);
    double mean = 0.0;
    for (double& v : image) {
      v *= rec.brightness;
      mean += v;
    }
    mean /= static_cast<double>(image.size());
    for (double& v : image) v = (v - mean) * rec.contrast + mean;
  }
  if (policy.grayscale) {
    rec.gray = uniform_unit(rng) < 0.2;
    if (rec.gray && channels == 3) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double g = 0.299 * image[p] + 0.587 * image[plane + p] + 0.114 * image[2 * plane + p];
        image[p] = image[plane + p] = image[2 * plane + p] = g;
      }
    }
  }
  for (double& v : image) v = std::clamp(v, 0.0, 1.0);
  return rec;
}

ChannelStats channel_stats(const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("channel_stats: expected [N,3,H,W]");
  ChannelStats s;
  const std::size_t n = images.dim(0), plane = images.dim(2) * images.dim(3);
  for (std::size_t c = 0; c < 3; ++c) {
    long double sum = 0.0L, sq = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = images.data.data() + (i * 3 + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        sum += p[j];
        sq += static_cast<long double>(p[j]) * p[j];
      }
    }
    const long double count = static_cast<long double>(n * plane);
    const long double mean = sum / count;
    s.mean[c] = static_cast<double>(mean);
    s.std[c] = std::max(1e-6, static_cast<double>(std::sqrt(std::max(0.0L, sq / count - mean * mean))));
  }
  return s;
}

void normalize_in_place(Tensor& images, const ChannelStats& stats) {
  const std::size_t n = images.dim(0), plane = images.dim(2) * images.dim(3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      double* p = images.data.data() + (i * 3 + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) p[j] = (p[j] - stats.mean[c]) / stats.std[c];
    }
  }
}

Tensor make_batch(const DatasetSplit& split, std::span<const std::size_t> rows, const AugmentPolicy& policy,
                  const ChannelStats& stats, Rng& rng) {
  Shape shape = split.images.shape;
  shape[0] = rows.size();
  Tensor out(shape);
  const std::size_t per = shape[1] * shape[2] * shape[3];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= split.size()) throw std::out_of_range("make_batch: row " + std::to_string(rows[i]));
    std::span<double> dst(out.data.data() + i * per, per);
    std::copy_n(split.images.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * per), per, dst.begin());
    augment(dst, shape[2], shape[3], policy, rng);
  }
  normalize_in_place(out, stats);
  return out;
}

std::vector<int> gather_labels(const DatasetSplit& split, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(split.labels.at(r));
  return out;
}

}  // namespace boss
