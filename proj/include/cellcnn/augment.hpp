#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cellcnn/data.hpp"
#include "cellcnn/tensor.hpp"

namespace cellcnn {

enum class Interp { nearest, bilinear };

struct AugmentConfig {
  int m = 128;                  // patch side, pixels
  int d = 10;                   // max translation, pixels
  int target_per_class = 12000; // balanced per-class sample count
  int out_size = 256;           // upsampled side
  std::uint64_t seed = 0;
  Interp rotation_interp = Interp::bilinear;  // RGB only; masks always nearest

  void validate() const {
    if (m <= 0) throw ConfigError("BadAugmentConfig", "m must be > 0");
    if (d < 0) throw ConfigError("BadAugmentConfig", "d must be >= 0");
    if (out_size < m) throw ConfigError("BadAugmentConfig", "out_size must be >= m");
    if (target_per_class <= 0)
      throw ConfigError("BadAugmentConfig", "target_per_class must be > 0");
  }
};

// Per-class balancing plan. The base multiplier is round(target/count),
// factored near-square into n_rotations x n_translations (rotations >=
// translations). When count * multiplier misses the +-5% band around the
// target, `delta` adds one extra rotation-0 sample to (or removes the last
// sample from) that many cells so the class total lands exactly on target.
struct ClassPlan {
  int source_count = 0;
  int n_rotations = 1;
  int n_translations = 1;
  double theta_deg = 360.0;
  int delta = 0;            // signed cell count receiving +-1 sample
  bool clipped = false;     // target < class count; multiplier forced to 1
  std::int64_t expected = 0;
};

struct AugmentPlan {
  std::map<int, ClassPlan> per_class;  // key: class label 1..7
  const ClassPlan& for_class(int label) const;
};

AugmentPlan plan_augmentation(const std::map<int, int>& per_class_counts,
                              const AugmentConfig& cfg);

// Rotation about the image center ((H-1)/2, (W-1)/2) with zero fill outside
// the source. RGB uses cfg.rotation_interp, masks use nearest so they stay
// binary. degrees must lie in [0, 360).
CellRecord rotate_cell(const CellRecord& cell, double degrees, const AugmentConfig& cfg);

// centroid + (dr, dc), both drawn uniformly from the integers [-d, d].
std::pair<int, int> jitter_center(std::pair<int, int> centroid, int d, std::mt19937_64& rng);

struct Patch {
  ImageU8 rgb;      // m x m x 3
  MaskU8 nucleus;   // m x m
  MaskU8 cytoplasm; // m x m
};

// Window [center - m/2, center + m/2) on each axis; out-of-bounds pixels are
// zero in all channels.
Patch extract_patch(const CellRecord& cell, std::pair<int, int> center, int m);

struct Provenance {
  int cell_index = -1;
  std::string patient;
  double rotation_deg = 0.0;
  int dr = 0;
  int dc = 0;
};

struct Sample {
  Tensor tensor;  // out_size x out_size x 5, channels R,G,B,nucleus,cytoplasm
  int label = 0;  // 1..7
  Category category = Category::normal;
  Provenance prov;
};

// RGB rescaled to [0,1], all planes upsampled m -> out_size by nearest
// neighbor, concatenated R,G,B,nucleus,cytoplasm.
Tensor assemble_sample(const Patch& patch, const AugmentConfig& cfg);

// Deterministic lazy training stream: the provenance tuples are fixed up
// front from (plan, cfg.seed); each sample is a pure function of its tuple.
class SampleSet {
 public:
  SampleSet() = default;
  SampleSet(const std::vector<CellRecord>* records, std::vector<int> cell_indices,
            const AugmentPlan& plan, const AugmentConfig& cfg);

  std::size_t size() const { return keys_.size(); }
  const Provenance& provenance(std::size_t i) const { return keys_.at(i); }
  int label(std::size_t i) const;
  Category category(std::size_t i) const;
  Sample make(std::size_t i) const;
  const AugmentConfig& config() const { return cfg_; }
  const std::vector<CellRecord>& records() const { return *records_; }

  std::map<int, std::int64_t> per_class_counts() const;

 private:
  const std::vector<CellRecord>* records_ = nullptr;
  std::vector<Provenance> keys_;
  AugmentConfig cfg_;
};

inline SampleSet build_training_set(const std::vector<CellRecord>& records,
                                    std::vector<int> cell_indices, const AugmentPlan& plan,
                                    const AugmentConfig& cfg) {
  return SampleSet(&records, std::move(cell_indices), plan, cfg);
}

// Random crop + mirror (p = 1/2), identical across all five channels.
// Draw order per view: row offset, col offset, mirror flag.
Tensor train_view(const Sample& sample, int crop, std::mt19937_64& rng);

// Deterministic center crop (no mirror) used for evaluation.
Tensor center_view(const Tensor& sample_tensor, int crop);

// Keep only the first `channels` planes (3 = RGB baseline, 5 = full).
Tensor take_channels(const Tensor& view, int channels);

// In-place per-channel mean subtraction; means.size() must equal the view's
// channel count.
void normalize_view(Tensor& view, std::span<const float> means);

// Per-channel means over (up to cap) samples of the stream, in stream order.
// Must be called on training folds only.
std::vector<float> channel_means(const SampleSet& set, std::size_t cap, int channels);

// Exports every sample as flat little-endian float32 (C order, channel-last)
// plus an index.json with provenance.
void materialize_samples(const SampleSet& set, const std::filesystem::path& dir);

}  // namespace cellcnn
