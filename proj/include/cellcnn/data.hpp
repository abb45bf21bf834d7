#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cellcnn/common.hpp"
#include "cellcnn/image.hpp"

namespace cellcnn {

struct ManifestEntry {
  std::string image;         // relative to manifest root
  std::string segmentation;  // relative to manifest root
  int class_label = 0;       // 1..7
  std::string patient;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
};

// CSV with header `image,segmentation,class,patient`; paths relative to the
// manifest directory and checked for existence. With cell_as_patient the
// patient column may be absent or empty and every cell becomes its own
// patient -- this breaks patient-level splitting semantics, so callers must
// warn loudly.
DatasetManifest load_manifest(const std::filesystem::path& csv_path,
                              bool cell_as_patient = false);

enum class Region { background, cytoplasm, nucleus, other };

// Segmentation images encode regions by color. The mapping must cover every
// color present in a segmentation image; anything unmapped is a hard error.
struct LabelColorMap {
  std::map<Rgb, Region> colors;

  Region region(const Rgb& c) const;

  // Shipped convention (also used by the synthetic generator):
  //   blue (0,0,255) nucleus, green (0,255,0) cytoplasm,
  //   red (255,0,0) and black background, white (255,255,255) other.
  // Validate against your dataset and override in the config if it differs.
  static LabelColorMap default_map();
};

struct CellRecord {
  ImageU8 rgb;          // H x W x 3
  MaskU8 nucleus;       // H x W, {0,1}
  MaskU8 cytoplasm;     // H x W, {0,1}, disjoint from nucleus
  int class_label = 0;  // 1..7
  Category category = Category::normal;
  std::string patient;
};

CellRecord decode_cell(const DatasetManifest& manifest, std::size_t index,
                       const LabelColorMap& colors);

std::vector<CellRecord> decode_all(const DatasetManifest& manifest,
                                   const LabelColorMap& colors);

// Arithmetic mean of foreground pixel coordinates, rounded half-up per axis.
std::pair<int, int> nucleus_centroid(const MaskU8& mask);

struct DatasetStats {
  std::array<int, kNumCellClasses> per_class{};  // index 0 = class 1
  int normal = 0;
  int abnormal = 0;
  int total = 0;
  std::map<std::string, int> per_patient;
};

DatasetStats dataset_stats(const DatasetManifest& manifest);

// Synthetic dataset: ellipse cells on a noisy background. The class label is
// a pure function of the nucleus/cytoplasm area ratio (always) and of the
// nucleus darkness (when darkness_thresholds is non-empty), both measured on
// the emitted files, so the morphology channels carry recoverable signal.
// With no darkness thresholds the nucleus/cytoplasm contrast is kept low and
// random, which makes the RGB appearance a poor predictor of the label.
struct SynthSpec {
  int count = 100;
  int image_size = 96;
  std::vector<double> ratio_thresholds{0.30};  // bins over [0.05, 0.55]
  std::vector<double> darkness_thresholds{};   // bins over [60, 200] gray levels
  std::uint64_t seed = 1;
  int max_patient_cells = 4;  // cells are grouped into patients of 1..this
  std::string image_format = "bmp";

  int num_classes() const {
    return static_cast<int>((ratio_thresholds.size() + 1) *
                            (darkness_thresholds.size() + 1));
  }
};

// Writes images/, segs/ and manifest.csv under out_dir; byte-deterministic
// for a fixed spec. Returns the manifest it wrote.
DatasetManifest generate_synthetic(const SynthSpec& spec,
                                   const std::filesystem::path& out_dir);

}  // namespace cellcnn
