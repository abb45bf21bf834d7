#include "cellcnn/augment.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace cellcnn {
namespace {

constexpr double kPi = 3.14159265358979323846;

// Largest divisor of m not exceeding sqrt(m); gives the near-square split
// with n_rotations >= n_translations.
std::pair<int, int> near_square_factors(int m) {
  int t = static_cast<int>(std::sqrt(static_cast<double>(m)));
  while (t > 1 && m % t != 0) --t;
  return {m / t, t};  // (n_rotations, n_translations)
}

}  // namespace

const ClassPlan& AugmentPlan::for_class(int label) const {
  auto it = per_class.find(label);
  if (it == per_class.end())
    throw DataError("MissingClassPlan",
                    "no augmentation plan for class " + std::to_string(label));
  return it->second;
}

AugmentPlan plan_augmentation(const std::map<int, int>& per_class_counts,
                              const AugmentConfig& cfg) {
  cfg.validate();
  AugmentPlan plan;
  for (const auto& [label, count] : per_class_counts) {
    if (count <= 0)
      throw DataError("EmptyClass", "class " + std::to_string(label) + " has no cells");
    ClassPlan p;
    p.source_count = count;
    const double target = static_cast<double>(cfg.target_per_class);
    int mult;
    if (cfg.target_per_class < count) {
      mult = 1;
      p.clipped = true;  // target smaller than class count; callers should warn
    } else {
      mult = std::max(1, static_cast<int>(std::llround(target / count)));
    }
    std::tie(p.n_rotations, p.n_translations) = near_square_factors(mult);
    p.theta_deg = 360.0 / p.n_rotations;
    const std::int64_t base = static_cast<std::int64_t>(count) * mult;
    p.expected = base;
    if (!p.clipped && (static_cast<double>(base) < 0.95 * target ||
                       static_cast<double>(base) > 1.05 * target)) {
      p.delta = static_cast<int>(cfg.target_per_class - base);
      p.expected = cfg.target_per_class;
    }
    plan.per_class[label] = p;
  }
  return plan;
}

namespace {

double rotated_source(double center, double d1, double d2, double c, double s, bool row) {
  return row ? center + c * d1 + s * d2 : center - s * d1 + c * d2;
}

std::uint8_t bilinear_u8(const ImageU8& img, double sr, double sc, int ch) {
  const int r0 = static_cast<int>(std::floor(sr));
  const int c0 = static_cast<int>(std::floor(sc));
  const double fr = sr - r0, fc = sc - c0;
  double acc = 0.0;
  for (int dr = 0; dr <= 1; ++dr)
    for (int dc = 0; dc <= 1; ++dc) {
      const int r = r0 + dr, c = c0 + dc;
      if (r < 0 || r >= img.rows || c < 0 || c >= img.cols) continue;  // zero fill
      const double w = (dr ? fr : 1.0 - fr) * (dc ? fc : 1.0 - fc);
      acc += w * img.at(r, c, ch);
    }
  return static_cast<std::uint8_t>(std::clamp(std::lround(acc), 0L, 255L));
}

std::uint8_t nearest_u8(const ImageU8& img, double sr, double sc, int ch) {
  const long r = std::lround(sr), c = std::lround(sc);
  if (r < 0 || r >= img.rows || c < 0 || c >= img.cols) return 0;
  return img.at(static_cast<int>(r), static_cast<int>(c), ch);
}

std::uint8_t nearest_mask(const MaskU8& m, double sr, double sc) {
  const long r = std::lround(sr), c = std::lround(sc);
  if (r < 0 || r >= m.rows() || c < 0 || c >= m.cols()) return 0;
  return m(r, c);
}

}  // namespace

CellRecord rotate_cell(const CellRecord& cell, double degrees, const AugmentConfig& cfg) {
  if (degrees < 0.0 || degrees >= 360.0)
    throw ConfigError("BadRotation", "degrees must lie in [0, 360)");
  if (degrees == 0.0) return cell;

  const int H = cell.rgb.rows, W = cell.rgb.cols;
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  const double rad = degrees * kPi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);

  CellRecord out;
  out.rgb = ImageU8(H, W, 3);
  out.nucleus = MaskU8::Zero(H, W);
  out.cytoplasm = MaskU8::Zero(H, W);
  out.class_label = cell.class_label;
  out.category = cell.category;
  out.patient = cell.patient;

  for (int r = 0; r < H; ++r) {
    const double dr = r - cy;
    for (int col = 0; col < W; ++col) {
      const double dc = col - cx;
      // Inverse mapping: rotate the destination offset back into the source.
      const double sr = rotated_source(cy, dr, dc, c, s, true);
      const double sc = rotated_source(cx, dr, dc, c, s, false);
      for (int ch = 0; ch < 3; ++ch)
        out.rgb.at(r, col, ch) = cfg.rotation_interp == Interp::bilinear
                                     ? bilinear_u8(cell.rgb, sr, sc, ch)
                                     : nearest_u8(cell.rgb, sr, sc, ch);
      out.nucleus(r, col) = nearest_mask(cell.nucleus, sr, sc);
      out.cytoplasm(r, col) = nearest_mask(cell.cytoplasm, sr, sc);
    }
  }
  return out;
}

std::pair<int, int> jitter_center(std::pair<int, int> centroid, int d, std::mt19937_64& rng) {
  if (d < 0) throw ConfigError("BadAugmentConfig", "d must be >= 0");
  if (d == 0) return centroid;
  std::uniform_int_distribution<int> offset(-d, d);
  const int dr = offset(rng);
  const int dc = offset(rng);
  return {centroid.first + dr, centroid.second + dc};
}

Patch extract_patch(const CellRecord& cell, std::pair<int, int> center, int m) {
  if (m <= 0) throw ConfigError("BadAugmentConfig", "m must be > 0");
  const int r0 = center.first - m / 2;
  const int c0 = center.second - m / 2;
  Patch p;
  p.rgb = ImageU8(m, m, 3);
  p.nucleus = MaskU8::Zero(m, m);
  p.cytoplasm = MaskU8::Zero(m, m);
  for (int r = 0; r < m; ++r) {
    const int sr = r0 + r;
    if (sr < 0 || sr >= cell.rgb.rows) continue;
    for (int c = 0; c < m; ++c) {
      const int sc = c0 + c;
      if (sc < 0 || sc >= cell.rgb.cols) continue;
      for (int ch = 0; ch < 3; ++ch) p.rgb.at(r, c, ch) = cell.rgb.at(sr, sc, ch);
      p.nucleus(r, c) = cell.nucleus(sr, sc);
      p.cytoplasm(r, c) = cell.cytoplasm(sr, sc);
    }
  }
  return p;
}

Tensor assemble_sample(const Patch& patch, const AugmentConfig& cfg) {
  const int m = patch.rgb.rows;
  const int out = cfg.out_size;
  if (out < m) throw ConfigError("BadAugmentConfig", "out_size must be >= m");
  Tensor t({out, out, 5});
  float* dst = t.data();
  for (int r = 0; r < out; ++r) {
    const int sr = r * m / out;
    for (int c = 0; c < out; ++c) {
      const int sc = c * m / out;
      *dst++ = patch.rgb.at(sr, sc, 0) / 255.0f;
      *dst++ = patch.rgb.at(sr, sc, 1) / 255.0f;
      *dst++ = patch.rgb.at(sr, sc, 2) / 255.0f;
      *dst++ = static_cast<float>(patch.nucleus(sr, sc));
      *dst++ = static_cast<float>(patch.cytoplasm(sr, sc));
    }
  }
  return t;
}

SampleSet::SampleSet(const std::vector<CellRecord>* records, std::vector<int> cell_indices,
                     const AugmentPlan& plan, const AugmentConfig& cfg)
    : records_(records), cfg_(cfg) {
  cfg_.validate();
  if (cell_indices.empty()) throw DataError("EmptyStream", "no cells to augment");
  std::mt19937_64 rng(cfg.seed);

  // Signed per-cell adjustment: the first |delta| cells of a class gain or
  // lose one sample so the class total hits the plan's expected count.
  std::map<int, int> delta_left;
  for (const auto& [label, p] : plan.per_class) delta_left[label] = p.delta;

  for (int ci : cell_indices) {
    const CellRecord& rec = records_->at(static_cast<std::size_t>(ci));
    const ClassPlan& p = plan.for_class(rec.class_label);
    int n_samples = p.n_rotations * p.n_translations;
    int& dl = delta_left[rec.class_label];
    bool extra = false;
    if (dl > 0) {
      extra = true;
      --dl;
    } else if (dl < 0) {
      --n_samples;
      ++dl;
    }
    const auto centroid = nucleus_centroid(rec.nucleus);
    for (int idx = 0; idx < n_samples; ++idx) {
      const int k = idx / p.n_translations;
      Provenance prov;
      prov.cell_index = ci;
      prov.patient = rec.patient;
      prov.rotation_deg = k * p.theta_deg;
      const auto center = jitter_center(centroid, cfg.d, rng);
      prov.dr = center.first - centroid.first;
      prov.dc = center.second - centroid.second;
      keys_.push_back(std::move(prov));
    }
    if (extra) {
      Provenance prov;
      prov.cell_index = ci;
      prov.patient = rec.patient;
      prov.rotation_deg = 0.0;
      const auto center = jitter_center(centroid, cfg.d, rng);
      prov.dr = center.first - centroid.first;
      prov.dc = center.second - centroid.second;
      keys_.push_back(std::move(prov));
    }
  }
}

int SampleSet::label(std::size_t i) const {
  return records_->at(static_cast<std::size_t>(keys_.at(i).cell_index)).class_label;
}

Category SampleSet::category(std::size_t i) const {
  return records_->at(static_cast<std::size_t>(keys_.at(i).cell_index)).category;
}

Sample SampleSet::make(std::size_t i) const {
  const Provenance& key = keys_.at(i);
  const CellRecord& rec = records_->at(static_cast<std::size_t>(key.cell_index));
  const CellRecord rotated = rotate_cell(rec, key.rotation_deg, cfg_);
  const auto centroid = nucleus_centroid(rotated.nucleus);
  const Patch patch =
      extract_patch(rotated, {centroid.first + key.dr, centroid.second + key.dc}, cfg_.m);
  Sample s;
  s.tensor = assemble_sample(patch, cfg_);
  s.label = rec.class_label;
  s.category = rec.category;
  s.prov = key;
  return s;
}

std::map<int, std::int64_t> SampleSet::per_class_counts() const {
  std::map<int, std::int64_t> counts;
  for (const auto& key : keys_)
    counts[records_->at(static_cast<std::size_t>(key.cell_index)).class_label]++;
  return counts;
}

namespace {

Tensor crop_tensor(const Tensor& t, int r0, int c0, int crop, bool mirror) {
  const int W = t.dim(1), C = t.dim(2);
  Tensor out({crop, crop, C});
  const float* src = t.data();
  float* dst = out.data();
  for (int r = 0; r < crop; ++r)
    for (int c = 0; c < crop; ++c) {
      const int sc = mirror ? (c0 + crop - 1 - c) : (c0 + c);
      const float* px = src + (static_cast<std::size_t>(r0 + r) * W + sc) * C;
      std::copy(px, px + C, dst);
      dst += C;
    }
  return out;
}

}  // namespace

Tensor train_view(const Sample& sample, int crop, std::mt19937_64& rng) {
  const int out = sample.tensor.dim(0);
  if (crop > out) throw ConfigError("BadCrop", "crop exceeds sample size");
  std::uniform_int_distribution<int> pos(0, out - crop);
  const int r0 = pos(rng);
  const int c0 = pos(rng);
  const bool mirror = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  return crop_tensor(sample.tensor, r0, c0, crop, mirror);
}

Tensor center_view(const Tensor& sample_tensor, int crop) {
  const int out = sample_tensor.dim(0);
  if (crop > out) throw ConfigError("BadCrop", "crop exceeds sample size");
  const int off = (out - crop) / 2;
  return crop_tensor(sample_tensor, off, off, crop, false);
}

Tensor take_channels(const Tensor& view, int channels) {
  const int H = view.dim(0), W = view.dim(1), C = view.dim(2);
  if (channels == C) return view;
  if (channels > C) throw ConfigError("BadShape", "cannot take more channels than present");
  Tensor out({H, W, channels});
  const float* src = view.data();
  float* dst = out.data();
  for (int i = 0; i < H * W; ++i) {
    std::copy(src, src + channels, dst);
    src += C;
    dst += channels;
  }
  return out;
}

void normalize_view(Tensor& view, std::span<const float> means) {
  const int C = view.dim(view.rank() - 1);
  if (static_cast<int>(means.size()) != C)
    throw ConfigError("BadMeans", "expected " + std::to_string(C) + " channel means, got " +
                                      std::to_string(means.size()));
  float* p = view.data();
  const Eigen::Index n = view.size();
  for (Eigen::Index i = 0; i < n; ++i) p[i] -= means[static_cast<std::size_t>(i % C)];
}

std::vector<float> channel_means(const SampleSet& set, std::size_t cap, int channels) {
  const std::size_t n = std::min(cap, set.size());
  if (n == 0) throw DataError("EmptyStream", "cannot compute means of an empty stream");
  std::vector<double> sums(static_cast<std::size_t>(channels), 0.0);
  std::size_t px = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample s = set.make(i);
    const float* p = s.tensor.data();
    const int C = s.tensor.dim(2);
    const Eigen::Index count = s.tensor.size() / C;
    for (Eigen::Index j = 0; j < count; ++j, p += C)
      for (int c = 0; c < channels; ++c) sums[static_cast<std::size_t>(c)] += p[c];
    px += static_cast<std::size_t>(count);
  }
  std::vector<float> means(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c)
    means[static_cast<std::size_t>(c)] =
        static_cast<float>(sums[static_cast<std::size_t>(c)] / static_cast<double>(px));
  return means;
}

void materialize_samples(const SampleSet& set, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!std::filesystem::is_directory(dir))
    throw DataError("UnwritableFile", "cannot create " + dir.string());
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Sample s = set.make(i);
    char name[32];
    std::snprintf(name, sizeof name, "sample_%06zu.f32", i);
    std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(s.tensor.data()),
            static_cast<std::streamsize>(sizeof(float) * s.tensor.size()));
    if (!f) throw DataError("UnwritableFile", "write failed for sample file");
    index.push_back({{"file", name},
                     {"cell", s.prov.cell_index},
                     {"patient", s.prov.patient},
                     {"rotation_deg", s.prov.rotation_deg},
                     {"dr", s.prov.dr},
                     {"dc", s.prov.dc},
                     {"label", s.label},
                     {"shape", s.tensor.shape()}});
  }
  std::ofstream f(dir / "index.json", std::ios::trunc);
  f << index.dump(2) << '\n';
}

}  // namespace cellcnn
