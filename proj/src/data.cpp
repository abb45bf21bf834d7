#include "cellcnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "cellcnn/image_io.hpp"

namespace cellcnn {
namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& csv_path, bool cell_as_patient) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("UnreadableFile", "cannot open manifest " + csv_path.string());

  DatasetManifest m;
  m.root = csv_path.has_parent_path() ? csv_path.parent_path() : std::filesystem::path(".");

  std::string line;
  if (!std::getline(in, line))
    throw DataError("MissingColumn", "manifest is empty, expected header row");
  auto header = split_csv_line(line);
  const std::vector<std::string> want{"image", "segmentation", "class", "patient"};
  const bool full = header.size() == 4 && std::equal(header.begin(), header.end(), want.begin());
  const bool short_form = cell_as_patient && header.size() == 3 &&
                          std::equal(header.begin(), header.end(), want.begin());
  if (!full && !short_form)
    throw DataError("MissingColumn",
                    "manifest header must be `image,segmentation,class,patient`");

  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw DataError("BadRow", "row " + std::to_string(row) + ": expected " +
                                    std::to_string(header.size()) + " fields, got " +
                                    std::to_string(f.size()));
    ManifestEntry e;
    e.image = f[0];
    e.segmentation = f[1];
    try {
      std::size_t pos = 0;
      e.class_label = std::stoi(f[2], &pos);
      if (pos != f[2].size()) throw std::invalid_argument("trailing junk");
    } catch (const std::exception&) {
      throw DataError("InvalidClass", "row " + std::to_string(row) + ": bad class `" + f[2] + "`");
    }
    if (e.class_label < 1 || e.class_label > kNumCellClasses)
      throw DataError("InvalidClass",
                      "row " + std::to_string(row) + ": class " + std::to_string(e.class_label) +
                          " outside 1..7");
    if (cell_as_patient) {
      char buf[24];
      std::snprintf(buf, sizeof buf, "cell%06zu", m.entries.size());
      e.patient = buf;
    } else {
      e.patient = f[3];
      if (e.patient.empty())
        throw DataError("EmptyPatient", "row " + std::to_string(row) + ": empty patient id");
    }
    for (const auto& rel : {e.image, e.segmentation}) {
      if (rel.empty() || !std::filesystem::exists(m.root / rel))
        throw DataError("MissingFile",
                        "row " + std::to_string(row) + ": missing file `" + rel + "`");
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

Region LabelColorMap::region(const Rgb& c) const {
  auto it = colors.find(c);
  if (it == colors.end())
    throw DataError("UnmappedColor", "segmentation color (" + std::to_string(c[0]) + "," +
                                         std::to_string(c[1]) + "," + std::to_string(c[2]) +
                                         ") has no region mapping");
  return it->second;
}

LabelColorMap LabelColorMap::default_map() {
  LabelColorMap m;
  m.colors[{0, 0, 255}] = Region::nucleus;
  m.colors[{0, 255, 0}] = Region::cytoplasm;
  m.colors[{255, 0, 0}] = Region::background;
  m.colors[{0, 0, 0}] = Region::background;
  m.colors[{255, 255, 255}] = Region::other;
  return m;
}

CellRecord decode_cell(const DatasetManifest& manifest, std::size_t index,
                       const LabelColorMap& colors) {
  const ManifestEntry& e = manifest.entries.at(index);
  CellRecord rec;
  rec.rgb = load_image(manifest.root / e.image);
  ImageU8 seg = load_image(manifest.root / e.segmentation);
  if (seg.rows != rec.rgb.rows || seg.cols != rec.rgb.cols)
    throw DataError("DimMismatch", e.image + " is " + std::to_string(rec.rgb.rows) + "x" +
                                       std::to_string(rec.rgb.cols) + " but " + e.segmentation +
                                       " is " + std::to_string(seg.rows) + "x" +
                                       std::to_string(seg.cols));

  rec.nucleus = MaskU8::Zero(seg.rows, seg.cols);
  rec.cytoplasm = MaskU8::Zero(seg.rows, seg.cols);
  for (int r = 0; r < seg.rows; ++r) {
    for (int c = 0; c < seg.cols; ++c) {
      switch (colors.region(pixel_rgb(seg, r, c))) {
        case Region::nucleus: rec.nucleus(r, c) = 1; break;
        case Region::cytoplasm: rec.cytoplasm(r, c) = 1; break;
        default: break;
      }
    }
  }
  if ((rec.nucleus != 0).count() == 0)
    throw DataError("EmptyNucleus", e.segmentation + ": no nucleus pixels");
  rec.class_label = e.class_label;
  rec.category = category_of(e.class_label);
  rec.patient = e.patient;
  return rec;
}

std::vector<CellRecord> decode_all(const DatasetManifest& manifest, const LabelColorMap& colors) {
  std::vector<CellRecord> out;
  out.reserve(manifest.entries.size());
  for (std::size_t i = 0; i < manifest.entries.size(); ++i)
    out.push_back(decode_cell(manifest, i, colors));
  return out;
}

std::pair<int, int> nucleus_centroid(const MaskU8& mask) {
  std::int64_t n = 0, sr = 0, sc = 0;
  for (Eigen::Index r = 0; r < mask.rows(); ++r)
    for (Eigen::Index c = 0; c < mask.cols(); ++c)
      if (mask(r, c)) {
        ++n;
        sr += r;
        sc += c;
      }
  if (n == 0) throw DataError("EmptyNucleus", "centroid of empty mask");
  const auto half_up = [](double x) { return static_cast<int>(std::floor(x + 0.5)); };
  return {half_up(static_cast<double>(sr) / static_cast<double>(n)),
          half_up(static_cast<double>(sc) / static_cast<double>(n))};
}

DatasetStats dataset_stats(const DatasetManifest& manifest) {
  DatasetStats s;
  for (const auto& e : manifest.entries) {
    s.per_class[static_cast<std::size_t>(e.class_label - 1)]++;
    (category_of(e.class_label) == Category::normal ? s.normal : s.abnormal)++;
    s.per_patient[e.patient]++;
    s.total++;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------
namespace {

struct Ellipse {
  double cy, cx, a, b, phi;
  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = dx * std::cos(phi) + dy * std::sin(phi);
    const double v = -dx * std::sin(phi) + dy * std::cos(phi);
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

struct Bins {
  double lo, hi;
  std::vector<double> thresholds;  // sorted, inside (lo, hi)

  int bin_of(double x) const {
    int b = 0;
    for (double t : thresholds)
      if (x >= t) ++b;
    return b;
  }
  // Sampling interval for a bin, shrunk by a margin so rasterization and
  // noise cannot push a value across a threshold.
  std::pair<double, double> sample_range(int bin, double margin) const {
    const double a = bin == 0 ? lo : thresholds[static_cast<std::size_t>(bin - 1)];
    const double b = bin == static_cast<int>(thresholds.size())
                         ? hi
                         : thresholds[static_cast<std::size_t>(bin)];
    return {a + margin, b - margin};
  }
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

}  // namespace

DatasetManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  if (spec.count <= 0 || spec.image_size < 32)
    throw ConfigError("BadSynthSpec", "need count > 0 and image_size >= 32");
  if (spec.num_classes() > kNumCellClasses)
    throw ConfigError("BadSynthSpec", "thresholds imply more than 7 classes");
  if (spec.image_format != "bmp" && spec.image_format != "png")
    throw ConfigError("BadSynthSpec", "image_format must be bmp or png");

  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "segs", ec);
  if (!std::filesystem::is_directory(out_dir / "images") ||
      !std::filesystem::is_directory(out_dir / "segs"))
    throw DataError("UnwritableFile", "cannot create output directory " + out_dir.string());

  const Bins ratio_bins{0.05, 0.55, spec.ratio_thresholds};
  const Bins dark_bins{60.0, 200.0, spec.darkness_thresholds};
  const int n_dark = static_cast<int>(spec.darkness_thresholds.size()) + 1;
  const bool darkness_matters = n_dark > 1;
  const int S = spec.image_size;

  std::mt19937_64 rng(spec.seed);

  DatasetManifest manifest;
  manifest.root = out_dir;

  // Patient grouping: consecutive cells share a patient id.
  int patient_idx = -1;
  int cells_left_in_patient = 0;

  for (int i = 0; i < spec.count; ++i) {
    const int cls = i % spec.num_classes();  // 0-based class index
    const int ratio_bin = cls / n_dark;
    const int dark_bin = cls % n_dark;

    MaskU8 nucleus, cytoplasm;
    ImageU8 rgb, seg;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const auto [rlo, rhi] = ratio_bins.sample_range(ratio_bin, 0.04);
      const double target_ratio = uniform(rng, rlo, rhi);

      Ellipse cyto;
      cyto.cy = S / 2.0 + uniform(rng, -3, 3);
      cyto.cx = S / 2.0 + uniform(rng, -3, 3);
      cyto.a = uniform(rng, 0.15, 0.22) * S;
      cyto.b = cyto.a * uniform(rng, 0.72, 1.0);
      cyto.phi = uniform(rng, 0.0, 3.14159265358979);

      // The mask ratio uses the cytoplasm ring (nucleus excluded), so the
      // nucleus ellipse area must be ratio/(1+ratio) of the full ellipse.
      const double frac = target_ratio / (1.0 + target_ratio);
      const double q = uniform(rng, 0.8, 1.25);
      Ellipse nuc;
      nuc.a = std::sqrt(frac * cyto.a * cyto.b * q);
      nuc.b = nuc.a / q;
      nuc.phi = uniform(rng, 0.0, 3.14159265358979);
      const double slack = std::min(cyto.a, cyto.b) - std::max(nuc.a, nuc.b);
      if (slack < 1.0) continue;
      const double off = std::min(2.0, slack - 1.0);
      nuc.cy = cyto.cy + uniform(rng, -off, off);
      nuc.cx = cyto.cx + uniform(rng, -off, off);

      nucleus = MaskU8::Zero(S, S);
      cytoplasm = MaskU8::Zero(S, S);
      std::int64_t n_area = 0, c_area = 0;
      for (int r = 0; r < S; ++r)
        for (int c = 0; c < S; ++c) {
          if (nuc.contains(r, c)) {
            nucleus(r, c) = 1;
            ++n_area;
          } else if (cyto.contains(r, c)) {
            cytoplasm(r, c) = 1;
            ++c_area;
          }
        }
      if (n_area < 12 || c_area < 40) continue;
      const double ratio = static_cast<double>(n_area) / static_cast<double>(c_area);
      if (ratio_bins.bin_of(ratio) != ratio_bin) continue;
      if (ratio <= ratio_bins.lo || ratio >= ratio_bins.hi) continue;

      // Appearance. With a darkness rule the nucleus gray spans its bin; in
      // morphology-only mode it stays close to the cytoplasm gray so the RGB
      // channels reveal little about the nucleus extent.
      const double g_c = uniform(rng, 120, 200);
      double g_n;
      if (darkness_matters) {
        const auto [dlo, dhi] = dark_bins.sample_range(dark_bin, 8.0);
        g_n = uniform(rng, dlo, dhi);
      } else {
        g_n = std::clamp(g_c + uniform(rng, -15, 15), 40.0, 230.0);
      }

      rgb = ImageU8(S, S, 3);
      seg = ImageU8(S, S, 3);
      std::normal_distribution<double> noise(0.0, 8.0);
      double dark_sum = 0.0;
      for (int r = 0; r < S; ++r)
        for (int c = 0; c < S; ++c) {
          double base_r, base_g, base_b;
          Rgb seg_color;
          if (nucleus(r, c)) {
            base_r = g_n; base_g = g_n - 4; base_b = g_n + 6;
            seg_color = {0, 0, 255};
          } else if (cytoplasm(r, c)) {
            base_r = g_c + 5; base_g = g_c; base_b = g_c + 8;
            seg_color = {0, 255, 0};
          } else {
            base_r = 232; base_g = 228; base_b = 236;
            seg_color = {255, 0, 0};
          }
          const std::uint8_t pr = clamp_u8(base_r + noise(rng));
          const std::uint8_t pg = clamp_u8(base_g + noise(rng));
          const std::uint8_t pb = clamp_u8(base_b + noise(rng));
          rgb.at(r, c, 0) = pr;
          rgb.at(r, c, 1) = pg;
          rgb.at(r, c, 2) = pb;
          seg.at(r, c, 0) = seg_color[0];
          seg.at(r, c, 1) = seg_color[1];
          seg.at(r, c, 2) = seg_color[2];
          if (nucleus(r, c)) dark_sum += (pr + pg + pb) / 3.0;
        }

      if (darkness_matters) {
        const double darkness = dark_sum / static_cast<double>(n_area);
        if (dark_bins.bin_of(darkness) != dark_bin) continue;
        if (darkness <= dark_bins.lo || darkness >= dark_bins.hi) continue;
      }
      ok = true;
    }
    if (!ok)
      throw NumericError("SynthesisFailed",
                         "could not realize class " + std::to_string(cls + 1) +
                             " within 100 attempts");

    if (cells_left_in_patient == 0) {
      ++patient_idx;
      cells_left_in_patient =
          1 + static_cast<int>(rng() % static_cast<std::uint64_t>(
                                   std::max(1, spec.max_patient_cells)));
    }
    --cells_left_in_patient;

    char img_name[48], seg_name[48], pid[16];
    std::snprintf(img_name, sizeof img_name, "images/cell_%05d.%s", i, spec.image_format.c_str());
    std::snprintf(seg_name, sizeof seg_name, "segs/cell_%05d.%s", i, spec.image_format.c_str());
    std::snprintf(pid, sizeof pid, "p%04d", patient_idx);
    save_image(out_dir / img_name, rgb);
    save_image(out_dir / seg_name, seg);
    manifest.entries.push_back(ManifestEntry{img_name, seg_name, cls + 1, pid});
  }

  std::ofstream csv(out_dir / "manifest.csv", std::ios::trunc);
  if (!csv) throw DataError("UnwritableFile", "cannot write manifest.csv");
  csv << "image,segmentation,class,patient\n";
  for (const auto& e : manifest.entries)
    csv << e.image << ',' << e.segmentation << ',' << e.class_label << ',' << e.patient << '\n';
  return manifest;
}

}  // namespace cellcnn
