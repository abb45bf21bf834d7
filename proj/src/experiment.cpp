#include "cellcnn/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace cellcnn {
namespace {

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fmt_pct(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.1f", *v * 100.0);
  return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (channels != 3 && channels != 5)
    throw ConfigError("BadConfig", "channels: must be 3 or 5, got " + std::to_string(channels));
  task_from_string(task);  // throws with field context
  augment.validate();
  train.validate();
  if (train.crop > augment.out_size)
    throw ConfigError("BadConfig", "train.crop: " + std::to_string(train.crop) +
                                       " exceeds augment.out_size " +
                                       std::to_string(augment.out_size));
  if (k < 2) throw ConfigError("BadConfig", "k: must be >= 2");
  if (network.empty()) throw ConfigError("BadConfig", "network: must not be empty");
  if (random_fc_count < 0) throw ConfigError("BadConfig", "random_fc_count: must be >= 0");
  if (gaussian_std <= 0.0f) throw ConfigError("BadConfig", "gaussian_std: must be > 0");
}

namespace {

Rgb rgb_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("BadConfig", "color must be [r,g,b]");
  return {j[0].get<std::uint8_t>(), j[1].get<std::uint8_t>(), j[2].get<std::uint8_t>()};
}

Region region_from_string(const std::string& s) {
  if (s == "background") return Region::background;
  if (s == "cytoplasm") return Region::cytoplasm;
  if (s == "nucleus") return Region::nucleus;
  if (s == "other") return Region::other;
  throw ConfigError("BadConfig", "colors: unknown region `" + s + "`");
}

const char* region_name(Region r) {
  switch (r) {
    case Region::background: return "background";
    case Region::cytoplasm: return "cytoplasm";
    case Region::nucleus: return "nucleus";
    case Region::other: return "other";
  }
  return "?";
}

}  // namespace

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  try {
    if (j.contains("manifest")) cfg.manifest = j.at("manifest").get<std::string>();
    cfg.channels = j.value("channels", cfg.channels);
    cfg.task = j.value("task", cfg.task);
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      cfg.augment.m = a.value("m", cfg.augment.m);
      cfg.augment.d = a.value("d", cfg.augment.d);
      cfg.augment.target_per_class = a.value("target_per_class", cfg.augment.target_per_class);
      cfg.augment.out_size = a.value("out_size", cfg.augment.out_size);
      const std::string interp = a.value("rotation_interp", std::string("bilinear"));
      if (interp != "bilinear" && interp != "nearest")
        throw ConfigError("BadConfig", "augment.rotation_interp: must be bilinear or nearest");
      cfg.augment.rotation_interp = interp == "bilinear" ? Interp::bilinear : Interp::nearest;
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      if (t.contains("preset")) cfg.train = train_preset(t.at("preset").get<std::string>());
      cfg.train.epochs = t.value("epochs", cfg.train.epochs);
      cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
      cfg.train.base_lr = t.value("base_lr", cfg.train.base_lr);
      cfg.train.lr_decay_factor = t.value("lr_decay_factor", cfg.train.lr_decay_factor);
      cfg.train.lr_decay_every = t.value("lr_decay_every", cfg.train.lr_decay_every);
      cfg.train.momentum = t.value("momentum", cfg.train.momentum);
      cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
      cfg.train.crop = t.value("crop", cfg.train.crop);
      cfg.train.accumulate_steps = t.value("accumulate_steps", cfg.train.accumulate_steps);
      cfg.train.mean_sample_cap = t.value("mean_sample_cap", cfg.train.mean_sample_cap);
    }
    cfg.network = j.value("network", cfg.network);
    if (j.contains("tta")) {
      cfg.tta.n_random_views = j.at("tta").value("n_random_views", cfg.tta.n_random_views);
      cfg.tta.n_crops = j.at("tta").value("n_crops", cfg.tta.n_crops);
    }
    cfg.k = j.value("k", cfg.k);
    if (j.contains("fold_plan")) cfg.fold_plan = j.at("fold_plan").get<std::string>();
    if (j.contains("out")) cfg.out = j.at("out").get<std::string>();
    cfg.seed = j.value("seed", cfg.seed);
    cfg.cell_as_patient = j.value("cell_as_patient", cfg.cell_as_patient);
    if (j.contains("materialize")) cfg.materialize_dir = j.at("materialize").get<std::string>();
    cfg.plots = j.value("plots", cfg.plots);
    if (j.contains("init_checkpoint"))
      cfg.init_checkpoint = j.at("init_checkpoint").get<std::string>();
    cfg.random_fc_count = j.value("random_fc_count", cfg.random_fc_count);
    cfg.gaussian_std = j.value("gaussian_std", cfg.gaussian_std);
    if (j.contains("colors")) {
      cfg.colors.colors.clear();
      for (const auto& [key, val] : j.at("colors").items())
        cfg.colors.colors[rgb_from_json(val)] = region_from_string(key);
    }
    if (j.contains("colors_list")) {
      cfg.colors.colors.clear();
      for (const auto& e : j.at("colors_list"))
        cfg.colors.colors[rgb_from_json(e.at("color"))] =
            region_from_string(e.at("region").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("BadConfig", e.what());
  }
  return cfg;
}

nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["manifest"] = cfg.manifest.string();
  j["channels"] = cfg.channels;
  j["task"] = cfg.task;
  j["augment"] = {{"m", cfg.augment.m},
                  {"d", cfg.augment.d},
                  {"target_per_class", cfg.augment.target_per_class},
                  {"out_size", cfg.augment.out_size},
                  {"rotation_interp",
                   cfg.augment.rotation_interp == Interp::bilinear ? "bilinear" : "nearest"}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"base_lr", cfg.train.base_lr},
                {"lr_decay_factor", cfg.train.lr_decay_factor},
                {"lr_decay_every", cfg.train.lr_decay_every},
                {"momentum", cfg.train.momentum},
                {"weight_decay", cfg.train.weight_decay},
                {"crop", cfg.train.crop},
                {"accumulate_steps", cfg.train.accumulate_steps},
                {"mean_sample_cap", cfg.train.mean_sample_cap}};
  if (!cfg.train.preset.empty()) j["train"]["preset"] = cfg.train.preset;
  j["network"] = cfg.network;
  j["tta"] = {{"n_random_views", cfg.tta.n_random_views}, {"n_crops", cfg.tta.n_crops}};
  j["k"] = cfg.k;
  if (!cfg.fold_plan.empty()) j["fold_plan"] = cfg.fold_plan.string();
  j["out"] = cfg.out.string();
  j["seed"] = cfg.seed;
  j["cell_as_patient"] = cfg.cell_as_patient;
  if (!cfg.materialize_dir.empty()) j["materialize"] = cfg.materialize_dir.string();
  j["plots"] = cfg.plots;
  if (!cfg.init_checkpoint.empty()) j["init_checkpoint"] = cfg.init_checkpoint.string();
  j["random_fc_count"] = cfg.random_fc_count;
  j["gaussian_std"] = cfg.gaussian_std;
  nlohmann::json colors = nlohmann::json::array();
  for (const auto& [rgb, region] : cfg.colors.colors)
    colors.push_back({{"color", {rgb[0], rgb[1], rgb[2]}}, {"region", region_name(region)}});
  j["colors_list"] = std::move(colors);
  return j;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("UnreadableFile", "cannot open config " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("BadConfig", path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

void apply_env_overrides(ExperimentConfig& cfg) {
  const auto env = [](const char* name) -> std::optional<std::string> {
    const char* v = std::getenv(name);
    if (!v || !*v) return {};
    return std::string(v);
  };
  if (auto v = env("CELLCNN_SEED")) cfg.seed = std::stoull(*v);
  if (auto v = env("CELLCNN_OUT")) cfg.out = *v;
  if (auto v = env("CELLCNN_MANIFEST")) cfg.manifest = *v;
  if (auto v = env("CELLCNN_CHANNELS")) cfg.channels = std::stoi(*v);
  if (auto v = env("CELLCNN_TASK")) cfg.task = *v;
  if (auto v = env("CELLCNN_EPOCHS")) cfg.train.epochs = std::stoi(*v);
}

NetworkSpec resolve_network_spec(const ExperimentConfig& cfg) {
  const int classes = task_classes(cfg.task_enum());
  NetworkSpec spec;
  if (is_network_preset(cfg.network)) {
    spec = preset_network(cfg.network, cfg.train.crop, cfg.channels, classes);
  } else {
    spec = load_network_spec(cfg.network);
  }
  if (spec.input.channels != cfg.channels)
    throw ConfigError("BadConfig", "network: input channels " +
                                       std::to_string(spec.input.channels) +
                                       " inconsistent with channels=" +
                                       std::to_string(cfg.channels));
  if (spec.input.height != cfg.train.crop || spec.input.width != cfg.train.crop)
    throw ConfigError("BadConfig",
                      "network: input size " + std::to_string(spec.input.height) + "x" +
                          std::to_string(spec.input.width) + " inconsistent with train.crop " +
                          std::to_string(cfg.train.crop));
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::softmax_output ||
      spec.layers.back().classes != classes)
    throw ConfigError("BadConfig", "network: output width inconsistent with task " + cfg.task);
  return spec;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------
namespace {

nlohmann::json optional_to_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  return *v;
}

nlohmann::json matrix_to_json(const ConfusionMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

void aggregate_into(nlohmann::json& agg, const char* key, const std::vector<FoldReport>& folds,
                    const std::function<std::optional<double>(const FoldReport&)>& get) {
  std::vector<double> vals;
  int missing = 0;
  for (const auto& f : folds) {
    if (auto v = get(f))
      vals.push_back(*v);
    else
      ++missing;
  }
  if (vals.empty()) {
    agg[key] = nullptr;
    return;
  }
  const Aggregate a = aggregate_folds(vals);
  nlohmann::json entry;
  entry["mean"] = a.mean;
  entry["std"] = a.stddev ? nlohmann::json(*a.stddev) : nlohmann::json(nullptr);
  entry["folds"] = a.n;
  if (missing > 0) entry["undefined_in_folds"] = missing;
  agg[key] = std::move(entry);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("UnwritableFile", "cannot write " + path.string());
  f << text;
}

std::string roc_csv(const std::vector<RocPoint>& points) {
  std::string out = "fpr,tpr,threshold\n";
  char line[128];
  for (const auto& p : points) {
    std::snprintf(line, sizeof line, "%.9g,%.9g,%.9g\n", p.fpr, p.tpr, p.threshold);
    out += line;
  }
  return out;
}

std::string confusion_csv(const ConfusionMatrix& m) {
  std::string out;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out += ',';
      out += std::to_string(m(r, c));
    }
    out += '\n';
  }
  return out;
}

std::string svg_roc(const std::vector<FoldReport>& folds) {
  const int W = 440, H = 440, M = 50;
  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  s << "<rect x='" << M << "' y='" << M << "' width='" << W - 2 * M << "' height='"
    << H - 2 * M << "' fill='white' stroke='black'/>\n";
  s << "<line x1='" << M << "' y1='" << H - M << "' x2='" << W - M << "' y2='" << M
    << "' stroke='#bbbbbb' stroke-dasharray='4'/>\n";
  const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                           "#8c564b", "#e377c2", "#7f7f7f"};
  int pi = 0;
  for (const auto& f : folds) {
    if (f.roc.empty()) continue;
    s << "<polyline fill='none' stroke='" << palette[pi % 8] << "' points='";
    for (const auto& p : f.roc) {
      const double x = M + p.fpr * (W - 2 * M);
      const double y = H - M - p.tpr * (H - 2 * M);
      s << fmt(x) << ',' << fmt(y) << ' ';
    }
    s << "'/>\n";
    ++pi;
  }
  s << "<text x='" << W / 2 << "' y='" << H - 12 << "' text-anchor='middle'>FPR</text>\n";
  s << "<text x='14' y='" << H / 2 << "' text-anchor='middle' transform='rotate(-90 14 "
    << H / 2 << ")'>TPR</text>\n";
  s << "</svg>\n";
  return s.str();
}

std::string svg_confusion(const ConfusionMatrix& m) {
  const int n = static_cast<int>(m.rows());
  const int cell = 48, M = 40;
  const int W = M * 2 + n * cell, H = M * 2 + n * cell;
  const double maxv = static_cast<double>(std::max<std::int64_t>(1, m.maxCoeff()));
  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const double frac = static_cast<double>(m(r, c)) / maxv;
      const int shade = static_cast<int>(255 - 200 * frac);
      s << "<rect x='" << M + c * cell << "' y='" << M + r * cell << "' width='" << cell
        << "' height='" << cell << "' fill='rgb(" << shade << ',' << shade
        << ",255)' stroke='black'/>\n";
      s << "<text x='" << M + c * cell + cell / 2 << "' y='" << M + r * cell + cell / 2 + 5
        << "' text-anchor='middle' font-size='13'>" << m(r, c) << "</text>\n";
    }
  s << "</svg>\n";
  return s.str();
}

}  // namespace

nlohmann::json report_to_json(const std::vector<FoldReport>& folds, Task task) {
  nlohmann::json j;
  j["task"] = task_name(task);
  nlohmann::json jf = nlohmann::json::array();
  for (const auto& f : folds) {
    nlohmann::json e;
    e["fold"] = f.fold;
    e["confusion"] = matrix_to_json(f.matrix);
    e["acc"] = f.acc;
    e["sens"] = optional_to_json(f.sens);
    e["spec"] = optional_to_json(f.spec);
    e["auc"] = optional_to_json(f.auc);
    if (task == Task::seven_class) e["average_accuracy"] = optional_to_json(f.avg_acc);
    e["flags"] = f.flags;
    if (!f.roc.empty()) {
      nlohmann::json pts = nlohmann::json::array();
      for (const auto& p : f.roc) pts.push_back({p.fpr, p.tpr});
      e["roc"] = std::move(pts);
    }
    jf.push_back(std::move(e));
  }
  j["folds"] = std::move(jf);

  nlohmann::json agg;
  aggregate_into(agg, "acc", folds, [](const FoldReport& f) { return std::optional<double>(f.acc); });
  aggregate_into(agg, "sens", folds, [](const FoldReport& f) { return f.sens; });
  aggregate_into(agg, "spec", folds, [](const FoldReport& f) { return f.spec; });
  aggregate_into(agg, "auc", folds, [](const FoldReport& f) { return f.auc; });
  if (task == Task::seven_class) {
    aggregate_into(agg, "average_accuracy", folds,
                   [](const FoldReport& f) { return f.avg_acc; });
    ConfusionMatrix total = folds.front().matrix;
    for (std::size_t i = 1; i < folds.size(); ++i) total += folds[i].matrix;
    agg["confusion_total"] = matrix_to_json(total);
  }
  j["aggregate"] = std::move(agg);
  return j;
}

std::string summary_table(const std::vector<FoldReport>& folds, Task task) {
  std::ostringstream s;
  const auto agg = [&](const std::function<std::optional<double>(const FoldReport&)>& get) {
    std::vector<double> vals;
    for (const auto& f : folds)
      if (auto v = get(f)) vals.push_back(*v);
    return vals;
  };
  const auto line = [&](const char* name,
                        const std::function<std::optional<double>(const FoldReport&)>& get,
                        bool pct) {
    const auto vals = agg(get);
    if (vals.empty()) {
      s << "  " << name << ": undefined in all folds\n";
      return;
    }
    const Aggregate a = aggregate_folds(vals);
    const double scale = pct ? 100.0 : 1.0;
    char buf[96];
    if (a.stddev)
      std::snprintf(buf, sizeof buf, "  %-8s %.*f +- %.*f%s", name, pct ? 1 : 3,
                    a.mean * scale, pct ? 1 : 3, *a.stddev * scale, pct ? "%" : "");
    else
      std::snprintf(buf, sizeof buf, "  %-8s %.*f%s", name, pct ? 1 : 3, a.mean * scale,
                    pct ? "%" : "");
    s << buf;
    if (static_cast<int>(vals.size()) < static_cast<int>(folds.size()))
      s << "  (defined in " << vals.size() << "/" << folds.size() << " folds)";
    s << '\n';
  };

  s << "=== " << task_name(task) << " summary over " << folds.size() << " fold(s) ===\n";
  if (task == Task::two_class) {
    line("AUC", [](const FoldReport& f) { return f.auc; }, false);
    line("Acc", [](const FoldReport& f) { return std::optional<double>(f.acc); }, true);
    line("Sens", [](const FoldReport& f) { return f.sens; }, true);
    line("Spec", [](const FoldReport& f) { return f.spec; }, true);
  } else {
    line("Acc", [](const FoldReport& f) { return std::optional<double>(f.acc); }, true);
    line("AvgAcc", [](const FoldReport& f) { return f.avg_acc; }, true);
  }
  for (const auto& f : folds)
    for (const auto& flag : f.flags) s << "  [fold " << f.fold << "] " << flag << '\n';
  return s.str();
}

void write_reports(const std::filesystem::path& out_dir, const std::vector<FoldReport>& folds,
                   Task task, bool plots) {
  write_text(out_dir / "report.json", report_to_json(folds, task).dump(2) + "\n");
  write_text(out_dir / "summary.txt", summary_table(folds, task));

  std::string csv = "fold,acc,sens,spec,auc";
  if (task == Task::seven_class) csv += ",average_accuracy";
  csv += '\n';
  const auto cell = [](const std::optional<double>& v) {
    return v ? fmt(*v) : std::string("null");
  };
  for (const auto& f : folds) {
    csv += std::to_string(f.fold) + ',' + fmt(f.acc) + ',' + cell(f.sens) + ',' + cell(f.spec) +
           ',' + cell(f.auc);
    if (task == Task::seven_class) csv += ',' + cell(f.avg_acc);
    csv += '\n';
  }
  write_text(out_dir / "summary.csv", csv);

  for (const auto& f : folds) {
    write_text(out_dir / ("confusion_fold" + std::to_string(f.fold) + ".csv"),
               confusion_csv(f.matrix));
    if (!f.roc.empty())
      write_text(out_dir / ("roc_fold" + std::to_string(f.fold) + ".csv"), roc_csv(f.roc));
  }
  if (plots) {
    if (task == Task::two_class) write_text(out_dir / "roc.svg", svg_roc(folds));
    ConfusionMatrix total = folds.front().matrix;
    for (std::size_t i = 1; i < folds.size(); ++i) total += folds[i].matrix;
    write_text(out_dir / "confusion.svg", svg_confusion(total));
  }
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------
namespace {

std::map<int, int> class_counts(const DatasetManifest& manifest, const std::vector<int>& idx) {
  std::map<int, int> counts;
  for (int i : idx) counts[manifest.entries[static_cast<std::size_t>(i)].class_label]++;
  return counts;
}

std::uint64_t fold_seed(std::uint64_t base, int fold, std::uint64_t salt) {
  return base + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(fold + 1) + salt;
}

}  // namespace

CrossvalResult run_crossval(const ExperimentConfig& cfg, std::optional<int> only_fold) {
  cfg.validate();
  if (cfg.manifest.empty()) throw ConfigError("BadConfig", "manifest: path required");
  const Task task = cfg.task_enum();
  const NetworkSpec net_spec = resolve_network_spec(cfg);

  std::error_code ec;
  std::filesystem::create_directories(cfg.out, ec);
  if (!std::filesystem::is_directory(cfg.out))
    throw DataError("UnwritableFile", "cannot create output directory " + cfg.out.string());

  // Resolved config + seed land next to the results so a run is reproducible
  // from its own artifacts.
  write_text(cfg.out / "config.json", experiment_config_to_json(cfg).dump(2) + "\n");
  write_text(cfg.out / "seed.txt", std::to_string(cfg.seed) + "\n");

  if (cfg.cell_as_patient)
    std::cerr << "WARNING: --cell-as-patient treats every cell as its own patient. "
                 "This is NOT patient-level cross-validation; results are not comparable "
                 "to a patient-grouped protocol.\n";

  const DatasetManifest manifest = load_manifest(cfg.manifest, cfg.cell_as_patient);
  if (manifest.entries.empty()) throw DataError("EmptyManifest", "manifest has no entries");
  const std::vector<CellRecord> cells = decode_all(manifest, cfg.colors);

  CrossvalResult result;
  if (!cfg.fold_plan.empty()) {
    result.plan = load_fold_plan(cfg.fold_plan);
    if (result.plan.k != cfg.k)
      throw ConfigError("BadConfig", "fold_plan: has k=" + std::to_string(result.plan.k) +
                                         " but config wants k=" + std::to_string(cfg.k));
  } else {
    result.plan = make_folds(manifest, cfg.k, cfg.seed);
  }
  save_fold_plan(cfg.out / "folds.json", result.plan);

  for (int fold = 0; fold < cfg.k; ++fold) {
    if (only_fold && fold != *only_fold) continue;
    const auto [train_idx, val_idx] = fold_split(result.plan, manifest, fold);
    if (train_idx.empty() || val_idx.empty())
      throw DataError("EmptyFold", "fold " + std::to_string(fold) + " has an empty side");

    // Augmentation is planned on the training side only, after the split.
    AugmentConfig acfg = cfg.augment;
    acfg.seed = fold_seed(cfg.seed, fold, 0xA06);
    const AugmentPlan aplan = plan_augmentation(class_counts(manifest, train_idx), acfg);
    for (const auto& [label, p] : aplan.per_class)
      if (p.clipped)
        std::cerr << "WARNING: class " << label << " has more cells (" << p.source_count
                  << ") than target_per_class; multiplier clipped to 1\n";
    const SampleSet stream = build_training_set(cells, train_idx, aplan, acfg);

    // Leakage audit over the augmented stream vs the validation cells.
    std::vector<Provenance> train_prov, val_prov;
    train_prov.reserve(stream.size());
    for (std::size_t i = 0; i < stream.size(); ++i) train_prov.push_back(stream.provenance(i));
    for (int ci : val_idx) {
      Provenance p;
      p.cell_index = ci;
      p.patient = cells[static_cast<std::size_t>(ci)].patient;
      val_prov.push_back(std::move(p));
    }
    const auto leaks = audit_leakage(result.plan, train_prov, val_prov);
    if (!leaks.empty())
      throw DataError("LeakageDetected",
                      "patients on both sides of fold " + std::to_string(fold) + ": " +
                          leaks.front() + (leaks.size() > 1 ? " (+ more)" : ""));

    if (!cfg.materialize_dir.empty())
      materialize_samples(stream, cfg.materialize_dir / ("fold" + std::to_string(fold)));

    Network net(net_spec);
    InitPolicy policy;
    if (cfg.init_checkpoint.empty()) {
      policy.mode = InitPolicy::Mode::scratch;
    } else {
      policy.mode = InitPolicy::Mode::transfer;
      policy.checkpoint = cfg.init_checkpoint;
      policy.random_fc_count = cfg.random_fc_count;
    }
    policy.gaussian_std = cfg.gaussian_std;
    std::mt19937_64 init_rng(fold_seed(cfg.seed, fold, 0x117));
    init_weights(net, policy, init_rng);

    TrainConfig tcfg = cfg.train;
    tcfg.seed = fold_seed(cfg.seed, fold, 0x7e4);
    TrainResult tres = train(net, stream, cells, val_idx, tcfg, task, cfg.channels);

    const auto hist_path = cfg.out / ("history_fold" + std::to_string(fold) + ".csv");
    write_history_csv(hist_path, tres.history);
    result.history_files.push_back(hist_path);

    const auto ckpt_path = cfg.out / ("checkpoint_fold" + std::to_string(fold) + ".ckpt");
    save_checkpoint(ckpt_path, tres.best);
    result.checkpoint_files.push_back(ckpt_path);

    // Evaluate the best checkpoint, not the last epoch.
    Network best_net = network_from_checkpoint(tres.best);
    PredictContext pctx;
    pctx.augment = &acfg;
    pctx.crop = cfg.train.crop;
    pctx.channels = cfg.channels;
    pctx.means = tres.channel_means;
    result.folds.push_back(evaluate_fold(best_net, cells, val_idx, cfg.tta, pctx, task, fold,
                                         fold_seed(cfg.seed, fold, 0xE7A)));
  }

  if (!result.folds.empty()) write_reports(cfg.out, result.folds, task, cfg.plots);
  return result;
}

FoldReport run_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                    int fold) {
  cfg.validate();
  if (cfg.manifest.empty()) throw ConfigError("BadConfig", "manifest: path required");
  const Task task = cfg.task_enum();

  const DatasetManifest manifest = load_manifest(cfg.manifest, cfg.cell_as_patient);
  const std::vector<CellRecord> cells = decode_all(manifest, cfg.colors);

  FoldPlan plan;
  if (!cfg.fold_plan.empty())
    plan = load_fold_plan(cfg.fold_plan);
  else
    plan = make_folds(manifest, cfg.k, cfg.seed);
  const auto [train_idx, val_idx] = fold_split(plan, manifest, fold);

  const Checkpoint ckpt = load_checkpoint(checkpoint);
  Network net = network_from_checkpoint(ckpt);
  std::vector<float> means;
  if (ckpt.meta.contains("channel_means"))
    means = ckpt.meta.at("channel_means").get<std::vector<float>>();
  else
    throw DataError("BadCheckpoint", "checkpoint lacks channel_means metadata");

  AugmentConfig acfg = cfg.augment;
  PredictContext pctx;
  pctx.augment = &acfg;
  pctx.crop = cfg.train.crop;
  pctx.channels = cfg.channels;
  pctx.means = means;
  return evaluate_fold(net, cells, val_idx, cfg.tta, pctx, task, fold,
                       fold_seed(cfg.seed, fold, 0xE7A));
}

}  // namespace cellcnn
