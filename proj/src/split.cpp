#include "cellcnn/split.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

namespace cellcnn {

FoldPlan make_folds(const DatasetManifest& manifest, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("BadFoldCount", "k must be >= 2");

  struct PatientInfo {
    std::string id;
    int total = 0;
    std::array<int, kNumCellClasses> per_class{};
  };
  std::map<std::string, PatientInfo> by_id;
  for (const auto& e : manifest.entries) {
    if (e.patient.empty()) throw DataError("EmptyPatient", "manifest entry without patient id");
    auto& p = by_id[e.patient];
    p.id = e.patient;
    p.total++;
    p.per_class[static_cast<std::size_t>(e.class_label - 1)]++;
  }
  if (static_cast<int>(by_id.size()) < k)
    throw DataError("TooFewPatients", std::to_string(by_id.size()) + " patients but k = " +
                                          std::to_string(k));

  std::vector<PatientInfo> patients;
  patients.reserve(by_id.size());
  for (auto& [id, p] : by_id) patients.push_back(std::move(p));
  std::mt19937_64 rng(seed);
  std::shuffle(patients.begin(), patients.end(), rng);  // seed breaks ties
  std::stable_sort(patients.begin(), patients.end(),
                   [](const PatientInfo& a, const PatientInfo& b) { return a.total > b.total; });

  std::vector<std::array<std::int64_t, kNumCellClasses>> fold_class(
      static_cast<std::size_t>(k));
  for (auto& f : fold_class) f.fill(0);
  std::vector<std::int64_t> fold_total(static_cast<std::size_t>(k), 0);

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  for (const auto& p : patients) {
    int best = 0;
    std::int64_t best_score = -1;
    std::int64_t best_size = -1;
    for (int f = 0; f < k; ++f) {
      std::int64_t score = 0;
      for (int c = 0; c < kNumCellClasses; ++c) {
        const std::int64_t n = fold_class[static_cast<std::size_t>(f)][static_cast<std::size_t>(c)] +
                               p.per_class[static_cast<std::size_t>(c)];
        score += n * n;
      }
      const std::int64_t size = fold_total[static_cast<std::size_t>(f)] + p.total;
      if (best_score < 0 || score < best_score ||
          (score == best_score && size < best_size)) {
        best = f;
        best_score = score;
        best_size = size;
      }
    }
    plan.assignment[p.id] = best;
    fold_total[static_cast<std::size_t>(best)] += p.total;
    for (int c = 0; c < kNumCellClasses; ++c)
      fold_class[static_cast<std::size_t>(best)][static_cast<std::size_t>(c)] +=
          p.per_class[static_cast<std::size_t>(c)];
  }
  return plan;
}

std::pair<std::vector<int>, std::vector<int>> fold_split(const FoldPlan& plan,
                                                         const DatasetManifest& manifest,
                                                         int fold_index) {
  if (fold_index < 0 || fold_index >= plan.k)
    throw ConfigError("BadFoldIndex", "fold index " + std::to_string(fold_index) +
                                          " outside [0, " + std::to_string(plan.k) + ")");
  std::vector<int> train, val;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto it = plan.assignment.find(manifest.entries[i].patient);
    if (it == plan.assignment.end())
      throw DataError("UnassignedPatient",
                      "patient `" + manifest.entries[i].patient + "` missing from fold plan");
    (it->second == fold_index ? val : train).push_back(static_cast<int>(i));
  }
  return {train, val};
}

std::vector<std::string> audit_leakage(const FoldPlan& plan, std::span<const Provenance> train,
                                       std::span<const Provenance> val) {
  (void)plan;
  std::set<std::string> train_patients, leaked;
  for (const auto& p : train) {
    if (p.patient.empty()) throw DataError("MissingProvenance", "sample without patient id");
    train_patients.insert(p.patient);
  }
  for (const auto& p : val) {
    if (p.patient.empty()) throw DataError("MissingProvenance", "sample without patient id");
    if (train_patients.count(p.patient)) leaked.insert(p.patient);
  }
  return {leaked.begin(), leaked.end()};
}

void save_fold_plan(const std::filesystem::path& path, const FoldPlan& plan) {
  nlohmann::json j;
  j["k"] = plan.k;
  j["seed"] = plan.seed;
  j["assignment"] = plan.assignment;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("UnwritableFile", "cannot write " + path.string());
  f << j.dump(2) << '\n';
}

FoldPlan load_fold_plan(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("UnreadableFile", "cannot open fold plan " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("BadFoldPlan", path.string() + ": " + e.what());
  }
  FoldPlan plan;
  try {
    plan.k = j.at("k").get<int>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.assignment = j.at("assignment").get<std::map<std::string, int>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("BadFoldPlan", path.string() + ": " + e.what());
  }
  for (const auto& [patient, fold] : plan.assignment)
    if (fold < 0 || fold >= plan.k)
      throw DataError("BadFoldPlan", "patient `" + patient + "` assigned to fold " +
                                         std::to_string(fold) + " outside [0, " +
                                         std::to_string(plan.k) + ")");
  return plan;
}

}  // namespace cellcnn
