#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cellcnn/augment.hpp"
#include "cellcnn/data.hpp"

namespace cellcnn {

// Patient-level fold assignment. Every patient lands in exactly one fold, so
// folds are disjoint at both patient and cell level.
struct FoldPlan {
  int k = 5;
  std::uint64_t seed = 0;
  std::map<std::string, int> assignment;  // patient id -> fold in [0, k)
};

// Greedy balanced assignment: patients ordered by descending cell count
// (ties broken by a seeded shuffle), each placed into the fold minimizing the
// squared per-class count imbalance, then fold size, then fold index.
FoldPlan make_folds(const DatasetManifest& manifest, int k, std::uint64_t seed);

// validation = cells of fold `fold_index`, train = everything else.
// Returned vectors hold manifest entry indices in manifest order.
std::pair<std::vector<int>, std::vector<int>> fold_split(const FoldPlan& plan,
                                                         const DatasetManifest& manifest,
                                                         int fold_index);

// Sorted list of patient ids present on both sides; empty means no leakage.
std::vector<std::string> audit_leakage(const FoldPlan& plan,
                                       std::span<const Provenance> train,
                                       std::span<const Provenance> val);

// JSON round trip is byte-exact: {"assignment": {...}, "k": k, "seed": seed}.
void save_fold_plan(const std::filesystem::path& path, const FoldPlan& plan);
FoldPlan load_fold_plan(const std::filesystem::path& path);

}  // namespace cellcnn
