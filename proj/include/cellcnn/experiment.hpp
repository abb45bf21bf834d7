#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cellcnn/augment.hpp"
#include "cellcnn/data.hpp"
#include "cellcnn/eval.hpp"
#include "cellcnn/nn.hpp"
#include "cellcnn/split.hpp"
#include "cellcnn/train.hpp"

namespace cellcnn {

// One experiment = one resolved, diffable document. CLI flags and CELLCNN_*
// environment variables override individual fields.
struct ExperimentConfig {
  std::filesystem::path manifest;
  int channels = 5;            // 3 or 5
  std::string task = "2class"; // 2class | 7class
  AugmentConfig augment;
  TrainConfig train;
  std::string network = "cellnet-s";  // preset name or spec path
  TTAConfig tta{1, 1};
  int k = 5;
  std::filesystem::path fold_plan;  // optional: reuse a persisted plan
  std::filesystem::path out = "run";
  std::uint64_t seed = 0;
  LabelColorMap colors = LabelColorMap::default_map();
  bool cell_as_patient = false;
  std::filesystem::path materialize_dir;  // optional sample export
  bool plots = false;

  // weight initialization
  std::filesystem::path init_checkpoint;  // empty = scratch
  int random_fc_count = 1;
  float gaussian_std = 0.01f;

  void validate() const;
  Task task_enum() const { return task_from_string(task); }
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Applies CELLCNN_SEED, CELLCNN_OUT, CELLCNN_MANIFEST, CELLCNN_CHANNELS,
// CELLCNN_TASK, CELLCNN_EPOCHS overrides from the environment.
void apply_env_overrides(ExperimentConfig& cfg);

// Builds the network spec for this experiment (preset or file), sized to the
// training crop, and checks it against channels/task.
NetworkSpec resolve_network_spec(const ExperimentConfig& cfg);

struct CrossvalResult {
  FoldPlan plan;
  std::vector<FoldReport> folds;
  std::vector<std::filesystem::path> history_files;
  std::vector<std::filesystem::path> checkpoint_files;
};

// Orchestrates split -> per-fold augment -> train -> eval -> aggregate and
// writes every artifact (resolved config, fold plan, histories, checkpoints,
// reports, summaries, optional plots) under cfg.out. `only_fold` restricts
// the run to a single fold.
CrossvalResult run_crossval(const ExperimentConfig& cfg, std::optional<int> only_fold = {});

// Evaluates an existing checkpoint on one validation fold.
FoldReport run_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                    int fold);

// Report writers (also used by tests).
nlohmann::json report_to_json(const std::vector<FoldReport>& folds, Task task);
void write_reports(const std::filesystem::path& out_dir, const std::vector<FoldReport>& folds,
                   Task task, bool plots);
std::string summary_table(const std::vector<FoldReport>& folds, Task task);

}  // namespace cellcnn
