#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cellcnn/augment.hpp"
#include "cellcnn/nn.hpp"
#include "cellcnn/train.hpp"

namespace cellcnn {

// Test-time aggregation: n_random_views jittered nucleus centers, each
// expanded into n_crops crops (1 = center; 10 = center + 4 corners, both
// mirrored), softmax outputs averaged.
struct TTAConfig {
  int n_random_views = 10;
  int n_crops = 1;  // 1 or 10

  void validate() const {
    if (n_random_views < 1) throw ConfigError("BadTTAConfig", "n_random_views must be >= 1");
    if (n_crops != 1 && n_crops != 10)
      throw ConfigError("BadTTAConfig", "n_crops must be 1 or 10");
  }
};

// Everything needed to turn a cell into scored network inputs.
struct PredictContext {
  const AugmentConfig* augment = nullptr;
  int crop = 0;
  int channels = 5;
  std::span<const float> means;
};

// Mean softmax probability vector over all TTA views; sums to 1.
std::vector<double> predict_cell(Network& net, const CellRecord& cell, const TTAConfig& tta,
                                 const PredictContext& ctx, std::mt19937_64& rng);

struct BinaryMetrics {
  std::int64_t tp = 0, fn = 0, tn = 0, fp = 0;
  std::optional<double> sens;  // empty when no abnormal cells present
  std::optional<double> spec;  // empty when no normal cells present
  double acc = 0.0;
};

// scores = P(abnormal); labels 1 = abnormal, 0 = normal; score >= threshold
// predicts abnormal.
BinaryMetrics binary_metrics(std::span<const double> scores, std::span<const int> labels,
                             double threshold = 0.5);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

// Threshold sweep over all distinct scores (plus +-inf endpoints so the curve
// runs (0,0) -> (1,1)); AUC by the trapezoid rule, which under this tie
// handling equals the Mann-Whitney statistic P(s_pos > s_neg) + P(equal)/2.
struct RocResult {
  std::vector<RocPoint> points;
  double auc = 0.0;
};
RocResult roc_auc(std::span<const double> scores, std::span<const int> labels);

using ConfusionMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

// rows = true class, cols = predicted class, both 0-based.
ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels, int n);

// Mean over classes of diag/row_sum; every row must have a positive sum.
double average_accuracy(const ConfusionMatrix& cm);

struct Aggregate {
  double mean = 0.0;
  std::optional<double> stddev;  // sample std; empty with < 2 folds
  int n = 0;
};
Aggregate aggregate_folds(std::span<const double> values);

// Per-fold evaluation output. Optional metrics stay unset when a class is
// absent from the fold; such folds are flagged, never silently averaged.
struct FoldReport {
  int fold = -1;
  ConfusionMatrix matrix;           // task-sized
  double acc = 0.0;
  std::optional<double> sens, spec, auc;
  std::optional<double> avg_acc;    // 7-class only
  std::vector<RocPoint> roc;        // 2-class only
  std::vector<std::string> flags;
};

FoldReport evaluate_fold(Network& net, const std::vector<CellRecord>& cells,
                         const std::vector<int>& val_indices, const TTAConfig& tta,
                         const PredictContext& ctx, Task task, int fold,
                         std::uint64_t seed);

}  // namespace cellcnn
