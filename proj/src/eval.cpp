#include "cellcnn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cellcnn {

std::vector<double> predict_cell(Network& net, const CellRecord& cell, const TTAConfig& tta,
                                 const PredictContext& ctx, std::mt19937_64& rng) {
  tta.validate();
  const AugmentConfig& acfg = *ctx.augment;
  if (net.input_channels() != ctx.channels)
    throw ConfigError("ShapeMismatch",
                      "network expects " + std::to_string(net.input_channels()) +
                          " channels, pipeline provides " + std::to_string(ctx.channels));

  const int classes = net.num_classes();
  std::vector<double> acc(static_cast<std::size_t>(classes), 0.0);
  int views = 0;

  const auto centroid = nucleus_centroid(cell.nucleus);
  Tensor batch({1, ctx.crop, ctx.crop, ctx.channels});

  const auto run_view = [&](Tensor view) {
    normalize_view(view, ctx.means);
    std::copy(view.data(), view.data() + view.size(), batch.data());
    const Tensor logits = net.forward(batch, false);
    const auto p = softmax_probs(logits, 0);
    for (int k = 0; k < classes; ++k) acc[static_cast<std::size_t>(k)] += p[static_cast<std::size_t>(k)];
    ++views;
  };

  for (int v = 0; v < tta.n_random_views; ++v) {
    const auto center = jitter_center(centroid, acfg.d, rng);
    const Patch patch = extract_patch(cell, center, acfg.m);
    const Tensor sample = assemble_sample(patch, acfg);
    if (tta.n_crops == 1) {
      run_view(take_channels(center_view(sample, ctx.crop), ctx.channels));
      continue;
    }
    const int out = sample.dim(0);
    const int c = ctx.crop;
    const int offs[5][2] = {{(out - c) / 2, (out - c) / 2},
                            {0, 0},
                            {0, out - c},
                            {out - c, 0},
                            {out - c, out - c}};
    for (const auto& off : offs)
      for (int mirror = 0; mirror < 2; ++mirror) {
        Tensor view({c, c, sample.dim(2)});
        const float* src = sample.data();
        float* dst = view.data();
        const int W = sample.dim(1), C = sample.dim(2);
        for (int r = 0; r < c; ++r)
          for (int col = 0; col < c; ++col) {
            const int sc = mirror ? (off[1] + c - 1 - col) : (off[1] + col);
            const float* px = src + (static_cast<std::size_t>(off[0] + r) * W + sc) * C;
            std::copy(px, px + C, dst);
            dst += C;
          }
        run_view(take_channels(view, ctx.channels));
      }
  }

  for (auto& v : acc) v /= views;
  return acc;
}

BinaryMetrics binary_metrics(std::span<const double> scores, std::span<const int> labels,
                             double threshold) {
  if (scores.empty() || scores.size() != labels.size())
    throw DataError("EmptyInput", "binary_metrics needs matching non-empty scores and labels");
  BinaryMetrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred_abnormal = scores[i] >= threshold;
    if (labels[i] == 1)
      (pred_abnormal ? m.tp : m.fn)++;
    else if (labels[i] == 0)
      (pred_abnormal ? m.fp : m.tn)++;
    else
      throw DataError("BadLabel", "binary label must be 0 or 1");
  }
  if (m.tp + m.fn > 0) m.sens = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  if (m.tn + m.fp > 0) m.spec = static_cast<double>(m.tn) / static_cast<double>(m.tn + m.fp);
  m.acc = static_cast<double>(m.tp + m.tn) / static_cast<double>(scores.size());
  return m;
}

RocResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty() || scores.size() != labels.size())
    throw DataError("EmptyInput", "roc_auc needs matching non-empty scores and labels");
  std::int64_t n_pos = 0, n_neg = 0;
  for (int l : labels) {
    if (l == 1)
      ++n_pos;
    else if (l == 0)
      ++n_neg;
    else
      throw DataError("BadLabel", "binary label must be 0 or 1");
  }
  if (n_pos == 0 || n_neg == 0)
    throw DataError("SingleClass", "ROC needs both classes present");

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult res;
  res.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::int64_t tp = 0, fp = 0;
  double prev_fpr = 0.0, prev_tpr = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    const double s = scores[idx[i]];
    // consume the whole tie group at this threshold
    while (i < idx.size() && scores[idx[i]] == s) {
      (labels[idx[i]] == 1 ? tp : fp)++;
      ++i;
    }
    const double fpr = static_cast<double>(fp) / static_cast<double>(n_neg);
    const double tpr = static_cast<double>(tp) / static_cast<double>(n_pos);
    res.points.push_back({fpr, tpr, s});
    res.auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    prev_fpr = fpr;
    prev_tpr = tpr;
  }
  res.points.push_back({1.0, 1.0, -std::numeric_limits<double>::infinity()});
  return res;
}

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels, int n) {
  if (preds.size() != labels.size())
    throw DataError("EmptyInput", "confusion needs matching preds and labels");
  ConfusionMatrix cm = ConfusionMatrix::Zero(n, n);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= n || labels[i] < 0 || labels[i] >= n)
      throw DataError("BadLabel", "class index outside [0," + std::to_string(n) + ")");
    cm(labels[i], preds[i])++;
  }
  return cm;
}

double average_accuracy(const ConfusionMatrix& cm) {
  if (cm.rows() == 0) throw DataError("EmptyInput", "empty confusion matrix");
  double sum = 0.0;
  for (Eigen::Index r = 0; r < cm.rows(); ++r) {
    const std::int64_t row_sum = cm.row(r).sum();
    if (row_sum == 0)
      throw DataError("EmptyRow", "confusion row " + std::to_string(r) + " has no samples");
    sum += static_cast<double>(cm(r, r)) / static_cast<double>(row_sum);
  }
  return sum / static_cast<double>(cm.rows());
}

Aggregate aggregate_folds(std::span<const double> values) {
  if (values.empty()) throw DataError("EmptyInput", "nothing to aggregate");
  Aggregate a;
  a.n = static_cast<int>(values.size());
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / a.n;
  if (a.n >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / (a.n - 1));
  }
  return a;
}

FoldReport evaluate_fold(Network& net, const std::vector<CellRecord>& cells,
                         const std::vector<int>& val_indices, const TTAConfig& tta,
                         const PredictContext& ctx, Task task, int fold, std::uint64_t seed) {
  if (val_indices.empty()) throw DataError("EmptyInput", "validation fold is empty");
  const int n = task_classes(task);

  std::vector<double> abnormal_scores;
  std::vector<int> bin_labels, preds, labels;
  abnormal_scores.reserve(val_indices.size());

  for (std::size_t i = 0; i < val_indices.size(); ++i) {
    const CellRecord& rec = cells.at(static_cast<std::size_t>(val_indices[i]));
    // Per-cell RNG stream: TTA draws are independent of evaluation order.
    std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
    const auto probs = predict_cell(net, rec, tta, ctx, rng);
    const int pred = static_cast<int>(
        std::max_element(probs.begin(), probs.end()) - probs.begin());
    preds.push_back(pred);
    labels.push_back(class_index(task, rec.class_label));
    double p_abn = 0.0;
    if (task == Task::two_class) {
      p_abn = probs[1];
    } else {
      for (int k = 3; k < 7; ++k) p_abn += probs[static_cast<std::size_t>(k)];
    }
    abnormal_scores.push_back(p_abn);
    bin_labels.push_back(rec.category == Category::abnormal ? 1 : 0);
  }

  FoldReport report;
  report.fold = fold;
  report.matrix = confusion(preds, labels, n);
  report.acc = static_cast<double>(report.matrix.diagonal().sum()) /
               static_cast<double>(val_indices.size());

  const BinaryMetrics bm = binary_metrics(abnormal_scores, bin_labels);
  report.sens = bm.sens;
  report.spec = bm.spec;
  if (!bm.sens) report.flags.push_back("no abnormal cells in fold; Sens undefined");
  if (!bm.spec) report.flags.push_back("no normal cells in fold; Spec undefined");

  if (bm.sens && bm.spec) {
    const RocResult roc = roc_auc(abnormal_scores, bin_labels);
    report.auc = roc.auc;
    if (task == Task::two_class) report.roc = roc.points;
  } else {
    report.flags.push_back("single-category fold; AUC undefined");
  }

  if (task == Task::seven_class) {
    bool all_rows = true;
    for (Eigen::Index r = 0; r < report.matrix.rows(); ++r)
      if (report.matrix.row(r).sum() == 0) {
        all_rows = false;
        report.flags.push_back("class " + std::to_string(r + 1) +
                               " absent from fold; average accuracy undefined");
      }
    if (all_rows) report.avg_acc = average_accuracy(report.matrix);
  }
  return report;
}

}  // namespace cellcnn
