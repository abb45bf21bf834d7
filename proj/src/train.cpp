#include "cellcnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

namespace cellcnn {

void TrainConfig::validate() const {
  if (epochs <= 0) throw ConfigError("BadTrainConfig", "epochs must be > 0");
  if (batch_size <= 0) throw ConfigError("BadTrainConfig", "batch_size must be > 0");
  if (base_lr <= 0.0f) throw ConfigError("BadTrainConfig", "base_lr must be > 0");
  if (lr_decay_factor <= 0.0f) throw ConfigError("BadTrainConfig", "lr_decay_factor must be > 0");
  if (lr_decay_every <= 0) throw ConfigError("BadTrainConfig", "lr_decay_every must be > 0");
  if (momentum < 0.0f) throw ConfigError("BadTrainConfig", "momentum must be >= 0");
  if (weight_decay < 0.0f) throw ConfigError("BadTrainConfig", "weight_decay must be >= 0");
  if (crop <= 0) throw ConfigError("BadTrainConfig", "crop must be > 0");
  if (accumulate_steps <= 0) throw ConfigError("BadTrainConfig", "accumulate_steps must be > 0");
}

bool is_train_preset(const std::string& name) {
  return name == "alexnet-t" || name == "googlenet-t" || name == "resnet-t" ||
         name == "densenet-t" || name == "cellnet-s";
}

TrainConfig train_preset(const std::string& name) {
  TrainConfig cfg;
  cfg.preset = name;
  if (name == "alexnet-t") {
    cfg.batch_size = 256;
    cfg.base_lr = 0.01f;
    cfg.weight_decay = 0.0005f;
    cfg.crop = 227;
  } else if (name == "googlenet-t") {
    cfg.batch_size = 32;
    cfg.base_lr = 0.005f;
    cfg.weight_decay = 0.0002f;
    cfg.crop = 224;
  } else if (name == "resnet-t") {
    cfg.batch_size = 20;
    cfg.base_lr = 0.01f;
    cfg.weight_decay = 0.0002f;
    cfg.crop = 224;
  } else if (name == "densenet-t") {
    cfg.batch_size = 12;
    cfg.base_lr = 0.01f;
    cfg.weight_decay = 0.0002f;
    cfg.crop = 224;
  } else if (name == "cellnet-s") {
    cfg.batch_size = 32;
    cfg.base_lr = 0.01f;
    cfg.weight_decay = 0.0005f;
    cfg.crop = 56;
  } else {
    throw ConfigError("BadTrainConfig", "unknown training preset `" + name + "`");
  }
  return cfg;
}

float lr_at(const TrainConfig& cfg, int epoch) {
  if (epoch < 0) throw ConfigError("BadTrainConfig", "epoch must be >= 0");
  const int steps = epoch / cfg.lr_decay_every;
  return cfg.base_lr / std::pow(cfg.lr_decay_factor, static_cast<float>(steps));
}

void sgd_step(Tensor& w, const Tensor& g, Tensor& v, float lr, float momentum,
              float weight_decay) {
  if (!w.same_shape(g))
    throw ConfigError("ShapeMismatch", "gradient shape " + g.shape_str() +
                                           " does not match parameter " + w.shape_str());
  if (v.size() == 0) v = Tensor(w.shape());
  v.flat() = momentum * v.flat() - lr * (g.flat() + weight_decay * w.flat());
  w.flat() += v.flat();
}

Task task_from_string(const std::string& s) {
  if (s == "2class") return Task::two_class;
  if (s == "7class") return Task::seven_class;
  throw ConfigError("BadTask", "task must be `2class` or `7class`, got `" + s + "`");
}

const char* task_name(Task t) { return t == Task::two_class ? "2class" : "7class"; }

int task_classes(Task t) { return t == Task::two_class ? 2 : 7; }

int class_index(Task task, int class_label) {
  if (task == Task::seven_class) return class_label - 1;
  return category_of(class_label) == Category::abnormal ? 1 : 0;
}

namespace {

// Deterministic center-view accuracy over validation cells.
double validation_accuracy(Network& net, const std::vector<CellRecord>& cells,
                           const std::vector<int>& val_indices, const AugmentConfig& acfg,
                           int crop, int channels, std::span<const float> means, Task task) {
  if (val_indices.empty()) return 0.0;
  int correct = 0;
  Tensor batch({1, crop, crop, channels});
  for (int ci : val_indices) {
    const CellRecord& rec = cells.at(static_cast<std::size_t>(ci));
    const auto centroid = nucleus_centroid(rec.nucleus);
    const Patch patch = extract_patch(rec, centroid, acfg.m);
    const Tensor sample = assemble_sample(patch, acfg);
    Tensor view = take_channels(center_view(sample, crop), channels);
    normalize_view(view, means);
    std::copy(view.data(), view.data() + view.size(), batch.data());
    const Tensor logits = net.forward(batch, false);
    const float* row = logits.data();
    const int pred = static_cast<int>(
        std::max_element(row, row + logits.dim(1)) - row);  // ties -> lowest index
    if (pred == class_index(task, rec.class_label)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(val_indices.size());
}

}  // namespace

TrainResult train(Network& net, const SampleSet& stream, const std::vector<CellRecord>& cells,
                  const std::vector<int>& val_indices, const TrainConfig& cfg, Task task,
                  int channels, std::vector<float> means) {
  cfg.validate();
  if (stream.size() == 0) throw DataError("EmptyStream", "training stream is empty");
  const AugmentConfig& acfg = stream.config();
  if (cfg.crop > acfg.out_size)
    throw ConfigError("BadCrop", "crop " + std::to_string(cfg.crop) + " exceeds sample size " +
                                     std::to_string(acfg.out_size));
  if (net.num_classes() != task_classes(task))
    throw ConfigError("BadTask", "network has " + std::to_string(net.num_classes()) +
                                     " outputs but task wants " +
                                     std::to_string(task_classes(task)));
  if (net.input_channels() != channels)
    throw ConfigError("ShapeMismatch", "network expects " +
                                           std::to_string(net.input_channels()) +
                                           " channels, pipeline provides " +
                                           std::to_string(channels));

  if (means.empty())
    means = channel_means(stream, static_cast<std::size_t>(cfg.mean_sample_cap), channels);

  TrainResult result;
  result.channel_means = means;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(stream.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  double best_val = -1.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const float lr = lr_at(cfg, epoch);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::int64_t seen = 0, correct = 0;
    std::size_t pos = 0;
    while (pos < order.size()) {
      const int bsz = static_cast<int>(std::min<std::size_t>(
          static_cast<std::size_t>(cfg.batch_size), order.size() - pos));
      const int chunks = std::min(cfg.accumulate_steps, bsz);
      net.zero_grads();
      double batch_loss = 0.0;

      int done = 0;
      for (int chunk = 0; chunk < chunks; ++chunk) {
        const int cb = (bsz - done) / (chunks - chunk);
        if (cb == 0) continue;
        Tensor batch({cb, cfg.crop, cfg.crop, channels});
        std::vector<int> labels(static_cast<std::size_t>(cb));
        for (int i = 0; i < cb; ++i) {
          const std::size_t si = order[pos + static_cast<std::size_t>(done + i)];
          const Sample s = stream.make(si);
          Tensor view = take_channels(train_view(s, cfg.crop, rng), channels);
          normalize_view(view, means);
          std::copy(view.data(), view.data() + view.size(),
                    batch.data() + static_cast<std::size_t>(i) * view.size());
          labels[static_cast<std::size_t>(i)] = class_index(task, s.label);
        }
        Tensor logits = net.forward(batch, true);
        LossResult lres = loss_softmax_xent(logits, labels);
        if (!std::isfinite(lres.loss))
          throw NumericError("NonFinite", "training loss diverged at epoch " +
                                              std::to_string(epoch));
        batch_loss += lres.loss * cb;
        for (int i = 0; i < cb; ++i) {
          const float* row = logits.data() + static_cast<std::size_t>(i) * logits.dim(1);
          const int pred =
              static_cast<int>(std::max_element(row, row + logits.dim(1)) - row);
          if (pred == labels[static_cast<std::size_t>(i)]) ++correct;
        }
        // Chunk gradients are means over cb samples; rescale so the summed
        // gradient is the mean over the whole batch.
        lres.grad.flat() *= static_cast<float>(cb) / static_cast<float>(bsz);
        net.backward(lres.grad);
        done += cb;
      }

      net.visit_params([&](const std::string&, Tensor& w, Tensor& g, Tensor& v) {
        sgd_step(w, g, v, lr, cfg.momentum, cfg.weight_decay);
      });

      loss_sum += batch_loss;
      seen += bsz;
      pos += static_cast<std::size_t>(bsz);
    }

    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.train_loss = loss_sum / static_cast<double>(seen);
    st.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    st.val_acc = validation_accuracy(net, cells, val_indices, acfg, cfg.crop, channels, means,
                                     task);
    result.history.push_back(st);

    if (st.val_acc > best_val) {
      best_val = st.val_acc;
      result.best_epoch = epoch;
      nlohmann::json meta;
      meta["channel_means"] = means;
      meta["channels"] = channels;
      meta["task"] = task_name(task);
      meta["crop"] = cfg.crop;
      meta["best_epoch"] = epoch;
      meta["augment"] = {{"m", acfg.m}, {"d", acfg.d}, {"out_size", acfg.out_size}};
      result.best = checkpoint_of(net, std::move(meta), /*include_velocity=*/true);
    }
  }
  return result;
}

void write_history_csv(const std::filesystem::path& path,
                       const std::vector<EpochStats>& history) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("UnwritableFile", "cannot write " + path.string());
  f << "epoch,lr,train_loss,train_acc,val_acc\n";
  char line[160];
  for (const auto& h : history) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", h.epoch,
                  static_cast<double>(h.lr), h.train_loss, h.train_acc, h.val_acc);
    f << line;
  }
}

}  // namespace cellcnn
