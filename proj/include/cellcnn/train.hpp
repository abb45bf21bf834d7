#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cellcnn/augment.hpp"
#include "cellcnn/nn.hpp"

namespace cellcnn {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  float base_lr = 0.01f;
  float lr_decay_factor = 10.0f;
  int lr_decay_every = 10;   // epochs
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  int crop = 227;
  std::uint64_t seed = 0;
  int accumulate_steps = 1;      // >1 emulates a large batch in chunks
  int mean_sample_cap = 4096;    // samples used for channel means
  std::string preset;

  void validate() const;
};

// Shipped hyperparameter presets: alexnet-t, googlenet-t, resnet-t,
// densenet-t (paper-scale recipes) and cellnet-s (desk scale).
TrainConfig train_preset(const std::string& name);
bool is_train_preset(const std::string& name);

// base_lr / decay_factor^floor(epoch / decay_every)
float lr_at(const TrainConfig& cfg, int epoch);

// v <- momentum*v - lr*(g + weight_decay*w); w <- w + v
void sgd_step(Tensor& w, const Tensor& g, Tensor& v, float lr, float momentum,
              float weight_decay);

struct EpochStats {
  int epoch = 0;
  float lr = 0.0f;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

enum class Task { two_class, seven_class };
Task task_from_string(const std::string& s);
const char* task_name(Task t);
int task_classes(Task t);

// 0-based training target for a sample or cell.
int class_index(Task task, int class_label);

struct TrainResult {
  std::vector<EpochStats> history;
  Checkpoint best;       // parameters + optimizer state at the best val epoch
  int best_epoch = -1;
  std::vector<float> channel_means;
};

// One epoch = one seeded-shuffle pass over the augmented stream. Per epoch:
// shuffle, batch, crop+mirror views, normalize, forward/backward, SGD step.
// Validation cells are scored each epoch with a deterministic center view.
// The best-validation checkpoint is retained. NaN/Inf losses abort.
TrainResult train(Network& net, const SampleSet& stream, const std::vector<CellRecord>& cells,
                  const std::vector<int>& val_indices, const TrainConfig& cfg, Task task,
                  int channels, std::vector<float> means = {});

// CSV `epoch,lr,train_loss,train_acc,val_acc`; formatting is deterministic.
void write_history_csv(const std::filesystem::path& path,
                       const std::vector<EpochStats>& history);

}  // namespace cellcnn
