#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cellcnn/tensor.hpp"

namespace cellcnn {

enum class LayerKind { conv2d, maxpool, relu, fc, concat, global_avg_pool, softmax_output };

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;  // optional; auto-assigned as <kind><index> when empty
  int out_channels = 0;  // conv2d
  int kernel = 0;        // conv2d, maxpool
  int stride = 1;        // conv2d, maxpool
  int pad = 0;           // conv2d
  int out_dim = 0;       // fc
  int classes = 0;       // softmax_output; must be 2 or 7
  std::vector<std::vector<LayerSpec>> branches;  // concat
};

struct InputSpec {
  int height = 0;
  int width = 0;
  int channels = 0;  // 3 or 5
};

struct NetworkSpec {
  InputSpec input;
  std::vector<LayerSpec> layers;
};

NetworkSpec network_spec_from_json(const nlohmann::json& j);
nlohmann::json network_spec_to_json(const NetworkSpec& spec);
NetworkSpec load_network_spec(const std::filesystem::path& path);

// Shipped presets: "cellnet-s" (small sequential net) and "cellnet-i" (same
// trunk with one multi-kernel concat block).
bool is_network_preset(const std::string& name);
NetworkSpec preset_network(const std::string& name, int input_size, int channels, int classes);

// Propagated activation shape; fc layers flatten spatial inputs.
struct ActShape {
  int h = 0, w = 0, c = 0;
  bool spatial = true;
  int flat() const { return spatial ? h * w * c : c; }
};

class Network;

struct LayerNode {
  LayerSpec spec;           // name resolved
  ActShape in_shape, out_shape;
  Tensor w, b;              // parameters (empty for parameter-free layers)
  Tensor gw, gb;            // gradients, same shapes
  Tensor vw, vb;            // optimizer state (allocated by the trainer)
  std::vector<Network> branches;  // concat only

  // forward caches (training mode)
  Tensor x_cache;
  std::vector<std::int32_t> pool_argmax;

  bool has_params() const { return w.size() > 0; }
};

// Ordered layer graph with float32 parameters and exact reverse-mode
// gradients. Forward/backward mutate internal caches, so a Network must be
// exclusively owned while training; copies are independent.
class Network {
 public:
  Network() = default;
  explicit Network(const NetworkSpec& spec);

  const NetworkSpec& spec() const { return spec_; }
  int input_channels() const { return spec_.input.channels; }
  int num_classes() const;

  // batch: (B, H, W, C). Returns logits (B, n_classes). In training mode the
  // activations needed by backward are cached.
  Tensor forward(const Tensor& batch, bool training = false);

  // grad_logits: (B, n_classes). Accumulates parameter gradients and returns
  // the gradient with respect to the input batch.
  Tensor backward(const Tensor& grad_logits);

  void zero_grads();

  using ParamVisitor =
      std::function<void(const std::string& name, Tensor& w, Tensor& g, Tensor& v)>;
  using ConstParamVisitor =
      std::function<void(const std::string& name, const Tensor& w, const Tensor& v)>;
  // Deterministic topological order; each parameterized layer visits weight
  // then bias (names `<layer>.weight`, `<layer>.bias`).
  void visit_params(const ParamVisitor& fn);
  void visit_params(const ConstParamVisitor& fn) const;

  // Layer names of a given structural role, in topological order.
  std::vector<std::string> layer_names_of_kind(LayerKind kind) const;
  std::string first_conv_name() const;
  std::vector<std::string> fc_like_names() const;  // fc + softmax_output

  std::vector<LayerNode>& nodes() { return nodes_; }
  const std::vector<LayerNode>& nodes() const { return nodes_; }

 private:
  friend struct LayerNode;
  Network(const std::vector<LayerSpec>& layers, ActShape in, int* counter);
  void build(const std::vector<LayerSpec>& layers, ActShape in, int* counter);

  NetworkSpec spec_;
  std::vector<LayerNode> nodes_;
  ActShape in_shape_{}, out_shape_{};
  bool trained_ = false;
};

// Softmax cross-entropy over logits (max-subtracted). loss is the batch mean
// of -log p(label); grad is (softmax - onehot)/B.
struct LossResult {
  double loss = 0.0;
  Tensor grad;
};
LossResult loss_softmax_xent(const Tensor& logits, std::span<const int> labels);

// Row-wise softmax in double precision (for evaluation-time aggregation).
std::vector<double> softmax_probs(const Tensor& logits, int row);

struct InitPolicy {
  enum class Mode { scratch, transfer };
  Mode mode = Mode::scratch;
  std::filesystem::path checkpoint;  // transfer only
  int random_fc_count = 1;           // last N fc-like layers re-initialized
  float gaussian_std = 0.01f;
};

// scratch: every weight ~ N(0, std^2), biases zero. transfer: first conv and
// the last `random_fc_count` fc-like layers are random, everything else is
// copied from the checkpoint (name and shape must match).
void init_weights(Network& net, const InitPolicy& policy, std::mt19937_64& rng);

// Single-file checkpoint: magic, little-endian u32 header length, JSON header
// (format version, network spec, ordered tensor table, metadata), float32
// little-endian payload. Byte-identical across save/load/save.
struct Checkpoint {
  NetworkSpec spec;
  std::vector<std::pair<std::string, Tensor>> tensors;  // ordered as written
  nlohmann::json meta;

  const Tensor* find(const std::string& name) const;
};

Checkpoint checkpoint_of(const Network& net, nlohmann::json meta,
                         bool include_velocity = false);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Strict full restore: every parameter of `net` must be present with a
// matching shape; errors name the offending layer.
void load_into_network(Network& net, const Checkpoint& ckpt);

// Rebuilds the network stored in a checkpoint and restores its parameters.
Network network_from_checkpoint(const Checkpoint& ckpt);

}  // namespace cellcnn
