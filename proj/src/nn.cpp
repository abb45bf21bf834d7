#include "cellcnn/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

namespace cellcnn {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::relu: return "relu";
    case LayerKind::fc: return "fc";
    case LayerKind::concat: return "concat";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::softmax_output: return "softmax_output";
  }
  return "?";
}

LayerKind layer_kind_from_name(const std::string& name) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::maxpool, LayerKind::relu, LayerKind::fc,
                      LayerKind::concat, LayerKind::global_avg_pool, LayerKind::softmax_output})
    if (name == layer_kind_name(k)) return k;
  if (name == "batchnorm")
    throw ConfigError("ReservedLayerKind", "`batchnorm` is reserved but not implemented");
  throw ConfigError("BadLayerKind", "unknown layer kind `" + name + "`");
}

// ---------------------------------------------------------------------------
// Spec JSON
// ---------------------------------------------------------------------------
namespace {

LayerSpec layer_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("kind"))
    throw ConfigError("BadNetworkSpec", "layer entry must be an object with a `kind`");
  LayerSpec l;
  l.kind = layer_kind_from_name(j.at("kind").get<std::string>());
  l.name = j.value("name", std::string{});
  switch (l.kind) {
    case LayerKind::conv2d:
      l.out_channels = j.at("out_channels").get<int>();
      l.kernel = j.at("kernel").get<int>();
      l.stride = j.value("stride", 1);
      l.pad = j.value("pad", 0);
      break;
    case LayerKind::maxpool:
      l.kernel = j.at("kernel").get<int>();
      l.stride = j.value("stride", l.kernel);
      break;
    case LayerKind::fc:
      l.out_dim = j.at("out_dim").get<int>();
      break;
    case LayerKind::softmax_output:
      l.classes = j.at("classes").get<int>();
      break;
    case LayerKind::concat: {
      if (!j.contains("branches") || !j.at("branches").is_array())
        throw ConfigError("BadNetworkSpec", "concat needs a `branches` array");
      for (const auto& br : j.at("branches")) {
        std::vector<LayerSpec> branch;
        for (const auto& bl : br) branch.push_back(layer_from_json(bl));
        l.branches.push_back(std::move(branch));
      }
      break;
    }
    default:
      break;
  }
  return l;
}

nlohmann::json layer_to_json(const LayerSpec& l) {
  nlohmann::json j;
  j["kind"] = layer_kind_name(l.kind);
  if (!l.name.empty()) j["name"] = l.name;
  switch (l.kind) {
    case LayerKind::conv2d:
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["pad"] = l.pad;
      break;
    case LayerKind::maxpool:
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      break;
    case LayerKind::fc:
      j["out_dim"] = l.out_dim;
      break;
    case LayerKind::softmax_output:
      j["classes"] = l.classes;
      break;
    case LayerKind::concat: {
      nlohmann::json branches = nlohmann::json::array();
      for (const auto& br : l.branches) {
        nlohmann::json b = nlohmann::json::array();
        for (const auto& bl : br) b.push_back(layer_to_json(bl));
        branches.push_back(std::move(b));
      }
      j["branches"] = std::move(branches);
      break;
    }
    default:
      break;
  }
  return j;
}

}  // namespace

NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  try {
    const auto& in = j.at("input");
    spec.input.height = in.at("height").get<int>();
    spec.input.width = in.at("width").get<int>();
    spec.input.channels = in.at("channels").get<int>();
    for (const auto& l : j.at("layers")) spec.layers.push_back(layer_from_json(l));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("BadNetworkSpec", e.what());
  }
  return spec;
}

nlohmann::json network_spec_to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["input"] = {{"height", spec.input.height},
                {"width", spec.input.width},
                {"channels", spec.input.channels}};
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) layers.push_back(layer_to_json(l));
  j["layers"] = std::move(layers);
  return j;
}

NetworkSpec load_network_spec(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("UnreadableFile", "cannot open network spec " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("BadNetworkSpec", path.string() + ": " + e.what());
  }
  return network_spec_from_json(j);
}

bool is_network_preset(const std::string& name) {
  return name == "cellnet-s" || name == "cellnet-i";
}

NetworkSpec preset_network(const std::string& name, int input_size, int channels, int classes) {
  NetworkSpec spec;
  spec.input = {input_size, input_size, channels};
  auto conv = [](std::string n, int oc, int k, int s, int p) {
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.name = std::move(n);
    l.out_channels = oc;
    l.kernel = k;
    l.stride = s;
    l.pad = p;
    return l;
  };
  auto relu = [] { LayerSpec l; l.kind = LayerKind::relu; return l; };
  auto pool = [](int k, int s) {
    LayerSpec l;
    l.kind = LayerKind::maxpool;
    l.kernel = k;
    l.stride = s;
    return l;
  };

  if (name == "cellnet-s" || name == "cellnet-i") {
    spec.layers.push_back(conv("conv1", 8, 5, 2, 2));
    spec.layers.push_back(relu());
    spec.layers.push_back(pool(2, 2));
    if (name == "cellnet-s") {
      spec.layers.push_back(conv("conv2", 16, 3, 1, 1));
      spec.layers.push_back(relu());
    } else {
      LayerSpec mix;
      mix.kind = LayerKind::concat;
      mix.name = "mix1";
      mix.branches.push_back({conv("mix1_1x1", 4, 1, 1, 0), relu()});
      mix.branches.push_back({conv("mix1_3x3", 8, 3, 1, 1), relu()});
      mix.branches.push_back({conv("mix1_5x5", 4, 5, 1, 2), relu()});
      spec.layers.push_back(std::move(mix));
    }
    spec.layers.push_back(pool(2, 2));
    spec.layers.push_back(conv("conv3", 32, 3, 1, 1));
    spec.layers.push_back(relu());
    LayerSpec gap;
    gap.kind = LayerKind::global_avg_pool;
    spec.layers.push_back(gap);
    LayerSpec fc;
    fc.kind = LayerKind::fc;
    fc.name = "fc1";
    fc.out_dim = 32;
    spec.layers.push_back(fc);
    spec.layers.push_back(relu());
    LayerSpec out;
    out.kind = LayerKind::softmax_output;
    out.name = "out";
    out.classes = classes;
    spec.layers.push_back(out);
    return spec;
  }
  throw ConfigError("BadNetworkSpec", "unknown network preset `" + name + "`");
}

// ---------------------------------------------------------------------------
// Build
// ---------------------------------------------------------------------------
namespace {

[[noreturn]] void shape_error(const std::string& layer, const std::string& why) {
  throw ConfigError("ShapeMismatch", "layer `" + layer + "`: " + why);
}

int conv_out_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace

Network::Network(const NetworkSpec& spec) : spec_(spec) {
  if (spec.input.height <= 0 || spec.input.width <= 0 || spec.input.channels <= 0)
    throw ConfigError("BadNetworkSpec", "input dimensions must be positive");
  if (spec.layers.empty()) throw ConfigError("BadNetworkSpec", "network has no layers");
  if (spec.layers.back().kind != LayerKind::softmax_output)
    throw ConfigError("BadNetworkSpec", "last layer must be softmax_output");

  int counter = 0;
  ActShape in{spec.input.height, spec.input.width, spec.input.channels, true};
  build(spec.layers, in, &counter);

  std::set<std::string> names;
  std::function<void(const std::vector<LayerNode>&)> collect =
      [&](const std::vector<LayerNode>& nodes) {
        for (const auto& n : nodes) {
          if (!names.insert(n.spec.name).second)
            throw ConfigError("BadNetworkSpec", "duplicate layer name `" + n.spec.name + "`");
          for (const auto& br : n.branches) collect(br.nodes_);
        }
      };
  collect(nodes_);
}

Network::Network(const std::vector<LayerSpec>& layers, ActShape in, int* counter) {
  spec_.input = {in.h, in.w, in.c};
  spec_.layers = layers;
  build(layers, in, counter);
}

void Network::build(const std::vector<LayerSpec>& layers, ActShape in, int* counter) {
  in_shape_ = in;
  ActShape cur = in;
  for (const LayerSpec& raw : layers) {
    LayerNode node;
    node.spec = raw;
    ++*counter;
    if (node.spec.name.empty())
      node.spec.name = std::string(layer_kind_name(raw.kind)) + std::to_string(*counter);
    const std::string& nm = node.spec.name;
    node.in_shape = cur;

    switch (raw.kind) {
      case LayerKind::conv2d: {
        if (!cur.spatial) shape_error(nm, "conv2d needs a spatial input");
        if (raw.out_channels <= 0 || raw.kernel <= 0 || raw.stride <= 0 || raw.pad < 0)
          shape_error(nm, "bad conv2d geometry");
        const int oh = conv_out_extent(cur.h, raw.kernel, raw.stride, raw.pad);
        const int ow = conv_out_extent(cur.w, raw.kernel, raw.stride, raw.pad);
        if (oh < 1 || ow < 1)
          shape_error(nm, "kernel " + std::to_string(raw.kernel) + " does not fit input " +
                              std::to_string(cur.h) + "x" + std::to_string(cur.w));
        node.w = Tensor({raw.kernel, raw.kernel, cur.c, raw.out_channels});
        node.b = Tensor({raw.out_channels});
        cur = {oh, ow, raw.out_channels, true};
        break;
      }
      case LayerKind::maxpool: {
        if (!cur.spatial) shape_error(nm, "maxpool needs a spatial input");
        if (raw.kernel <= 0 || raw.stride <= 0) shape_error(nm, "bad maxpool geometry");
        const int oh = (cur.h - raw.kernel) / raw.stride + 1;
        const int ow = (cur.w - raw.kernel) / raw.stride + 1;
        if (oh < 1 || ow < 1) shape_error(nm, "pooling window does not fit");
        cur = {oh, ow, cur.c, true};
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::fc: {
        if (raw.out_dim <= 0) shape_error(nm, "fc out_dim must be positive");
        node.w = Tensor({cur.flat(), raw.out_dim});
        node.b = Tensor({raw.out_dim});
        cur = {0, 0, raw.out_dim, false};
        break;
      }
      case LayerKind::softmax_output: {
        if (raw.classes != 2 && raw.classes != 7)
          shape_error(nm, "output layer width must be 2 or 7");
        node.w = Tensor({cur.flat(), raw.classes});
        node.b = Tensor({raw.classes});
        cur = {0, 0, raw.classes, false};
        break;
      }
      case LayerKind::global_avg_pool: {
        if (!cur.spatial) shape_error(nm, "global_avg_pool needs a spatial input");
        cur = {0, 0, cur.c, false};
        break;
      }
      case LayerKind::concat: {
        if (!cur.spatial) shape_error(nm, "concat needs a spatial input");
        if (raw.branches.empty()) shape_error(nm, "concat needs at least one branch");
        int total_c = 0;
        int oh = -1, ow = -1;
        for (std::size_t bi = 0; bi < raw.branches.size(); ++bi) {
          if (raw.branches[bi].empty()) shape_error(nm, "empty concat branch");
          Network branch(raw.branches[bi], cur, counter);
          const ActShape bs = branch.out_shape_;
          if (!bs.spatial) shape_error(nm, "concat branches must stay spatial");
          if (oh < 0) {
            oh = bs.h;
            ow = bs.w;
          } else if (bs.h != oh || bs.w != ow) {
            shape_error(nm, "branch output sizes differ (" + std::to_string(bs.h) + "x" +
                                std::to_string(bs.w) + " vs " + std::to_string(oh) + "x" +
                                std::to_string(ow) + ")");
          }
          total_c += bs.c;
          node.branches.push_back(std::move(branch));
        }
        cur = {oh, ow, total_c, true};
        break;
      }
    }
    node.out_shape = cur;
    if (node.has_params()) {
      node.gw = Tensor(node.w.shape());
      node.gb = Tensor(node.b.shape());
    }
    nodes_.push_back(std::move(node));
  }
  out_shape_ = cur;
}

int Network::num_classes() const {
  if (nodes_.empty() || nodes_.back().spec.kind != LayerKind::softmax_output)
    throw ConfigError("BadNetworkSpec", "network has no softmax_output head");
  return nodes_.back().spec.classes;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------
namespace {

void im2col(const float* x, int H, int W, int C, int K, int stride, int pad, int OH, int OW,
            float* cols) {
  const int patch_w = K * C;
  for (int oy = 0; oy < OH; ++oy) {
    const int iy0 = oy * stride - pad;
    for (int ox = 0; ox < OW; ++ox) {
      const int ix0 = ox * stride - pad;
      float* dst =
          cols + (static_cast<std::size_t>(oy) * OW + ox) * static_cast<std::size_t>(K) * patch_w;
      for (int ky = 0; ky < K; ++ky) {
        const int iy = iy0 + ky;
        if (iy < 0 || iy >= H) {
          std::fill(dst, dst + patch_w, 0.0f);
          dst += patch_w;
          continue;
        }
        for (int kx = 0; kx < K; ++kx) {
          const int ix = ix0 + kx;
          if (ix < 0 || ix >= W) {
            std::fill(dst, dst + C, 0.0f);
          } else {
            const float* src = x + (static_cast<std::size_t>(iy) * W + ix) * C;
            std::copy(src, src + C, dst);
          }
          dst += C;
        }
      }
    }
  }
}

void col2im_add(const float* cols, int H, int W, int C, int K, int stride, int pad, int OH,
                int OW, float* gx) {
  const int patch_w = K * C;
  for (int oy = 0; oy < OH; ++oy) {
    const int iy0 = oy * stride - pad;
    for (int ox = 0; ox < OW; ++ox) {
      const int ix0 = ox * stride - pad;
      const float* src =
          cols + (static_cast<std::size_t>(oy) * OW + ox) * static_cast<std::size_t>(K) * patch_w;
      for (int ky = 0; ky < K; ++ky) {
        const int iy = iy0 + ky;
        if (iy < 0 || iy >= H) {
          src += patch_w;
          continue;
        }
        for (int kx = 0; kx < K; ++kx) {
          const int ix = ix0 + kx;
          if (ix < 0 || ix >= W) {
            src += C;
            continue;
          }
          float* dst = gx + (static_cast<std::size_t>(iy) * W + ix) * C;
          for (int c = 0; c < C; ++c) dst[c] += src[c];
          src += C;
        }
      }
    }
  }
}

}  // namespace

Tensor Network::forward(const Tensor& batch, bool training) {
  if (batch.rank() != 4 || batch.dim(1) != in_shape_.h || batch.dim(2) != in_shape_.w ||
      batch.dim(3) != in_shape_.c)
    throw ConfigError("ShapeMismatch", "input batch " + batch.shape_str() + " does not match (" +
                                           std::to_string(in_shape_.h) + "," +
                                           std::to_string(in_shape_.w) + "," +
                                           std::to_string(in_shape_.c) + ")");
  const int B = batch.dim(0);
  Tensor cur = batch;

  for (LayerNode& node : nodes_) {
    const LayerSpec& l = node.spec;
    const ActShape& is = node.in_shape;
    const ActShape& os = node.out_shape;
    Tensor out;

    switch (l.kind) {
      case LayerKind::conv2d: {
        const int patch = l.kernel * l.kernel * is.c;
        out = Tensor({B, os.h, os.w, os.c});
        Tensor cols({os.h * os.w, patch});
        auto wm = node.w.matrix(patch, os.c);
        Eigen::Map<const Eigen::RowVectorXf> bias(node.b.data(), os.c);
        for (int b = 0; b < B; ++b) {
          im2col(cur.data() + static_cast<std::size_t>(b) * is.h * is.w * is.c, is.h, is.w, is.c,
                 l.kernel, l.stride, l.pad, os.h, os.w, cols.data());
          MatMapF ob(out.data() + static_cast<std::size_t>(b) * os.h * os.w * os.c, os.h * os.w,
                     os.c);
          ob.noalias() = cols.matrix(os.h * os.w, patch) * wm;
          ob.rowwise() += bias;
        }
        if (training) node.x_cache = cur;
        break;
      }
      case LayerKind::maxpool: {
        out = Tensor({B, os.h, os.w, os.c});
        if (training)
          node.pool_argmax.assign(static_cast<std::size_t>(B) * os.h * os.w * os.c, -1);
        const float* x = cur.data();
        float* y = out.data();
        for (int b = 0; b < B; ++b) {
          const float* xb = x + static_cast<std::size_t>(b) * is.h * is.w * is.c;
          for (int oy = 0; oy < os.h; ++oy)
            for (int ox = 0; ox < os.w; ++ox)
              for (int c = 0; c < os.c; ++c) {
                float best = -std::numeric_limits<float>::infinity();
                int best_idx = -1;
                for (int ky = 0; ky < l.kernel; ++ky)
                  for (int kx = 0; kx < l.kernel; ++kx) {
                    const int iy = oy * l.stride + ky;
                    const int ix = ox * l.stride + kx;
                    const float v = xb[(static_cast<std::size_t>(iy) * is.w + ix) * is.c + c];
                    if (v > best) {  // strict: ties keep the first in scan order
                      best = v;
                      best_idx = iy * is.w + ix;
                    }
                  }
                const std::size_t oi =
                    ((static_cast<std::size_t>(b) * os.h + oy) * os.w + ox) * os.c + c;
                y[oi] = best;
                if (training) node.pool_argmax[oi] = best_idx;
              }
        }
        break;
      }
      case LayerKind::relu: {
        out = cur;
        out.flat() = out.flat().max(0.0f);
        if (training) node.x_cache = cur;
        break;
      }
      case LayerKind::fc:
      case LayerKind::softmax_output: {
        const int D = is.flat();
        const int K = os.c;
        out = Tensor({B, K});
        out.matrix(B, K).noalias() = cur.matrix(B, D) * node.w.matrix(D, K);
        out.matrix(B, K).rowwise() += Eigen::Map<const Eigen::RowVectorXf>(node.b.data(), K);
        if (training) node.x_cache = cur;
        break;
      }
      case LayerKind::global_avg_pool: {
        const int hw = is.h * is.w;
        out = Tensor({B, is.c});
        const float* x = cur.data();
        float* y = out.data();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < is.c; ++c) {
            double acc = 0.0;
            const float* p = x + static_cast<std::size_t>(b) * hw * is.c + c;
            for (int i = 0; i < hw; ++i, p += is.c) acc += *p;
            y[static_cast<std::size_t>(b) * is.c + c] = static_cast<float>(acc / hw);
          }
        break;
      }
      case LayerKind::concat: {
        out = Tensor({B, os.h, os.w, os.c});
        int c_off = 0;
        for (Network& branch : node.branches) {
          Tensor bo = branch.forward(cur, training);
          const int bc = branch.out_shape_.c;
          const float* src = bo.data();
          for (int b = 0; b < B; ++b)
            for (int i = 0; i < os.h * os.w; ++i) {
              float* dst =
                  out.data() + ((static_cast<std::size_t>(b) * os.h * os.w + i) * os.c + c_off);
              std::copy(src, src + bc, dst);
              src += bc;
            }
          c_off += bc;
        }
        break;
      }
    }
    check_finite(out, node.spec.name.c_str());
    cur = std::move(out);
  }
  if (training) trained_ = true;
  return cur;
}

Tensor Network::backward(const Tensor& grad_logits) {
  if (!trained_) throw NumericError("BackwardWithoutForward",
                                    "backward called before a training-mode forward pass");
  Tensor grad = grad_logits;
  const int B = grad.dim(0);

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    LayerNode& node = *it;
    const LayerSpec& l = node.spec;
    const ActShape& is = node.in_shape;
    const ActShape& os = node.out_shape;
    Tensor gin;

    switch (l.kind) {
      case LayerKind::conv2d: {
        const int patch = l.kernel * l.kernel * is.c;
        const Tensor& x = node.x_cache;
        gin = Tensor({B, is.h, is.w, is.c});
        Tensor cols({os.h * os.w, patch});
        Tensor gcols({os.h * os.w, patch});
        auto gwm = node.gw.matrix(patch, os.c);
        auto wm = node.w.matrix(patch, os.c);
        Eigen::Map<Eigen::RowVectorXf> gb(node.gb.data(), os.c);
        for (int b = 0; b < B; ++b) {
          im2col(x.data() + static_cast<std::size_t>(b) * is.h * is.w * is.c, is.h, is.w, is.c,
                 l.kernel, l.stride, l.pad, os.h, os.w, cols.data());
          ConstMatMapF gout(grad.data() + static_cast<std::size_t>(b) * os.h * os.w * os.c,
                            os.h * os.w, os.c);
          gwm.noalias() += cols.matrix(os.h * os.w, patch).transpose() * gout;
          gb += gout.colwise().sum();
          gcols.matrix(os.h * os.w, patch).noalias() = gout * wm.transpose();
          col2im_add(gcols.data(), is.h, is.w, is.c, l.kernel, l.stride, l.pad, os.h, os.w,
                     gin.data() + static_cast<std::size_t>(b) * is.h * is.w * is.c);
        }
        break;
      }
      case LayerKind::maxpool: {
        gin = Tensor({B, is.h, is.w, is.c});
        float* gx = gin.data();
        const float* g = grad.data();
        for (int b = 0; b < B; ++b)
          for (int i = 0; i < os.h * os.w; ++i)
            for (int c = 0; c < os.c; ++c) {
              const std::size_t oi =
                  (static_cast<std::size_t>(b) * os.h * os.w + i) * os.c + c;
              const int src = node.pool_argmax[oi];
              gx[(static_cast<std::size_t>(b) * is.h * is.w + src) * is.c + c] += g[oi];
            }
        break;
      }
      case LayerKind::relu: {
        gin = grad;
        const float* x = node.x_cache.data();
        float* g = gin.data();
        const Eigen::Index n = gin.size();
        for (Eigen::Index i = 0; i < n; ++i)
          if (x[i] <= 0.0f) g[i] = 0.0f;
        break;
      }
      case LayerKind::fc:
      case LayerKind::softmax_output: {
        const int D = is.flat();
        const int K = os.c;
        node.gw.matrix(D, K).noalias() +=
            node.x_cache.matrix(B, D).transpose() * grad.matrix(B, K);
        Eigen::Map<Eigen::RowVectorXf>(node.gb.data(), K) += grad.matrix(B, K).colwise().sum();
        gin = Tensor(node.x_cache.shape());
        gin.matrix(B, D).noalias() = grad.matrix(B, K) * node.w.matrix(D, K).transpose();
        break;
      }
      case LayerKind::global_avg_pool: {
        const int hw = is.h * is.w;
        gin = Tensor({B, is.h, is.w, is.c});
        const float* g = grad.data();
        float* gx = gin.data();
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < is.c; ++c) {
            const float v = g[static_cast<std::size_t>(b) * is.c + c] / static_cast<float>(hw);
            float* p = gx + static_cast<std::size_t>(b) * hw * is.c + c;
            for (int i = 0; i < hw; ++i, p += is.c) *p = v;
          }
        break;
      }
      case LayerKind::concat: {
        gin = Tensor({B, is.h, is.w, is.c});
        int c_off = 0;
        for (Network& branch : node.branches) {
          const int bc = branch.out_shape_.c;
          Tensor bg({B, os.h, os.w, bc});
          float* dst = bg.data();
          for (int b = 0; b < B; ++b)
            for (int i = 0; i < os.h * os.w; ++i) {
              const float* src =
                  grad.data() + ((static_cast<std::size_t>(b) * os.h * os.w + i) * os.c + c_off);
              std::copy(src, src + bc, dst);
              dst += bc;
            }
          Tensor bgin = branch.backward(bg);
          gin.flat() += bgin.flat();  // branches share the input
          c_off += bc;
        }
        break;
      }
    }
    grad = std::move(gin);
  }
  return grad;
}

void Network::zero_grads() {
  for (LayerNode& node : nodes_) {
    if (node.has_params()) {
      node.gw.set_zero();
      node.gb.set_zero();
    }
    for (Network& br : node.branches) br.zero_grads();
  }
}

void Network::visit_params(const ParamVisitor& fn) {
  for (LayerNode& node : nodes_) {
    if (node.has_params()) {
      fn(node.spec.name + ".weight", node.w, node.gw, node.vw);
      fn(node.spec.name + ".bias", node.b, node.gb, node.vb);
    }
    for (Network& br : node.branches) br.visit_params(fn);
  }
}

void Network::visit_params(const ConstParamVisitor& fn) const {
  for (const LayerNode& node : nodes_) {
    if (node.has_params()) {
      fn(node.spec.name + ".weight", node.w, node.vw);
      fn(node.spec.name + ".bias", node.b, node.vb);
    }
    for (const Network& br : node.branches) br.visit_params(fn);
  }
}

std::vector<std::string> Network::layer_names_of_kind(LayerKind kind) const {
  std::vector<std::string> out;
  std::function<void(const std::vector<LayerNode>&)> walk =
      [&](const std::vector<LayerNode>& nodes) {
        for (const auto& n : nodes) {
          if (n.spec.kind == kind) out.push_back(n.spec.name);
          for (const auto& br : n.branches) walk(br.nodes());
        }
      };
  walk(nodes_);
  return out;
}

std::string Network::first_conv_name() const {
  auto convs = layer_names_of_kind(LayerKind::conv2d);
  return convs.empty() ? std::string{} : convs.front();
}

std::vector<std::string> Network::fc_like_names() const {
  auto fcs = layer_names_of_kind(LayerKind::fc);
  auto outs = layer_names_of_kind(LayerKind::softmax_output);
  fcs.insert(fcs.end(), outs.begin(), outs.end());
  return fcs;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------
LossResult loss_softmax_xent(const Tensor& logits, std::span<const int> labels) {
  const int B = logits.dim(0);
  const int K = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw ConfigError("ShapeMismatch", "labels/batch size mismatch");
  LossResult res;
  res.grad = Tensor({B, K});
  double total = 0.0;
  const float* x = logits.data();
  float* g = res.grad.data();
  for (int b = 0; b < B; ++b, x += K, g += K) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= K)
      throw DataError("BadLabel", "label " + std::to_string(y) + " outside [0," +
                                      std::to_string(K) + ")");
    const float m = *std::max_element(x, x + K);
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += std::exp(static_cast<double>(x[k] - m));
    total += std::log(sum) - static_cast<double>(x[y] - m);
    for (int k = 0; k < K; ++k) {
      const double p = std::exp(static_cast<double>(x[k] - m)) / sum;
      g[k] = static_cast<float>((p - (k == y ? 1.0 : 0.0)) / B);
    }
  }
  res.loss = total / B;
  if (!std::isfinite(res.loss)) throw NumericError("NonFinite", "loss is not finite");
  return res;
}

std::vector<double> softmax_probs(const Tensor& logits, int row) {
  const int K = logits.dim(1);
  const float* x = logits.data() + static_cast<std::size_t>(row) * K;
  const float m = *std::max_element(x, x + K);
  std::vector<double> p(static_cast<std::size_t>(K));
  double sum = 0.0;
  for (int k = 0; k < K; ++k) sum += p[static_cast<std::size_t>(k)] = std::exp(double(x[k] - m));
  for (auto& v : p) v /= sum;
  return p;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------
void init_weights(Network& net, const InitPolicy& policy, std::mt19937_64& rng) {
  std::normal_distribution<float> gauss(0.0f, policy.gaussian_std);

  if (policy.mode == InitPolicy::Mode::scratch) {
    net.visit_params([&](const std::string& name, Tensor& w, Tensor&, Tensor&) {
      if (name.ends_with(".weight")) {
        float* p = w.data();
        for (Eigen::Index i = 0; i < w.size(); ++i) p[i] = gauss(rng);
      } else {
        w.set_zero();
      }
    });
    return;
  }

  const Checkpoint ckpt = load_checkpoint(policy.checkpoint);
  std::set<std::string> random_layers;
  if (const std::string fc = net.first_conv_name(); !fc.empty()) random_layers.insert(fc);
  auto fc_like = net.fc_like_names();
  const int n = std::min<int>(policy.random_fc_count, static_cast<int>(fc_like.size()));
  for (int i = 0; i < n; ++i) random_layers.insert(fc_like[fc_like.size() - 1 - i]);

  net.visit_params([&](const std::string& name, Tensor& w, Tensor&, Tensor&) {
    const std::string layer = name.substr(0, name.rfind('.'));
    if (random_layers.count(layer)) {
      if (name.ends_with(".weight")) {
        float* p = w.data();
        for (Eigen::Index i = 0; i < w.size(); ++i) p[i] = gauss(rng);
      } else {
        w.set_zero();
      }
      return;
    }
    const Tensor* src = ckpt.find(name);
    if (!src)
      throw DataError("MissingLayer",
                      "checkpoint has no tensor `" + name + "` needed for transfer");
    if (!src->same_shape(w))
      throw DataError("LayerMismatch", "checkpoint tensor `" + name + "` has shape " +
                                           src->shape_str() + ", network expects " +
                                           w.shape_str());
    w = *src;
  });
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
namespace {
constexpr char kCkptMagic[8] = {'C', 'C', 'N', 'N', 'C', 'K', 'P', 'T'};
constexpr int kCkptVersion = 1;
}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

Checkpoint checkpoint_of(const Network& net, nlohmann::json meta, bool include_velocity) {
  Checkpoint ckpt;
  ckpt.spec = net.spec();
  ckpt.meta = std::move(meta);
  net.visit_params([&](const std::string& name, const Tensor& w, const Tensor& v) {
    ckpt.tensors.emplace_back(name, w);
    if (include_velocity && v.size() > 0) ckpt.tensors.emplace_back(name + ".v", v);
  });
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = kCkptVersion;
  header["spec"] = network_spec_to_json(ckpt.spec);
  nlohmann::json table = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  header["tensors"] = std::move(table);
  header["meta"] = ckpt.meta;

  const std::string hs = header.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("UnwritableFile", "cannot write checkpoint " + path.string());
  f.write(kCkptMagic, 8);
  const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
  f.write(reinterpret_cast<const char*>(&len), 4);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ckpt.tensors)
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(float) * t.size()));
  if (!f) throw DataError("UnwritableFile", "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("UnreadableFile", "cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t len = 0;
  f.read(magic, 8);
  f.read(reinterpret_cast<char*>(&len), 4);
  if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw DataError("BadCheckpoint", path.string() + ": bad magic");
  std::string hs(len, '\0');
  f.read(hs.data(), len);
  if (!f) throw DataError("TruncatedCheckpoint", path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("BadCheckpoint", path.string() + ": " + e.what());
  }
  if (header.value("format_version", -1) != kCkptVersion)
    throw DataError("BadCheckpoint", path.string() + ": unsupported format version");

  Checkpoint ckpt;
  ckpt.spec = network_spec_from_json(header.at("spec"));
  ckpt.meta = header.value("meta", nlohmann::json::object());

  std::int64_t expected_offset = 0;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const std::int64_t offset = entry.at("offset").get<std::int64_t>();
    if (offset != expected_offset)
      throw DataError("BadCheckpoint", path.string() + ": non-contiguous tensor table");
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(sizeof(float) * t.size()));
    if (!f)
      throw DataError("TruncatedCheckpoint",
                      path.string() + ": truncated payload at tensor `" + name + "`");
    expected_offset += t.size();
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  char extra;
  if (f.read(&extra, 1))
    throw DataError("BadCheckpoint", path.string() + ": trailing bytes after payload");
  return ckpt;
}

void load_into_network(Network& net, const Checkpoint& ckpt) {
  net.visit_params([&](const std::string& name, Tensor& w, Tensor&, Tensor&) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw DataError("MissingLayer", "checkpoint has no tensor `" + name + "`");
    if (!src->same_shape(w))
      throw DataError("LayerMismatch", "checkpoint tensor `" + name + "` has shape " +
                                           src->shape_str() + ", network expects " +
                                           w.shape_str());
    w = *src;
  });
}

Network network_from_checkpoint(const Checkpoint& ckpt) {
  Network net(ckpt.spec);
  load_into_network(net, ckpt);
  return net;
}

}  // namespace cellcnn
