#include "cellcnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cellcnn {
namespace {

double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1.0});
}

double loss_at(Network& net, const Tensor& input, const std::vector<int>& labels) {
  Tensor logits = net.forward(input, false);
  return loss_softmax_xent(logits, labels).loss;
}

// Fills a tensor with a seeded shuffle of an evenly spaced lattice; gaps of
// `step` keep finite differences away from max/relu kinks.
void fill_lattice(Tensor& t, std::mt19937_64& rng, float step, bool signed_values) {
  const Eigen::Index n = t.size();
  std::vector<float> vals(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    float v = step * static_cast<float>(i + 1);
    if (signed_values && (i % 2 == 0)) v = -v;
    vals[static_cast<std::size_t>(i)] = v;
  }
  std::shuffle(vals.begin(), vals.end(), rng);
  std::copy(vals.begin(), vals.end(), t.data());
}

void fill_uniform(Tensor& t, std::mt19937_64& rng, float lo, float hi) {
  std::uniform_real_distribution<float> dist(lo, hi);
  float* p = t.data();
  for (Eigen::Index i = 0; i < t.size(); ++i) p[i] = dist(rng);
}

std::vector<int> random_labels(int batch, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(0, classes - 1);
  std::vector<int> labels(static_cast<std::size_t>(batch));
  for (auto& l : labels) l = dist(rng);
  return labels;
}

}  // namespace

double gradcheck_network(Network& net, const Tensor& input, const std::vector<int>& labels,
                         double eps) {
  net.zero_grads();
  Tensor logits = net.forward(input, true);
  LossResult lr = loss_softmax_xent(logits, labels);
  Tensor input_grad = net.backward(lr.grad);

  double worst = 0.0;
  const auto check_tensor = [&](Tensor& values, const Tensor& analytic) {
    float* p = values.data();
    const float* a = analytic.data();
    for (Eigen::Index i = 0; i < values.size(); ++i) {
      const float saved = p[i];
      p[i] = saved + static_cast<float>(eps);
      const double up = loss_at(net, input, labels);
      p[i] = saved - static_cast<float>(eps);
      const double down = loss_at(net, input, labels);
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, rel_err(static_cast<double>(a[i]), numeric));
    }
  };

  net.visit_params([&](const std::string&, Tensor& w, Tensor& g, Tensor&) {
    check_tensor(w, g);
  });

  // Input gradient: perturb a copy of the input.
  Tensor x = input;
  float* p = x.data();
  const float* a = input_grad.data();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const float saved = p[i];
    p[i] = saved + static_cast<float>(eps);
    const double up = loss_at(net, x, labels);
    p[i] = saved - static_cast<float>(eps);
    const double down = loss_at(net, x, labels);
    p[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, rel_err(static_cast<double>(a[i]), numeric));
  }
  return worst;
}

std::vector<GradCheckResult> run_gradient_checks(int configs_per_kind, std::uint64_t seed,
                                                 double eps) {
  std::vector<GradCheckResult> results;
  std::mt19937_64 rng(seed);

  const auto init_params = [&](Network& net) {
    InitPolicy policy;
    policy.mode = InitPolicy::Mode::scratch;
    policy.gaussian_std = 0.25f;
    init_weights(net, policy, rng);
    // Non-zero biases so their gradients are exercised off the origin.
    net.visit_params([&](const std::string& name, Tensor& w, Tensor&, Tensor&) {
      if (name.ends_with(".bias")) fill_uniform(w, rng, -0.2f, 0.2f);
    });
  };

  const auto run_kind = [&](const char* kind,
                            const std::function<NetworkSpec(std::mt19937_64&)>& make_spec,
                            bool lattice_input) {
    GradCheckResult res;
    res.kind = kind;
    res.configs = configs_per_kind;
    for (int i = 0; i < configs_per_kind; ++i) {
      const NetworkSpec spec = make_spec(rng);
      Network net(spec);
      init_params(net);
      Tensor input(
          {2, spec.input.height, spec.input.width, spec.input.channels});
      if (lattice_input)
        fill_lattice(input, rng, 0.11f, true);
      else
        fill_uniform(input, rng, -1.0f, 1.0f);
      const auto labels = random_labels(2, net.num_classes(), rng);
      res.max_rel_err = std::max(res.max_rel_err, gradcheck_network(net, input, labels, eps));
    }
    results.push_back(res);
  };

  auto head = [](int classes) {
    LayerSpec l;
    l.kind = LayerKind::softmax_output;
    l.classes = classes;
    return l;
  };
  auto conv = [](int oc, int k, int s, int p) {
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.out_channels = oc;
    l.kernel = k;
    l.stride = s;
    l.pad = p;
    return l;
  };

  run_kind("conv2d",
           [&](std::mt19937_64& r) {
             std::uniform_int_distribution<int> sz(5, 8), ch(1, 3), oc(1, 4), k(1, 3), st(1, 2),
                 pd(0, 1);
             NetworkSpec s;
             s.input = {sz(r), sz(r), ch(r)};
             s.layers = {conv(oc(r), k(r), st(r), pd(r)), head(2)};
             return s;
           },
           false);

  run_kind("maxpool",
           [&](std::mt19937_64& r) {
             std::uniform_int_distribution<int> sz(4, 7), ch(1, 3), k(2, 3), st(1, 2);
             NetworkSpec s;
             s.input = {sz(r), sz(r), ch(r)};
             LayerSpec pool;
             pool.kind = LayerKind::maxpool;
             pool.kernel = k(r);
             pool.stride = st(r);
             s.layers = {pool, head(2)};
             return s;
           },
           true);

  run_kind("relu",
           [&](std::mt19937_64& r) {
             std::uniform_int_distribution<int> sz(3, 6), ch(1, 3);
             NetworkSpec s;
             s.input = {sz(r), sz(r), ch(r)};
             LayerSpec relu;
             relu.kind = LayerKind::relu;
             s.layers = {relu, head(2)};
             return s;
           },
           true);

  run_kind("fc",
           [&](std::mt19937_64& r) {
             std::uniform_int_distribution<int> sz(2, 5), ch(1, 3), dim(3, 12);
             NetworkSpec s;
             s.input = {sz(r), sz(r), ch(r)};
             LayerSpec fc;
             fc.kind = LayerKind::fc;
             fc.out_dim = dim(r);
             s.layers = {fc, head(7)};
             return s;
           },
           false);

  run_kind("concat",
           [&](std::mt19937_64& r) {
             std::uniform_int_distribution<int> sz(4, 6), ch(1, 2), oc(1, 3);
             NetworkSpec s;
             s.input = {sz(r), sz(r), ch(r)};
             LayerSpec cat;
             cat.kind = LayerKind::concat;
             cat.branches.push_back({conv(oc(r), 1, 1, 0)});
             cat.branches.push_back({conv(oc(r), 3, 1, 1)});
             LayerSpec gap;
             gap.kind = LayerKind::global_avg_pool;
             s.layers = {cat, gap, head(2)};
             return s;
           },
           false);

  run_kind("global_avg_pool",
           [&](std::mt19937_64& r) {
             std::uniform_int_distribution<int> sz(3, 6), ch(1, 4);
             NetworkSpec s;
             s.input = {sz(r), sz(r), ch(r)};
             LayerSpec gap;
             gap.kind = LayerKind::global_avg_pool;
             s.layers = {gap, head(2)};
             return s;
           },
           false);

  run_kind("softmax_output",
           [&](std::mt19937_64& r) {
             std::uniform_int_distribution<int> sz(2, 5), ch(1, 3), cls(0, 1);
             NetworkSpec s;
             s.input = {sz(r), sz(r), ch(r)};
             s.layers = {head(cls(r) ? 7 : 2)};
             return s;
           },
           false);

  return results;
}

}  // namespace cellcnn
