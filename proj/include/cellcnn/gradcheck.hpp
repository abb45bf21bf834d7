#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellcnn/nn.hpp"

namespace cellcnn {

// Central finite differences against the analytic backward pass. The
// relative error follows the usual convention for float32 checkers:
// |analytic - numeric| / max(|analytic|, |numeric|, 1).
struct GradCheckResult {
  std::string kind;
  double max_rel_err = 0.0;
  int configs = 0;
};

// Checks every parameter and input element of a small network against
// finite differences of the softmax cross-entropy loss.
double gradcheck_network(Network& net, const Tensor& input, const std::vector<int>& labels,
                         double eps);

// One randomized suite per layer kind; `configs_per_kind` random shape/seed
// configurations each. Inputs for maxpool and relu are drawn from shuffled
// lattices with spacing > 2*eps so the check never straddles a kink.
std::vector<GradCheckResult> run_gradient_checks(int configs_per_kind, std::uint64_t seed,
                                                 double eps = 1e-2);

}  // namespace cellcnn
