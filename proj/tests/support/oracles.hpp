#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "querypose/matching.hpp"

namespace querypose::testing {

// ||analytic - numeric|| / max(||numeric||, floor) over all inputs.
struct GradcheckResult {
  double relative_error = 0.0;
  double numeric_norm = 0.0;
};

// Central differences of sum(f(inputs) * probe) with a fixed random probe, so
// every output element contributes. Inputs must be double tensors.
inline GradcheckResult gradcheck(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& f,
                                 std::vector<torch::Tensor> inputs, double eps = 1e-6) {
  for (auto& x : inputs) x = x.detach().clone().to(torch::kFloat64).requires_grad_(true);
  auto out = f(inputs);
  auto probe = torch::randn(out.sizes(), torch::TensorOptions().dtype(torch::kFloat64));
  auto grads = torch::autograd::grad({(out * probe).sum()}, inputs, {}, false, false, true);

  double diff = 0.0;
  double norm = 0.0;
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto flat = inputs[i].view({-1});
    auto analytic = grads[i].defined() ? grads[i].reshape({-1}) : torch::zeros_like(flat);
    for (int64_t j = 0; j < flat.numel(); ++j) {
      const double saved = flat[j].item<double>();
      flat[j] = saved + eps;
      const double up = (f(inputs) * probe).sum().item<double>();
      flat[j] = saved - eps;
      const double down = (f(inputs) * probe).sum().item<double>();
      flat[j] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double d = analytic[j].item<double>() - numeric;
      diff += d * d;
      norm += numeric * numeric;
    }
  }
  return {std::sqrt(diff) / std::max(std::sqrt(norm), 1e-8), std::sqrt(norm)};
}

// Same check over a module's parameters (already double). At most
// `per_tensor` entries of each parameter are probed, chosen at random.
inline GradcheckResult gradcheck_parameters(torch::nn::Module& module, const std::function<torch::Tensor()>& f,
                                            int64_t per_tensor = 8, double eps = 1e-6) {
  module.zero_grad();
  auto out = f();
  auto probe = torch::randn(out.sizes(), torch::TensorOptions().dtype(torch::kFloat64));
  (out * probe).sum().backward();

  double diff = 0.0;
  double norm = 0.0;
  torch::NoGradGuard guard;
  for (auto& p : module.parameters()) {
    auto flat = p.view({-1});
    auto analytic = p.grad().defined() ? p.grad().reshape({-1}).clone() : torch::zeros_like(flat);
    auto picks = torch::randperm(flat.numel()).slice(0, 0, std::min<int64_t>(per_tensor, flat.numel()));
    for (int64_t n = 0; n < picks.numel(); ++n) {
      const int64_t j = picks[n].item<int64_t>();
      const double saved = flat[j].item<double>();
      flat[j] = saved + eps;
      const double up = (f() * probe).sum().item<double>();
      flat[j] = saved - eps;
      const double down = (f() * probe).sum().item<double>();
      flat[j] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double d = analytic[j].item<double>() - numeric;
      diff += d * d;
      norm += numeric * numeric;
    }
  }
  return {std::sqrt(diff) / std::max(std::sqrt(norm), 1e-8), std::sqrt(norm)};
}

// Exhaustive minimum over every injective assignment of min(rows, cols) pairs.
inline double brute_force_assignment(const CostMatrix& cost) {
  const bool transpose = cost.rows > cost.cols;
  const int small = transpose ? cost.cols : cost.rows;
  const int large = transpose ? cost.rows : cost.cols;
  auto at = [&](int s, int l) { return transpose ? cost.at(l, s) : cost.at(s, l); };
  std::vector<int> perm(static_cast<std::size_t>(large));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  if (small == 0) return 0.0;
  do {
    double total = 0.0;
    for (int s = 0; s < small; ++s) total += at(s, perm[static_cast<std::size_t>(s)]);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const char* root = std::getenv("QUERYPOSE_TEST_TMP");
  auto dir = std::filesystem::path(root ? root : std::filesystem::temp_directory_path() / "querypose-tests") / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace querypose::testing
