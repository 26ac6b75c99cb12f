#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "attnlr/model.hpp"

namespace attnlr::nn {

struct AdamHyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::uint64_t step = 0;
};

using GradMap = std::map<std::string, std::vector<double>>;

// Decoupled weight decay applies to matrices only; biases, norms and
// reconstructor tensors are exempt.
bool decays(const std::string& name, const Tensor& t);

// Updates every parameter present in grads. lr is the scheduled rate for
// this step. A non-finite gradient throws DivergenceError naming it before
// any parameter is touched.
void adam_step(ParamMap& params, const GradMap& grads, AdamState& state, const AdamHyper& hyper, double lr);

// Linear warmup to peak over warmup steps, then linear decay to 0 at total.
double scheduled_lr(std::uint64_t step, std::uint64_t total, std::uint64_t warmup, double peak);

}  // namespace attnlr::nn
