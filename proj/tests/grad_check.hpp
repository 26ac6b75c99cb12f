#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "attnlr/model.hpp"
#include "attnlr/ops.hpp"

namespace attnlr::testing {

// Worst per-tensor relative error between tape gradients and central
// differences: max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, floor).
struct GradReport {
  double worst = 0.0;
  std::string worst_name;
};

using MapLoss = std::function<nn::Var(nn::Tape&, const nn::ParamBinding&)>;

inline GradReport grad_check(nn::ParamMap params, const std::vector<std::string>& names, const MapLoss& loss,
                             double h = 1e-5, double floor = 1e-7) {
  auto trainable = [&](const std::string& s) { return std::find(names.begin(), names.end(), s) != names.end(); };
  nn::Tape tape;
  nn::ParamBinding b = nn::bind_params(tape, params, trainable);
  tape.backward(loss(tape, b));
  auto eval = [&]() {
    nn::Tape t;
    nn::ParamBinding bb = nn::bind_params(t, params, {});
    return t.value(loss(t, bb))[0];
  };
  GradReport rep;
  for (const auto& name : names) {
    std::vector<double> analytic = tape.grad(b.at(name));
    if (analytic.empty()) analytic.assign(params.at(name).numel(), 0.0);
    std::vector<double> numeric(analytic.size());
    auto& data = params.at(name).data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = eval();
      data[i] = keep - h;
      const double down = eval();
      data[i] = keep;
      numeric[i] = (up - down) / (2.0 * h);
    }
    double scale = floor, err = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      scale = std::max(scale, std::abs(numeric[i]));
      err = std::max(err, std::abs(numeric[i] - analytic[i]));
    }
    if (err / scale > rep.worst) {
      rep.worst = err / scale;
      rep.worst_name = name;
    }
  }
  return rep;
}

inline nn::Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
  nn::Tensor t(std::move(shape));
  std::normal_distribution<double> normal(0.0, scale);
  for (double& v : t.data) v = normal(rng);
  return t;
}

// A small model with weights large enough that attention is far from uniform.
inline nn::ModelConfig tiny_config(std::size_t layers = 1) {
  nn::ModelConfig c;
  c.layers = layers;
  c.heads = 2;
  c.head_dim = 3;
  c.hidden = 6;
  c.seq_len = 5;
  c.vocab = 9;
  c.mlp_hidden = 8;
  c.init_std = 0.5;
  return c;
}

inline std::vector<std::string> all_names(const nn::ParamMap& p) {
  std::vector<std::string> out;
  for (const auto& kv : p) out.push_back(kv.first);
  return out;
}

}  // namespace attnlr::testing
