#include "attnlr/optim.hpp"

#include <algorithm>
#include <cmath>

#include "attnlr/error.hpp"

namespace attnlr::nn {

bool decays(const std::string& name, const Tensor& t) {
  return t.rank() == 2 && name.rfind("approx.", 0) != 0;
}

void adam_step(ParamMap& params, const GradMap& grads, AdamState& state, const AdamHyper& h, double lr) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) fail(ErrorCategory::DimMismatch, "adam: gradient for unknown parameter " + name);
    if (g.size() != it->second.numel()) fail(ErrorCategory::DimMismatch, "adam: gradient shape differs for " + name);
    for (double x : g) {
      if (!std::isfinite(x)) throw DivergenceError("non-finite gradient in " + name, name);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    const double wd = decays(name, p) ? h.weight_decay : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      p.data[i] -= lr * (mh / (std::sqrt(vh) + h.eps) + wd * p.data[i]);
    }
  }
}

double scheduled_lr(std::uint64_t step, std::uint64_t total, std::uint64_t warmup, double peak) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return peak;
  const double rest = static_cast<double>(total - warmup);
  const double done = static_cast<double>(step - warmup);
  return peak * std::max(0.0, 1.0 - done / rest);
}

}  // namespace attnlr::nn
