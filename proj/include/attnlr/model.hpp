#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "attnlr/ops.hpp"
#include "attnlr/tensor.hpp"

namespace attnlr::nn {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t hidden = 64;  // f = heads * head_dim
  std::size_t head_dim = 32;
  std::size_t seq_len = 32;
  std::size_t vocab = 64;
  std::size_t mlp_hidden = 256;
  double ln_eps = 1e-12;
  double init_std = 0.02;

  void validate() const;
  ops::HeadLayout layout(std::size_t batch) const { return {batch, heads, seq_len, head_dim}; }
};

using ParamMap = std::map<std::string, Tensor>;

std::string layer_param(std::size_t layer, const std::string& suffix);

// Weights are stored as output×input so that projections are x·Wᵀ on
// token-major activations. Rows h·d .. h·d+d of attn.wq / attn.wk are the
// d×f per-head W_Q, W_K.
ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed);
void check_params(const ModelConfig& cfg, const ParamMap& params);

struct ParamBinding {
  std::map<std::string, Var> vars;
  Var at(const std::string& name) const;
};

using TrainablePredicate = std::function<bool(const std::string&)>;
ParamBinding bind_params(Tape& tape, const ParamMap& params, const TrainablePredicate& trainable);

// Replaces the score computation of one layer; receives projected q and k.
using ScoreFn =
    std::function<Var(Tape&, std::size_t layer, Var q, Var k, const ops::HeadLayout&, const ParamBinding&)>;

struct ForwardOutput {
  Var logits;               // [B·n × vocab]
  std::vector<Var> scores;  // per layer, [B·H·n × n], pre-softmax
};

ForwardOutput forward(Tape& tape, const ParamBinding& p, const ModelConfig& cfg, std::span<const int> tokens,
                      std::size_t batch, const ScoreFn& score_fn = {});

// x is f×n with one column per token; wq, wk are d×f.
Tensor attention_scores_exact(const Tensor& x, const Tensor& wq, const Tensor& wk, std::size_t d);

struct AttentionBlockOutput {
  Tensor mixed;  // f×n, heads concatenated and projected, before the residual
  Tensor out;    // f×n, after residual and layer norm
};
AttentionBlockOutput attention_block_exact(const Tensor& x, const ParamMap& params, const ModelConfig& cfg,
                                           std::size_t layer);

}  // namespace attnlr::nn
