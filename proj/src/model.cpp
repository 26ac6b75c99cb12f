#include "attnlr/model.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "attnlr/error.hpp"

namespace attnlr::nn {

void ModelConfig::validate() const {
  if (layers == 0 || heads == 0 || head_dim == 0 || seq_len == 0 || vocab == 0 || mlp_hidden == 0)
    fail(ErrorCategory::Config, "model dimensions must be positive");
  if (heads * head_dim != hidden) fail(ErrorCategory::Config, "model: heads * head_dim must equal hidden");
  if (seq_len > 128) fail(ErrorCategory::Config, "model: sequence length above 128 is not supported");
  if (!(ln_eps > 0.0) || !(init_std > 0.0)) fail(ErrorCategory::Config, "model: ln_eps and init_std must be positive");
}

std::string layer_param(std::size_t layer, const std::string& suffix) {
  return "layer" + std::to_string(layer) + "." + suffix;
}

namespace {

struct Shapes {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> weights;  // random init
  std::vector<std::pair<std::string, std::vector<std::size_t>>> zeros;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> ones;
};

Shapes shapes(const ModelConfig& c) {
  Shapes s;
  const std::size_t f = c.hidden;
  s.weights.push_back({"embed.token", {c.vocab, f}});
  s.weights.push_back({"embed.position", {c.seq_len, f}});
  s.ones.push_back({"embed.ln.gamma", {f}});
  s.zeros.push_back({"embed.ln.beta", {f}});
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) s.weights.push_back({layer_param(l, w), {f, f}});
    s.zeros.push_back({layer_param(l, "attn.bo"), {f}});
    s.ones.push_back({layer_param(l, "ln1.gamma"), {f}});
    s.zeros.push_back({layer_param(l, "ln1.beta"), {f}});
    s.weights.push_back({layer_param(l, "mlp.w1"), {c.mlp_hidden, f}});
    s.zeros.push_back({layer_param(l, "mlp.b1"), {c.mlp_hidden}});
    s.weights.push_back({layer_param(l, "mlp.w2"), {f, c.mlp_hidden}});
    s.zeros.push_back({layer_param(l, "mlp.b2"), {f}});
    s.ones.push_back({layer_param(l, "ln2.gamma"), {f}});
    s.zeros.push_back({layer_param(l, "ln2.beta"), {f}});
  }
  s.weights.push_back({"head.w", {c.vocab, f}});
  s.zeros.push_back({"head.b", {c.vocab}});
  return s;
}

}  // namespace

ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, cfg.init_std);
  ParamMap out;
  const Shapes s = shapes(cfg);
  // Draw order follows the fixed listing above, not map order.
  for (const auto& [name, shape] : s.weights) {
    Tensor t(shape);
    for (double& v : t.data) v = normal(rng);
    out[name] = std::move(t);
  }
  for (const auto& [name, shape] : s.zeros) out[name] = Tensor(shape, 0.0);
  for (const auto& [name, shape] : s.ones) out[name] = Tensor(shape, 1.0);
  return out;
}

void check_params(const ModelConfig& cfg, const ParamMap& params) {
  cfg.validate();
  const Shapes s = shapes(cfg);
  for (const auto* group : {&s.weights, &s.zeros, &s.ones}) {
    for (const auto& [name, shape] : *group) {
      auto it = params.find(name);
      if (it == params.end()) fail(ErrorCategory::DimMismatch, "missing parameter " + name);
      if (it->second.shape != shape) fail(ErrorCategory::DimMismatch, "parameter " + name + " has the wrong shape");
      if (!it->second.all_finite()) fail(ErrorCategory::Domain, "parameter " + name + " is not finite");
    }
  }
}

Var ParamBinding::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) fail(ErrorCategory::DimMismatch, "parameter " + name + " is not bound");
  return it->second;
}

ParamBinding bind_params(Tape& tape, const ParamMap& params, const TrainablePredicate& trainable) {
  ParamBinding b;
  for (const auto& [name, t] : params) {
    b.vars[name] = (trainable && trainable(name)) ? tape.leaf(t) : tape.constant(t);
  }
  return b;
}

ForwardOutput forward(Tape& tape, const ParamBinding& p, const ModelConfig& cfg, std::span<const int> tokens,
                      std::size_t batch, const ScoreFn& score_fn) {
  const std::size_t n = cfg.seq_len;
  if (tokens.size() != batch * n) fail(ErrorCategory::DimMismatch, "forward: token count differs from batch * seq_len");
  const ops::HeadLayout layout = cfg.layout(batch);
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % n);

  ForwardOutput out;
  Var x = ops::add(tape, ops::embedding(tape, p.at("embed.token"), tokens),
                   ops::embedding(tape, p.at("embed.position"), positions));
  x = ops::layer_norm(tape, x, p.at("embed.ln.gamma"), p.at("embed.ln.beta"), cfg.ln_eps);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto w = [&](const char* s) { return p.at(layer_param(l, s)); };
    Var q = ops::matmul_nt(tape, x, w("attn.wq"));
    Var k = ops::matmul_nt(tape, x, w("attn.wk"));
    Var v = ops::matmul_nt(tape, x, w("attn.wv"));
    Var s = score_fn ? score_fn(tape, l, q, k, layout, p) : ops::head_scores(tape, q, k, layout);
    out.scores.push_back(s);
    Var ctx = ops::attend(tape, ops::softmax_rows(tape, s), v, layout);
    Var mixed = ops::add_bias(tape, ops::matmul_nt(tape, ctx, w("attn.wo")), w("attn.bo"));
    x = ops::layer_norm(tape, ops::add(tape, x, mixed), w("ln1.gamma"), w("ln1.beta"), cfg.ln_eps);
    Var h = ops::gelu(tape, ops::add_bias(tape, ops::matmul_nt(tape, x, w("mlp.w1")), w("mlp.b1")));
    Var m = ops::add_bias(tape, ops::matmul_nt(tape, h, w("mlp.w2")), w("mlp.b2"));
    x = ops::layer_norm(tape, ops::add(tape, x, m), w("ln2.gamma"), w("ln2.beta"), cfg.ln_eps);
  }
  out.logits = ops::add_bias(tape, ops::matmul_nt(tape, x, p.at("head.w")), p.at("head.b"));
  return out;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMat> view(const Tensor& t) { return {t.data.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }

Tensor transpose(const Tensor& t) {
  Tensor out({t.cols(), t.rows()});
  Eigen::Map<RowMat>(out.data.data(), t.cols(), t.rows()) = view(t).transpose();
  return out;
}

}  // namespace

Tensor attention_scores_exact(const Tensor& x, const Tensor& wq, const Tensor& wk, std::size_t d) {
  if (d == 0) fail(ErrorCategory::Domain, "attention_scores_exact: head dim must be positive");
  if (x.rank() != 2 || wq.rank() != 2 || wk.rank() != 2) fail(ErrorCategory::Domain, "attention_scores_exact: rank-2 inputs required");
  const std::size_t f = x.rows(), n = x.cols();
  if (wq.shape != std::vector<std::size_t>{d, f} || wk.shape != wq.shape)
    fail(ErrorCategory::Domain, "attention_scores_exact: wq and wk must be d x f");
  const RowMat q = view(wq) * view(x);
  const RowMat k = view(wk) * view(x);
  Tensor out({n, n});
  Eigen::Map<RowMat>(out.data.data(), n, n) = (q.transpose() * k) / std::sqrt(static_cast<double>(d));
  return out;
}

AttentionBlockOutput attention_block_exact(const Tensor& x, const ParamMap& params, const ModelConfig& cfg,
                                           std::size_t layer) {
  cfg.validate();
  if (layer >= cfg.layers) fail(ErrorCategory::Domain, "attention_block_exact: layer out of range");
  if (x.rank() != 2 || x.rows() != cfg.hidden) fail(ErrorCategory::DimMismatch, "attention_block_exact: x must be f x n");
  const std::size_t n = x.cols();
  auto get = [&](const char* s) -> const Tensor& {
    auto it = params.find(layer_param(layer, s));
    if (it == params.end()) fail(ErrorCategory::DimMismatch, "attention_block_exact: missing " + layer_param(layer, s));
    return it->second;
  };
  Tape tape;
  const ops::HeadLayout layout{1, cfg.heads, n, cfg.head_dim};
  Var xt = tape.constant(transpose(x));
  Var q = ops::matmul_nt(tape, xt, tape.constant(get("attn.wq")));
  Var k = ops::matmul_nt(tape, xt, tape.constant(get("attn.wk")));
  Var v = ops::matmul_nt(tape, xt, tape.constant(get("attn.wv")));
  Var ctx = ops::attend(tape, ops::softmax_rows(tape, ops::head_scores(tape, q, k, layout)), v, layout);
  Var mixed = ops::add_bias(tape, ops::matmul_nt(tape, ctx, tape.constant(get("attn.wo"))), tape.constant(get("attn.bo")));
  Var out = ops::layer_norm(tape, ops::add(tape, xt, mixed), tape.constant(get("ln1.gamma")), tape.constant(get("ln1.beta")),
                            cfg.ln_eps);
  return {transpose(tape.value(mixed)), transpose(tape.value(out))};
}

}  // namespace attnlr::nn
