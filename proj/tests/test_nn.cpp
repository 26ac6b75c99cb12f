#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "attnlr/checkpoint.hpp"
#include "attnlr/error.hpp"
#include "attnlr/model.hpp"
#include "attnlr/ops.hpp"
#include "attnlr/optim.hpp"
#include "grad_check.hpp"

using namespace attnlr;
using namespace attnlr::nn;
using attnlr::testing::grad_check;
using attnlr::testing::random_tensor;

namespace {

// Loss sum((y + c)^2) gives every output element a distinct adjoint.
Var probe(Tape& t, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor c = random_tensor(t.value(y).shape, rng);
  return ops::sum_squares(t, ops::add(t, y, t.constant(c)));
}

Tensor naive_scores(const Tensor& x, const Tensor& wq, const Tensor& wk, std::size_t d) {
  const std::size_t f = x.rows(), n = x.cols();
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        double qi = 0.0, kj = 0.0;
        for (std::size_t r = 0; r < f; ++r) {
          qi += wq.at(c, r) * x.at(r, i);
          kj += wk.at(c, r) * x.at(r, j);
        }
        s += qi * kj;
      }
      out.at(i, j) = s / std::sqrt(double(d));
    }
  }
  return out;
}

double max_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("attention_scores_exact on one-hot tokens") {
  Tensor x({2, 2}, {1, 0, 0, 1});
  Tensor eye({1, 2}, {1, 0});
  // d = 1 with wq = wk = first row of I picks token 0's coordinate only.
  Tensor s = attention_scores_exact(x, eye, eye, 1);
  CHECK(s.data == std::vector<double>{1, 0, 0, 0});
  Tensor wq({2, 2}, {1, 0, 0, 1});
  s = attention_scores_exact(x, wq, wq, 2);
  for (double& v : s.data) v *= std::sqrt(2.0);
  CHECK(s.data == std::vector<double>{1, 0, 0, 1});
}

TEST_CASE("attention_scores_exact identity case with d = 1") {
  Tensor x({1, 2}, {1, 0});
  Tensor w({1, 1}, {1});
  Tensor s = attention_scores_exact(x, w, w, 1);
  CHECK(s.data == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("attention_scores_exact zero input and naive oracle") {
  std::mt19937_64 rng(3);
  Tensor wq = random_tensor({3, 6}, rng), wk = random_tensor({3, 6}, rng);
  Tensor zero({6, 4}, 0.0);
  for (double v : attention_scores_exact(zero, wq, wk, 3).data) CHECK(v == 0.0);
  Tensor x = random_tensor({6, 4}, rng);
  CHECK(max_diff(attention_scores_exact(x, wq, wk, 3), naive_scores(x, wq, wk, 3)) < 1e-12);
}

TEST_CASE("attention scores are bilinear in wq") {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({6, 4}, rng), wq = random_tensor({3, 6}, rng), wk = random_tensor({3, 6}, rng);
  Tensor base = attention_scores_exact(x, wq, wk, 3);
  Tensor wq3 = wq;
  for (double& v : wq3.data) v *= -2.5;
  Tensor scaled = attention_scores_exact(x, wq3, wk, 3);
  for (std::size_t i = 0; i < base.numel(); ++i) CHECK(scaled[i] == doctest::Approx(-2.5 * base[i]).epsilon(1e-12));
}

TEST_CASE("attention_scores_exact rejects bad shapes") {
  Tensor x({6, 4}), wq({3, 5}), wk({3, 6});
  CHECK_THROWS_AS(attention_scores_exact(x, wq, wk, 3), Error);
  CHECK_THROWS_AS(attention_scores_exact(x, wk, wk, 0), Error);
  try {
    attention_scores_exact(x, wq, wk, 3);
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::Domain);
  }
}

namespace {

ModelConfig block_config(std::size_t heads, std::size_t d) {
  ModelConfig c;
  c.layers = 1;
  c.heads = heads;
  c.head_dim = d;
  c.hidden = heads * d;
  c.seq_len = 8;
  c.vocab = 8;
  c.mlp_hidden = 4;
  return c;
}

Tensor eye(std::size_t f) {
  Tensor t({f, f}, 0.0);
  for (std::size_t i = 0; i < f; ++i) t.at(i, i) = 1.0;
  return t;
}

}  // namespace

TEST_CASE("attention block with identical tokens averages values") {
  ModelConfig c = block_config(1, 4);
  ParamMap p = init_params(c, 1);
  p["layer0.attn.wv"] = eye(4);
  p["layer0.attn.wo"] = eye(4);
  Tensor x({4, 3});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 3; ++j) x.at(r, j) = double(r) - 1.5;
  AttentionBlockOutput o = attention_block_exact(x, p, c, 0);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 3; ++j) CHECK(o.mixed.at(r, j) == doctest::Approx(double(r) - 1.5).epsilon(1e-14));
}

TEST_CASE("attention block with one token returns its value") {
  ModelConfig c = block_config(2, 2);
  ParamMap p = init_params(c, 2);
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({4, 1}, rng);
  AttentionBlockOutput o = attention_block_exact(x, p, c, 0);
  const Tensor& wv = p["layer0.attn.wv"];
  const Tensor& wo = p["layer0.attn.wo"];
  for (std::size_t r = 0; r < 4; ++r) {
    double expect = 0.0;
    for (std::size_t a = 0; a < 4; ++a) {
      double v = 0.0;
      for (std::size_t b = 0; b < 4; ++b) v += wv.at(a, b) * x[b];
      expect += wo.at(r, a) * v;
    }
    CHECK(o.mixed[r] == doctest::Approx(expect).epsilon(1e-13));
  }
}

TEST_CASE("attention block matches an independent forward") {
  ModelConfig c = block_config(2, 3);
  std::mt19937_64 rng(6);
  ParamMap p = init_params(c, 7);
  for (auto& [name, t] : p) t = random_tensor(t.shape, rng, 0.4);
  const std::size_t f = 6, n = 5, d = 3;
  Tensor x = random_tensor({f, n}, rng);
  // v[h] = Wv_h x, ctx = v σ(A)ᵀ, mixed = Wo ctx + bo, out = LN(x + mixed)
  Tensor ctx({f, n}, 0.0);
  for (std::size_t h = 0; h < 2; ++h) {
    Tensor wq({d, f}), wk({d, f});
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < f; ++b) {
        wq.at(a, b) = p["layer0.attn.wq"].at(h * d + a, b);
        wk.at(a, b) = p["layer0.attn.wk"].at(h * d + a, b);
      }
    Tensor s = naive_scores(x, wq, wk, d);
    for (std::size_t i = 0; i < n; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(s.at(i, j));
      for (std::size_t a = 0; a < d; ++a) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double vj = 0.0;
          for (std::size_t b = 0; b < f; ++b) vj += p["layer0.attn.wv"].at(h * d + a, b) * x.at(b, j);
          acc += std::exp(s.at(i, j)) / z * vj;
        }
        ctx.at(h * d + a, i) = acc;
      }
    }
  }
  Tensor mixed({f, n}), out({f, n});
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    std::vector<double> col(f);
    for (std::size_t r = 0; r < f; ++r) {
      double m = p["layer0.attn.bo"][r];
      for (std::size_t a = 0; a < f; ++a) m += p["layer0.attn.wo"].at(r, a) * ctx.at(a, i);
      mixed.at(r, i) = m;
      col[r] = x.at(r, i) + m;
      mean += col[r] / f;
    }
    double var = 0.0;
    for (double v : col) var += (v - mean) * (v - mean) / f;
    for (std::size_t r = 0; r < f; ++r)
      out.at(r, i) = (col[r] - mean) / std::sqrt(var + c.ln_eps) * p["layer0.ln1.gamma"][r] + p["layer0.ln1.beta"][r];
  }
  AttentionBlockOutput o = attention_block_exact(x, p, c, 0);
  CHECK(max_diff(o.mixed, mixed) < 1e-12);
  CHECK(max_diff(o.out, out) < 1e-12);
}

TEST_CASE("backward of linear and quadratic losses") {
  std::mt19937_64 rng(8);
  Tensor w = random_tensor({3, 4}, rng);
  {
    Tape t;
    Var v = t.leaf(w);
    t.backward(ops::sum(t, v));
    for (double g : t.grad(v)) CHECK(g == 1.0);
  }
  {
    Tape t;
    Var v = t.leaf(w);
    t.backward(ops::scale(t, ops::sum_squares(t, v), 0.5));
    for (std::size_t i = 0; i < w.numel(); ++i) CHECK(t.grad(v)[i] == doctest::Approx(w[i]).epsilon(1e-15));
  }
  {
    Tape t;
    Var v = t.leaf(w);
    CHECK_THROWS_AS(t.backward(v), Error);
  }
}

TEST_CASE("softmax rows sum to one and ignore row shifts") {
  std::mt19937_64 rng(9);
  Tensor a = random_tensor({4, 7}, rng, 5.0);
  Tensor shifted = a;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 7; ++j) shifted.at(i, j) += 100.0 * double(i) - 3.0;
  Tape t;
  const Tensor p = t.value(ops::softmax_rows(t, t.constant(a)));
  const Tensor q = t.value(ops::softmax_rows(t, t.constant(shifted)));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += p.at(i, j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  CHECK(max_diff(p, q) < 1e-12);
}

TEST_CASE("primitive gradients match finite differences") {
  std::mt19937_64 rng(10);
  const ops::HeadLayout L{2, 2, 3, 2};
  ParamMap p;
  p["a"] = random_tensor({4, 3}, rng);
  p["b"] = random_tensor({3, 5}, rng);
  p["bt"] = random_tensor({5, 3}, rng);
  p["a2"] = random_tensor({4, 3}, rng);
  p["bias"] = random_tensor({3}, rng);
  p["gamma"] = random_tensor({3}, rng);
  p["beta"] = random_tensor({3}, rng);
  p["table"] = random_tensor({6, 3}, rng);
  p["q"] = random_tensor({6, 4}, rng);
  p["k"] = random_tensor({6, 4}, rng);
  p["v"] = random_tensor({6, 4}, rng);
  p["s"] = random_tensor({12, 3}, rng, 2.0);
  p["logits"] = random_tensor({5, 6}, rng, 2.0);

  auto run = [&](std::string what, std::vector<std::string> names, const testing::MapLoss& f) {
    auto rep = grad_check(p, names, f);
    INFO(what << " worst " << rep.worst << " at " << rep.worst_name);
    CHECK(rep.worst < 1e-4);
  };
  run("matmul", {"a", "b"}, [](Tape& t, const ParamBinding& b) { return probe(t, ops::matmul(t, b.at("a"), b.at("b")), 1); });
  run("matmul_nt", {"a", "bt"},
      [](Tape& t, const ParamBinding& b) { return probe(t, ops::matmul_nt(t, b.at("a"), b.at("bt")), 2); });
  run("add", {"a", "a2"}, [](Tape& t, const ParamBinding& b) { return probe(t, ops::add(t, b.at("a"), b.at("a2")), 3); });
  run("add_bias", {"a", "bias"},
      [](Tape& t, const ParamBinding& b) { return probe(t, ops::add_bias(t, b.at("a"), b.at("bias")), 4); });
  run("scale", {"a"}, [](Tape& t, const ParamBinding& b) { return probe(t, ops::scale(t, b.at("a"), -1.7), 5); });
  run("gelu", {"a"}, [](Tape& t, const ParamBinding& b) { return probe(t, ops::gelu(t, b.at("a")), 6); });
  run("layer_norm", {"a", "gamma", "beta"}, [](Tape& t, const ParamBinding& b) {
    return probe(t, ops::layer_norm(t, b.at("a"), b.at("gamma"), b.at("beta"), 1e-12), 7);
  });
  run("embedding", {"table"}, [](Tape& t, const ParamBinding& b) {
    const std::vector<int> ids{3, 0, 3, 5};
    return probe(t, ops::embedding(t, b.at("table"), ids), 8);
  });
  run("softmax_rows", {"a"}, [](Tape& t, const ParamBinding& b) { return probe(t, ops::softmax_rows(t, b.at("a")), 9); });
  run("head_scores", {"q", "k"},
      [L](Tape& t, const ParamBinding& b) { return probe(t, ops::head_scores(t, b.at("q"), b.at("k"), L), 10); });
  run("attend", {"s", "v"}, [L](Tape& t, const ParamBinding& b) {
    return probe(t, ops::attend(t, ops::softmax_rows(t, b.at("s")), b.at("v"), L), 11);
  });
  run("masked_cross_entropy", {"logits"}, [](Tape& t, const ParamBinding& b) {
    const std::vector<ops::Target> tg{{0, 2}, {3, 5}, {4, 0}};
    return ops::masked_cross_entropy(t, b.at("logits"), tg);
  });
  run("sum_squares", {"a"}, [](Tape& t, const ParamBinding& b) { return ops::sum_squares(t, b.at("a")); });
}

TEST_CASE("masked cross entropy with no targets is zero") {
  Tape t;
  Var l = t.leaf(Tensor({2, 3}, 1.0));
  Var loss = ops::masked_cross_entropy(t, l, {});
  CHECK(t.value(loss)[0] == 0.0);
  t.backward(loss);
  CHECK(t.grad(l).empty());
}

namespace {

Var toy_loss(Tape& t, const ParamBinding& b, const ModelConfig& c) {
  const std::vector<int> tokens{1, 4, 3, 7, 2, 1, 3, 8, 5, 2};
  const std::vector<ops::Target> tg{{1, 6}, {3, 7}, {7, 4}, {8, 5}};
  ForwardOutput o = forward(t, b, c, tokens, 2);
  return ops::masked_cross_entropy(t, o.logits, tg);
}

}  // namespace

TEST_CASE("toy model gradients match finite differences") {
  for (std::size_t layers : {1, 2}) {
    ModelConfig c = testing::tiny_config(layers);
    ParamMap p = init_params(c, 11 + layers);
    auto rep = grad_check(p, testing::all_names(p), [&](Tape& t, const ParamBinding& b) { return toy_loss(t, b, c); });
    INFO("layers " << layers << " worst " << rep.worst << " at " << rep.worst_name);
    CHECK(rep.worst < 1e-4);
  }
}

TEST_CASE("forward captures per-layer scores equal to attention_scores_exact") {
  ModelConfig c = testing::tiny_config(2);
  ParamMap p = init_params(c, 21);
  Tape t;
  ParamBinding b = bind_params(t, p, {});
  const std::vector<int> tokens{1, 4, 3, 7, 2};
  ForwardOutput o = forward(t, b, c, tokens, 1);
  REQUIRE(o.scores.size() == 2);
  CHECK(t.value(o.logits).shape == std::vector<std::size_t>{5, 9});
  CHECK(t.value(o.scores[0]).shape == std::vector<std::size_t>{2 * 5, 5});
}

TEST_CASE("adam first step and zero gradients") {
  ParamMap p;
  p["w"] = Tensor({1, 1}, {1.0});
  AdamState st;
  AdamHyper h;
  adam_step(p, {{"w", {1.0}}}, st, h, 0.1);
  CHECK(p["w"][0] == doctest::Approx(0.9).epsilon(1e-6));

  ParamMap q;
  q["m"] = Tensor({2, 2}, {1, 2, 3, 4});
  q["b"] = Tensor({2}, {1, 2});
  AdamState s2;
  h.weight_decay = 0.01;
  adam_step(q, {{"m", {0, 0, 0, 0}}, {"b", {0, 0}}}, s2, h, 0.1);
  CHECK(q["b"].data == std::vector<double>{1, 2});
  for (std::size_t i = 0; i < 4; ++i) CHECK(q["m"][i] == doctest::Approx((i + 1) * (1.0 - 0.1 * 0.01)).epsilon(1e-15));
}

TEST_CASE("adam rejects non-finite gradients by name") {
  ParamMap p;
  p["layer0.attn.wq"] = Tensor({1, 2}, {1, 2});
  AdamState st;
  try {
    adam_step(p, {{"layer0.attn.wq", {1.0, NAN}}}, st, {}, 0.1);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.offending() == "layer0.attn.wq");
    CHECK(e.category() == ErrorCategory::Divergence);
  }
  CHECK(p["layer0.attn.wq"].data == std::vector<double>{1, 2});
  CHECK(st.step == 0);
}

TEST_CASE("training steps are deterministic") {
  auto run = [] {
    ModelConfig c = testing::tiny_config(1);
    ParamMap p = init_params(c, 30);
    AdamState st;
    for (int step = 0; step < 3; ++step) {
      Tape t;
      ParamBinding b = bind_params(t, p, [](const std::string&) { return true; });
      t.backward(toy_loss(t, b, c));
      GradMap g;
      for (const auto& [name, v] : b.vars) g[name] = t.grad(v).empty() ? std::vector<double>(p[name].numel()) : t.grad(v);
      adam_step(p, g, st, {}, 1e-2);
    }
    return p;
  };
  ParamMap a = run(), b = run();
  for (const auto& [name, t] : a) CHECK(t.data == b.at(name).data);
}

TEST_CASE("learning-rate schedule") {
  CHECK(scheduled_lr(0, 100, 10, 1.0) == doctest::Approx(0.1));
  CHECK(scheduled_lr(9, 100, 10, 1.0) == doctest::Approx(1.0));
  CHECK(scheduled_lr(10, 100, 10, 1.0) == doctest::Approx(1.0));
  CHECK(scheduled_lr(55, 100, 10, 1.0) == doctest::Approx(0.5));
  CHECK(scheduled_lr(100, 100, 10, 1.0) == doctest::Approx(0.0));
}

TEST_CASE("checkpoint round trip") {
  ModelConfig c = testing::tiny_config(2);
  ParamMap p = init_params(c, 40);
  auto path = std::filesystem::temp_directory_path() / "attnlr_test_ckpt.prms";
  io::save_checkpoint(path, c, p);
  io::Checkpoint back = io::load_checkpoint(path);
  CHECK(back.config.layers == 2);
  CHECK(back.config.vocab == 9);
  CHECK(back.config.init_std == 0.5);
  CHECK(back.params.size() == p.size());
  for (const auto& [name, t] : p) {
    CHECK(back.params.at(name).shape == t.shape);
    CHECK(back.params.at(name).data == t.data);
  }
  std::vector<char> bytes = io::encode_prms(p);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "PRMS");
  bytes[0] = 'X';
  CHECK_THROWS_AS(io::decode_prms(bytes), Error);
  bytes = io::encode_prms(p);
  bytes.pop_back();
  CHECK_THROWS_AS(io::decode_prms(bytes), Error);
  std::filesystem::remove(path);
}
