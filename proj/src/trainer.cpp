#include "attnlr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "attnlr/error.hpp"

namespace attnlr::lm {

void TrainHyper::validate() const {
  if (batch == 0) fail(ErrorCategory::Config, "train: batch must be positive");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) fail(ErrorCategory::Config, "train: mask_rate must lie in (0, 1)");
  if (eval_examples == 0) fail(ErrorCategory::Config, "train: eval_examples must be positive");
  if (!(adam.lr > 0.0)) fail(ErrorCategory::Config, "train: learning rate must be positive");
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "step,loss,mlm_acc\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g\n", static_cast<unsigned long long>(r.step), r.loss, r.mlm_acc);
    out += buf;
  }
  return out;
}

namespace {

void check_dims(const nn::ModelConfig& cfg, const CorpusSpec& corpus) {
  if (cfg.seq_len != corpus.seq_len) fail(ErrorCategory::DimMismatch, "model and corpus sequence lengths differ");
  if (cfg.vocab != corpus.vocab_size) fail(ErrorCategory::DimMismatch, "model and corpus vocabulary sizes differ");
}

// Appends one masked sequence to a flat batch; targets index rows b·n + p.
void append_masked(const MaskedSequence& m, std::size_t row0, std::vector<int>& tokens,
                   std::vector<nn::ops::Target>& targets) {
  tokens.insert(tokens.end(), m.input.begin(), m.input.end());
  for (std::size_t t = 0; t < m.positions.size(); ++t) targets.push_back({row0 + m.positions[t], m.targets[t]});
}

enum : std::uint64_t { kSaltTrainMask = 11, kSaltEvalMask = 12 };

}  // namespace

EvalSet make_eval_set(const CorpusSpec& spec, std::size_t count, double mask_rate, std::uint64_t seed) {
  EvalSet set;
  set.count = count;
  for (std::size_t i = 0; i < count; ++i) {
    MaskedSequence m = mlm_mask(gen_sequence(spec, Stream::HeldOut, i), mask_rate, mix_seed(seed, kSaltEvalMask, i),
                                spec.vocab_size);
    append_masked(m, i * spec.seq_len, set.tokens, set.targets);
  }
  return set;
}

EvalResult evaluate(const nn::ModelConfig& cfg, const nn::ParamMap& params, const EvalSet& set,
                    const nn::ScoreFn& score_fn, std::size_t chunk) {
  const std::size_t n = cfg.seq_len;
  if (set.tokens.size() != set.count * n) fail(ErrorCategory::DimMismatch, "evaluate: eval set built for another sequence length");
  EvalResult r;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::size_t next_target = 0;
  for (std::size_t start = 0; start < set.count; start += chunk) {
    const std::size_t b = std::min(chunk, set.count - start);
    nn::Tape tape;
    nn::ParamBinding pb = nn::bind_params(tape, params, {});
    std::span<const int> toks(set.tokens.data() + start * n, b * n);
    nn::ForwardOutput out = nn::forward(tape, pb, cfg, toks, b, score_fn);
    const nn::Tensor& logits = tape.value(out.logits);
    const std::size_t v = logits.cols();
    for (; next_target < set.targets.size() && set.targets[next_target].row < (start + b) * n; ++next_target) {
      const auto& t = set.targets[next_target];
      const double* row = logits.data.data() + (t.row - start * n) * v;
      const double mx = *std::max_element(row, row + v);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
      loss_sum += std::log(z) + mx - row[t.token];
      // Ties resolve to the lowest id, matching max_element.
      if (static_cast<int>(std::max_element(row, row + v) - row) == t.token) ++correct;
    }
  }
  r.targets = set.targets.size();
  if (r.targets > 0) {
    r.loss = loss_sum / static_cast<double>(r.targets);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.targets);
  }
  return r;
}

TrainResult train(const TrainJob& job) {
  job.model.validate();
  job.corpus.validate();
  job.hyper.validate();
  check_dims(job.model, job.corpus);
  const TrainHyper& h = job.hyper;
  const std::size_t n = job.model.seq_len;

  TrainResult res;
  res.params = job.init;
  nn::AdamState state;
  const EvalSet eval_set = make_eval_set(job.corpus, h.eval_examples, h.mask_rate, h.seed);
  auto record_eval = [&](std::uint64_t step) {
    EvalResult e = evaluate(job.model, res.params, eval_set, job.score_fn);
    res.metrics.push_back({step, e.loss, e.accuracy});
  };
  auto maybe_checkpoint = [&](std::uint64_t step) {
    if (job.on_checkpoint && std::find(job.checkpoint_steps.begin(), job.checkpoint_steps.end(), step) != job.checkpoint_steps.end())
      job.on_checkpoint(step, res.params);
  };

  record_eval(0);
  maybe_checkpoint(0);
  for (std::uint64_t step = 0; step < h.steps; ++step) {
    std::vector<int> tokens;
    std::vector<nn::ops::Target> targets;
    tokens.reserve(h.batch * n);
    for (std::size_t b = 0; b < h.batch; ++b) {
      const std::uint64_t idx = step * h.batch + b;
      MaskedSequence m = mlm_mask(gen_sequence(job.corpus, Stream::Train, idx), h.mask_rate,
                                  mix_seed(h.seed, kSaltTrainMask, idx), job.corpus.vocab_size);
      append_masked(m, b * n, tokens, targets);
    }
    nn::Tape tape;
    nn::ParamBinding pb = nn::bind_params(tape, res.params, job.trainable ? job.trainable : [](const std::string&) { return true; });
    nn::ForwardOutput out = nn::forward(tape, pb, job.model, tokens, h.batch, job.score_fn);
    nn::Var loss = nn::ops::masked_cross_entropy(tape, out.logits, targets);
    if (!std::isfinite(tape.value(loss)[0])) {
      if (job.on_divergence) job.on_divergence(step, res.params);
      throw DivergenceError("training loss became non-finite at step " + std::to_string(step), "loss");
    }
    tape.backward(loss);
    nn::GradMap grads;
    for (const auto& [name, var] : pb.vars) {
      if (!tape.requires_grad(var)) continue;
      const auto& g = tape.grad(var);
      grads[name] = g.empty() ? std::vector<double>(res.params.at(name).numel(), 0.0) : g;
    }
    try {
      nn::adam_step(res.params, grads, state, h.adam, nn::scheduled_lr(step, h.steps, h.warmup, h.adam.lr));
    } catch (const DivergenceError&) {
      if (job.on_divergence) job.on_divergence(step, res.params);
      throw;
    }
    if (job.after_step) job.after_step(step + 1, res.params);
    if (h.eval_every > 0 && (step + 1) % h.eval_every == 0 && step + 1 != h.steps) record_eval(step + 1);
    maybe_checkpoint(step + 1);
  }
  if (h.steps > 0) record_eval(h.steps);
  return res;
}

void capture_scores(const nn::ModelConfig& cfg, const nn::ParamMap& params, const CorpusSpec& corpus,
                    std::size_t num_examples, ScoreSink& sink, std::size_t chunk) {
  cfg.validate();
  check_dims(cfg, corpus);
  const std::size_t n = cfg.seq_len;
  for (std::size_t start = 0; start < num_examples; start += chunk) {
    const std::size_t b = std::min(chunk, num_examples - start);
    std::vector<int> tokens;
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<int> s = gen_sequence(corpus, Stream::Capture, start + i);
      tokens.insert(tokens.end(), s.begin(), s.end());
    }
    nn::Tape tape;
    nn::ParamBinding pb = nn::bind_params(tape, params, {});
    nn::ForwardOutput out = nn::forward(tape, pb, cfg, tokens, b);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t l = 0; l < cfg.layers; ++l) {
        const nn::Tensor& s = tape.value(out.scores[l]);
        for (std::size_t hh = 0; hh < cfg.heads; ++hh) {
          ScoreSample sample;
          sample.layer = static_cast<std::uint32_t>(l);
          sample.head = static_cast<std::uint32_t>(hh);
          sample.example = start + i;
          sample.n = static_cast<std::uint32_t>(n);
          const double* src = s.data.data() + (i * cfg.heads + hh) * n * n;
          sample.scores.assign(src, src + n * n);
          sink.accept(sample);
        }
      }
    }
  }
}

}  // namespace attnlr::lm
