#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "attnlr/corpus.hpp"
#include "attnlr/model.hpp"
#include "attnlr/optim.hpp"
#include "attnlr/score_dump.hpp"

namespace attnlr::lm {

struct TrainHyper {
  std::size_t batch = 64;
  std::uint64_t steps = 20000;
  std::uint64_t warmup = 500;
  nn::AdamHyper adam;
  double mask_rate = 0.15;
  std::uint64_t eval_every = 500;
  std::size_t eval_examples = 512;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MetricRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double mlm_acc = 0.0;
};

std::string metrics_csv(const std::vector<MetricRow>& rows);

// A fixed, pre-masked evaluation set.
struct EvalSet {
  std::vector<int> tokens;  // count * n
  std::vector<nn::ops::Target> targets;
  std::size_t count = 0;
};

EvalSet make_eval_set(const CorpusSpec& spec, std::size_t count, double mask_rate, std::uint64_t seed);

struct EvalResult {
  double loss = 0.0;     // mean over all targets
  double accuracy = 0.0; // masked-token top-1
  std::size_t targets = 0;
};

EvalResult evaluate(const nn::ModelConfig& cfg, const nn::ParamMap& params, const EvalSet& set,
                    const nn::ScoreFn& score_fn = {}, std::size_t chunk = 64);

struct TrainJob {
  nn::ModelConfig model;
  nn::ParamMap init;
  CorpusSpec corpus;
  TrainHyper hyper;
  nn::TrainablePredicate trainable;  // empty: every parameter
  nn::ScoreFn score_fn;              // empty: exact attention
  std::vector<std::uint64_t> checkpoint_steps;
  std::function<void(std::uint64_t step, const nn::ParamMap&)> on_checkpoint;
  // Called after every optimizer step, e.g. to verify tying invariants.
  std::function<void(std::uint64_t step, const nn::ParamMap&)> after_step;
  // Receives the last finite parameters before a DivergenceError propagates.
  std::function<void(std::uint64_t step, const nn::ParamMap&)> on_divergence;
};

struct TrainResult {
  nn::ParamMap params;
  std::vector<MetricRow> metrics;
};

TrainResult train(const TrainJob& job);

// Streams pre-softmax scores of unmasked capture-stream sequences in
// (example, layer, head) order.
void capture_scores(const nn::ModelConfig& cfg, const nn::ParamMap& params, const CorpusSpec& corpus,
                    std::size_t num_examples, ScoreSink& sink, std::size_t chunk = 32);

}  // namespace attnlr::lm
