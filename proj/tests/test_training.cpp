#include <doctest.h>

#include <algorithm>
#include <map>

#include "attnlr/trainer.hpp"

using namespace attnlr;
using namespace attnlr::lm;

namespace {

TrainJob toy_job(Generator g, std::uint64_t steps) {
  TrainJob job;
  job.corpus.generator = g;
  job.corpus.seed = 3;
  job.hyper.batch = 32;
  job.hyper.steps = steps;
  job.hyper.warmup = 100;
  job.hyper.adam.lr = 1e-3;
  job.hyper.eval_every = 500;
  job.hyper.eval_examples = 512;
  job.hyper.seed = 4;
  job.init = nn::init_params(job.model, 5);
  return job;
}

// Accuracy of always predicting the most frequent target token.
double majority_accuracy(const CorpusSpec& spec, std::size_t count, double rate, std::uint64_t seed) {
  EvalSet set = make_eval_set(spec, count, rate, seed);
  std::map<int, std::size_t> freq;
  for (const auto& t : set.targets) ++freq[t.token];
  std::size_t best = 0;
  for (const auto& [tok, c] : freq) best = std::max(best, c);
  return static_cast<double>(best) / static_cast<double>(set.targets.size());
}

}  // namespace

TEST_CASE("the toy model learns to copy within 5k steps") {
  TrainJob job = toy_job(Generator::CopyWithNoise, 5000);
  TrainResult r = train(job);
  double best = 0.0;
  for (const auto& m : r.metrics) best = std::max(best, m.mlm_acc);

  // A target is recoverable when its own input or its copy partner's input
  // still shows the original token. With 15% masking about one target in
  // eight has neither, which caps full accuracy near 0.88.
  const std::size_t n = job.corpus.seq_len, half = (n - 2) / 2;
  EvalSet all = make_eval_set(job.corpus, 512, job.hyper.mask_rate, 21);
  EvalSet recoverable = all;
  recoverable.targets.clear();
  for (const auto& t : all.targets) {
    const std::size_t ex = t.row / n, pos = t.row % n;
    const std::vector<int> orig = gen_sequence(job.corpus, Stream::HeldOut, ex);
    const std::size_t partner = pos <= half ? pos + half : pos - half;
    if (all.tokens[t.row] == orig[pos] || all.tokens[ex * n + partner] == orig[partner]) recoverable.targets.push_back(t);
  }
  const double ceiling = double(recoverable.targets.size()) / double(all.targets.size());
  const double acc_recoverable = evaluate(job.model, r.params, recoverable).accuracy;
  INFO("best accuracy " << best << ", recoverable fraction " << ceiling << ", accuracy on recoverable "
                        << acc_recoverable);
  CHECK(acc_recoverable > 0.90);
  CHECK(best > 0.95);
}

TEST_CASE("trained baseline beats the majority class") {
  for (Generator g : {Generator::Markov1, Generator::NestedBrackets}) {
    TrainJob job = toy_job(g, 600);
    TrainResult r = train(job);
    const double majority = majority_accuracy(job.corpus, 512, job.hyper.mask_rate, job.hyper.seed);
    INFO(generator_name(g) << ": " << r.metrics.back().mlm_acc << " vs majority " << majority);
    CHECK(r.metrics.back().mlm_acc > majority);
  }
}
