#include "attnlr/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "attnlr/error.hpp"

namespace attnlr::lm {

std::string generator_name(Generator g) {
  switch (g) {
    case Generator::Markov1: return "markov1";
    case Generator::NestedBrackets: return "nested-brackets";
    case Generator::CopyWithNoise: return "copy-with-noise";
  }
  return "?";
}

Generator parse_generator(const std::string& s) {
  if (s == "markov1") return Generator::Markov1;
  if (s == "nested-brackets") return Generator::NestedBrackets;
  if (s == "copy-with-noise") return Generator::CopyWithNoise;
  fail(ErrorCategory::Config, "unknown corpus generator '" + s + "'");
}

void CorpusSpec::validate() const {
  if (vocab_size < 8) fail(ErrorCategory::Domain, "corpus: vocab_size must be at least 8");
  if (seq_len < 3) fail(ErrorCategory::Domain, "corpus: seq_len must be at least 3");
  if (generator == Generator::Markov1 && 2 * band + 1 > content_tokens())
    fail(ErrorCategory::Domain, "corpus: markov band wider than the content vocabulary");
  if (!(noise >= 0.0 && noise <= 1.0)) fail(ErrorCategory::Domain, "corpus: noise must lie in [0, 1]");
  if (generator == Generator::NestedBrackets && (max_depth == 0 || 2 * max_depth >= content_tokens()))
    fail(ErrorCategory::Domain, "corpus: nested-brackets needs 1 <= max_depth < content_tokens / 2");
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix_seed(mix_seed(a, b), c); }

Matrix markov_transition(const CorpusSpec& spec) {
  spec.validate();
  const auto m = static_cast<long>(spec.content_tokens());
  const long band = static_cast<long>(spec.band);
  Matrix t = Matrix::Zero(m, m);
  double total = 0.0;
  for (long d = -band; d <= band; ++d) total += static_cast<double>(band + 1 - std::abs(d));
  for (long a = 0; a < m; ++a) {
    for (long d = -band; d <= band; ++d) t(a, ((a + d) % m + m) % m) += static_cast<double>(band + 1 - std::abs(d)) / total;
  }
  return t;
}

namespace {

std::vector<int> markov(const CorpusSpec& spec, std::mt19937_64& rng) {
  const std::size_t m = spec.content_tokens();
  const long band = static_cast<long>(spec.band);
  std::vector<double> w;
  for (long d = -band; d <= band; ++d) w.push_back(static_cast<double>(band + 1 - std::abs(d)));
  std::discrete_distribution<long> step(w.begin(), w.end());
  std::uniform_int_distribution<std::size_t> first(0, m - 1);
  std::vector<int> content(spec.seq_len - 2);
  long cur = static_cast<long>(first(rng));
  for (std::size_t i = 0; i < content.size(); ++i) {
    if (i > 0) cur = ((cur + step(rng) - band) % static_cast<long>(m) + static_cast<long>(m)) % static_cast<long>(m);
    content[i] = kFirstContent + static_cast<int>(cur);
  }
  return content;
}

std::vector<int> copy_with_noise(const CorpusSpec& spec, std::mt19937_64& rng) {
  const std::size_t c = spec.seq_len - 2;
  const std::size_t half = c / 2;
  std::uniform_int_distribution<int> tok(kFirstContent, static_cast<int>(spec.vocab_size) - 1);
  std::bernoulli_distribution flip(spec.noise);
  std::vector<int> content(c);
  for (std::size_t i = 0; i < half; ++i) content[i] = tok(rng);
  for (std::size_t i = 0; i < half; ++i) content[half + i] = flip(rng) ? tok(rng) : content[i];
  if (c % 2) content[c - 1] = tok(rng);
  return content;
}

// Well-nested bracket sequence over max_depth bracket types (opening token
// 4+2t, closing 4+2t+1); the remaining content ids are filler.
std::vector<int> nested_brackets(const CorpusSpec& spec, std::mt19937_64& rng) {
  const std::size_t c = spec.seq_len - 2;
  const int types = static_cast<int>(spec.max_depth);
  const int filler_lo = kFirstContent + 2 * types;
  const int filler_hi = static_cast<int>(spec.vocab_size) - 1;
  std::uniform_int_distribution<int> type(0, types - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> stack, content;
  for (std::size_t i = 0; i < c; ++i) {
    const std::size_t left = c - i;
    const bool must_close = stack.size() >= left;
    const bool can_open = stack.size() + 1 < left && stack.size() < spec.max_depth;
    const double r = u(rng);
    if (!stack.empty() && (must_close || r < 0.35)) {
      content.push_back(kFirstContent + 2 * stack.back() + 1);
      stack.pop_back();
    } else if (can_open && r < 0.75) {
      stack.push_back(type(rng));
      content.push_back(kFirstContent + 2 * stack.back());
    } else {
      content.push_back(std::uniform_int_distribution<int>(filler_lo, filler_hi)(rng));
    }
  }
  return content;
}

}  // namespace

std::vector<int> gen_sequence(const CorpusSpec& spec, Stream stream, std::uint64_t index) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(stream), index));
  std::vector<int> content;
  switch (spec.generator) {
    case Generator::Markov1: content = markov(spec, rng); break;
    case Generator::CopyWithNoise: content = copy_with_noise(spec, rng); break;
    case Generator::NestedBrackets: content = nested_brackets(spec, rng); break;
  }
  std::vector<int> seq;
  seq.reserve(spec.seq_len);
  seq.push_back(kCls);
  seq.insert(seq.end(), content.begin(), content.end());
  seq.push_back(kSep);
  return seq;
}

std::vector<std::vector<int>> gen_corpus(const CorpusSpec& spec, std::size_t count, Stream stream) {
  std::vector<std::vector<int>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_sequence(spec, stream, i));
  return out;
}

MaskedSequence mlm_mask(const std::vector<int>& seq, double mask_rate, std::uint64_t seed, std::size_t vocab_size) {
  if (seq.size() < 3) fail(ErrorCategory::Domain, "mlm_mask: sequence shorter than 3");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) fail(ErrorCategory::Domain, "mlm_mask: mask_rate must lie in (0, 1)");
  if (vocab_size <= static_cast<std::size_t>(kFirstContent)) fail(ErrorCategory::Domain, "mlm_mask: vocabulary has no content tokens");
  std::mt19937_64 rng(seed);
  const std::size_t c = seq.size() - 2;
  const double expected = static_cast<double>(c) * mask_rate;
  std::size_t count = static_cast<std::size_t>(std::floor(expected));
  if (std::bernoulli_distribution(expected - std::floor(expected))(rng)) ++count;
  count = std::min(count, c);

  std::vector<std::size_t> pos(c);
  for (std::size_t i = 0; i < c; ++i) pos[i] = i + 1;
  // Partial Fisher-Yates: the first `count` entries are a uniform sample.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, c - 1);
    std::swap(pos[i], pos[pick(rng)]);
  }
  pos.resize(count);
  std::sort(pos.begin(), pos.end());

  MaskedSequence out;
  out.input = seq;
  out.positions = pos;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> tok(kFirstContent, static_cast<int>(vocab_size) - 1);
  for (std::size_t p : pos) {
    out.targets.push_back(seq[p]);
    const double r = u(rng);
    if (r < 0.8) {
      out.input[p] = kMask;
    } else if (r < 0.9) {
      out.input[p] = tok(rng);
    }
  }
  return out;
}

}  // namespace attnlr::lm
