#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "attnlr/numerics.hpp"

namespace attnlr::lm {

inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kMask = 3;
inline constexpr int kFirstContent = 4;

enum class Generator { Markov1, NestedBrackets, CopyWithNoise };

std::string generator_name(Generator g);
Generator parse_generator(const std::string& s);

struct CorpusSpec {
  std::size_t vocab_size = 64;
  std::size_t seq_len = 32;
  Generator generator = Generator::Markov1;
  std::size_t band = 2;      // markov1: half-width of the cyclic transition band
  double noise = 0.0;        // copy-with-noise: per-position replacement rate
  std::size_t max_depth = 4; // nested-brackets
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t content_tokens() const { return vocab_size - kFirstContent; }
};

// Independent sequence streams drawn from one spec.
enum class Stream : std::uint64_t { Train = 0, HeldOut = 1, Capture = 2 };

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c);

// Sequence `index` of a stream: [CLS] content... [SEP], length seq_len.
std::vector<int> gen_sequence(const CorpusSpec& spec, Stream stream, std::uint64_t index);
std::vector<std::vector<int>> gen_corpus(const CorpusSpec& spec, std::size_t count, Stream stream = Stream::Train);

// Row-stochastic markov1 transition matrix over content-token offsets.
Matrix markov_transition(const CorpusSpec& spec);

struct MaskedSequence {
  std::vector<int> input;
  std::vector<std::size_t> positions;  // sorted
  std::vector<int> targets;            // original tokens at positions
};

// BERT-style masking of the content positions 1..n-2: the target count is
// floor(c·rate) plus a Bernoulli draw for the remainder, so its mean is
// exactly c·rate; targets become [MASK] / a random content token / unchanged
// with probability 0.8 / 0.1 / 0.1.
MaskedSequence mlm_mask(const std::vector<int>& seq, double mask_rate, std::uint64_t seed, std::size_t vocab_size);

}  // namespace attnlr::lm
