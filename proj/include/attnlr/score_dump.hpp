#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <vector>

namespace attnlr {

// One pre-softmax, sqrt(d)-scaled attention matrix for (example, layer, head).
struct ScoreSample {
  std::uint32_t layer = 0;
  std::uint32_t head = 0;
  std::uint64_t example = 0;
  std::uint32_t n = 0;
  std::vector<float> scores;  // n*n, row-major

  float at(std::size_t i, std::size_t j) const { return scores[i * n + j]; }
};

class ScoreSink {
 public:
  virtual ~ScoreSink() = default;
  virtual void accept(const ScoreSample& sample) = 0;
};

class VectorSink : public ScoreSink {
 public:
  void accept(const ScoreSample& sample) override { samples.push_back(sample); }
  std::vector<ScoreSample> samples;
};

struct AtnsHeader {
  std::uint32_t layers = 0;
  std::uint32_t heads = 0;
  std::uint32_t n = 0;
  std::uint64_t count = 0;
};

inline constexpr std::uint32_t kAtnsVersion = 1;
inline constexpr std::size_t kAtnsHeaderBytes = 4 + 4 + 4 * 3 + 8;

// Streams an "ATNS" score dump. Samples must arrive in (example, layer, head)
// order and exactly header.count of them; close() renames the temp file onto
// the final path. Destroying an unclosed writer discards the temp file.
class AtnsWriter : public ScoreSink {
 public:
  AtnsWriter(std::filesystem::path path, AtnsHeader header);
  ~AtnsWriter() override;
  AtnsWriter(const AtnsWriter&) = delete;
  AtnsWriter& operator=(const AtnsWriter&) = delete;

  void accept(const ScoreSample& sample) override;
  void close();

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_;
  AtnsHeader header_;
  std::ofstream out_;
  std::uint64_t written_ = 0;
  bool closed_ = false;
};

// Sequential reader; samples are re-labelled with (example, layer, head)
// from their position in the declared order.
class AtnsReader {
 public:
  explicit AtnsReader(const std::filesystem::path& path);

  const AtnsHeader& header() const { return header_; }
  std::optional<ScoreSample> next();
  std::uint64_t position() const { return read_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  AtnsHeader header_;
  std::uint64_t read_ = 0;
};

// Reads every sample of a dump and forwards it.
void replay(const std::filesystem::path& path, ScoreSink& sink);

}  // namespace attnlr
