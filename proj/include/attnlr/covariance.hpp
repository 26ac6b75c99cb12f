#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "attnlr/numerics.hpp"
#include "attnlr/score_dump.hpp"

namespace attnlr::cov {

enum class ScopeKind { Global, Layer, Query };

struct Scope {
  ScopeKind kind = ScopeKind::Global;
  std::size_t index = 0;  // layer l or query row i

  static Scope global() { return {ScopeKind::Global, 0}; }
  static Scope layer(std::size_t l) { return {ScopeKind::Layer, l}; }
  static Scope query(std::size_t i) { return {ScopeKind::Query, i}; }

  // "global", "layer3", "query17"
  std::string id() const;
  static Scope parse(const std::string& id);
  bool operator==(const Scope&) const = default;
};

// Streaming second-moment matrix (no mean subtraction) of vectorized scores.
// Global and layer scopes see n^2-vectors (row-major), query(i) sees row i.
// With center_rows each score row has its own mean removed first.
class CovarianceAccumulator {
 public:
  CovarianceAccumulator(Scope scope, std::size_t n, bool center_rows = false);

  void accumulate(const ScoreSample& sample);
  // Adds one already-vectorized sample of length dim().
  void accumulate_vector(std::span<const double> a);
  void merge(const CovarianceAccumulator& other);

  SymMatrix finalize() const;

  const Scope& scope() const { return scope_; }
  std::size_t n() const { return n_; }
  std::size_t dim() const { return dim_; }
  std::uint64_t count() const { return count_; }
  bool center_rows() const { return center_rows_; }
  // Mean over samples of sum_rows n * mean_row^2, measured before any
  // centering: the energy carried by per-row means.
  double row_mean_energy() const;

 private:
  Scope scope_;
  std::size_t n_;
  std::size_t dim_;
  bool center_rows_;
  Matrix upper_;  // only the upper triangle is maintained
  std::uint64_t count_ = 0;
  double row_mean_energy_sum_ = 0.0;
};

CovarianceAccumulator merge(const CovarianceAccumulator& a, const CovarianceAccumulator& b);

// Merges shards in ascending shard order.
CovarianceAccumulator merge_shards(const std::vector<CovarianceAccumulator>& shards);

// Mean-subtracted second moment of a stream of samples at the given scope.
SymMatrix mean_subtracted(std::span<const ScoreSample> samples, Scope scope, std::size_t n);

struct ScopeRequest {
  bool global = true;
  bool layers = true;
  bool queries = true;
  bool mean_subtracted = true;  // adds centered global and query scopes
  bool allow_large_global = false;
};

// Routes samples to every requested accumulator: global gets all, layer(l)
// gets layer-l samples, query(i) gets row i of every sample.
class CovarianceSet : public ScoreSink {
 public:
  CovarianceSet(std::size_t layers, std::size_t n, const ScopeRequest& request);
  void accept(const ScoreSample& sample) override;

  std::vector<CovarianceAccumulator>& accumulators() { return accs_; }
  const std::vector<CovarianceAccumulator>& accumulators() const { return accs_; }
  std::uint64_t samples() const { return samples_; }

 private:
  std::size_t layers_;
  std::size_t n_;
  std::vector<CovarianceAccumulator> accs_;
  std::uint64_t samples_ = 0;
};

struct CovarianceEntry {
  std::string scope;  // Scope::id()
  bool mean_subtracted = false;
  std::string path;   // relative to the manifest directory
  std::uint64_t count = 0;
  double trace = 0.0;
  double row_mean_energy = 0.0;
};

struct CovarianceManifest {
  std::string id;
  std::string source_dump;
  std::uint64_t checkpoint_step = 0;
  std::size_t layers = 0, heads = 0, n = 0;
  std::uint64_t samples = 0;
  std::vector<CovarianceEntry> entries;
  std::filesystem::path dir;  // set on load/save

  const CovarianceEntry* find(const std::string& scope, bool mean_subtracted = false) const;
  SymMatrix load(const std::string& scope, bool mean_subtracted = false) const;
  std::vector<SymMatrix> load_queries(bool mean_subtracted = false) const;
};

// Finalizes every accumulator of the set into MATX files under dir and writes
// dir/manifest.json. Throws EmptyAccumulator if no samples were seen.
CovarianceManifest write_covariances(const std::filesystem::path& dir, const CovarianceSet& set,
                                     const AtnsHeader& header, const std::string& source_dump,
                                     std::uint64_t checkpoint_step,
                                     std::vector<std::filesystem::path>* written = nullptr);

CovarianceManifest load_manifest(const std::filesystem::path& manifest_path);

}  // namespace attnlr::cov
