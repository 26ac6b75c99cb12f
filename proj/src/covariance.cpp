#include "attnlr/covariance.hpp"

#include <algorithm>

#include "attnlr/binary_io.hpp"
#include "attnlr/error.hpp"
#include "attnlr/matx.hpp"
#include "json.hpp"

namespace attnlr::cov {

namespace {

Eigen::Index ix(std::size_t i) { return static_cast<Eigen::Index>(i); }

std::size_t scope_dim(const Scope& s, std::size_t n) { return s.kind == ScopeKind::Query ? n : n * n; }

}  // namespace

std::string Scope::id() const {
  switch (kind) {
    case ScopeKind::Global: return "global";
    case ScopeKind::Layer: return "layer" + std::to_string(index);
    case ScopeKind::Query: return "query" + std::to_string(index);
  }
  return "global";
}

Scope Scope::parse(const std::string& id) {
  auto number = [&](std::size_t offset) {
    try {
      return static_cast<std::size_t>(std::stoul(id.substr(offset)));
    } catch (const std::exception&) {
      fail(ErrorCategory::Config, "bad scope id '" + id + "'");
    }
  };
  if (id == "global") return global();
  if (id.rfind("layer", 0) == 0) return layer(number(5));
  if (id.rfind("query", 0) == 0) return query(number(5));
  fail(ErrorCategory::Config, "bad scope id '" + id + "'");
}

CovarianceAccumulator::CovarianceAccumulator(Scope scope, std::size_t n, bool center_rows)
    : scope_(scope), n_(n), dim_(scope_dim(scope, n)), center_rows_(center_rows) {
  if (n == 0) fail(ErrorCategory::Domain, "covariance: n must be positive");
  if (scope.kind == ScopeKind::Query && scope.index >= n) fail(ErrorCategory::Domain, "covariance: query row out of range");
  upper_ = Matrix::Zero(ix(dim_), ix(dim_));
}

void CovarianceAccumulator::accumulate(const ScoreSample& sample) {
  if (sample.n != n_ || sample.scores.size() != n_ * n_) {
    fail(ErrorCategory::DimMismatch, "covariance: sample dimension differs from accumulator");
  }
  if (scope_.kind == ScopeKind::Layer && sample.layer != scope_.index) {
    fail(ErrorCategory::DimMismatch, "covariance: sample layer does not match scope " + scope_.id());
  }
  std::vector<double> a(dim_);
  if (scope_.kind == ScopeKind::Query) {
    const std::size_t row = scope_.index;
    for (std::size_t j = 0; j < n_; ++j) a[j] = sample.scores[row * n_ + j];
  } else {
    for (std::size_t t = 0; t < dim_; ++t) a[t] = sample.scores[t];
  }
  accumulate_vector(a);
}

void CovarianceAccumulator::accumulate_vector(std::span<const double> a) {
  if (a.size() != dim_) fail(ErrorCategory::DimMismatch, "covariance: vector length differs from scope dimension");
  Vector v(ix(dim_));
  for (std::size_t t = 0; t < dim_; ++t) v(ix(t)) = a[t];
  const std::size_t rows = dim_ / n_;
  double energy = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double mean = v.segment(ix(r * n_), ix(n_)).mean();
    energy += static_cast<double>(n_) * mean * mean;
    if (center_rows_) v.segment(ix(r * n_), ix(n_)).array() -= mean;
  }
  row_mean_energy_sum_ += energy;
  upper_.selfadjointView<Eigen::Upper>().rankUpdate(v);
  ++count_;
}

void CovarianceAccumulator::merge(const CovarianceAccumulator& other) {
  if (!(other.scope_ == scope_) || other.n_ != n_ || other.center_rows_ != center_rows_) {
    fail(ErrorCategory::DimMismatch, "covariance: cannot merge accumulators of different scope");
  }
  upper_.triangularView<Eigen::Upper>() += other.upper_;
  count_ += other.count_;
  row_mean_energy_sum_ += other.row_mean_energy_sum_;
}

SymMatrix CovarianceAccumulator::finalize() const {
  if (count_ == 0) fail(ErrorCategory::EmptyAccumulator, "covariance: no samples accumulated for scope " + scope_.id());
  Matrix m = upper_.triangularView<Eigen::Upper>();
  m /= static_cast<double>(count_);
  return SymMatrix::from_upper(std::move(m));
}

double CovarianceAccumulator::row_mean_energy() const {
  return count_ ? row_mean_energy_sum_ / static_cast<double>(count_) : 0.0;
}

CovarianceAccumulator merge(const CovarianceAccumulator& a, const CovarianceAccumulator& b) {
  CovarianceAccumulator out = a;
  out.merge(b);
  return out;
}

CovarianceAccumulator merge_shards(const std::vector<CovarianceAccumulator>& shards) {
  if (shards.empty()) fail(ErrorCategory::Domain, "covariance: no shards to merge");
  CovarianceAccumulator out = shards.front();
  for (std::size_t s = 1; s < shards.size(); ++s) out.merge(shards[s]);
  return out;
}

SymMatrix mean_subtracted(std::span<const ScoreSample> samples, Scope scope, std::size_t n) {
  if (scope.kind == ScopeKind::Layer) fail(ErrorCategory::Domain, "mean_subtracted: global or per-query scope only");
  CovarianceAccumulator acc(scope, n, true);
  for (const auto& s : samples) acc.accumulate(s);
  return acc.finalize();
}

CovarianceSet::CovarianceSet(std::size_t layers, std::size_t n, const ScopeRequest& request)
    : layers_(layers), n_(n) {
  if (request.global && n > 64 && !request.allow_large_global) {
    fail(ErrorCategory::Config, "global scope at n > 64 needs allow_large_global (n^4 doubles)");
  }
  if (request.global) accs_.emplace_back(Scope::global(), n);
  if (request.layers) {
    for (std::size_t l = 0; l < layers; ++l) accs_.emplace_back(Scope::layer(l), n);
  }
  if (request.queries) {
    for (std::size_t i = 0; i < n; ++i) accs_.emplace_back(Scope::query(i), n);
  }
  if (request.mean_subtracted) {
    if (request.global) accs_.emplace_back(Scope::global(), n, true);
    if (request.queries) {
      for (std::size_t i = 0; i < n; ++i) accs_.emplace_back(Scope::query(i), n, true);
    }
  }
}

void CovarianceSet::accept(const ScoreSample& sample) {
  if (sample.layer >= layers_) fail(ErrorCategory::DimMismatch, "covariance: sample layer out of range");
  for (auto& acc : accs_) {
    if (acc.scope().kind == ScopeKind::Layer && acc.scope().index != sample.layer) continue;
    acc.accumulate(sample);
  }
  ++samples_;
}

const CovarianceEntry* CovarianceManifest::find(const std::string& scope, bool mean_subtracted) const {
  for (const auto& e : entries) {
    if (e.scope == scope && e.mean_subtracted == mean_subtracted) return &e;
  }
  return nullptr;
}

SymMatrix CovarianceManifest::load(const std::string& scope, bool mean_subtracted) const {
  const auto* e = find(scope, mean_subtracted);
  if (!e) fail(ErrorCategory::Config, "covariance manifest has no scope '" + scope + "'" + (mean_subtracted ? " (mean-subtracted)" : ""));
  return io::load_sym_matx(dir / e->path);
}

std::vector<SymMatrix> CovarianceManifest::load_queries(bool mean_subtracted) const {
  std::vector<SymMatrix> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(load(Scope::query(i).id(), mean_subtracted));
  return out;
}

CovarianceManifest write_covariances(const std::filesystem::path& dir, const CovarianceSet& set,
                                     const AtnsHeader& header, const std::string& source_dump,
                                     std::uint64_t checkpoint_step,
                                     std::vector<std::filesystem::path>* written) {
  if (set.samples() == 0) fail(ErrorCategory::EmptyAccumulator, "covariance: the score dump holds no samples");
  CovarianceManifest man;
  man.source_dump = source_dump;
  man.checkpoint_step = checkpoint_step;
  man.layers = header.layers;
  man.heads = header.heads;
  man.n = header.n;
  man.samples = set.samples();
  man.dir = dir;
  std::string hash_input;
  for (const auto& acc : set.accumulators()) {
    CovarianceEntry e;
    e.scope = acc.scope().id();
    e.mean_subtracted = acc.center_rows();
    e.path = (e.mean_subtracted ? "centered_" : "") + e.scope + ".matx";
    e.count = acc.count();
    const SymMatrix c = acc.finalize();
    e.trace = c.trace();
    e.row_mean_energy = acc.row_mean_energy();
    const auto bytes = io::encode_matx(c.dense());
    hash_input += io::hex64(io::fnv1a64(std::string_view(bytes.data(), bytes.size())));
    io::write_file_atomic(dir / e.path, bytes);
    if (written) written->push_back(dir / e.path);
    man.entries.push_back(e);
  }
  man.id = "cov-" + io::hex64(io::fnv1a64(hash_input));

  nlohmann::ordered_json doc;
  doc["format"] = "COVM";
  doc["version"] = 1;
  doc["id"] = man.id;
  doc["source_dump"] = man.source_dump;
  doc["checkpoint_step"] = man.checkpoint_step;
  doc["layers"] = man.layers;
  doc["heads"] = man.heads;
  doc["n"] = man.n;
  doc["samples"] = man.samples;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : man.entries) {
    arr.push_back({{"scope", e.scope}, {"mean_subtracted", e.mean_subtracted}, {"path", e.path},
                   {"count", e.count}, {"trace", e.trace}, {"row_mean_energy", e.row_mean_energy}});
  }
  doc["entries"] = std::move(arr);
  io::write_text_atomic(dir / "manifest.json", doc.dump(2) + "\n");
  if (written) written->push_back(dir / "manifest.json");
  return man;
}

CovarianceManifest load_manifest(const std::filesystem::path& manifest_path) {
  const auto bytes = io::read_file(manifest_path);
  CovarianceManifest man;
  try {
    const auto doc = nlohmann::json::parse(bytes.begin(), bytes.end());
    if (doc.value("format", "") != "COVM") fail(ErrorCategory::Format, "not a covariance manifest: " + manifest_path.string());
    man.id = doc.at("id").get<std::string>();
    man.source_dump = doc.value("source_dump", "");
    man.checkpoint_step = doc.value("checkpoint_step", std::uint64_t{0});
    man.layers = doc.at("layers").get<std::size_t>();
    man.heads = doc.at("heads").get<std::size_t>();
    man.n = doc.at("n").get<std::size_t>();
    man.samples = doc.at("samples").get<std::uint64_t>();
    for (const auto& j : doc.at("entries")) {
      CovarianceEntry e;
      e.scope = j.at("scope").get<std::string>();
      e.mean_subtracted = j.at("mean_subtracted").get<bool>();
      e.path = j.at("path").get<std::string>();
      e.count = j.at("count").get<std::uint64_t>();
      e.trace = j.at("trace").get<double>();
      e.row_mean_energy = j.value("row_mean_energy", 0.0);
      man.entries.push_back(e);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::Format, "malformed covariance manifest " + manifest_path.string() + ": " + e.what());
  }
  man.dir = manifest_path.parent_path();
  return man;
}

}  // namespace attnlr::cov
