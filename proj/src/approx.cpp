#include "attnlr/approx.hpp"

#include <algorithm>
#include <cmath>
#include <memory>


#include "attnlr/binary_io.hpp"
#include "json.hpp"
#include "attnlr/error.hpp"

namespace attnlr::approx {

using nn::Tensor;
using nn::Var;

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::Fixed: return "F";
    case Regime::Common: return "C";
    case Regime::PerLayer: return "P";
  }
  return "?";
}

Regime parse_regime(const std::string& s) {
  if (s == "F") return Regime::Fixed;
  if (s == "C") return Regime::Common;
  if (s == "P") return Regime::PerLayer;
  fail(ErrorCategory::Config, "unknown regime '" + s + "' (expected F, C or P)");
}

std::string r_param_name(Regime r, std::size_t layer, std::size_t row) {
  if (r == Regime::PerLayer) return "approx.layer" + std::to_string(layer) + ".row" + std::to_string(row) + ".R";
  return "approx.shared.row" + std::to_string(row) + ".R";
}

bool is_r_param(const std::string& name) { return name.rfind("approx.", 0) == 0; }

std::vector<std::size_t> default_layers(std::size_t layers) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l + 1 < layers; ++l) out.push_back(l);
  if (layers == 1) out.push_back(0);
  return out;
}

bool ApproxConfig::approximates(std::size_t layer) const {
  return std::find(layers.begin(), layers.end(), layer) != layers.end();
}

void ApproxConfig::validate(const nn::ModelConfig& model) const {
  if (plan.mode != recon::PlanMode::PerQuery) fail(ErrorCategory::Config, "approximate attention needs a per-query plan");
  plan.validate();
  if (plan.n != model.seq_len) fail(ErrorCategory::DimMismatch, "plan size differs from the model sequence length");
  for (std::size_t l : layers) {
    if (l >= model.layers) fail(ErrorCategory::DimMismatch, "approximated layer index out of range");
  }
}

namespace {

std::size_t rest_of(const recon::PartialPlan& plan) { return plan.n - plan.k; }

}  // namespace

Var approx_head_scores(nn::Tape& t, Var q, Var k, const recon::PartialPlan& plan, std::span<const Var> row_r,
                       const nn::ops::HeadLayout& L, FlopCounter* counter) {
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const std::size_t n = L.n, f = L.width(), d = L.d, kk = plan.k, rest = rest_of(plan);
  if (plan.n != n || plan.rows.size() != n) fail(ErrorCategory::DimMismatch, "approx scores: plan size differs from layout");
  if (row_r.size() != n) fail(ErrorCategory::DimMismatch, "approx scores: one reconstructor per row required");
  if (qv.rows() != L.batch * n || qv.cols() != f || kv.shape != qv.shape)
    fail(ErrorCategory::DimMismatch, "approx scores: q/k shape differs from layout");
  // Complement index lists, ascending, matching the row order of R_i.
  std::vector<IndexSet> comp(n);
  for (std::size_t i = 0; i < n; ++i) {
    comp[i] = complement(plan.rows[i].indices, n);
    if (plan.rows[i].indices.size() != kk) fail(ErrorCategory::DimMismatch, "approx scores: |P_i| differs from k");
    if (rest > 0) {
      if (!row_r[i].valid()) fail(ErrorCategory::DimMismatch, "approx scores: missing reconstructor");
      const Tensor& r = t.value(row_r[i]);
      if (r.shape != std::vector<std::size_t>{rest, kk}) fail(ErrorCategory::DimMismatch, "approx scores: reconstructor shape");
    }
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor out({L.score_rows(), n});
  // Exact values a_{P_i} per (block, row), kept for the R gradient.
  std::vector<double> exact(L.score_rows() * kk);
  for (std::size_t b = 0; b < L.batch; ++b) {
    for (std::size_t h = 0; h < L.heads; ++h) {
      const std::size_t blk = b * L.heads + h;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = qv.data.data() + (b * n + i) * f + h * d;
        double* o = out.data.data() + (blk * n + i) * n;
        double* a = exact.data() + (blk * n + i) * kk;
        const IndexSet& p = plan.rows[i].indices;
        for (std::size_t c = 0; c < kk; ++c) {
          a[c] = nn::ops::scaled_dot(qi, kv.data.data() + (b * n + p[c]) * f + h * d, d, s);
          o[p[c]] = a[c];
        }
        if (rest > 0) {
          const double* r = t.value(row_r[i]).data.data();
          for (std::size_t m = 0; m < rest; ++m) {
            double acc = 0.0;
            for (std::size_t c = 0; c < kk; ++c) acc += r[m * kk + c] * a[c];
            o[comp[i][m]] = acc;
          }
        }
      }
    }
  }
  if (counter) {
    const std::uint64_t rows = L.batch * L.heads * n;
    counter->rows += rows;
    counter->exact_madds += rows * kk * d;
    counter->recon_madds += rows * rest * kk;
  }
  bool needs = t.requires_grad(q) || t.requires_grad(k);
  std::vector<Var> rs(row_r.begin(), row_r.end());
  for (Var r : rs) needs = needs || (r.valid() && t.requires_grad(r));
  std::vector<IndexSet> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = plan.rows[i].indices;
  return t.record(std::move(out), needs,
                  [q, k, rs = std::move(rs), idx = std::move(idx), comp = std::move(comp), exact = std::move(exact), L, s, kk, rest](
                      nn::Tape& tp, const std::vector<double>& g) {
                    const std::size_t n = L.n, f = L.width(), d = L.d;
                    const bool gq = tp.requires_grad(q), gk = tp.requires_grad(k);
                    const auto& qd = tp.value(q).data;
                    const auto& kd = tp.value(k).data;
                    double* gqd = gq ? tp.grad_buffer(q).data() : nullptr;
                    double* gkd = gk ? tp.grad_buffer(k).data() : nullptr;
                    std::vector<double> ga(kk);
                    for (std::size_t b = 0; b < L.batch; ++b) {
                      for (std::size_t h = 0; h < L.heads; ++h) {
                        const std::size_t blk = b * L.heads + h;
                        for (std::size_t i = 0; i < n; ++i) {
                          const double* gi = g.data() + (blk * n + i) * n;
                          const IndexSet& p = idx[i];
                          for (std::size_t c = 0; c < kk; ++c) ga[c] = gi[p[c]];
                          if (rest > 0) {
                            const double* r = tp.value(rs[i]).data.data();
                            for (std::size_t m = 0; m < rest; ++m) {
                              const double gm = gi[comp[i][m]];
                              for (std::size_t c = 0; c < kk; ++c) ga[c] += r[m * kk + c] * gm;
                            }
                            if (tp.requires_grad(rs[i])) {
                              double* gr = tp.grad_buffer(rs[i]).data();
                              const double* a = exact.data() + (blk * n + i) * kk;
                              for (std::size_t m = 0; m < rest; ++m) {
                                const double gm = gi[comp[i][m]];
                                for (std::size_t c = 0; c < kk; ++c) gr[m * kk + c] += gm * a[c];
                              }
                            }
                          }
                          const std::size_t qo = (b * n + i) * f + h * d;
                          for (std::size_t c = 0; c < kk; ++c) {
                            const std::size_t ko = (b * n + p[c]) * f + h * d;
                            const double w = s * ga[c];
                            if (gq)
                              for (std::size_t e = 0; e < d; ++e) gqd[qo + e] += w * kd[ko + e];
                            if (gk)
                              for (std::size_t e = 0; e < d; ++e) gkd[ko + e] += w * qd[qo + e];
                          }
                        }
                      }
                    }
                  });
}

Var project_rows(nn::Tape& t, Var scores, const std::vector<Matrix>& proj, const nn::ops::HeadLayout& L) {
  const Tensor& sv = t.value(scores);
  const std::size_t n = L.n;
  if (sv.rows() != L.score_rows() || sv.cols() != n || proj.size() != n)
    fail(ErrorCategory::DimMismatch, "project_rows: shape differs from layout");
  Tensor out({L.score_rows(), n});
  for (std::size_t r = 0; r < L.score_rows(); ++r) {
    const Matrix& pm = proj[r % n];
    Eigen::Map<const Vector> a(sv.data.data() + r * n, static_cast<Eigen::Index>(n));
    Eigen::Map<Vector>(out.data.data() + r * n, static_cast<Eigen::Index>(n)).noalias() = pm * a;
  }
  const std::vector<Matrix>* pp = &proj;
  return t.record(std::move(out), t.requires_grad(scores), [scores, pp, L](nn::Tape& tp, const std::vector<double>& g) {
    const std::size_t n = L.n;
    auto& gs = tp.grad_buffer(scores);
    for (std::size_t r = 0; r < L.score_rows(); ++r) {
      Eigen::Map<const Vector> gr(g.data() + r * n, static_cast<Eigen::Index>(n));
      Eigen::Map<Vector>(gs.data() + r * n, static_cast<Eigen::Index>(n)).noalias() += (*pp)[r % n].transpose() * gr;
    }
  });
}

namespace {

Tensor matrix_to_tensor(const Matrix& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.at(i, j) = m(i, j);
  return t;
}

Matrix tensor_to_matrix(const Tensor& t) {
  Matrix m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

std::vector<std::string> layer_r_names(const ApproxConfig& cfg, std::size_t layer) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < cfg.plan.n; ++i) names.push_back(r_param_name(cfg.regime, layer, i));
  return names;
}

}  // namespace

void install_r(nn::ParamMap& params, const ApproxConfig& cfg) {
  if (cfg.plan.k == cfg.plan.n) return;
  for (std::size_t l : cfg.layers) {
    const auto names = layer_r_names(cfg, l);
    for (std::size_t i = 0; i < cfg.plan.n; ++i) params[names[i]] = matrix_to_tensor(cfg.plan.rows[i].r);
  }
}

nn::ScoreFn approx_score_fn(const ApproxConfig& cfg, FlopCounter* counter) {
  auto shared = std::make_shared<ApproxConfig>(cfg);
  return [shared, counter](nn::Tape& t, std::size_t layer, Var q, Var k, const nn::ops::HeadLayout& L,
                           const nn::ParamBinding& pb) -> Var {
    if (!shared->approximates(layer)) return nn::ops::head_scores(t, q, k, L);
    std::vector<Var> rs(shared->plan.n);
    if (shared->plan.k < shared->plan.n) {
      const auto names = layer_r_names(*shared, layer);
      for (std::size_t i = 0; i < names.size(); ++i) rs[i] = pb.at(names[i]);
    }
    return approx_head_scores(t, q, k, shared->plan, rs, L, counter);
  };
}

nn::TrainablePredicate trainable_for(Regime r) {
  if (r == Regime::Fixed) return [](const std::string& name) { return !is_r_param(name); };
  return [](const std::string&) { return true; };
}

ApproxModel init_approx_model(const io::Checkpoint& baseline, const std::vector<SymMatrix>& query_cov, std::size_t k,
                              Regime regime, std::vector<std::size_t> layers) {
  const nn::ModelConfig& mc = baseline.config;
  if (query_cov.size() != mc.seq_len) fail(ErrorCategory::DimMismatch, "init_approx_model: need one query covariance per row");
  for (const auto& [name, t] : baseline.params) {
    if (is_r_param(name)) fail(ErrorCategory::InvalidInput, "init_approx_model: baseline already holds reconstructors");
  }
  ApproxModel m{mc, baseline.params, {}};
  m.approx.plan = recon::plan_per_query(query_cov, k);
  m.approx.regime = regime;
  m.approx.layers = layers.empty() ? default_layers(mc.layers) : std::move(layers);
  m.approx.validate(mc);
  install_r(m.params, m.approx);
  return m;
}

std::vector<double> expected_row_mse(const ApproxModel& m, const std::vector<SymMatrix>& query_cov, std::size_t layer) {
  const ApproxConfig& a = m.approx;
  std::vector<double> out(a.plan.n, 0.0);
  if (a.plan.k == a.plan.n) return out;
  const auto names = layer_r_names(a, layer);
  for (std::size_t i = 0; i < a.plan.n; ++i)
    out[i] = recon::expected_mse(query_cov.at(i), a.plan.rows[i].indices, tensor_to_matrix(m.params.at(names[i])));
  return out;
}

std::filesystem::path approx_sidecar(const std::filesystem::path& prms_path) {
  auto p = prms_path;
  p.replace_extension(".approx.json");
  return p;
}

void save_approx(const std::filesystem::path& prms_path, const ApproxModel& m,
                 std::vector<std::filesystem::path>* written) {
  auto plan_path = prms_path;
  plan_path.replace_extension(".plan.json");
  recon::save_plan(plan_path, m.approx.plan, written);
  io::save_checkpoint(prms_path, m.model, m.params);
  if (written) written->push_back(prms_path);
  nlohmann::ordered_json j;
  j["format"] = "APRX";
  j["version"] = 1;
  j["regime"] = regime_name(m.approx.regime);
  j["k"] = m.approx.plan.k;
  j["layers"] = m.approx.layers;
  j["plan"] = plan_path.filename().string();
  j["checkpoint"] = prms_path.filename().string();
  io::write_text_atomic(approx_sidecar(prms_path), j.dump(2) + "\n");
  if (written) written->push_back(approx_sidecar(prms_path));
}

ApproxModel load_approx(const std::filesystem::path& prms_path) {
  const auto side = approx_sidecar(prms_path);
  nlohmann::json j;
  try {
    const auto bytes = io::read_file(side);
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::Format, side.string() + ": " + e.what());
  }
  if (j.value("format", "") != "APRX") fail(ErrorCategory::Format, side.string() + ": not an approx checkpoint descriptor");
  ApproxModel m;
  io::Checkpoint c = io::load_checkpoint(prms_path);
  m.model = c.config;
  m.params = std::move(c.params);
  try {
    m.approx.regime = parse_regime(j.at("regime").get<std::string>());
    m.approx.layers = j.at("layers").get<std::vector<std::size_t>>();
    m.approx.plan = recon::load_plan(side.parent_path() / j.at("plan").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::Format, side.string() + ": " + e.what());
  }
  m.approx.validate(m.model);
  if (m.approx.plan.k < m.approx.plan.n) {
    for (std::size_t l : m.approx.layers)
      for (const auto& name : layer_r_names(m.approx, l))
        if (!m.params.count(name)) fail(ErrorCategory::Format, prms_path.string() + ": missing reconstructor " + name);
  }
  return m;
}

std::string inference_mode_name(InferenceMode m) { return m == InferenceMode::PartialCompute ? "PC" : "EP"; }

InferenceMode parse_inference_mode(const std::string& s) {
  if (s == "PC") return InferenceMode::PartialCompute;
  if (s == "EP") return InferenceMode::EigenProjection;
  fail(ErrorCategory::Config, "unknown inference mode '" + s + "' (expected PC or EP)");
}

nn::ScoreFn inference_score_fn(InferenceMode mode, const nn::ModelConfig& model, nn::ParamMap& params,
                               const std::vector<SymMatrix>& query_cov, std::size_t k, std::vector<std::size_t> layers) {
  if (layers.empty()) layers = default_layers(model.layers);
  if (query_cov.size() != model.seq_len) fail(ErrorCategory::DimMismatch, "inference: need one query covariance per row");
  if (mode == InferenceMode::PartialCompute) {
    ApproxConfig cfg;
    cfg.plan = recon::plan_per_query(query_cov, k);
    cfg.regime = Regime::Fixed;
    cfg.layers = layers;
    cfg.validate(model);
    install_r(params, cfg);
    return approx_score_fn(cfg);
  }
  if (k == 0 || k > model.seq_len) fail(ErrorCategory::Domain, "inference: k must lie in [1, n]");
  auto proj = std::make_shared<std::vector<Matrix>>();
  for (const auto& q : query_cov) {
    EigenBasis basis = sym_eig(q).truncated(k);
    proj->push_back(basis.vectors * basis.vectors.transpose());
  }
  return [proj, layers](nn::Tape& t, std::size_t layer, Var q, Var kv, const nn::ops::HeadLayout& L,
                        const nn::ParamBinding&) -> Var {
    Var s = nn::ops::head_scores(t, q, kv, L);
    if (std::find(layers.begin(), layers.end(), layer) == layers.end()) return s;
    return project_rows(t, s, *proj, L);
  };
}

}  // namespace attnlr::approx
