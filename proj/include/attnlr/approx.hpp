#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "attnlr/checkpoint.hpp"
#include "attnlr/model.hpp"
#include "attnlr/partial_recon.hpp"

namespace attnlr::approx {

enum class Regime { Fixed, Common, PerLayer };

std::string regime_name(Regime r);  // "F", "C", "P"
Regime parse_regime(const std::string& s);

// Regimes F and C read approx.shared.row{i}.R; P reads approx.layer{l}.row{i}.R.
std::string r_param_name(Regime r, std::size_t layer, std::size_t row);
bool is_r_param(const std::string& name);

// All layers except the last; a single-layer model keeps its only layer.
std::vector<std::size_t> default_layers(std::size_t layers);

struct ApproxConfig {
  recon::PartialPlan plan;  // per-query
  Regime regime = Regime::Common;
  std::vector<std::size_t> layers;

  bool approximates(std::size_t layer) const;
  void validate(const nn::ModelConfig& model) const;
};

// Multiply-adds spent in the scores path: exact = Σ_rows |P_i|·d,
// recon = Σ_rows |P̄_i|·|P_i|.
struct FlopCounter {
  std::uint64_t exact_madds = 0;
  std::uint64_t recon_madds = 0;
  std::uint64_t rows = 0;
};

// Row i of every (batch, head) block: exact scores at P_i, R_i a_{P_i} at
// P̄_i. row_r[i] is the (n-k)×k reconstructor; it may be invalid when P̄_i is
// empty.
nn::Var approx_head_scores(nn::Tape& t, nn::Var q, nn::Var k, const recon::PartialPlan& plan,
                           std::span<const nn::Var> row_r, const nn::ops::HeadLayout& layout,
                           FlopCounter* counter = nullptr);

// Projects every row i of every block onto proj[i] (n×n). proj must outlive
// the tape's backward pass.
nn::Var project_rows(nn::Tape& t, nn::Var scores, const std::vector<Matrix>& proj, const nn::ops::HeadLayout& layout);

// Writes the plan's reconstructors into params under the regime's names.
void install_r(nn::ParamMap& params, const ApproxConfig& cfg);

nn::ScoreFn approx_score_fn(const ApproxConfig& cfg, FlopCounter* counter = nullptr);
nn::TrainablePredicate trainable_for(Regime r);

struct ApproxModel {
  nn::ModelConfig model;
  nn::ParamMap params;
  ApproxConfig approx;
};

// Greedy P_i and optimal R_i from the per-query covariances of a baseline,
// baseline weights copied unchanged.
ApproxModel init_approx_model(const io::Checkpoint& baseline, const std::vector<SymMatrix>& query_cov, std::size_t k,
                              Regime regime, std::vector<std::size_t> layers = {});

// Per-row expected squared error of the current R under Q^i.
std::vector<double> expected_row_mse(const ApproxModel& m, const std::vector<SymMatrix>& query_cov, std::size_t layer);

// Approx checkpoint: PRMS parameters plus "<stem>.approx.json" referencing
// the plan file, regime and approximated layers.
void save_approx(const std::filesystem::path& prms_path, const ApproxModel& m,
                 std::vector<std::filesystem::path>* written = nullptr);
ApproxModel load_approx(const std::filesystem::path& prms_path);
std::filesystem::path approx_sidecar(const std::filesystem::path& prms_path);

enum class InferenceMode { PartialCompute, EigenProjection };
std::string inference_mode_name(InferenceMode m);  // "PC", "EP"
InferenceMode parse_inference_mode(const std::string& s);

// Score hook for inference-only approximation of an exact-trained model.
// PC installs optimal R into params (which must outlive the hook's use).
nn::ScoreFn inference_score_fn(InferenceMode mode, const nn::ModelConfig& model, nn::ParamMap& params,
                               const std::vector<SymMatrix>& query_cov, std::size_t k,
                               std::vector<std::size_t> layers = {});

}  // namespace attnlr::approx
