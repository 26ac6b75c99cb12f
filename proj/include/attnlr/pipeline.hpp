#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attnlr/approx.hpp"
#include "attnlr/corpus.hpp"
#include "attnlr/covariance.hpp"
#include "attnlr/model.hpp"
#include "attnlr/partial_recon.hpp"
#include "attnlr/trainer.hpp"

namespace attnlr::pipeline {

struct ApproxSettings {
  std::size_t k = 8;
  approx::Regime regime = approx::Regime::Common;
  std::uint64_t steps = 500;
  std::uint64_t warmup = 50;
  double lr = 3e-4;
  // Train every non-R weight from the baseline's initialization with the
  // baseline schedule and data order. When false the trained baseline
  // weights are fine-tuned with steps/warmup/lr above.
  bool from_scratch = true;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out;
  nn::ModelConfig model;
  lm::CorpusSpec corpus;
  lm::TrainHyper train;
  std::vector<std::uint64_t> checkpoints;  // always includes 0 and train.steps
  std::size_t capture_examples = 512;
  cov::ScopeRequest scopes;
  std::vector<std::size_t> plan_k{4, 8, 16};
  recon::PlanMode plan_mode = recon::PlanMode::PerQuery;
  ApproxSettings approx;
  std::vector<std::size_t> eval_k{4, 8, 16};
  std::vector<approx::InferenceMode> eval_modes{approx::InferenceMode::PartialCompute,
                                                approx::InferenceMode::EigenProjection};

  std::string canonical;  // normalized JSON after overrides
  std::string hash;

  std::uint64_t init_seed() const;
};

// Parses a JSON run configuration. The seed must come from the document or
// the override; out may be overridden as well. Relative paths resolve against
// the current directory.
RunConfig parse_config(const std::string& text, std::optional<std::uint64_t> seed = {},
                       std::optional<std::filesystem::path> out = {});
RunConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed = {},
                      std::optional<std::filesystem::path> out = {});

struct CommandArgs {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<std::vector<std::size_t>> k;
  std::optional<std::string> scope;
  std::optional<std::string> mode;
  std::optional<std::string> regime;
  std::optional<std::uint64_t> checkpoint;
  std::optional<std::filesystem::path> dump;
  std::optional<std::uint64_t> n;
  std::optional<std::uint64_t> d;
};

struct CommandResult {
  std::vector<std::filesystem::path> outputs;
  std::string text;  // what the command prints on stdout
};

const std::vector<std::string>& command_names();

// Runs one command; throws attnlr::Error on failure. Every command except a
// config-less `flops` records itself in <out>/manifest.json.
CommandResult run_command(const std::string& command, const CommandArgs& args);

// Standard artifact locations under the output directory.
std::filesystem::path checkpoint_path(const RunConfig& c, std::uint64_t step);
std::filesystem::path dump_path(const RunConfig& c, std::uint64_t step);
std::filesystem::path cov_dir(const RunConfig& c, std::uint64_t step);
std::filesystem::path plan_path(const RunConfig& c, std::size_t k, recon::PlanMode mode);
std::filesystem::path approx_path(const RunConfig& c, std::size_t k, approx::Regime regime);

}  // namespace attnlr::pipeline
