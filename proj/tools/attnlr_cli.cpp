#include <cstdio>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "attnlr.h"

namespace {

int report_error(attnlr_status status) {
  std::fprintf(stderr, "attnlr: error[%s]: %s\n", attnlr_status_name(status), attnlr_last_error());
  return 1 + static_cast<int>(status == ATTNLR_E_INTERNAL ? 0 : status);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank analysis and partial computation of attention scores"};
  app.set_version_flag("--version", attnlr_version());
  app.require_subcommand(1);

  // Flag values are forwarded verbatim; the library validates them.
  std::map<std::string, std::string> values;
  const std::pair<const char*, const char*> flags[] = {
      {"config", "Run configuration (JSON)"},
      {"seed", "Master seed, overrides the config"},
      {"out", "Output directory, overrides the config"},
      {"k", "Exact scores per row, comma separated"},
      {"scope", "global, layers, queries or all"},
      {"mode", "per-query or whole-matrix; PC or EP for eval"},
      {"regime", "F, C or P"},
      {"checkpoint", "Training step of the checkpoint to use"},
      {"dump", "Score dump to read instead of the standard one"},
      {"n", "Sequence length (flops)"},
      {"d", "Head dimension (flops)"},
  };
  const std::map<std::string, std::string> help{
      {"gen-data", "Write the corpus description and sample streams"},
      {"train", "Train the exact baseline model"},
      {"capture", "Dump attention scores of each checkpoint"},
      {"cov", "Accumulate covariances from score dumps"},
      {"spectrum", "Write eigenvalue energy curves"},
      {"overlap", "Write subspace overlap curves"},
      {"plan", "Greedy index sets and optimal reconstructors"},
      {"recon-error", "Expected reconstruction error against k"},
      {"flops", "Score FLOPs ratio of partial computation"},
      {"train-approx", "Train with partially computed attention"},
      {"eval", "Held-out accuracy of exact, inference-only and trained approximations"},
      {"report", "Collate CSVs and manifests into report/"},
  };

  std::string chosen;
  for (std::size_t i = 0; i < attnlr_command_count(); ++i) {
    const std::string name = attnlr_command_name(i);
    auto it = help.find(name);
    CLI::App* sub = app.add_subcommand(name, it == help.end() ? "" : it->second);
    for (const auto& [flag, desc] : flags) sub->add_option(std::string("--") + flag, values[flag], desc);
    sub->callback([&chosen, name] { chosen = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  attnlr_session* session = nullptr;
  if (attnlr_status s = attnlr_session_create(&session); s != ATTNLR_OK) return report_error(s);
  for (const auto& [flag, value] : values) {
    if (value.empty()) continue;
    if (attnlr_status s = attnlr_session_set(session, flag.c_str(), value.c_str()); s != ATTNLR_OK) {
      attnlr_session_destroy(session);
      return report_error(s);
    }
  }
  attnlr_status s = attnlr_run(session, chosen.c_str());
  if (s != ATTNLR_OK) {
    attnlr_session_destroy(session);
    return report_error(s);
  }
  std::fputs(attnlr_result_text(session), stdout);
  attnlr_session_destroy(session);
  return 0;
}
