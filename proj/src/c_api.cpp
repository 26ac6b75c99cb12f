#include "attnlr.h"

#include <charconv>
#include <exception>
#include <new>
#include <string>
#include <vector>

#include "attnlr/error.hpp"
#include "attnlr/partial_recon.hpp"
#include "attnlr/pipeline.hpp"

struct attnlr_session {
  attnlr::pipeline::CommandArgs args;
  std::string text;
  std::vector<std::string> outputs;
};

namespace {

thread_local std::string g_last_error;

attnlr_status to_status(attnlr::ErrorCategory c) {
  using C = attnlr::ErrorCategory;
  switch (c) {
    case C::InvalidInput: return ATTNLR_E_INVALID_INPUT;
    case C::Domain: return ATTNLR_E_DOMAIN;
    case C::DimMismatch: return ATTNLR_E_DIM_MISMATCH;
    case C::Singular: return ATTNLR_E_SINGULAR;
    case C::EmptyAccumulator: return ATTNLR_E_EMPTY_ACCUMULATOR;
    case C::Divergence: return ATTNLR_E_DIVERGENCE;
    case C::Format: return ATTNLR_E_FORMAT;
    case C::Io: return ATTNLR_E_IO;
    case C::Config: return ATTNLR_E_CONFIG;
  }
  return ATTNLR_E_INTERNAL;
}

// Runs f, translating exceptions into a status and the thread's last error.
template <class F>
attnlr_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return ATTNLR_OK;
  } catch (const attnlr::Error& e) {
    g_last_error = e.what();
    return to_status(e.category());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown failure";
  }
  return ATTNLR_E_INTERNAL;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    attnlr::fail(attnlr::ErrorCategory::InvalidInput, "--" + key + " expects a non-negative integer, got '" + v + "'");
  return out;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    std::size_t comma = v.find(',', start);
    if (comma == std::string::npos) comma = v.size();
    out.push_back(static_cast<std::size_t>(parse_u64(key, v.substr(start, comma - start))));
    start = comma + 1;
  }
  return out;
}

void set_arg(attnlr::pipeline::CommandArgs& a, const std::string& key, const char* value) {
  const bool unset = value == nullptr;
  const std::string v = unset ? std::string() : std::string(value);
  if (key == "config") unset ? a.config.reset() : void(a.config = v);
  else if (key == "out") unset ? a.out.reset() : void(a.out = v);
  else if (key == "dump") unset ? a.dump.reset() : void(a.dump = v);
  else if (key == "scope") unset ? a.scope.reset() : void(a.scope = v);
  else if (key == "mode") unset ? a.mode.reset() : void(a.mode = v);
  else if (key == "regime") unset ? a.regime.reset() : void(a.regime = v);
  else if (key == "seed") unset ? a.seed.reset() : void(a.seed = parse_u64(key, v));
  else if (key == "checkpoint") unset ? a.checkpoint.reset() : void(a.checkpoint = parse_u64(key, v));
  else if (key == "n") unset ? a.n.reset() : void(a.n = parse_u64(key, v));
  else if (key == "d") unset ? a.d.reset() : void(a.d = parse_u64(key, v));
  else if (key == "k") unset ? a.k.reset() : void(a.k = parse_list(key, v));
  else attnlr::fail(attnlr::ErrorCategory::InvalidInput, "unknown argument '" + key + "'");
}

void require(bool ok, const char* what) {
  if (!ok) attnlr::fail(attnlr::ErrorCategory::InvalidInput, what);
}

}  // namespace

extern "C" {

const char* attnlr_version(void) { return "1.0.0"; }

const char* attnlr_status_name(attnlr_status status) {
  using C = attnlr::ErrorCategory;
  switch (status) {
    case ATTNLR_OK: return "ok";
    case ATTNLR_E_INVALID_INPUT: return attnlr::category_name(C::InvalidInput).data();
    case ATTNLR_E_DOMAIN: return attnlr::category_name(C::Domain).data();
    case ATTNLR_E_DIM_MISMATCH: return attnlr::category_name(C::DimMismatch).data();
    case ATTNLR_E_SINGULAR: return attnlr::category_name(C::Singular).data();
    case ATTNLR_E_EMPTY_ACCUMULATOR: return attnlr::category_name(C::EmptyAccumulator).data();
    case ATTNLR_E_DIVERGENCE: return attnlr::category_name(C::Divergence).data();
    case ATTNLR_E_FORMAT: return attnlr::category_name(C::Format).data();
    case ATTNLR_E_IO: return attnlr::category_name(C::Io).data();
    case ATTNLR_E_CONFIG: return attnlr::category_name(C::Config).data();
    case ATTNLR_E_INTERNAL: break;
  }
  return "internal";
}

const char* attnlr_last_error(void) { return g_last_error.c_str(); }

size_t attnlr_command_count(void) { return attnlr::pipeline::command_names().size(); }

const char* attnlr_command_name(size_t index) {
  const auto& names = attnlr::pipeline::command_names();
  return index < names.size() ? names[index].c_str() : nullptr;
}

attnlr_status attnlr_session_create(attnlr_session** out) {
  return guarded([&] {
    require(out != nullptr, "session_create: null output pointer");
    *out = new attnlr_session();
  });
}

void attnlr_session_destroy(attnlr_session* session) { delete session; }

attnlr_status attnlr_session_set(attnlr_session* session, const char* key, const char* value) {
  return guarded([&] {
    require(session != nullptr && key != nullptr, "session_set: null session or key");
    set_arg(session->args, key, value);
  });
}

void attnlr_session_clear(attnlr_session* session) {
  if (!session) return;
  *session = attnlr_session();
}

attnlr_status attnlr_run(attnlr_session* session, const char* command) {
  return guarded([&] {
    require(session != nullptr && command != nullptr, "run: null session or command");
    session->text.clear();
    session->outputs.clear();
    attnlr::pipeline::CommandResult r = attnlr::pipeline::run_command(command, session->args);
    session->text = std::move(r.text);
    for (const auto& p : r.outputs) session->outputs.push_back(p.generic_string());
  });
}

const char* attnlr_result_text(const attnlr_session* session) { return session ? session->text.c_str() : ""; }

size_t attnlr_result_output_count(const attnlr_session* session) { return session ? session->outputs.size() : 0; }

const char* attnlr_result_output(const attnlr_session* session, size_t index) {
  if (!session || index >= session->outputs.size()) return nullptr;
  return session->outputs[index].c_str();
}

attnlr_status attnlr_flops_ratio(uint64_t n, uint64_t d, uint64_t k, int per_query, uint64_t* num, uint64_t* den,
                                 double* ratio) {
  return guarded([&] {
    attnlr::recon::FlopsReport r = attnlr::recon::flops_ratio(
        n, d, k, per_query ? attnlr::recon::PlanMode::PerQuery : attnlr::recon::PlanMode::WholeMatrix);
    if (num) *num = r.ratio_num;
    if (den) *den = r.ratio_den;
    if (ratio) *ratio = r.ratio;
  });
}

}  // extern "C"
