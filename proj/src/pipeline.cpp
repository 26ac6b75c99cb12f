#include "attnlr/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "attnlr/binary_io.hpp"
#include "attnlr/checkpoint.hpp"
#include "attnlr/error.hpp"
#include "attnlr/spectral.hpp"
#include "json.hpp"

namespace attnlr::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kSaltInit = 2;
constexpr std::uint64_t kSaltTrain = 3;
constexpr std::uint64_t kSaltApprox = 5;
constexpr std::uint64_t kSaltEval = 6;

[[noreturn]] void config_error(const std::string& msg) { fail(ErrorCategory::Config, "config: " + msg); }

// Strict object reader: every key must be consumed, so typos are reported
// instead of silently falling back to defaults.
class Section {
 public:
  Section(const json& j, std::string path) : path_(std::move(path)) {
    if (!j.is_object()) config_error(path_ + " must be an object");
    j_ = &j;
  }
  ~Section() = default;

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_->contains(key);
  }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_->at(key);
  }
  template <class T>
  void get(const std::string& key, T& dst) {
    if (!has(key)) return;
    const json& v = j_->at(key);
    try {
      if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) config_error(where(key) + " must be a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) config_error(where(key) + " must be a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) config_error(where(key) + " must be a string");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) config_error(where(key) + " must be a boolean");
      }
      dst = v.get<T>();
    } catch (const json::exception& e) {
      config_error(where(key) + ": " + e.what());
    }
  }
  template <class T>
  void get_list(const std::string& key, std::vector<T>& dst) {
    if (!has(key)) return;
    const json& v = j_->at(key);
    if (!v.is_array()) config_error(where(key) + " must be a list");
    std::vector<T> out;
    for (const json& e : v) {
      if constexpr (std::is_unsigned_v<T>) {
        if (!e.is_number_unsigned()) config_error(where(key) + " entries must be non-negative integers");
      } else {
        if (!e.is_string()) config_error(where(key) + " entries must be strings");
      }
      out.push_back(e.get<T>());
    }
    dst = std::move(out);
  }
  void finish() const {
    for (auto it = j_->begin(); it != j_->end(); ++it)
      if (!seen_.count(it.key())) config_error("unknown key " + where(it.key()));
  }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json* j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string join_k(const std::vector<std::size_t>& ks) {
  std::string s;
  for (std::size_t i = 0; i < ks.size(); ++i) s += (i ? "," : "") + std::to_string(ks[i]);
  return s;
}

json canonical_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out"] = c.out.generic_string();
  const nn::ModelConfig& m = c.model;
  j["model"] = {{"layers", m.layers},   {"heads", m.heads},       {"hidden", m.hidden},
                {"head_dim", m.head_dim}, {"seq_len", m.seq_len}, {"vocab", m.vocab},
                {"mlp_hidden", m.mlp_hidden}, {"ln_eps", m.ln_eps}, {"init_std", m.init_std}};
  const lm::CorpusSpec& s = c.corpus;
  j["corpus"] = {{"generator", lm::generator_name(s.generator)},
                 {"band", s.band},
                 {"noise", s.noise},
                 {"max_depth", s.max_depth},
                 {"seed", s.seed}};
  const lm::TrainHyper& t = c.train;
  j["train"] = {{"batch", t.batch},
                {"steps", t.steps},
                {"warmup", t.warmup},
                {"lr", t.adam.lr},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"eps", t.adam.eps},
                {"weight_decay", t.adam.weight_decay},
                {"mask_rate", t.mask_rate},
                {"eval_every", t.eval_every},
                {"eval_examples", t.eval_examples},
                {"checkpoints", c.checkpoints}};
  json scopes = json::array();
  if (c.scopes.global) scopes.push_back("global");
  if (c.scopes.layers) scopes.push_back("layers");
  if (c.scopes.queries) scopes.push_back("queries");
  if (c.scopes.mean_subtracted) scopes.push_back("centered");
  j["capture"] = {{"examples", c.capture_examples},
                  {"scopes", scopes},
                  {"allow_large_global", c.scopes.allow_large_global}};
  j["plan"] = {{"k", c.plan_k}, {"mode", recon::mode_name(c.plan_mode)}};
  j["approx"] = {{"k", c.approx.k},
                 {"regime", approx::regime_name(c.approx.regime)},
                 {"steps", c.approx.steps},
                 {"warmup", c.approx.warmup},
                 {"lr", c.approx.lr},
                 {"init", c.approx.from_scratch ? "scratch" : "baseline"}};
  json modes = json::array();
  for (auto md : c.eval_modes) modes.push_back(approx::inference_mode_name(md));
  j["eval"] = {{"k", c.eval_k}, {"modes", modes}};
  return j;
}

}  // namespace

std::uint64_t RunConfig::init_seed() const { return lm::mix_seed(seed, kSaltInit); }

RunConfig parse_config(const std::string& text, std::optional<std::uint64_t> seed,
                       std::optional<fs::path> out) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    config_error(std::string("not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section top(doc, "");
  std::optional<std::uint64_t> doc_seed;
  if (top.has("seed")) {
    std::uint64_t s = 0;
    top.get("seed", s);
    doc_seed = s;
  }
  if (seed) doc_seed = seed;
  if (!doc_seed) config_error("seed is mandatory (set \"seed\" or pass --seed)");
  c.seed = *doc_seed;

  std::string out_s;
  top.get("out", out_s);
  if (out) c.out = *out;
  else if (!out_s.empty()) c.out = out_s;
  else config_error("output directory is mandatory (set \"out\" or pass --out)");

  if (top.has("model")) {
    Section m(top.raw("model"), "model");
    m.get("layers", c.model.layers);
    m.get("heads", c.model.heads);
    m.get("hidden", c.model.hidden);
    m.get("head_dim", c.model.head_dim);
    m.get("seq_len", c.model.seq_len);
    m.get("vocab", c.model.vocab);
    m.get("mlp_hidden", c.model.mlp_hidden);
    m.get("ln_eps", c.model.ln_eps);
    m.get("init_std", c.model.init_std);
    m.finish();
  }
  c.model.validate();

  c.corpus.seed = c.seed;
  c.corpus.vocab_size = c.model.vocab;
  c.corpus.seq_len = c.model.seq_len;
  if (top.has("corpus")) {
    Section s(top.raw("corpus"), "corpus");
    std::string gen = lm::generator_name(c.corpus.generator);
    s.get("generator", gen);
    c.corpus.generator = lm::parse_generator(gen);
    s.get("band", c.corpus.band);
    s.get("noise", c.corpus.noise);
    s.get("max_depth", c.corpus.max_depth);
    s.get("seed", c.corpus.seed);
    s.finish();
  }
  c.corpus.validate();

  c.train.seed = lm::mix_seed(c.seed, kSaltTrain);
  if (top.has("train")) {
    Section t(top.raw("train"), "train");
    t.get("batch", c.train.batch);
    t.get("steps", c.train.steps);
    t.get("warmup", c.train.warmup);
    t.get("lr", c.train.adam.lr);
    t.get("beta1", c.train.adam.beta1);
    t.get("beta2", c.train.adam.beta2);
    t.get("eps", c.train.adam.eps);
    t.get("weight_decay", c.train.adam.weight_decay);
    t.get("mask_rate", c.train.mask_rate);
    t.get("eval_every", c.train.eval_every);
    t.get("eval_examples", c.train.eval_examples);
    t.get_list("checkpoints", c.checkpoints);
    t.finish();
  }
  c.train.validate();
  c.checkpoints.push_back(0);
  c.checkpoints.push_back(c.train.steps);
  std::sort(c.checkpoints.begin(), c.checkpoints.end());
  c.checkpoints.erase(std::unique(c.checkpoints.begin(), c.checkpoints.end()), c.checkpoints.end());
  if (c.checkpoints.back() > c.train.steps) config_error("train.checkpoints beyond train.steps");

  if (top.has("capture")) {
    Section s(top.raw("capture"), "capture");
    s.get("examples", c.capture_examples);
    if (s.has("scopes")) {
      std::vector<std::string> names;
      s.get_list("scopes", names);
      c.scopes.global = c.scopes.layers = c.scopes.queries = c.scopes.mean_subtracted = false;
      for (const auto& n : names) {
        if (n == "global") c.scopes.global = true;
        else if (n == "layers") c.scopes.layers = true;
        else if (n == "queries") c.scopes.queries = true;
        else if (n == "centered") c.scopes.mean_subtracted = true;
        else config_error("unknown capture scope '" + n + "'");
      }
    }
    s.get("allow_large_global", c.scopes.allow_large_global);
    s.finish();
  }
  if (c.capture_examples == 0) config_error("capture.examples must be positive");

  if (top.has("plan")) {
    Section s(top.raw("plan"), "plan");
    s.get_list("k", c.plan_k);
    std::string mode = std::string(recon::mode_name(c.plan_mode));
    s.get("mode", mode);
    c.plan_mode = recon::parse_mode(mode);
    s.finish();
  }
  if (top.has("approx")) {
    Section s(top.raw("approx"), "approx");
    s.get("k", c.approx.k);
    std::string reg = approx::regime_name(c.approx.regime);
    s.get("regime", reg);
    c.approx.regime = approx::parse_regime(reg);
    s.get("steps", c.approx.steps);
    s.get("warmup", c.approx.warmup);
    s.get("lr", c.approx.lr);
    std::string init = c.approx.from_scratch ? "scratch" : "baseline";
    s.get("init", init);
    if (init != "scratch" && init != "baseline") config_error("approx.init must be \"baseline\" or \"scratch\"");
    c.approx.from_scratch = init == "scratch";
    s.finish();
  }
  if (top.has("eval")) {
    Section s(top.raw("eval"), "eval");
    s.get_list("k", c.eval_k);
    if (s.has("modes")) {
      std::vector<std::string> names;
      s.get_list("modes", names);
      c.eval_modes.clear();
      for (const auto& n : names) c.eval_modes.push_back(approx::parse_inference_mode(n));
    }
    s.finish();
  }
  top.finish();

  for (std::size_t k : c.plan_k)
    if (k == 0 || k > c.model.seq_len) config_error("plan.k values must lie in 1..seq_len");
  for (std::size_t k : c.eval_k)
    if (k == 0 || k > c.model.seq_len) config_error("eval.k values must lie in 1..seq_len");
  if (c.approx.k == 0 || c.approx.k > c.model.seq_len) config_error("approx.k must lie in 1..seq_len");

  c.canonical = canonical_json(c).dump();
  c.hash = io::hex64(io::fnv1a64(c.canonical));
  return c;
}

RunConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed, std::optional<fs::path> out) {
  std::vector<char> bytes;
  try {
    bytes = io::read_file(path);
  } catch (const Error& e) {
    fail(ErrorCategory::Config, "config: cannot read " + path.string());
  }
  return parse_config(std::string(bytes.begin(), bytes.end()), seed, out);
}

fs::path checkpoint_path(const RunConfig& c, std::uint64_t step) {
  return c.out / "checkpoints" / ("step" + std::to_string(step) + ".prms");
}
fs::path dump_path(const RunConfig& c, std::uint64_t step) {
  return c.out / "dumps" / ("step" + std::to_string(step) + ".atns");
}
fs::path cov_dir(const RunConfig& c, std::uint64_t step) { return c.out / "cov" / ("step" + std::to_string(step)); }
fs::path plan_path(const RunConfig& c, std::size_t k, recon::PlanMode mode) {
  std::string suffix = mode == recon::PlanMode::PerQuery ? "" : "_whole";
  return c.out / "plans" / ("k" + std::to_string(k) + suffix + ".plan.json");
}
fs::path approx_path(const RunConfig& c, std::size_t k, approx::Regime regime) {
  return c.out / "approx" / ("k" + std::to_string(k) + "_" + approx::regime_name(regime)) / "model.prms";
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen-data", "train",       "capture", "cov",
                                              "spectrum", "overlap",     "plan",    "recon-error",
                                              "flops",    "train-approx", "eval",   "report"};
  return names;
}

namespace {

// ---------------------------------------------------------------------------
// Run manifest

class RunManifest {
 public:
  explicit RunManifest(fs::path out) : out_(std::move(out)), path_(out_ / "manifest.json") {
    if (!fs::exists(path_)) return;
    std::vector<char> bytes = io::read_file(path_);
    try {
      json j = json::parse(bytes.begin(), bytes.end());
      if (j.value("format", "") != "attnlr-run") fail(ErrorCategory::Format, "run manifest: unexpected format");
      for (const json& e : j.at("entries")) entries_.push_back(e);
    } catch (const json::exception& e) {
      fail(ErrorCategory::Format, std::string("run manifest: ") + e.what());
    }
  }

  // Hash recorded for a path by the entry that produced it, if any.
  std::optional<std::string> produced_hash(const std::string& rel) const {
    for (const json& e : entries_)
      for (const json& o : e.at("outputs"))
        if (o.at("path") == rel) return o.at("hash").get<std::string>();
    return std::nullopt;
  }

  void record(json entry) {
    std::set<std::string> claimed;
    for (const json& o : entry.at("outputs")) claimed.insert(o.at("path").get<std::string>());
    const std::string key = entry.at("key");
    std::vector<json> kept;
    for (json& e : entries_) {
      if (e.at("key") == key) continue;
      json outs = json::array();
      for (const json& o : e.at("outputs"))
        if (!claimed.count(o.at("path").get<std::string>())) outs.push_back(o);
      e["outputs"] = outs;
      if (!outs.empty() || !e.at("inputs").empty()) kept.push_back(std::move(e));
    }
    kept.push_back(std::move(entry));
    entries_ = std::move(kept);
    json j;
    j["format"] = "attnlr-run";
    j["version"] = 1;
    j["entries"] = entries_;
    io::write_text_atomic(path_, j.dump(2) + "\n");
  }

 private:
  fs::path out_;
  fs::path path_;
  std::vector<json> entries_;
};

// ---------------------------------------------------------------------------
// Command context

struct Ctx {
  RunConfig cfg;
  const CommandArgs& args;
  std::string command;
  std::string key;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  std::ostringstream text;
  RunManifest* manifest = nullptr;

  std::string rel(const fs::path& p) const {
    fs::path r = p.lexically_normal().lexically_relative(cfg.out.lexically_normal());
    if (r.empty() || *r.begin() == "..") return fs::absolute(p).lexically_normal().generic_string();
    return r.generic_string();
  }

  // Declares an upstream artifact; it must exist and match the hash its
  // producer recorded.
  void input(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p)) fail(ErrorCategory::Io, "missing input " + p.string() + " (run `" + producer + "` first)");
    if (manifest) {
      auto h = manifest->produced_hash(rel(p));
      if (h && *h != io::file_hash(p))
        fail(ErrorCategory::Io, "stale input " + p.string() + ": contents differ from what `" + producer +
                                    "` recorded; rerun it");
    }
    if (std::find(inputs.begin(), inputs.end(), p) == inputs.end()) inputs.push_back(p);
  }
  void output(const fs::path& p) {
    if (std::find(outputs.begin(), outputs.end(), p) == outputs.end()) outputs.push_back(p);
  }
  void outputs_from(const std::vector<fs::path>& ps) {
    for (const auto& p : ps) output(p);
  }
  void write_text(const fs::path& p, const std::string& s) {
    io::write_text_atomic(p, s);
    output(p);
  }

  std::vector<std::uint64_t> steps() const {
    if (args.checkpoint) {
      if (!std::binary_search(cfg.checkpoints.begin(), cfg.checkpoints.end(), *args.checkpoint))
        fail(ErrorCategory::Config, "--checkpoint " + std::to_string(*args.checkpoint) + " is not a configured checkpoint");
      return {*args.checkpoint};
    }
    return cfg.checkpoints;
  }
  std::uint64_t final_step() const { return args.checkpoint.value_or(cfg.train.steps); }
  std::vector<std::size_t> ks(const std::vector<std::size_t>& dflt) const { return args.k ? *args.k : dflt; }
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

cov::CovarianceManifest load_cov(Ctx& c, std::uint64_t step) {
  fs::path m = cov_dir(c.cfg, step) / "manifest.json";
  c.input(m, "cov");
  cov::CovarianceManifest man = cov::load_manifest(m);
  for (const auto& e : man.entries) c.input(man.dir / e.path, "cov");
  return man;
}

io::Checkpoint load_ckpt(Ctx& c, std::uint64_t step) {
  fs::path p = checkpoint_path(c.cfg, step);
  c.input(p, "train");
  io::Checkpoint ck = io::load_checkpoint(p);
  if (ck.config.seq_len != c.cfg.model.seq_len || ck.config.vocab != c.cfg.model.vocab ||
      ck.config.layers != c.cfg.model.layers || ck.config.heads != c.cfg.model.heads)
    fail(ErrorCategory::DimMismatch, "checkpoint " + p.string() + " does not match the configured model");
  return ck;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(Ctx& c) {
  const lm::CorpusSpec& s = c.cfg.corpus;
  json j = {{"generator", lm::generator_name(s.generator)},
            {"vocab_size", s.vocab_size},
            {"seq_len", s.seq_len},
            {"band", s.band},
            {"noise", s.noise},
            {"max_depth", s.max_depth},
            {"seed", s.seed},
            {"streams", {{"train", 0}, {"heldout", 1}, {"capture", 2}}}};
  c.write_text(c.cfg.out / "data" / "corpus.json", j.dump(2) + "\n");
  auto dump_stream = [&](lm::Stream stream, std::size_t count) {
    std::string out;
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<int> seq = lm::gen_sequence(s, stream, i);
      for (std::size_t t = 0; t < seq.size(); ++t) out += (t ? " " : "") + std::to_string(seq[t]);
      out += "\n";
    }
    return out;
  };
  c.write_text(c.cfg.out / "data" / "heldout.txt", dump_stream(lm::Stream::HeldOut, c.cfg.train.eval_examples));
  c.write_text(c.cfg.out / "data" / "capture.txt", dump_stream(lm::Stream::Capture, c.cfg.capture_examples));
  c.text << "corpus " << lm::generator_name(s.generator) << " vocab " << s.vocab_size << " n " << s.seq_len << "\n";
}

void cmd_train(Ctx& c) {
  lm::TrainJob job;
  job.model = c.cfg.model;
  job.init = nn::init_params(c.cfg.model, c.cfg.init_seed());
  job.corpus = c.cfg.corpus;
  job.hyper = c.cfg.train;
  job.checkpoint_steps = c.cfg.checkpoints;
  job.on_checkpoint = [&](std::uint64_t step, const nn::ParamMap& p) {
    fs::path path = checkpoint_path(c.cfg, step);
    io::save_checkpoint(path, c.cfg.model, p);
    c.output(path);
  };
  job.on_divergence = [&](std::uint64_t step, const nn::ParamMap& p) {
    fs::path path = c.cfg.out / "checkpoints" / "last_good.prms";
    io::save_checkpoint(path, c.cfg.model, p);
    c.output(path);
    c.text << "diverged after step " << step << "\n";
  };
  lm::TrainResult r = lm::train(job);
  c.write_text(c.cfg.out / "metrics" / "train.csv", lm::metrics_csv(r.metrics));
  const lm::MetricRow& last = r.metrics.back();
  c.text << "step " << last.step << " loss " << fmt6(last.loss) << " mlm_acc " << fmt6(last.mlm_acc) << "\n";
}

void cmd_capture(Ctx& c) {
  for (std::uint64_t step : c.steps()) {
    io::Checkpoint ck = load_ckpt(c, step);
    AtnsHeader h{static_cast<std::uint32_t>(ck.config.layers), static_cast<std::uint32_t>(ck.config.heads),
                 static_cast<std::uint32_t>(ck.config.seq_len),
                 static_cast<std::uint64_t>(c.cfg.capture_examples) * ck.config.layers * ck.config.heads};
    fs::path path = dump_path(c.cfg, step);
    fs::create_directories(path.parent_path());
    AtnsWriter w(path, h);
    lm::capture_scores(ck.config, ck.params, c.cfg.corpus, c.cfg.capture_examples, w);
    w.close();
    c.output(path);
    c.text << "step " << step << ": " << h.count << " score matrices\n";
  }
}

cov::ScopeRequest scope_request(const Ctx& c) {
  cov::ScopeRequest req = c.cfg.scopes;
  if (!c.args.scope) return req;
  const std::string& s = *c.args.scope;
  req.global = s == "global" || s == "all";
  req.layers = s == "layers" || s == "all";
  req.queries = s == "queries" || s == "all";
  if (s == "global" || s == "queries") req.mean_subtracted = c.cfg.scopes.mean_subtracted;
  else if (s == "layers") req.mean_subtracted = false;
  else if (s != "all") fail(ErrorCategory::Config, "--scope must be global, layers, queries or all");
  return req;
}

void run_cov(Ctx& c, const fs::path& dump, const fs::path& dir, std::uint64_t step) {
  AtnsHeader h = AtnsReader(dump).header();
  cov::CovarianceSet set(h.layers, h.n, scope_request(c));
  replay(dump, set);
  std::vector<fs::path> written;
  cov::write_covariances(dir, set, h, c.rel(dump), step, &written);
  c.outputs_from(written);
  c.text << c.rel(dir) << ": " << set.samples() << " samples, " << set.accumulators().size() << " scopes\n";
}

void cmd_cov(Ctx& c) {
  if (c.args.dump) {
    c.input(*c.args.dump, "capture");
    std::string stem = c.args.dump->stem().string();
    run_cov(c, *c.args.dump, c.cfg.out / "cov" / stem, c.args.checkpoint.value_or(0));
    return;
  }
  for (std::uint64_t step : c.steps()) {
    fs::path dump = dump_path(c.cfg, step);
    c.input(dump, "capture");
    run_cov(c, dump, cov_dir(c.cfg, step), step);
  }
}

std::vector<EigenBasis> query_bases(const std::vector<SymMatrix>& qs) {
  std::vector<EigenBasis> out;
  out.reserve(qs.size());
  for (const auto& q : qs) out.push_back(sym_eig(q));
  return out;
}

bool scope_selected(const Ctx& c, const std::string& kind) {
  if (!c.args.scope || *c.args.scope == "all") return true;
  return *c.args.scope == kind;
}

void cmd_spectrum(Ctx& c) {
  for (std::uint64_t step : c.steps()) {
    cov::CovarianceManifest man = load_cov(c, step);
    const std::string prefix = "spectrum_step" + std::to_string(step) + "_";
    fs::path curves = c.cfg.out / "curves";
    auto emit = [&](const std::string& name, const SymMatrix& m) {
      spectral::EnergyCurve e = spectral::energy_curve(m);
      std::vector<std::size_t> ks(e.dim());
      for (std::size_t i = 0; i < ks.size(); ++i) ks[i] = i + 1;
      fs::path p = curves / (prefix + name + ".csv");
      c.write_text(p, spectral::curve_csv(ks, e.cumulative));
      std::size_t k10 = std::max<std::size_t>(1, e.dim() / 10);
      c.text << "step " << step << " " << name << ": energy at k=" << k10 << " is " << fmt6(e.at(k10)) << "\n";
    };
    std::optional<SymMatrix> global;
    if (man.find("global")) global = man.load("global");
    if (global && scope_selected(c, "global")) emit("global", *global);
    if (scope_selected(c, "layers"))
      for (std::size_t l = 0; l < man.layers; ++l)
        if (man.find("layer" + std::to_string(l))) emit("layer" + std::to_string(l), man.load("layer" + std::to_string(l)));
    if (man.find("global", true) && scope_selected(c, "global")) emit("centered_global", man.load("global", true));
    if (man.find("query0") && scope_selected(c, "queries")) {
      std::vector<SymMatrix> qs = man.load_queries();
      std::vector<EigenBasis> bases = query_bases(qs);
      const std::size_t n = man.n;
      std::vector<std::size_t> ks(n + 1);
      for (std::size_t i = 0; i <= n; ++i) ks[i] = i * n;
      std::vector<double> values;
      if (global) {
        values = spectral::per_query_vs_global_energy(bases, *global);
      } else {
        double tr = 0.0;
        for (const auto& q : qs) tr += q.trace();
        values.assign(n + 1, 0.0);
        for (const auto& b : bases)
          for (std::size_t i = 1; i <= n; ++i) values[i] += b.values(n - i) / tr;
        for (std::size_t i = 1; i <= n; ++i) values[i] += values[i - 1];
      }
      c.write_text(curves / (prefix + "per_query.csv"), spectral::curve_csv(ks, values));
      if (global) {
        spectral::QueryShares sh = spectral::query_shares(bases, *global);
        std::string csv = "row,over_global_trace,top1_over_own_trace\n";
        for (std::size_t i = 0; i < n; ++i)
          csv += std::to_string(i) + "," + fmt(sh.over_global_trace[i]) + "," + fmt(sh.top1_over_own_trace[i]) + "\n";
        c.write_text(curves / ("query_shares_step" + std::to_string(step) + ".csv"), csv);
      }
      if (man.find("query0", true)) {
        std::vector<SymMatrix> cq = man.load_queries(true);
        double tr_raw = 0.0, tr_c = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          tr_raw += qs[i].trace();
          tr_c += cq[i].trace();
        }
        c.text << "step " << step << " per-row mean energy share " << fmt6(1.0 - tr_c / tr_raw) << "\n";
      }
    }
  }
}

void cmd_overlap(Ctx& c) {
  const std::uint64_t step = c.final_step();
  cov::CovarianceManifest man = load_cov(c, step);
  if (!man.find("global")) fail(ErrorCategory::Config, "overlap needs the global scope in the cov manifest");
  SymMatrix g = man.load("global");
  const std::size_t dim = g.dim();
  const std::size_t keep = spectral::retained_vectors(dim);
  const std::size_t quarter = std::max<std::size_t>(1, dim / 4);
  std::vector<std::size_t> grid;
  for (std::size_t k : spectral::default_k_grid(dim))
    if (k <= keep) grid.push_back(k);
  EigenBasis gb = sym_eig(g).truncated(keep);
  fs::path curves = c.cfg.out / "curves";
  const std::string tag = "overlap_step" + std::to_string(step) + "_";
  std::string summary = "basis,target,k,projected,own,ratio\n";

  auto add_summary = [&](const std::string& basis, const std::string& target, const SymMatrix& m,
                         const EigenBasis& b) {
    EigenBasis own = sym_eig(m).truncated(quarter);
    double projected = spectral::projection_energy(m, b.vectors, quarter);
    double mine = spectral::projection_energy(m, own.vectors, quarter);
    summary += basis + "," + target + "," + std::to_string(quarter) + "," + fmt(projected) + "," + fmt(mine) + "," +
               fmt(projected / mine) + "\n";
    c.text << target << " on " << basis << " basis (k=" << quarter << "): " << fmt6(projected) << " of own "
           << fmt6(mine) << ", ratio " << fmt6(projected / mine) << "\n";
  };

  for (std::size_t l = 0; l < man.layers; ++l) {
    const std::string id = "layer" + std::to_string(l);
    if (!man.find(id)) continue;
    SymMatrix m = man.load(id);
    c.write_text(curves / (tag + id + "_on_global.csv"),
                 spectral::curve_csv(grid, spectral::projection_curve(m, gb.vectors, grid)));
    add_summary("global", id, m, gb);
  }
  for (std::uint64_t other : c.cfg.checkpoints) {
    if (other == step) continue;
    fs::path om = cov_dir(c.cfg, other) / "manifest.json";
    if (!fs::exists(om)) continue;
    cov::CovarianceManifest oman = load_cov(c, other);
    if (!oman.find("global")) continue;
    EigenBasis ob = sym_eig(oman.load("global")).truncated(keep);
    const std::string bid = "step" + std::to_string(other) + "_global";
    c.write_text(curves / (tag + "global_on_" + bid + ".csv"),
                 spectral::curve_csv(grid, spectral::projection_curve(g, ob.vectors, grid)));
    add_summary(bid, "global", g, ob);
  }
  c.write_text(curves / ("overlap_summary_step" + std::to_string(step) + ".csv"), summary);
}

recon::PlanMode plan_mode(const Ctx& c) {
  if (!c.args.mode) return c.cfg.plan_mode;
  return recon::parse_mode(*c.args.mode);
}

recon::PartialPlan build_plan(const cov::CovarianceManifest& man, std::size_t k, recon::PlanMode mode) {
  recon::PartialPlan plan;
  if (mode == recon::PlanMode::PerQuery) {
    if (!man.find("query0")) fail(ErrorCategory::Config, "per-query plans need the queries scope in the cov manifest");
    plan = recon::plan_per_query(man.load_queries(), k);
  } else {
    if (!man.find("global")) fail(ErrorCategory::Config, "whole-matrix plans need the global scope in the cov manifest");
    plan = recon::plan_whole_matrix(man.load("global"), k);
  }
  plan.source_covariance = man.id;
  return plan;
}

void cmd_plan(Ctx& c) {
  cov::CovarianceManifest man = load_cov(c, c.final_step());
  const recon::PlanMode mode = plan_mode(c);
  for (std::size_t k : c.ks(c.cfg.plan_k)) {
    recon::PartialPlan plan = build_plan(man, k, mode);
    std::vector<fs::path> written;
    recon::save_plan(plan_path(c.cfg, k, mode), plan, &written);
    c.outputs_from(written);
    c.text << recon::mode_name(mode) << " k=" << k << ": residual trace " << fmt6(plan.total_residual()) << "\n";
  }
}

void cmd_recon_error(Ctx& c) {
  const std::uint64_t step = c.final_step();
  cov::CovarianceManifest man = load_cov(c, step);
  std::vector<recon::PlanMode> modes;
  if (c.args.mode) modes.push_back(plan_mode(c));
  else {
    if (man.find("query0")) modes.push_back(recon::PlanMode::PerQuery);
    if (man.find("global")) modes.push_back(recon::PlanMode::WholeMatrix);
  }
  // Errors are normalized by Tr(C_a); for the per-query mode Tr(C_a) equals
  // the sum of Tr(Q^i), so both modes share one denominator.
  std::string csv = "mode,k,kbar,residual_trace,normalized_error,normalizer\n";
  const std::size_t n = man.n;
  double trace = 0.0;
  if (man.find("global")) trace = man.find("global")->trace;
  else
    for (std::size_t i = 0; i < n; ++i) trace += man.find("query" + std::to_string(i))->trace;
  std::vector<std::size_t> ks = c.ks(c.cfg.plan_k);
  for (recon::PlanMode mode : modes) {
    std::vector<std::size_t> mode_ks = ks;
    if (mode == recon::PlanMode::WholeMatrix)
      for (std::size_t& k : mode_ks) k *= n;  // same exact-score budget
    for (std::size_t k : mode_ks) {
      recon::PartialPlan plan = build_plan(man, k, mode);
      const std::size_t kbar = mode == recon::PlanMode::PerQuery ? k * n : k;
      double res = plan.total_residual();
      csv += std::string(recon::mode_name(mode)) + "," + std::to_string(k) + "," + std::to_string(kbar) + "," +
             fmt(res) + "," + fmt(res / trace) + ",trace_C_a\n";
      c.text << recon::mode_name(mode) << " k=" << k << " kbar=" << kbar << ": normalized error "
             << fmt6(res / trace) << "\n";
    }
  }
  c.write_text(c.cfg.out / "curves" / ("recon_error_step" + std::to_string(step) + ".csv"), csv);
}

std::string flops_line(const recon::FlopsReport& r) {
  std::ostringstream s;
  s << "mode=" << recon::mode_name(r.mode) << " n=" << r.n << " d=" << r.d << " k=" << r.k << " kbar=" << r.kbar
    << " approx_flops=" << r.approx_flops << " exact_flops=" << r.exact_flops << " ratio=" << r.ratio_num << "/"
    << r.ratio_den;
  return s.str();
}

void cmd_flops_direct(const CommandArgs& a, std::ostringstream& text) {
  if (!a.n || !a.d || !a.k || a.k->empty())
    fail(ErrorCategory::Config, "flops needs --n, --d and --k (or --config)");
  recon::PlanMode mode = a.mode ? recon::parse_mode(*a.mode) : recon::PlanMode::PerQuery;
  for (std::size_t k : *a.k) {
    recon::FlopsReport r = recon::flops_ratio(*a.n, *a.d, k, mode);
    text << "ratio " << fmt(r.ratio) << "\n" << flops_line(r) << "\n";
  }
}

void cmd_flops(Ctx& c) {
  recon::PlanMode mode = plan_mode(c);
  const std::uint64_t n = c.args.n.value_or(c.cfg.model.seq_len);
  const std::uint64_t d = c.args.d.value_or(c.cfg.model.head_dim);
  std::string csv = "mode,n,d,k,kbar,approx_flops,exact_flops,ratio_num,ratio_den,ratio\n";
  for (std::size_t k : c.ks(c.cfg.plan_k)) {
    recon::FlopsReport r = recon::flops_ratio(n, d, k, mode);
    csv += std::string(recon::mode_name(mode)) + "," + std::to_string(n) + "," + std::to_string(d) + "," +
           std::to_string(k) + "," + std::to_string(r.kbar) + "," + std::to_string(r.approx_flops) + "," +
           std::to_string(r.exact_flops) + "," + std::to_string(r.ratio_num) + "," + std::to_string(r.ratio_den) +
           "," + fmt(r.ratio) + "\n";
    c.text << "ratio " << fmt(r.ratio) << "\n" << flops_line(r) << "\n";
  }
  c.write_text(c.cfg.out / "curves" / "flops.csv", csv);
}

approx::Regime regime_arg(const Ctx& c) {
  return c.args.regime ? approx::parse_regime(*c.args.regime) : c.cfg.approx.regime;
}

void cmd_train_approx(Ctx& c) {
  const std::uint64_t step = c.final_step();
  io::Checkpoint base = load_ckpt(c, step);
  cov::CovarianceManifest man = load_cov(c, step);
  if (!man.find("query0")) fail(ErrorCategory::Config, "train-approx needs the queries scope in the cov manifest");
  const approx::Regime regime = regime_arg(c);
  const std::size_t k = c.args.k && !c.args.k->empty() ? c.args.k->front() : c.cfg.approx.k;
  approx::ApproxModel m = approx::init_approx_model(base, man.load_queries(), k, regime);
  m.approx.plan.source_covariance = man.id;

  lm::TrainJob job;
  job.model = m.model;
  job.init = m.params;
  if (c.cfg.approx.from_scratch)
    for (auto& [name, t] : nn::init_params(m.model, c.cfg.init_seed())) job.init[name] = t;
  job.corpus = c.cfg.corpus;
  job.hyper = c.cfg.train;
  if (!c.cfg.approx.from_scratch) {
    job.hyper.steps = c.cfg.approx.steps;
    job.hyper.warmup = c.cfg.approx.warmup;
    job.hyper.adam.lr = c.cfg.approx.lr;
  }
  if (!c.cfg.approx.from_scratch) job.hyper.seed = lm::mix_seed(c.cfg.seed, kSaltApprox);
  job.trainable = approx::trainable_for(regime);
  job.score_fn = approx::approx_score_fn(m.approx);
  const std::vector<std::size_t> layers = m.approx.layers;
  const std::size_t n = m.model.seq_len;
  const nn::ParamMap initial = job.init;
  job.after_step = [&](std::uint64_t, const nn::ParamMap& p) {
    if (regime != approx::Regime::Fixed) return;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string name = approx::r_param_name(regime, layers.front(), i);
      if (p.at(name).data != initial.at(name).data) fail(ErrorCategory::Domain, "regime F moved " + name);
    }
  };
  lm::TrainResult r = lm::train(job);
  m.params = std::move(r.params);
  std::vector<fs::path> written;
  approx::save_approx(approx_path(c.cfg, k, regime), m, &written);
  c.outputs_from(written);
  const std::string tag = "k" + std::to_string(k) + "_" + approx::regime_name(regime);
  c.write_text(c.cfg.out / "metrics" / ("approx_" + tag + ".csv"), lm::metrics_csv(r.metrics));
  const lm::MetricRow& last = r.metrics.back();
  c.text << tag << ": step " << last.step << " loss " << fmt6(last.loss) << " mlm_acc " << fmt6(last.mlm_acc) << "\n";
}

void cmd_eval(Ctx& c) {
  const std::uint64_t step = c.final_step();
  io::Checkpoint base = load_ckpt(c, step);
  lm::EvalSet set = lm::make_eval_set(c.cfg.corpus, c.cfg.train.eval_examples, c.cfg.train.mask_rate,
                                      lm::mix_seed(c.cfg.seed, kSaltEval));
  std::string csv = "mode,k,loss,mlm_acc\n";
  lm::EvalResult exact = lm::evaluate(base.config, base.params, set);
  csv += "exact," + std::to_string(base.config.seq_len) + "," + fmt(exact.loss) + "," + fmt(exact.accuracy) + "\n";
  c.text << "exact: mlm_acc " << fmt6(exact.accuracy) << "\n";

  std::vector<approx::InferenceMode> modes = c.cfg.eval_modes;
  if (c.args.mode) modes = {approx::parse_inference_mode(*c.args.mode)};
  if (!modes.empty()) {
    cov::CovarianceManifest man = load_cov(c, step);
    std::vector<SymMatrix> qs = man.load_queries();
    for (approx::InferenceMode md : modes)
      for (std::size_t k : c.ks(c.cfg.eval_k)) {
        nn::ParamMap params = base.params;
        nn::ScoreFn fn = approx::inference_score_fn(md, base.config, params, qs, k);
        lm::EvalResult r = lm::evaluate(base.config, params, set, fn);
        csv += approx::inference_mode_name(md) + "," + std::to_string(k) + "," + fmt(r.loss) + "," +
               fmt(r.accuracy) + "\n";
        c.text << approx::inference_mode_name(md) << " k=" << k << ": mlm_acc " << fmt6(r.accuracy) << "\n";
      }
  }
  c.write_text(c.cfg.out / "eval" / "inference.csv", csv);

  std::vector<fs::path> models;
  fs::path dir = c.cfg.out / "approx";
  if (fs::exists(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (fs::exists(e.path() / "model.prms")) models.push_back(e.path() / "model.prms");
  std::sort(models.begin(), models.end());
  if (models.empty()) return;
  std::string acsv = "regime,k,loss,mlm_acc\n";
  for (const fs::path& p : models) {
    c.input(p, "train-approx");
    c.input(approx::approx_sidecar(p), "train-approx");
    approx::ApproxModel m = approx::load_approx(p);
    lm::EvalResult r = lm::evaluate(m.model, m.params, set, approx::approx_score_fn(m.approx));
    acsv += approx::regime_name(m.approx.regime) + "," + std::to_string(m.approx.plan.k) + "," + fmt(r.loss) + "," +
            fmt(r.accuracy) + "\n";
    c.text << "trained " << approx::regime_name(m.approx.regime) << " k=" << m.approx.plan.k << ": mlm_acc "
           << fmt6(r.accuracy) << "\n";
  }
  c.write_text(c.cfg.out / "eval" / "approx.csv", acsv);
}

void cmd_report(Ctx& c) {
  const fs::path report = c.cfg.out / "report";
  if (fs::exists(report)) fs::remove_all(report);
  struct Item {
    fs::path src;
    std::string name;
    std::string kind;
  };
  std::vector<Item> items;
  auto scan = [&](const std::string& sub, const std::string& ext, const std::string& kind) {
    fs::path dir = c.cfg.out / sub;
    if (!fs::exists(dir)) return;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file() && e.path().string().ends_with(ext)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::string rel = f.lexically_relative(c.cfg.out).generic_string();
      std::string name = rel;
      std::replace(name.begin(), name.end(), '/', '_');
      items.push_back({f, name, kind});
    }
  };
  scan("curves", ".csv", "curve");
  scan("metrics", ".csv", "metrics");
  scan("eval", ".csv", "eval");
  scan("plans", ".plan.json", "plan");
  scan("cov", "manifest.json", "cov-manifest");
  scan("approx", ".approx.json", "approx-manifest");
  if (items.empty()) fail(ErrorCategory::Io, "report: nothing to collate under " + c.cfg.out.string());

  json index;
  index["format"] = "attnlr-report";
  index["config_hash"] = c.cfg.hash;
  index["files"] = json::array();
  for (const Item& it : items) {
    c.input(it.src, "the producing command");
    std::vector<char> bytes = io::read_file(it.src);
    fs::path dst = report / it.name;
    io::write_file_atomic(dst, bytes);
    c.output(dst);
    index["files"].push_back({{"name", it.name}, {"source", c.rel(it.src)}, {"kind", it.kind}, {"hash", io::file_hash(dst)}});
  }
  c.write_text(report / "index.json", index.dump(2) + "\n");
  c.text << "report: " << items.size() << " files in " << report.string() << "\n";
}

using Handler = void (*)(Ctx&);

Handler handler_for(const std::string& name) {
  static const std::map<std::string, Handler> table{
      {"gen-data", cmd_gen_data}, {"train", cmd_train},         {"capture", cmd_capture},
      {"cov", cmd_cov},           {"spectrum", cmd_spectrum},   {"overlap", cmd_overlap},
      {"plan", cmd_plan},         {"recon-error", cmd_recon_error}, {"flops", cmd_flops},
      {"train-approx", cmd_train_approx}, {"eval", cmd_eval},   {"report", cmd_report}};
  auto it = table.find(name);
  if (it == table.end()) fail(ErrorCategory::Config, "unknown command '" + name + "'");
  return it->second;
}

std::string entry_key(const std::string& command, const CommandArgs& a, const RunConfig& cfg) {
  std::string key = command;
  if (a.checkpoint) key += ":step" + std::to_string(*a.checkpoint);
  if (a.dump) key += ":dump=" + a.dump->generic_string();
  if (a.scope) key += ":scope=" + *a.scope;
  if (a.mode) key += ":mode=" + *a.mode;
  if (command == "train-approx") {
    std::size_t k = a.k && !a.k->empty() ? a.k->front() : cfg.approx.k;
    key += ":k" + std::to_string(k) + ":" + approx::regime_name(a.regime ? approx::parse_regime(*a.regime) : cfg.approx.regime);
  } else if (a.k) {
    key += ":k=" + join_k(*a.k);
  } else if (a.regime) {
    key += ":regime=" + *a.regime;
  }
  return key;
}

json args_json(const CommandArgs& a) {
  json j = json::object();
  if (a.config) j["config"] = a.config->generic_string();
  if (a.seed) j["seed"] = *a.seed;
  if (a.out) j["out"] = a.out->generic_string();
  if (a.k) j["k"] = *a.k;
  if (a.scope) j["scope"] = *a.scope;
  if (a.mode) j["mode"] = *a.mode;
  if (a.regime) j["regime"] = *a.regime;
  if (a.checkpoint) j["checkpoint"] = *a.checkpoint;
  if (a.dump) j["dump"] = a.dump->generic_string();
  if (a.n) j["n"] = *a.n;
  if (a.d) j["d"] = *a.d;
  return j;
}

}  // namespace

CommandResult run_command(const std::string& command, const CommandArgs& args) {
  Handler h = handler_for(command);
  if (command == "flops" && !args.config) {
    std::ostringstream text;
    cmd_flops_direct(args, text);
    return {{}, text.str()};
  }
  if (!args.config) fail(ErrorCategory::Config, command + " needs --config");
  RunConfig cfg = load_config(*args.config, args.seed, args.out);

  const auto t0 = std::chrono::steady_clock::now();
  Ctx c{cfg, args, command, entry_key(command, args, cfg), {}, {}, {}, nullptr};
  fs::create_directories(cfg.out);
  RunManifest manifest(cfg.out);
  c.manifest = &manifest;

  auto record = [&](const char* status) {
    json entry;
    entry["key"] = c.key;
    entry["command"] = command;
    entry["status"] = status;
    entry["config_hash"] = cfg.hash;
    entry["args"] = args_json(args);
    entry["inputs"] = json::array();
    for (const auto& p : c.inputs) entry["inputs"].push_back({{"path", c.rel(p)}, {"hash", io::file_hash(p)}});
    entry["outputs"] = json::array();
    for (const auto& p : c.outputs)
      if (fs::exists(p)) entry["outputs"].push_back({{"path", c.rel(p)}, {"hash", io::file_hash(p)}});
    entry["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest.record(std::move(entry));
  };
  try {
    h(c);
  } catch (const Error&) {
    // Files already committed (e.g. checkpoints before a divergence) stay
    // accounted for.
    if (!c.outputs.empty()) record("failed");
    throw;
  }
  record("ok");
  return {c.outputs, c.text.str()};
}

}  // namespace attnlr::pipeline
