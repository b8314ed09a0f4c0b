#include "sdvlm/pipeline.hpp"

#include "sdvlm/adam.hpp"
#include "sdvlm/checkpoint.hpp"
#include "sdvlm/metrics.hpp"
#include "sdvlm/ops.hpp"
#include "sdvlm/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

namespace fs = std::filesystem;
using nlohmann::json;

namespace sdvlm {

namespace {

// ---------------------------------------------------------------- formatting

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int places = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", places, v);
  return buf;
}

// ------------------------------------------------------------------- parsing

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing junk");
    return out;
  } catch (const std::exception&) {
    throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    unsigned long long out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing junk");
    return out;
  } catch (const std::exception&) {
    throw std::invalid_argument(key + ": expected an unsigned integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing junk");
    return out;
  } catch (const std::exception&) {
    throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument(key + ": expected a boolean, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::string cur;
  std::istringstream in(v);
  while (std::getline(in, cur, ',')) out.push_back(parse_int(key, trim(cur)));
  if (out.empty()) throw std::invalid_argument(key + ": empty list");
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"model.d_model", [](RunConfig& c, const std::string& k, const std::string& v) { c.d_model = parse_int(k, v); }},
      {"model.n_decoder_layers", [](RunConfig& c, const std::string& k, const std::string& v) { c.n_decoder_layers = parse_int(k, v); }},
      {"model.n_heads", [](RunConfig& c, const std::string& k, const std::string& v) { c.n_heads = parse_int(k, v); }},
      {"model.max_seq_len", [](RunConfig& c, const std::string& k, const std::string& v) { c.max_seq_len = parse_int(k, v); }},
      {"model.patch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.patch_size = parse_int(k, v); }},
      {"model.n_vision_layers", [](RunConfig& c, const std::string& k, const std::string& v) { c.n_vision_layers = parse_int(k, v); }},
      {"model.d_vision", [](RunConfig& c, const std::string& k, const std::string& v) { c.d_vision = parse_int(k, v); }},
      {"model.skip_source_layer", [](RunConfig& c, const std::string& k, const std::string& v) { c.skip_source_layer = parse_int(k, v); }},
      {"data.n_train", [](RunConfig& c, const std::string& k, const std::string& v) { c.n_train = parse_int(k, v); }},
      {"data.n_eval", [](RunConfig& c, const std::string& k, const std::string& v) { c.n_eval = parse_int(k, v); }},
      {"pretrain.samples", [](RunConfig& c, const std::string& k, const std::string& v) { c.pre_samples = parse_int(k, v); }},
      {"pretrain.epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.pre_epochs = parse_int(k, v); }},
      {"pretrain.batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.pre_batch = parse_int(k, v); }},
      {"pretrain.lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.pre_lr = parse_double(k, v); }},
      {"pretrain.bare_period", [](RunConfig& c, const std::string& k, const std::string& v) { c.bare_period = parse_int(k, v); }},
      {"traces.prompts", [](RunConfig& c, const std::string& k, const std::string& v) { c.prompts = parse_int_list(k, v); }},
      {"traces.step1_budget", [](RunConfig& c, const std::string& k, const std::string& v) { c.step1_budget = parse_int(k, v); }},
      {"traces.step2_budget", [](RunConfig& c, const std::string& k, const std::string& v) { c.step2_budget = parse_int(k, v); }},
      {"distill.loss", [](RunConfig& c, const std::string&, const std::string& v) { c.loss_mode = v; }},
      {"distill.kl_weight", [](RunConfig& c, const std::string& k, const std::string& v) { c.kl_weight = parse_double(k, v); }},
      {"distill.epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.distill_epochs = parse_int(k, v); }},
      {"distill.batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.distill_batch = parse_int(k, v); }},
      {"distill.lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.distill_lr = parse_double(k, v); }},
      {"distill.rank", [](RunConfig& c, const std::string& k, const std::string& v) { c.rank = parse_int(k, v); }},
      {"distill.pos", [](RunConfig& c, const std::string& k, const std::string& v) { c.pos = parse_int(k, v); }},
      {"distill.with_skip", [](RunConfig& c, const std::string& k, const std::string& v) { c.with_skip = parse_bool(k, v); }},
      {"distill.adapter", [](RunConfig& c, const std::string&, const std::string& v) { c.adapter = v; }},
      {"distill.agreement_samples", [](RunConfig& c, const std::string& k, const std::string& v) { c.agreement_samples = parse_int(k, v); }},
      {"ensemble.k", [](RunConfig& c, const std::string& k, const std::string& v) { c.k = parse_int(k, v); }},
      {"ensemble.hidden", [](RunConfig& c, const std::string& k, const std::string& v) { c.ens_hidden = parse_int(k, v); }},
      {"ensemble.epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.ens_epochs = parse_int(k, v); }},
      {"ensemble.batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.ens_batch = parse_int(k, v); }},
      {"ensemble.lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.ens_lr = parse_double(k, v); }},
      {"ablate.n_train", [](RunConfig& c, const std::string& k, const std::string& v) { c.ab_train = parse_int(k, v); }},
      {"ablate.n_eval", [](RunConfig& c, const std::string& k, const std::string& v) { c.ab_eval = parse_int(k, v); }},
      {"ablate.pre_samples", [](RunConfig& c, const std::string& k, const std::string& v) { c.ab_pre_samples = parse_int(k, v); }},
      {"ablate.pre_epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.ab_pre_epochs = parse_int(k, v); }},
      {"ablate.epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.ab_epochs = parse_int(k, v); }},
      {"run.seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); }},
      {"run.out", [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }},
      {"run.jobs", [](RunConfig& c, const std::string& k, const std::string& v) { c.jobs = parse_int(k, v); }},
  };
  return table;
}

// --------------------------------------------------------------- parallelism

// Static round-robin over [0, n); deterministic result placement is the
// caller's job (write to slot i). First worker exception rethrown after join.
void parallel_over(int n, int jobs, const std::function<void(int)>& fn) {
  int workers = std::max(1, std::min(jobs, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errs(static_cast<size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errs[size_t(w)] = std::current_exception();
      }
    });
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errs)
    if (e) std::rethrow_exception(e);
}

// ----------------------------------------------------------------- artifacts

std::string art(const RunConfig& cfg, const std::string& name) {
  return cfg.run_dir() + "/" + name;
}

void require_artifact(const std::string& path, const std::string& producer) {
  if (!fs::exists(path))
    throw std::runtime_error(path + ": not found; run `sdvlm " + producer +
                             "` with this config first");
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f << body;
  if (!f) throw std::runtime_error(path + ": write failed");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

VLM load_base(const RunConfig& cfg, const Workspace& ws) {
  std::string path = art(cfg, "base.ckpt");
  require_artifact(path, "pretrain");
  Checkpoint ck = load_checkpoint(path);
  json meta = json::parse(ck.meta);
  if (meta.value("config_hash", std::string()) != hex64(cfg.hash()))
    throw std::runtime_error(path + ": checkpoint was produced under a different config");
  return VLM::from_checkpoint(ck, cfg.model_config(ws.tok.vocab_size()));
}

TraceCache load_trace_artifact(const RunConfig& cfg, const VLM& m, const Workspace& ws) {
  std::string path = art(cfg, "traces.bin");
  require_artifact(path, "gen-traces");
  TraceCache cache = load_traces(path);
  if (cache.model_checksum != model_checksum(m))
    throw std::runtime_error(path + ": trace cache was generated by a different model; " +
                             "rerun `sdvlm gen-traces`");
  if (cache.library_checksum != ws.lib.checksum())
    throw std::runtime_error(path + ": trace cache was generated from a different prompt " +
                             "library; rerun `sdvlm gen-traces`");
  return cache;
}

}  // namespace

// ------------------------------------------------------------------ RunConfig

void RunConfig::validate() const {
  auto bad = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (d_model < 4) bad("model.d_model must be >= 4");
  if (n_heads < 1 || d_model % n_heads != 0) bad("model.n_heads must divide model.d_model");
  if (n_decoder_layers < 1) bad("model.n_decoder_layers must be >= 1");
  if (max_seq_len < 16) bad("model.max_seq_len must be >= 16");
  if (patch_size < 1 || kImageSize % patch_size != 0)
    bad("model.patch_size must divide the 32-pixel image");
  if (n_vision_layers < 1) bad("model.n_vision_layers must be >= 1");
  if (d_vision < 2) bad("model.d_vision must be >= 2");
  if (skip_source_layer < 0 || skip_source_layer >= n_vision_layers)
    bad("model.skip_source_layer out of range");
  if (n_train < 1 || n_eval < 1) bad("data splits must be non-empty");
  if (pre_samples < 1 || pre_epochs < 1 || pre_batch < 1) bad("pretrain sizes must be >= 1");
  if (pre_lr <= 0) bad("pretrain.lr must be > 0");
  if (bare_period < 1) bad("pretrain.bare_period must be >= 1");
  if (prompts.empty()) bad("traces.prompts must name at least one prompt");
  for (size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i] < 1) bad("traces.prompts ids are 1-based");
    for (size_t j = i + 1; j < prompts.size(); ++j)
      if (prompts[i] == prompts[j]) bad("traces.prompts lists a prompt twice");
  }
  if (step1_budget < 1 || step2_budget < 1) bad("trace budgets must be >= 1");
  if (loss_mode != "mse" && loss_mode != "kl" && loss_mode != "mse+kl")
    bad("distill.loss must be mse, kl or mse+kl");
  if (kl_weight < 0) bad("distill.kl_weight must be >= 0");
  if (distill_epochs < 1 || distill_batch < 1) bad("distill sizes must be >= 1");
  if (distill_lr <= 0) bad("distill.lr must be > 0");
  if (rank < 1) bad("distill.rank must be >= 1");
  if (pos < 0) bad("distill.pos must be >= 0");
  if (adapter != "reft" && adapter != "lora") bad("distill.adapter must be reft or lora");
  if (agreement_samples < 1) bad("distill.agreement_samples must be >= 1");
  if (k < 0 || size_t(k) > prompts.size())
    bad("ensemble.k must lie in [0, |traces.prompts|]");
  if (ens_hidden < 1 || ens_epochs < 1 || ens_batch < 1) bad("ensemble sizes must be >= 1");
  if (ens_lr <= 0) bad("ensemble.lr must be > 0");
  if (ab_train < 1 || ab_eval < 1 || ab_pre_samples < 1 || ab_pre_epochs < 1 || ab_epochs < 1)
    bad("ablate sizes must be >= 1");
  if (out_dir.empty()) bad("run.out must not be empty");
  if (jobs < 1) bad("run.jobs must be >= 1");
}

std::string RunConfig::canonical() const {
  std::ostringstream s;
  s << "model.d_model=" << d_model << '\n'
    << "model.n_decoder_layers=" << n_decoder_layers << '\n'
    << "model.n_heads=" << n_heads << '\n'
    << "model.max_seq_len=" << max_seq_len << '\n'
    << "model.patch_size=" << patch_size << '\n'
    << "model.n_vision_layers=" << n_vision_layers << '\n'
    << "model.d_vision=" << d_vision << '\n'
    << "model.skip_source_layer=" << skip_source_layer << '\n'
    << "data.n_train=" << n_train << '\n'
    << "data.n_eval=" << n_eval << '\n'
    << "pretrain.samples=" << pre_samples << '\n'
    << "pretrain.epochs=" << pre_epochs << '\n'
    << "pretrain.batch_size=" << pre_batch << '\n'
    << "pretrain.lr=" << num(pre_lr) << '\n'
    << "pretrain.bare_period=" << bare_period << '\n'
    << "traces.prompts=" << join_ints(prompts) << '\n'
    << "traces.step1_budget=" << step1_budget << '\n'
    << "traces.step2_budget=" << step2_budget << '\n'
    << "distill.loss=" << loss_mode << '\n'
    << "distill.kl_weight=" << num(kl_weight) << '\n'
    << "distill.epochs=" << distill_epochs << '\n'
    << "distill.batch_size=" << distill_batch << '\n'
    << "distill.lr=" << num(distill_lr) << '\n'
    << "distill.rank=" << rank << '\n'
    << "distill.pos=" << pos << '\n'
    << "distill.with_skip=" << (with_skip ? "true" : "false") << '\n'
    << "distill.adapter=" << adapter << '\n'
    << "distill.agreement_samples=" << agreement_samples << '\n'
    << "ensemble.k=" << k << '\n'
    << "ensemble.hidden=" << ens_hidden << '\n'
    << "ensemble.epochs=" << ens_epochs << '\n'
    << "ensemble.batch_size=" << ens_batch << '\n'
    << "ensemble.lr=" << num(ens_lr) << '\n'
    << "ablate.n_train=" << ab_train << '\n'
    << "ablate.n_eval=" << ab_eval << '\n'
    << "ablate.pre_samples=" << ab_pre_samples << '\n'
    << "ablate.pre_epochs=" << ab_pre_epochs << '\n'
    << "ablate.epochs=" << ab_epochs << '\n'
    << "run.seed=" << seed << '\n';
  return s.str();
}

uint64_t RunConfig::hash() const { return fnv1a64(canonical()); }

std::string RunConfig::run_dir() const { return out_dir + "/run-" + hex64(hash()); }

RunConfig RunConfig::from_ini(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error(path + ": cannot open config file");
  RunConfig cfg;
  std::string line, section;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    std::string where = path + ":" + std::to_string(lineno);
    if (t.front() == '[') {
      if (t.back() != ']') throw std::invalid_argument(where + ": unterminated section");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) throw std::invalid_argument(where + ": empty section name");
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(where + ": expected key = value");
    std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (section.empty())
      throw std::invalid_argument(where + ": key '" + key + "' before any [section]");
    try {
      cfg.set(section + "." + key, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + ": " + e.what());
    }
  }
  return cfg;
}

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  auto it = setters().find(dotted_key);
  if (it == setters().end())
    throw std::invalid_argument("unknown config key '" + dotted_key + "'");
  it->second(*this, dotted_key, value);
}

VLMConfig RunConfig::model_config(int vocab_size) const {
  VLMConfig mc;
  mc.d_model = d_model;
  mc.n_decoder_layers = n_decoder_layers;
  mc.n_heads = n_heads;
  mc.vocab_size = vocab_size;
  mc.max_seq_len = max_seq_len;
  mc.vision = VisionConfig{kImageSize, patch_size, n_vision_layers, d_vision};
  mc.skip_source_layer = skip_source_layer;
  mc.seed = derive_seed(seed, "model-init");
  return mc;
}

TraceConfig RunConfig::trace_config() const {
  TraceConfig tc;
  tc.step1_budget = step1_budget;
  tc.step2_budget = step2_budget;
  tc.jobs = jobs;
  return tc;
}

DistillConfig RunConfig::distill_config() const {
  DistillConfig dc;
  dc.loss_mode = loss_mode;
  dc.kl_weight = kl_weight;
  dc.epochs = distill_epochs;
  dc.batch_size = distill_batch;
  dc.lr = distill_lr;
  dc.rank = rank;
  dc.pos = pos;
  dc.with_skip = with_skip;
  dc.seed = derive_seed(seed, "distill");
  return dc;
}

EnsembleConfig RunConfig::ensemble_config() const {
  EnsembleConfig ec;
  ec.hidden = ens_hidden;
  ec.epochs = ens_epochs;
  ec.batch_size = ens_batch;
  ec.lr = ens_lr;
  ec.seed = derive_seed(seed, "ensemble");
  return ec;
}

std::vector<int> RunConfig::member_prompts() const {
  if (k == 0 || size_t(k) >= prompts.size()) return prompts;
  return std::vector<int>(prompts.begin(), prompts.begin() + k);
}

// ------------------------------------------------------------------ Workspace

Workspace Workspace::make(const RunConfig& cfg) {
  cfg.validate();
  PromptLibrary lib = PromptLibrary::defaults();
  for (int pid : cfg.prompts) lib.by_id(pid);  // unknown prompt throws here

  // Closed vocabulary: rendered templates, the full question space and the
  // word bank the analyses draw from. Independent of the data sizes so the
  // same config always yields the same token ids.
  std::vector<std::string> corpus;
  const std::string q0 = "which color appears most often?";
  for (const PromptTemplate& t : lib.templates()) {
    corpus.push_back(render_step1(t, q0));
    corpus.push_back(render_step2(t, q0, "none . total 0"));
  }
  corpus.push_back(render_bare(q0));
  for (std::string& q : question_space()) corpus.push_back(std::move(q));
  corpus.push_back("0 1 2 3 4 5 6 7 8 9 red green blue yellow square circle triangle");
  corpus.push_back("at total none row column holds a majority count question answer yes no");
  Tokenizer tok = Tokenizer::from_corpus(corpus);

  auto [train, eval] = generate_dataset(derive_seed(cfg.seed, "dataset"), cfg.n_train,
                                        cfg.n_eval);
  return Workspace{cfg, std::move(lib), std::move(tok), std::move(train), std::move(eval)};
}

// -------------------------------------------------------------- gold analysis

namespace {

std::string cell_pos(int index, int grid) {
  return std::to_string(index / grid + 1) + " " + std::to_string(index % grid + 1);
}

int find_word(const std::string& question, const char* const* words, size_t n) {
  for (size_t i = 0; i < n; ++i)
    if (question.find(words[i]) != std::string::npos) return int(i);
  throw std::logic_error("gold_analysis: no known word in '" + question + "'");
}

// token following `anchor` in the question, e.g. the "2" of "row 2"
std::string word_after(const std::string& question, const std::string& anchor) {
  std::vector<std::string> ws = Tokenizer::split_words(question);
  for (size_t i = 0; i + 1 < ws.size(); ++i)
    if (ws[i] == anchor) return ws[i + 1];
  throw std::logic_error("gold_analysis: '" + anchor + "' not in '" + question + "'");
}

}  // namespace

std::string gold_analysis(const VQASample& s) {
  switch (s.family) {
    case TaskFamily::count_color: {
      int c = find_word(s.question, kColorWords.data(), kColorWords.size());
      std::string items;
      for (size_t i = 0; i < s.cells.size(); ++i)
        if (!s.cells[i].empty() && s.cells[i].color == c) {
          if (!items.empty()) items += " , ";
          items += std::string(kColorWords[size_t(c)]) + " at " + cell_pos(int(i), s.grid);
        }
      if (items.empty()) items = "none";
      return items + " . total " + s.gold;
    }
    case TaskFamily::count_shape: {
      int sh = find_word(s.question, kShapePlurals.data(), kShapePlurals.size());
      std::string items;
      for (size_t i = 0; i < s.cells.size(); ++i)
        if (!s.cells[i].empty() && s.cells[i].shape == sh) {
          if (!items.empty()) items += " , ";
          items += std::string(kShapeWords[size_t(sh)]) + " at " + cell_pos(int(i), s.grid);
        }
      if (items.empty()) items = "none";
      return items + " . total " + s.gold;
    }
    case TaskFamily::color_at_cell: {
      int row = parse_int("gold_analysis row", word_after(s.question, "row"));
      int col = parse_int("gold_analysis column", word_after(s.question, "column"));
      const Cell& cell = s.cells[size_t((row - 1) * s.grid + (col - 1))];
      return "row " + std::to_string(row) + " column " + std::to_string(col) + " holds a " +
             kColorWords[size_t(cell.color)] + " " + kShapeWords[size_t(cell.shape)];
    }
    case TaskFamily::majority_color: {
      int tally[4] = {0, 0, 0, 0};
      for (const Cell& cell : s.cells)
        if (!cell.empty()) ++tally[cell.color];
      std::string out;
      for (size_t c = 0; c < kColorWords.size(); ++c) {
        if (c) out += " , ";
        out += std::string(kColorWords[c]) + " " + std::to_string(tally[c]);
      }
      return out + " . majority " + s.gold;
    }
    case TaskFamily::exists_shape: {
      int sh = find_word(s.question, kShapeWords.data(), kShapeWords.size());
      int n = 0;
      for (const Cell& cell : s.cells)
        if (!cell.empty() && cell.shape == sh) ++n;
      return std::string(kShapeWords[size_t(sh)]) + " count " + std::to_string(n) + " . " +
             s.gold;
    }
  }
  throw std::logic_error("gold_analysis: bad family");
}

// -------------------------------------------------------------- stage helpers

namespace {

// prompt tokens (Seg from build_sequence) + the supervised completion + eos
struct PreExample {
  TokenSequence seq;
  int prompt_len = 0;
  size_t sample = 0;  // index into the pretrain split
};

PreExample make_example(const Tokenizer& tok, int n_patches, int max_seq_len,
                        const std::string& prompt_text, const std::string& completion,
                        size_t sample_index) {
  PreExample ex;
  ex.seq = build_sequence(tok, prompt_text, n_patches);
  ex.prompt_len = int(ex.seq.size());
  ex.sample = sample_index;
  for (int id : tok.encode(completion)) ex.seq.append(id, Seg::answer);
  ex.seq.append(tok.eos(), Seg::answer);
  if (int(ex.seq.size()) > max_seq_len)
    throw std::invalid_argument("pretrain example needs " + std::to_string(ex.seq.size()) +
                                " positions but model.max_seq_len is " +
                                std::to_string(max_seq_len));
  return ex;
}

std::string decode_new_tokens(const Tokenizer& tok, const TokenSequence& full,
                              size_t prompt_len) {
  std::vector<int> ans(full.ids.begin() + long(prompt_len), full.ids.end());
  return tok.decode(ans, true);
}

std::string bare_decode(VLM& m, const Tokenizer& tok, const VQASample& s, int budget,
                        const Interventions* iv = nullptr) {
  TokenSequence seq = build_sequence(tok, render_bare(s.question), m.cfg.n_patches());
  TokenSequence full = m.greedy_decode(seq, s.image_floats(), budget, tok.eos(), iv);
  return decode_new_tokens(tok, full, seq.size());
}

void update_results_json(const RunConfig& cfg, const std::string& mode, double acc,
                         double anls_score, int n) {
  std::string path = art(cfg, "results.json");
  json j;
  if (fs::exists(path)) {
    std::ifstream f(path);
    f >> j;
  }
  j["config_hash"] = hex64(cfg.hash());
  j["seed"] = cfg.seed;
  j[mode] = {{"accuracy", acc}, {"anls", anls_score}, {"n", n}};
  write_text(path, j.dump(2) + "\n");
}

}  // namespace

// -------------------------------------------------------------- stage_pretrain

void stage_pretrain(const RunConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  Workspace ws = Workspace::make(cfg);
  fs::create_directories(cfg.run_dir());

  VLM m(cfg.model_config(ws.tok.vocab_size()));
  auto [pre, probe_tail] =
      generate_dataset(derive_seed(cfg.seed, "pretrain-data"), cfg.pre_samples, 1);
  (void)probe_tail;

  // Mixed-form corpus: bare answers keep the single-step path alive while
  // the two prompted forms teach analysis generation and answer extraction.
  std::vector<PreExample> examples;
  examples.reserve(pre.size());
  for (size_t i = 0; i < pre.size(); ++i) {
    const VQASample& s = pre[i];
    int slot = int(i) % cfg.bare_period;
    const PromptTemplate& tpl =
        ws.lib.by_id(cfg.prompts[(i / size_t(cfg.bare_period)) % cfg.prompts.size()]);
    std::string prompt_text, completion;
    if (slot == 0) {
      prompt_text = render_bare(s.question);
      completion = s.gold;
    } else if (slot % 2 == 1) {
      prompt_text = render_step1(tpl, s.question);
      completion = gold_analysis(s);
    } else {
      prompt_text = render_step2(tpl, s.question, gold_analysis(s));
      completion = s.gold;
    }
    examples.push_back(
        make_example(ws.tok, m.cfg.n_patches(), cfg.max_seq_len, prompt_text, completion, i));
  }

  m.set_trainable(true);
  std::vector<Param*> params = m.params();
  AdamState adam;
  Rng shuffle(derive_seed(cfg.seed, "pretrain-shuffle"));
  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<double> losses;
  for (int epoch = 0; epoch < cfg.pre_epochs; ++epoch) {
    shuffle.shuffle(order);
    double ep_loss = 0.0;
    for (size_t start = 0; start < order.size(); start += size_t(cfg.pre_batch)) {
      size_t stop = std::min(order.size(), start + size_t(cfg.pre_batch));
      for (size_t i = start; i < stop; ++i) {
        const PreExample& ex = examples[order[i]];
        Tape t;
        LayerStates st = m.forward(t, ex.seq, pre[ex.sample].image_floats());
        std::vector<int> rows, targets;
        for (int r = ex.prompt_len - 1; r + 1 < int(ex.seq.size()); ++r) {
          rows.push_back(r);
          targets.push_back(ex.seq.ids[size_t(r) + 1]);
        }
        Tensor loss = cross_entropy(st.logits, targets, rows);
        t.backward(loss);
        t.collect_param_grads();
        ep_loss += loss.item();
      }
      double inv = 1.0 / double(stop - start);
      for (Param* p : params)
        for (double& g : p->grad) g *= inv;
      adam_step_all(params, adam, cfg.pre_lr);
    }
    losses.push_back(ep_loss / double(examples.size()));
    std::cout << "pretrain epoch " << (epoch + 1) << "/" << cfg.pre_epochs << ": loss "
              << fixed(losses.back()) << " (" << fixed(seconds_since(t0), 1) << "s)"
              << std::endl;
  }

  // fit probe: single-step accuracy on a slice of the pretraining data
  int probe_n = std::min<int>(250, int(pre.size()));
  std::vector<std::string> raw(static_cast<size_t>(probe_n));
  parallel_over(probe_n, cfg.jobs, [&](int i) {
    raw[size_t(i)] = bare_decode(m, ws.tok, pre[size_t(i)], cfg.step2_budget);
  });
  std::vector<VQASample> probe(pre.begin(), pre.begin() + probe_n);
  std::unordered_map<int, size_t> probe_index;
  for (size_t i = 0; i < probe.size(); ++i) probe_index[probe[i].sample_id] = i;
  EvalReport probe_rep = evaluate(
      [&](const VQASample& s) { return raw[probe_index.at(s.sample_id)]; }, probe,
      "accuracy", cfg.seed, hex64(cfg.hash()));

  json meta = {{"stage", "pretrain"},
               {"config_hash", hex64(cfg.hash())},
               {"vocab_size", ws.tok.vocab_size()},
               {"library_checksum", ws.lib.checksum()}};
  save_checkpoint(art(cfg, "base.ckpt"), m.to_checkpoint(meta.dump()));

  json report = {{"stage", "pretrain"},
                 {"config_hash", hex64(cfg.hash())},
                 {"n_examples", examples.size()},
                 {"epochs", cfg.pre_epochs},
                 {"loss", losses},
                 {"probe_accuracy", probe_rep.aggregate},
                 {"probe_n", probe_n},
                 {"wall_clock_sec", 0}};
  write_text(art(cfg, "pretrain-report.json"), report.dump(2) + "\n");

  std::cout << "pretrain: loss " << fixed(losses.front()) << " -> " << fixed(losses.back())
            << ", probe accuracy " << fixed(probe_rep.aggregate) << ", saved "
            << art(cfg, "base.ckpt") << " (" << fixed(seconds_since(t0), 1) << "s)"
            << std::endl;
}

// ------------------------------------------------------------ stage_gen_traces

void stage_gen_traces(const RunConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  Workspace ws = Workspace::make(cfg);
  VLM m = load_base(cfg, ws);

  TraceCache cache = generate_traces(m, ws.tok, ws.lib, ws.train, cfg.prompts,
                                     cfg.trace_config(), "cfg=" + hex64(cfg.hash()));
  save_traces(cache, art(cfg, "traces.bin"));

  size_t degenerate = 0;
  for (const ReasoningTrace& r : cache.records) degenerate += size_t(r.degenerate);
  std::cout << "gen-traces: " << cache.records.size() << " records ("
            << ws.train.size() << " samples x " << cfg.prompts.size() << " prompts), "
            << degenerate << " degenerate, saved " << art(cfg, "traces.bin") << " ("
            << fixed(seconds_since(t0), 1) << "s)" << std::endl;
}

// --------------------------------------------------------------- stage_distill

namespace {

// First `cap` records of one prompt; keeps the agreement probe O(cap).
TraceCache subset_for_prompt(const TraceCache& cache, int pid, int cap) {
  TraceCache sub;
  sub.model_checksum = cache.model_checksum;
  sub.library_checksum = cache.library_checksum;
  sub.config = cache.config;
  sub.d_model = cache.d_model;
  sub.vocab_size = cache.vocab_size;
  for (const ReasoningTrace& r : cache.records) {
    if (r.prompt_id != pid) continue;
    sub.records.push_back(r);
    if (int(sub.records.size()) >= cap) break;
  }
  return sub;
}

}  // namespace

void stage_distill(const RunConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  Workspace ws = Workspace::make(cfg);
  VLM m = load_base(cfg, ws);
  TraceCache cache = load_trace_artifact(cfg, m, ws);
  DistillConfig dc = cfg.distill_config();
  m.set_trainable(false);  // before the workers fan out

  int n = int(cfg.prompts.size());
  std::vector<std::string> lines(static_cast<size_t>(n));
  parallel_over(n, cfg.jobs, [&](int i) {
    int pid = cfg.prompts[size_t(i)];
    auto pt0 = std::chrono::steady_clock::now();

    TrainReport rep;
    Checkpoint ck;
    Interventions iv;
    std::string file;
    if (cfg.adapter == "lora") {
      auto [set, r] = train_lora_set(m, ws.tok, ws.train, cache, pid, dc);
      rep = std::move(r);
      set.add_to(ck);
      iv = set.hooks();
      file = "lora-p" + std::to_string(pid) + ".ckpt";
      json meta = {{"stage", "distill"}, {"adapter", "lora"}, {"prompt_id", pid},
                   {"config_hash", hex64(cfg.hash())}};
      ck.meta = meta.dump();
      save_checkpoint(art(cfg, file), ck);

      TraceCache sub = subset_for_prompt(cache, pid, cfg.agreement_samples);
      double agree = teacher_agreement(m, ws.tok, ws.train, sub, pid, &iv);
      double base = teacher_agreement(m, ws.tok, ws.train, sub, pid, nullptr);
      double wall = seconds_since(pt0);
      rep.wall_clock_sec = 0.0;
      json j = json::parse(rep.to_json());
      j["agreement_student"] = agree;
      j["agreement_base"] = base;
      j["agreement_n"] = sub.records.size();
      write_text(art(cfg, "train-report-p" + std::to_string(pid) + ".json"),
                 j.dump(2) + "\n");
      double drop = rep.loss_total.front() > 0
                        ? 1.0 - rep.loss_total.back() / rep.loss_total.front()
                        : 0.0;
      lines[size_t(i)] = "prompt " + std::to_string(pid) + " (lora): loss " +
                         fixed(rep.loss_total.front()) + " -> " +
                         fixed(rep.loss_total.back()) + " (-" + fixed(100 * drop, 1) +
                         "%), agreement " + fixed(agree) + " vs base " + fixed(base) +
                         " (" + fixed(wall, 1) + "s)";
      return;
    }

    auto [set, r] = train_adapter_set(m, ws.tok, ws.train, cache, pid, dc);
    rep = std::move(r);
    set.add_to(ck);
    iv = set.hooks();
    file = "adapters-p" + std::to_string(pid) + ".ckpt";
    json meta = {{"stage", "distill"}, {"adapter", "reft"}, {"prompt_id", pid},
                 {"config_hash", hex64(cfg.hash())}};
    ck.meta = meta.dump();
    save_checkpoint(art(cfg, file), ck);

    TraceCache sub = subset_for_prompt(cache, pid, cfg.agreement_samples);
    double agree = teacher_agreement(m, ws.tok, ws.train, sub, pid, &iv);
    double base = teacher_agreement(m, ws.tok, ws.train, sub, pid, nullptr);
    double wall = seconds_since(pt0);
    rep.wall_clock_sec = 0.0;
    json j = json::parse(rep.to_json());
    j["agreement_student"] = agree;
    j["agreement_base"] = base;
    j["agreement_n"] = sub.records.size();
    write_text(art(cfg, "train-report-p" + std::to_string(pid) + ".json"), j.dump(2) + "\n");
    double drop = rep.loss_total.front() > 0
                      ? 1.0 - rep.loss_total.back() / rep.loss_total.front()
                      : 0.0;
    lines[size_t(i)] = "prompt " + std::to_string(pid) + ": loss " +
                       fixed(rep.loss_total.front()) + " -> " + fixed(rep.loss_total.back()) +
                       " (-" + fixed(100 * drop, 1) + "%), agreement " + fixed(agree) +
                       " vs base " + fixed(base) + " (" + fixed(wall, 1) + "s)";
  });

  for (const std::string& line : lines) std::cout << line << std::endl;
  std::cout << "distill: " << n << " prompts done (" << fixed(seconds_since(t0), 1) << "s)"
            << std::endl;
}

// -------------------------------------------------------- stage_train_ensemble

void stage_train_ensemble(const RunConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  Workspace ws = Workspace::make(cfg);
  VLM m = load_base(cfg, ws);
  TraceCache cache = load_trace_artifact(cfg, m, ws);

  std::vector<int> members = cfg.member_prompts();
  LabelReport labels = make_labels(cache, members);
  save_labels_csv(labels, art(cfg, "labels.csv"));

  auto [pred, info] = train_predictor(m, ws.tok, ws.train, labels, members,
                                      cfg.ensemble_config());
  Checkpoint ck;
  pred.add_to(ck);
  json meta = {{"stage", "train-ensemble"}, {"members", members},
               {"config_hash", hex64(cfg.hash())}};
  ck.meta = meta.dump();
  save_checkpoint(art(cfg, "predictor.ckpt"), ck);

  json report = {{"stage", "train-ensemble"},
                 {"config_hash", hex64(cfg.hash())},
                 {"members", members},
                 {"n_labels", labels.labels.size()},
                 {"dropped", labels.dropped},
                 {"loss", info.loss},
                 {"train_accuracy", info.train_accuracy},
                 {"majority_baseline", info.majority_baseline},
                 {"distinct_winners", info.distinct_winners},
                 {"wall_clock_sec", 0}};
  write_text(art(cfg, "ensemble-report.json"), report.dump(2) + "\n");

  std::cout << "train-ensemble: " << labels.labels.size() << " labels (" << labels.dropped
            << " dropped), predictor accuracy " << fixed(info.train_accuracy)
            << " vs majority " << fixed(info.majority_baseline) << ", saved "
            << art(cfg, "predictor.ckpt") << " (" << fixed(seconds_since(t0), 1) << "s)"
            << std::endl;
}

// ------------------------------------------------------------------ stage_eval

namespace {

std::string pick_teacher_answer(VLM& m, const Tokenizer& tok, const PromptLibrary& lib,
                                const std::vector<int>& prompt_ids, const VQASample& s,
                                const TraceConfig& tc) {
  std::string fallback;
  std::string best;
  double best_conf = -1.0;
  bool found = false;
  for (int pid : prompt_ids) {
    const PromptTemplate& tpl = lib.by_id(pid);
    StepResult r1 = run_step1(m, tok, tpl, s, tc.step1_budget);
    ReasoningTrace tr = run_step2(m, tok, tpl, s, r1.text, tc);
    if (fallback.empty() && !tr.y2_hat.empty()) fallback = tr.y2_hat;
    if (tr.degenerate) continue;
    if (tr.confidence > best_conf) {  // strict: ties keep the lowest prompt id
      best_conf = tr.confidence;
      best = tr.y2_hat;
      found = true;
    }
  }
  return found ? best : fallback;
}

std::vector<AdapterSet> load_member_sets(const RunConfig& cfg, const VLM& m,
                                         const std::vector<int>& members,
                                         const DistillConfig& dc) {
  std::vector<AdapterSet> sets;
  sets.reserve(members.size());
  for (int pid : members) {
    std::string path = art(cfg, "adapters-p" + std::to_string(pid) + ".ckpt");
    require_artifact(path, "distill");
    AdapterSet set(m.cfg, pid, dc.rank, dc.pos, dc.seed, dc.with_skip);
    set.load_from(load_checkpoint(path));
    sets.push_back(std::move(set));
  }
  return sets;
}

EnsembleWeightPredictor load_predictor(const RunConfig& cfg, const VLM& m,
                                       const std::vector<int>& members) {
  std::string path = art(cfg, "predictor.ckpt");
  require_artifact(path, "train-ensemble");
  EnsembleWeightPredictor pred(m.cfg.d_model, cfg.ens_hidden, members,
                               derive_seed(cfg.seed, "ensemble"));
  pred.load_from(load_checkpoint(path));
  return pred;
}

}  // namespace

std::pair<double, double> stage_eval(const RunConfig& cfg, const std::string& mode,
                                     bool json_out) {
  if (mode != "base" && mode != "teacher" && mode != "distilled")
    throw std::invalid_argument("eval mode must be base, teacher or distilled, got '" +
                                mode + "'");
  auto t0 = std::chrono::steady_clock::now();
  Workspace ws = Workspace::make(cfg);
  VLM m = load_base(cfg, ws);
  int n = int(ws.eval.size());
  std::vector<std::string> raw(static_cast<size_t>(n));

  if (mode == "base") {
    parallel_over(n, cfg.jobs, [&](int i) {
      raw[size_t(i)] = bare_decode(m, ws.tok, ws.eval[size_t(i)], cfg.step2_budget);
    });
  } else if (mode == "teacher") {
    TraceConfig tc = cfg.trace_config();
    parallel_over(n, cfg.jobs, [&](int i) {
      raw[size_t(i)] =
          pick_teacher_answer(m, ws.tok, ws.lib, cfg.prompts, ws.eval[size_t(i)], tc);
    });
  } else {
    if (cfg.adapter != "reft")
      throw std::invalid_argument(
          "distilled eval drives the reft ensemble; compare lora through "
          "`sdvlm ablate --grid adapter`");
    DistillConfig dc = cfg.distill_config();
    std::vector<int> members = cfg.member_prompts();
    std::vector<AdapterSet> sets = load_member_sets(cfg, m, members, dc);
    EnsembleWeightPredictor pred = load_predictor(cfg, m, members);
    parallel_over(n, cfg.jobs, [&](int i) {
      raw[size_t(i)] =
          ensemble_decode(m, ws.tok, sets, pred, ws.eval[size_t(i)], cfg.step2_budget);
    });
  }

  std::unordered_map<int, size_t> index;
  for (size_t i = 0; i < ws.eval.size(); ++i) index[ws.eval[i].sample_id] = i;
  auto reader = [&](const VQASample& s) { return raw[index.at(s.sample_id)]; };
  EvalReport acc = evaluate(reader, ws.eval, "accuracy", cfg.seed, hex64(cfg.hash()));
  EvalReport an = evaluate(reader, ws.eval, "anls", cfg.seed, hex64(cfg.hash()));
  save_report_csv(acc, art(cfg, "eval-" + mode + "-accuracy.csv"));
  save_report_csv(an, art(cfg, "eval-" + mode + "-anls.csv"));
  update_results_json(cfg, mode, acc.aggregate, an.aggregate, n);

  if (json_out) {
    json j = {{"mode", mode}, {"n", n}, {"accuracy", acc.aggregate}, {"anls", an.aggregate},
              {"seed", cfg.seed}, {"config_hash", hex64(cfg.hash())}};
    std::cout << j.dump() << std::endl;
  } else {
    std::cout << "eval mode=" << mode << " n=" << n << " accuracy="
              << fixed(acc.aggregate) << " anls=" << fixed(an.aggregate) << " seed="
              << cfg.seed << " cfg=" << hex64(cfg.hash()) << " ("
              << fixed(seconds_since(t0), 1) << "s)" << std::endl;
  }
  return {acc.aggregate, an.aggregate};
}

// ---------------------------------------------------------------- stage_ablate

namespace {

struct AblateRow {
  std::string cell;
  int n_eval = 0;
  double accuracy = 0.0;
  double anls = 0.0;
};

// The in-memory reduced pipeline the grid cells share: pretrain once, trace
// once per prompt list, then let each cell distill/evaluate its own arm.
struct MiniPipeline {
  Workspace ws;
  VLM m;
  TraceCache cache;

  static MiniPipeline make(const RunConfig& red) {
    Workspace ws = Workspace::make(red);
    VLM m(red.model_config(ws.tok.vocab_size()));

    auto [pre, tail] =
        generate_dataset(derive_seed(red.seed, "pretrain-data"), red.pre_samples, 1);
    (void)tail;
    std::vector<PreExample> examples;
    examples.reserve(pre.size());
    for (size_t i = 0; i < pre.size(); ++i) {
      const VQASample& s = pre[i];
      int slot = int(i) % red.bare_period;
      const PromptTemplate& tpl =
          ws.lib.by_id(red.prompts[(i / size_t(red.bare_period)) % red.prompts.size()]);
      std::string prompt_text, completion;
      if (slot == 0) {
        prompt_text = render_bare(s.question);
        completion = s.gold;
      } else if (slot % 2 == 1) {
        prompt_text = render_step1(tpl, s.question);
        completion = gold_analysis(s);
      } else {
        prompt_text = render_step2(tpl, s.question, gold_analysis(s));
        completion = s.gold;
      }
      examples.push_back(make_example(ws.tok, m.cfg.n_patches(), red.max_seq_len,
                                      prompt_text, completion, i));
    }
    m.set_trainable(true);
    std::vector<Param*> params = m.params();
    AdamState adam;
    Rng shuffle(derive_seed(red.seed, "pretrain-shuffle"));
    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < red.pre_epochs; ++epoch) {
      shuffle.shuffle(order);
      for (size_t start = 0; start < order.size(); start += size_t(red.pre_batch)) {
        size_t stop = std::min(order.size(), start + size_t(red.pre_batch));
        for (size_t i = start; i < stop; ++i) {
          const PreExample& ex = examples[order[i]];
          Tape t;
          LayerStates st = m.forward(t, ex.seq, pre[ex.sample].image_floats());
          std::vector<int> rows, targets;
          for (int r = ex.prompt_len - 1; r + 1 < int(ex.seq.size()); ++r) {
            rows.push_back(r);
            targets.push_back(ex.seq.ids[size_t(r) + 1]);
          }
          Tensor loss = cross_entropy(st.logits, targets, rows);
          t.backward(loss);
          t.collect_param_grads();
        }
        double inv = 1.0 / double(stop - start);
        for (Param* p : params)
          for (double& g : p->grad) g *= inv;
        adam_step_all(params, adam, red.pre_lr);
      }
    }
    m.set_trainable(false);

    TraceCache cache = generate_traces(m, ws.tok, ws.lib, ws.train, red.prompts,
                                       red.trace_config(), "ablate");
    return MiniPipeline{std::move(ws), std::move(m), std::move(cache)};
  }

  // accuracy/anls of the distilled ensemble under one arm's DistillConfig
  AblateRow eval_ensemble_arm(const RunConfig& red, const DistillConfig& dc,
                              const std::string& cell) {
    std::vector<int> members = red.member_prompts();
    std::vector<AdapterSet> sets;
    for (int pid : members) {
      auto [set, rep] = train_adapter_set(m, ws.tok, ws.train, cache, pid, dc);
      (void)rep;
      sets.push_back(std::move(set));
    }
    LabelReport labels = make_labels(cache, members);
    auto [pred, info] = train_predictor(m, ws.tok, ws.train, labels, members,
                                        red.ensemble_config());
    (void)info;
    return score_decodes(red, cell, [&](const VQASample& s) {
      return ensemble_decode(m, ws.tok, sets, pred, s, red.step2_budget);
    });
  }

  AblateRow score_decodes(const RunConfig& red, const std::string& cell,
                          const std::function<std::string(const VQASample&)>& decode) {
    int n = int(ws.eval.size());
    std::vector<std::string> raw(static_cast<size_t>(n));
    parallel_over(n, red.jobs, [&](int i) { raw[size_t(i)] = decode(ws.eval[size_t(i)]); });
    std::unordered_map<int, size_t> index;
    for (size_t i = 0; i < ws.eval.size(); ++i) index[ws.eval[i].sample_id] = i;
    auto reader = [&](const VQASample& s) { return raw[index.at(s.sample_id)]; };
    EvalReport acc = evaluate(reader, ws.eval, "accuracy", red.seed, hex64(red.hash()));
    EvalReport an = evaluate(reader, ws.eval, "anls", red.seed, hex64(red.hash()));
    return AblateRow{cell, n, acc.aggregate, an.aggregate};
  }
};

void soft_expect(bool ok, const std::string& what) {
  if (!ok)
    std::cerr << "warning: expected " << what
              << " on this corpus; the direction is corpus-dependent, not a failure"
              << std::endl;
}

double row_acc(const std::vector<AblateRow>& rows, const std::string& cell) {
  for (const AblateRow& r : rows)
    if (r.cell == cell) return r.accuracy;
  throw std::logic_error("ablate: no row named " + cell);
}

}  // namespace

void stage_ablate(const RunConfig& cfg, const std::string& grid, bool json_out) {
  if (grid != "skip" && grid != "loss" && grid != "k" && grid != "adapter")
    throw std::invalid_argument("ablate grid must be skip, loss, k or adapter, got '" +
                                grid + "'");
  auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  fs::create_directories(cfg.run_dir());

  // Every cell runs the same reduced pipeline; only the arm under study moves.
  RunConfig red = cfg;
  red.n_train = cfg.ab_train;
  red.n_eval = cfg.ab_eval;
  red.pre_samples = cfg.ab_pre_samples;
  red.pre_epochs = cfg.ab_pre_epochs;
  red.distill_epochs = cfg.ab_epochs;
  red.adapter = "reft";
  if (grid == "k") {
    red.k = 0;  // members chosen per cell below
  } else if (red.k > 4) {
    red.k = 4;  // cap the shared grids at the paper's operating point
  }

  MiniPipeline mp = MiniPipeline::make(red);
  DistillConfig base_dc = red.distill_config();
  std::vector<AblateRow> rows;

  if (grid == "skip") {
    for (bool on : {true, false}) {
      DistillConfig dc = base_dc;
      dc.with_skip = on;
      rows.push_back(mp.eval_ensemble_arm(red, dc, on ? "skip-on" : "skip-off"));
    }
    soft_expect(row_acc(rows, "skip-on") >= row_acc(rows, "skip-off"),
                "skip-on >= skip-off");
  } else if (grid == "loss") {
    for (const char* mode : {"mse", "kl", "mse+kl"}) {
      DistillConfig dc = base_dc;
      dc.loss_mode = mode;
      rows.push_back(mp.eval_ensemble_arm(red, dc, mode));
    }
    soft_expect(row_acc(rows, "mse+kl") >= row_acc(rows, "mse") &&
                    row_acc(rows, "mse+kl") >= row_acc(rows, "kl"),
                "mse+kl >= mse and mse+kl >= kl");
  } else if (grid == "k") {
    // adapters are k-independent: train one set per prompt, reuse across cells
    std::vector<AdapterSet> all;
    for (int pid : red.prompts) {
      auto [set, rep] = train_adapter_set(mp.m, mp.ws.tok, mp.ws.train, mp.cache, pid,
                                          base_dc);
      (void)rep;
      all.push_back(std::move(set));
    }
    for (int kk : {1, 2, 4, 8}) {
      if (size_t(kk) > red.prompts.size()) continue;
      std::vector<int> members(red.prompts.begin(), red.prompts.begin() + kk);
      std::vector<AdapterSet> sets;
      for (int pid : members)
        for (AdapterSet& s : all)
          if (s.prompt_id == pid) {
            AdapterSet copy(mp.m.cfg, pid, base_dc.rank, base_dc.pos, base_dc.seed,
                            base_dc.with_skip);
            Checkpoint ck;
            s.add_to(ck);
            copy.load_from(ck);
            sets.push_back(std::move(copy));
          }
      LabelReport labels = make_labels(mp.cache, members);
      auto [pred, info] = train_predictor(mp.m, mp.ws.tok, mp.ws.train, labels, members,
                                          red.ensemble_config());
      (void)info;
      rows.push_back(mp.score_decodes(red, "k=" + std::to_string(kk),
                                      [&](const VQASample& s) {
                                        return ensemble_decode(mp.m, mp.ws.tok, sets, pred,
                                                               s, red.step2_budget);
                                      }));
    }
  } else {  // adapter
    int pid = red.prompts.front();
    auto [reft_set, rr] = train_adapter_set(mp.m, mp.ws.tok, mp.ws.train, mp.cache, pid,
                                            base_dc);
    (void)rr;
    Interventions reft_iv = reft_set.hooks();
    rows.push_back(mp.score_decodes(red, "reft", [&](const VQASample& s) {
      return bare_decode(mp.m, mp.ws.tok, s, red.step2_budget, &reft_iv);
    }));
    auto [lora_set, lr] = train_lora_set(mp.m, mp.ws.tok, mp.ws.train, mp.cache, pid,
                                         base_dc);
    (void)lr;
    Interventions lora_iv = lora_set.hooks();
    rows.push_back(mp.score_decodes(red, "lora", [&](const VQASample& s) {
      return bare_decode(mp.m, mp.ws.tok, s, red.step2_budget, &lora_iv);
    }));
    soft_expect(row_acc(rows, "reft") >= row_acc(rows, "lora"), "reft >= lora");
  }

  std::ostringstream csv;
  csv << "grid,cell,n_eval,accuracy,anls\n";
  for (const AblateRow& r : rows)
    csv << grid << ',' << r.cell << ',' << r.n_eval << ',' << fixed(r.accuracy, 6) << ','
        << fixed(r.anls, 6) << '\n';
  write_text(art(cfg, "ablate-" + grid + ".csv"), csv.str());

  if (json_out) {
    json out = json::array();
    for (const AblateRow& r : rows)
      out.push_back({{"grid", grid}, {"cell", r.cell}, {"n_eval", r.n_eval},
                     {"accuracy", r.accuracy}, {"anls", r.anls}});
    std::cout << out.dump() << std::endl;
  } else {
    std::cout << "ablate grid=" << grid << ":" << std::endl;
    for (const AblateRow& r : rows)
      std::cout << "  " << r.cell << ": accuracy " << fixed(r.accuracy) << ", anls "
                << fixed(r.anls) << " (n=" << r.n_eval << ")" << std::endl;
    std::cout << "saved " << art(cfg, "ablate-" + grid + ".csv") << " ("
              << fixed(seconds_since(t0), 1) << "s)" << std::endl;
  }
}

// ----------------------------------------------------------- print_param_counts

void print_param_counts(const RunConfig& cfg) {
  Workspace ws = Workspace::make(cfg);
  VLMConfig mc = cfg.model_config(ws.tok.vocab_size());
  VLM m(mc);

  size_t layers = adapted_layers(mc).size();
  size_t d = size_t(mc.d_model), r = size_t(cfg.rank), u = size_t(mc.vision.d_vision);
  size_t reft_form = layers * 2 * r * d;
  size_t skip_form = layers * r * (2 * d + u + 1);
  size_t set_form = reft_form + (cfg.with_skip ? skip_form : 0);
  size_t lora_form = layers * 2 * r * d;

  AdapterSet set(mc, 1, cfg.rank, cfg.pos, 0, cfg.with_skip);
  LoraSet lora(mc, cfg.rank, 0);
  std::vector<int> members = cfg.member_prompts();
  EnsembleWeightPredictor pred(mc.d_model, cfg.ens_hidden, members, 0);
  size_t h = size_t(cfg.ens_hidden), nm = members.size();
  size_t pred_form = d * h + h + h * h + h + h * nm + nm;
  size_t pred_count = 0;
  for (Param* p : pred.params()) pred_count += p->val.size();

  auto row = [&](const std::string& name, size_t count, size_t form) {
    std::cout << "  " << name << ": " << count << " (closed form " << form << ", "
              << (count == form ? "ok" : "MISMATCH") << "), "
              << fixed(100.0 * double(count) / double(m.param_count()), 3) << "% of base"
              << std::endl;
  };
  std::cout << "base model: " << m.param_count() << " parameters (vocab "
            << ws.tok.vocab_size() << ", d_model " << mc.d_model << ", "
            << mc.n_decoder_layers << " decoder layers)" << std::endl;
  row("adapter set (reft" + std::string(cfg.with_skip ? "+skip" : "") + ", r=" +
          std::to_string(cfg.rank) + ", per prompt)",
      set.param_count(), set_form);
  row("lora set (r=" + std::to_string(cfg.rank) + ", per prompt)", lora.param_count(),
      lora_form);
  row("ensemble predictor (" + std::to_string(nm) + " members)", pred_count, pred_form);
}

}  // namespace sdvlm
