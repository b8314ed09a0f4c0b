#pragma once

#include "sdvlm/distill.hpp"
#include "sdvlm/ensemble.hpp"
#include "sdvlm/prompts.hpp"
#include "sdvlm/trace.hpp"
#include "sdvlm/vqa.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sdvlm {

// Everything a run needs, merged from defaults, an INI config file and
// command-line overrides (in that precedence order; later wins). The
// canonical serialization of the semantic fields is hashed into the run
// directory name, so two configs collide only when every artifact would be
// byte-identical anyway. `jobs` and `out_dir` are excluded from the hash:
// they change where and how fast, never what.
struct RunConfig {
  // [model]
  int d_model = 48;
  int n_decoder_layers = 3;
  int n_heads = 4;
  int max_seq_len = 192;
  int patch_size = 8;
  int n_vision_layers = 2;
  int d_vision = 24;
  int skip_source_layer = 1;

  // [data]
  int n_train = 2000;
  int n_eval = 250;

  // [pretrain] — mixed-form corpus: sample i is a bare question/answer pair
  // when i % bare_period == 0, otherwise it alternates the two prompted
  // forms (analysis generation, answer-from-analysis).
  int pre_samples = 5000;
  int pre_epochs = 6;
  int pre_batch = 16;
  double pre_lr = 1.5e-3;
  int bare_period = 3;

  // [traces]
  std::vector<int> prompts = {1, 2, 3, 4, 5, 6, 7, 8};
  int step1_budget = 40;
  int step2_budget = 6;

  // [distill]
  std::string loss_mode = "mse+kl";
  double kl_weight = 1.0;
  int distill_epochs = 10;
  int distill_batch = 16;
  double distill_lr = 1e-3;
  int rank = 8;
  int pos = 4;
  bool with_skip = true;
  std::string adapter = "reft";  // or "lora"
  int agreement_samples = 400;   // per-prompt cap for the agreement probe

  // [ensemble]
  int k = 4;  // members = first k of `prompts`; 0 means all
  int ens_hidden = 64;
  int ens_epochs = 30;
  int ens_batch = 16;
  double ens_lr = 2e-3;

  // [ablate] — reduced scale shared by every grid cell
  int ab_train = 240;
  int ab_eval = 120;
  int ab_pre_samples = 1500;
  int ab_pre_epochs = 4;
  int ab_epochs = 6;

  // [run]
  uint64_t seed = 7;
  std::string out_dir = "runs";
  int jobs = 1;

  void validate() const;  // throws std::invalid_argument

  // "section.key=value" lines in a fixed order; the config hash is FNV-1a
  // over this string.
  std::string canonical() const;
  uint64_t hash() const;
  std::string run_dir() const;  // <out_dir>/run-<16-hex-digit hash>

  // Defaults overlaid with an INI file ([section] / key = value, # and ;
  // comments). Unknown sections or keys are errors.
  static RunConfig from_ini(const std::string& path);
  // One override, e.g. set("distill.rank", "4"); same validation as the file.
  void set(const std::string& dotted_key, const std::string& value);

  VLMConfig model_config(int vocab_size) const;
  TraceConfig trace_config() const;
  DistillConfig distill_config() const;
  EnsembleConfig ensemble_config() const;
  std::vector<int> member_prompts() const;  // first k of prompts
};

// Derived context every stage rebuilds identically from the config: the
// prompt library, the fixed-vocabulary tokenizer and the data splits.
struct Workspace {
  RunConfig cfg;
  PromptLibrary lib;
  Tokenizer tok;
  std::vector<VQASample> train;
  std::vector<VQASample> eval;

  static Workspace make(const RunConfig& cfg);
};

// The question-conditioned reasoning text the prompted forms are trained to
// produce: an enumeration or tally that makes the answer readable off the
// end ("red at 1 1 , red at 3 2 . total 2").
std::string gold_analysis(const VQASample& s);

// Stages. Each writes its artifacts under cfg.run_dir(), prints a one-line
// summary to stdout and refuses to run when an upstream artifact is missing
// (the error names the producing command). Persisted wall-clock fields are
// zeroed so reruns reproduce files byte-for-byte.
void stage_pretrain(const RunConfig& cfg);
void stage_gen_traces(const RunConfig& cfg);
void stage_distill(const RunConfig& cfg);
void stage_train_ensemble(const RunConfig& cfg);

// mode: "base" (single-step greedy), "teacher" (best-confidence two-step) or
// "distilled" (adapter ensemble, single step). Scores accuracy and ANLS over
// the eval split, writes eval-<mode>-{accuracy,anls}.csv, folds the
// aggregates into results.json and returns them (accuracy, anls).
std::pair<double, double> stage_eval(const RunConfig& cfg, const std::string& mode,
                                     bool json_out);

// grid: "skip" | "loss" | "k" | "adapter". Runs the reduced-scale pipeline
// over the grid's cells, writes ablate-<grid>.csv (columns: grid, cell,
// n_eval, accuracy, anls) and soft-checks the expected directions on stderr.
void stage_ablate(const RunConfig& cfg, const std::string& grid, bool json_out);

// Closed-form and counted parameter totals for the base model and every
// adapter flavour at the configured rank/pos.
void print_param_counts(const RunConfig& cfg);

}  // namespace sdvlm
