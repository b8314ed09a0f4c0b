#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdvlm/model.hpp"
#include "sdvlm/prompts.hpp"
#include "sdvlm/tokenizer.hpp"
#include "sdvlm/vqa.hpp"

namespace sdvlm {

struct TraceConfig {
  int step1_budget = 48;  // max new tokens for the analysis decode
  int step2_budget = 8;   // answers in synthetic VQA are short
  int jobs = 1;
};

// One (sample, prompt) teacher run: both decoded texts plus the
// teacher-forced states the student will be trained against.
struct ReasoningTrace {
  int sample_id = 0;
  int prompt_id = 0;
  std::string y1_hat;
  std::string y2_hat;
  std::vector<int> answer_ids;  // decoded step-2 tokens, trailing eos included
  // last-3 decoder layers at the positions that generated answer_ids
  std::vector<int> layers;
  std::vector<std::vector<double>> hidden;  // per layer: [answer_len × d_model]
  std::vector<double> logits;               // [answer_len × vocab]
  double confidence = 0.0;  // top-token probability at the first answer position
  bool degenerate = false;  // empty or budget-truncated decode

  int answer_len() const { return int(answer_ids.size()); }
};

struct TraceCache {
  uint64_t model_checksum = 0;
  uint64_t library_checksum = 0;
  std::string config;  // free-form provenance (config hash etc.)
  int d_model = 0;
  int vocab_size = 0;
  std::vector<ReasoningTrace> records;
};

// <bos> then the text's tokens; each <img> expands to n_patches image
// positions so the vision splice in VLM::forward lines up.
TokenSequence build_sequence(const Tokenizer& tok, const std::string& text, int n_patches);

// weights-only content hash (metadata excluded), used to bind caches to the
// exact model that produced them
uint64_t model_checksum(const VLM& m);

struct StepResult {
  std::string text;             // decoded, specials stripped
  std::vector<int> answer_ids;  // raw decoded ids
  bool truncated = false;       // budget ran out before eos
  std::vector<double> h1_final;  // last-layer state that produced the first token
};

StepResult run_step1(VLM& m, const Tokenizer& tok, const PromptTemplate& tpl,
                     const VQASample& sample, int budget);

ReasoningTrace run_step2(VLM& m, const Tokenizer& tok, const PromptTemplate& tpl,
                         const VQASample& sample, const std::string& y1_hat,
                         const TraceConfig& tcfg);

// step1 ∘ step2 over dataset × prompt_ids; pairs run independently across
// `jobs` workers and land in deterministic (sample-major) order.
TraceCache generate_traces(VLM& m, const Tokenizer& tok, const PromptLibrary& lib,
                           const std::vector<VQASample>& dataset,
                           const std::vector<int>& prompt_ids, const TraceConfig& tcfg,
                           const std::string& config_note = "");

// versioned binary container; hidden states and logits as little-endian f32
void save_traces(const TraceCache& cache, const std::string& path);
TraceCache load_traces(const std::string& path);

// human-readable dump for debugging (tensor payloads summarized, not inlined)
void export_traces_json(const TraceCache& cache, const std::string& path);

}  // namespace sdvlm
