#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sdvlm/vqa.hpp"

namespace sdvlm {

// Edit distance (insert/delete/substitute, unit costs) over Unicode scalar
// values; input is UTF-8.
int levenshtein(const std::string& a, const std::string& b);

// ANLS threshold: scores below 1 - tau are clamped to 0. Standard setting.
constexpr double kAnlsTau = 0.5;

// max over gold candidates of 1 - NL, where
// NL = levenshtein(lower(pred), lower(gold)) / max(|pred|, |gold|, 1),
// zeroed when NL >= kAnlsTau.
double anls(const std::string& pred, const std::vector<std::string>& gold_list);

// Pulls the model's answer out of a free-form decode: tokens are lowercased,
// stripped of punctuation and mapped from spelled digits to numerals; the
// first token found in the answer lexicon wins, else the last token.
std::string extract_answer(const std::string& decoded);

// 1 if the extracted prediction equals gold after normalization, else 0.
int accuracy(const std::string& pred, const std::string& gold);

struct EvalRow {
  int sample_id = 0;
  std::string family;
  std::string gold;
  std::string raw;        // full decoded text
  std::string extracted;  // after extract_answer
  double score = 0.0;
};

struct EvalReport {
  std::string metric;  // "anls" or "accuracy"
  std::vector<EvalRow> rows;
  double aggregate = 0.0;  // mean of row scores
  int n_samples = 0;
  uint64_t seed = 0;
  std::string config_hash;
};

// Runs decode_fn over the split and scores it. decode_fn receives a sample
// and returns the model's raw decoded answer text.
EvalReport evaluate(const std::function<std::string(const VQASample&)>& decode_fn,
                    const std::vector<VQASample>& dataset, const std::string& metric,
                    uint64_t seed = 0, const std::string& config_hash = "");

// CSV with one row per sample plus the report header fields.
void save_report_csv(const EvalReport& rep, const std::string& path);

}  // namespace sdvlm
