#pragma once

#include "sdvlm/adapters.hpp"
#include "sdvlm/trace.hpp"

#include <string>
#include <utility>
#include <vector>

namespace sdvlm {

// Supervision for the weighting predictor: which prompt's two-step trace was
// the most confident on each sample.
struct ConfidenceLabel {
  int sample_id = 0;
  int winner = 0;    // prompt id with the highest step-2 confidence
  double margin = 0; // top-1 minus top-2 confidence; 0 with one candidate
};

struct LabelReport {
  std::vector<ConfidenceLabel> labels;
  int dropped = 0;  // samples whose member traces were all degenerate
};

// Winner = argmax of confidence over the sample's non-degenerate traces,
// ties broken toward the lowest prompt id. member_prompts restricts the
// competition to an ensemble subset; empty means every prompt in the cache.
LabelReport make_labels(const TraceCache& cache, const std::vector<int>& member_prompts = {});
void save_labels_csv(const LabelReport& lr, const std::string& path);

struct EnsembleConfig {
  int hidden = 64;
  int epochs = 20;
  int batch_size = 16;
  double lr = 1e-3;
  uint64_t seed = 0;
  void validate() const;  // throws std::invalid_argument
};

// Three dense layers (d_model → hidden → hidden → N) with gelu between;
// softmax turns the head into the ensemble weighting vector.
struct EnsembleWeightPredictor {
  std::vector<int> prompt_ids;  // column order of the output weights
  Param w1, b1, w2, b2, w3, b3;

  EnsembleWeightPredictor() = default;
  EnsembleWeightPredictor(int d_model, int hidden, std::vector<int> prompt_ids,
                          uint64_t seed);

  std::vector<Param*> params();
  Tensor head_logits(Tape& t, const Tensor& x);  // [B × d_model] -> [B × N]
  Tensor weights(Tape& t, const Tensor& x);      // softmax of head_logits
  void add_to(Checkpoint& ck) const;
  void load_from(const Checkpoint& ck);
};

// Mean over sequence positions of the final-layer hidden state on the bare
// single-step input — the predictor's input, available before any adapter.
std::vector<double> pooled_base_state(VLM& m, const Tokenizer& tok, const VQASample& s);

struct EnsembleTrainInfo {
  std::vector<double> loss;  // per-epoch mean cross-entropy
  double train_accuracy = 0.0;
  double majority_baseline = 0.0;  // most frequent winner / n
  int distinct_winners = 0;
};

// Cross-entropy on one-hot winners over frozen pooled base states. Labels
// whose winner is not a member prompt are rejected (filter via make_labels).
// A single-class label set trains anyway but warns on stderr.
std::pair<EnsembleWeightPredictor, EnsembleTrainInfo> train_predictor(
    VLM& m, const Tokenizer& tok, const std::vector<VQASample>& dataset,
    const LabelReport& labels, const std::vector<int>& member_prompts,
    const EnsembleConfig& cfg);

// Per-sample weighting vector, in predictor.prompt_ids order.
std::vector<double> ensemble_weights(VLM& m, const Tokenizer& tok,
                                     EnsembleWeightPredictor& p, const VQASample& s);

// Output hooks computing ĥ = h + M ⊙ Σ_i w_i (reft_i(h) + skip_i(h, u)).
// Sets must share the position mask and stay alive while the hooks run.
Interventions ensemble_hooks(std::vector<AdapterSet>& sets, const std::vector<double>& w);

// One base forward under the blended interventions for this sample.
LayerStates ensemble_forward(Tape& t, VLM& m, const Tokenizer& tok,
                             std::vector<AdapterSet>& sets, EnsembleWeightPredictor& p,
                             const VQASample& sample);

// Greedy single-step answer under the blended interventions.
std::string ensemble_decode(VLM& m, const Tokenizer& tok, std::vector<AdapterSet>& sets,
                            EnsembleWeightPredictor& p, const VQASample& sample, int budget);

}  // namespace sdvlm
