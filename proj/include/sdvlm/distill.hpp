#pragma once

#include "sdvlm/adapters.hpp"
#include "sdvlm/trace.hpp"

#include <string>
#include <utility>
#include <vector>

namespace sdvlm {

// Hyperparameters for distilling one prompt's traces into one AdapterSet.
//
// loss_mode "mse+kl" with kl_weight 0 degenerates to "mse" exactly: the KL
// term is dropped from the graph rather than multiplied by zero, so the two
// configurations train bit-for-bit identically.
struct DistillConfig {
  std::string loss_mode = "mse+kl";  // mse | kl | mse+kl
  double kl_weight = 1.0;            // KL term weight in mse+kl mode
  int epochs = 30;
  int batch_size = 16;
  double lr = 1e-3;
  int rank = 8;           // adapter rank r
  int pos = 4;            // intervened positions at each end of the sequence
  bool with_skip = true;  // false trains the intervention-only ablation arm
  uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

// Per-epoch curves plus the artifacts needed to audit a run.
struct TrainReport {
  int prompt_id = 0;
  std::vector<double> loss_total;  // one entry per epoch (mean over samples)
  std::vector<double> loss_mse;
  std::vector<double> loss_kl;
  double final_grad_norm = 0.0;  // adapter grad norm at the last step
  double wall_clock_sec = 0.0;
  uint64_t adapter_checksum = 0;
  std::string to_json() const;
};

// Student states gathered where the teacher defined its targets: the rows
// that generate the teacher's answer tokens, on the bare single-step input.
struct StudentStates {
  std::vector<Tensor> hidden;  // one [alen × d_model] block per adapted layer
  Tensor logits;               // [alen × vocab]
};

// Teacher-forces answer_ids onto render_bare(sample.question) and runs the
// model with the set's interventions active (pass nullptr for the
// no-adapter baseline). Throws std::out_of_range for answer ids outside the
// vocabulary.
StudentStates student_forward(Tape& t, VLM& m, const Tokenizer& tok, AdapterSet* set,
                              const VQASample& sample, const std::vector<int>& answer_ids);
// Same single-step run under arbitrary interventions (the LoRA baseline).
StudentStates student_forward(Tape& t, VLM& m, const Tokenizer& tok,
                              const Interventions* iv, const VQASample& sample,
                              const std::vector<int>& answer_ids);

struct LossBreakdown {
  Tensor total;
  double mse_part = 0.0;
  double kl_part = 0.0;
};

// Σ_layers MSE(teacher_hidden, student_hidden) plus kl_weight · KL of the
// teacher's final-layer output distribution against the student's, per
// loss_mode. The teacher side enters as constants. Non-finite values in any
// operand raise std::runtime_error naming the layer and position.
LossBreakdown distill_loss(Tape& t, const ReasoningTrace& trace, const StudentStates& stu,
                           const DistillConfig& cfg);

// Adam over the adapter parameters only; the base model is frozen for the
// duration (and left frozen — callers that train base weights re-enable
// them). Mini-batches are reshuffled every epoch from a seed derived from
// cfg.seed and the prompt id. Throws std::invalid_argument when the cache
// holds no traces for prompt_id.
std::pair<AdapterSet, TrainReport> train_adapter_set(VLM& m, const Tokenizer& tok,
                                                     const std::vector<VQASample>& dataset,
                                                     const TraceCache& cache, int prompt_id,
                                                     const DistillConfig& cfg);

// LoRA baseline trained by the same loop; cfg.pos and cfg.with_skip are
// ignored (weight deltas apply at every position).
std::pair<LoraSet, TrainReport> train_lora_set(VLM& m, const Tokenizer& tok,
                                               const std::vector<VQASample>& dataset,
                                               const TraceCache& cache, int prompt_id,
                                               const DistillConfig& cfg);

// Fraction of teacher answer tokens whose argmax the student reproduces on
// its single-step input — the behavior-transfer measure. Works for any
// intervention flavour; nullptr scores the zero-adapter baseline.
double teacher_agreement(VLM& m, const Tokenizer& tok, const std::vector<VQASample>& dataset,
                         const TraceCache& cache, int prompt_id, const Interventions* iv);

}  // namespace sdvlm
