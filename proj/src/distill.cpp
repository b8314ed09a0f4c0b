#include "sdvlm/distill.hpp"

#include "sdvlm/adam.hpp"
#include "sdvlm/checkpoint.hpp"
#include "sdvlm/ops.hpp"
#include "sdvlm/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace sdvlm {

namespace {

void check_finite(const std::vector<double>& v, int width, const std::string& side,
                  int layer) {
  for (size_t i = 0; i < v.size(); ++i) {
    if (std::isfinite(v[i])) continue;
    throw std::runtime_error("distill_loss: non-finite value in " + side + " at layer " +
                             std::to_string(layer) + ", position " +
                             std::to_string(i / size_t(width)) + ", dim " +
                             std::to_string(i % size_t(width)));
  }
}

std::vector<const ReasoningTrace*> select_prompt(const TraceCache& cache, int prompt_id) {
  std::vector<const ReasoningTrace*> out;
  for (const ReasoningTrace& r : cache.records)
    if (r.prompt_id == prompt_id) out.push_back(&r);
  if (out.empty())
    throw std::invalid_argument("no traces for prompt " + std::to_string(prompt_id) +
                                " in the cache");
  return out;
}

std::unordered_map<int, const VQASample*> index_samples(const std::vector<VQASample>& ds) {
  std::unordered_map<int, const VQASample*> by_id;
  for (const VQASample& s : ds) by_id[s.sample_id] = &s;
  return by_id;
}

const VQASample& sample_for(const std::unordered_map<int, const VQASample*>& by_id,
                            const ReasoningTrace& tr) {
  auto it = by_id.find(tr.sample_id);
  if (it == by_id.end())
    throw std::runtime_error("trace refers to sample " + std::to_string(tr.sample_id) +
                             " which is not in the dataset");
  return *it->second;
}

}  // namespace

void DistillConfig::validate() const {
  if (loss_mode != "mse" && loss_mode != "kl" && loss_mode != "mse+kl")
    throw std::invalid_argument("loss_mode must be mse, kl or mse+kl, got '" + loss_mode +
                                "'");
  if (kl_weight < 0.0) throw std::invalid_argument("kl_weight must be >= 0");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (lr <= 0.0) throw std::invalid_argument("lr must be > 0");
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  if (pos < 0) throw std::invalid_argument("pos must be >= 0");
}

std::string TrainReport::to_json() const {
  nlohmann::json j;
  j["prompt_id"] = prompt_id;
  j["loss_total"] = loss_total;
  j["loss_mse"] = loss_mse;
  j["loss_kl"] = loss_kl;
  j["final_grad_norm"] = final_grad_norm;
  j["wall_clock_sec"] = wall_clock_sec;
  j["adapter_checksum"] = adapter_checksum;
  return j.dump(2);
}

StudentStates student_forward(Tape& t, VLM& m, const Tokenizer& tok,
                              const Interventions* iv, const VQASample& sample,
                              const std::vector<int>& answer_ids) {
  if (answer_ids.empty())
    throw std::invalid_argument("student_forward: empty answer token list");
  TokenSequence seq = build_sequence(tok, render_bare(sample.question), m.cfg.n_patches());
  int prompt_len = int(seq.size());
  for (int id : answer_ids) {
    if (id < 0 || id >= m.cfg.vocab_size)
      throw std::out_of_range("student_forward: answer token id " + std::to_string(id) +
                              " outside vocab of " + std::to_string(m.cfg.vocab_size));
    seq.append(id, Seg::answer);
  }
  LayerStates st = m.forward(t, seq, sample.image_floats(), iv);

  // row i produces token i+1, so the generating rows for the answer span
  // start one before it
  int alen = int(answer_ids.size());
  StudentStates out;
  for (int li : adapted_layers(m.cfg))
    out.hidden.push_back(slice(st.per_layer_hidden[size_t(li)], 0, prompt_len - 1, alen));
  out.logits = slice(st.logits, 0, prompt_len - 1, alen);
  return out;
}

StudentStates student_forward(Tape& t, VLM& m, const Tokenizer& tok, AdapterSet* set,
                              const VQASample& sample, const std::vector<int>& answer_ids) {
  Interventions iv;
  if (set) iv = set->hooks();
  return student_forward(t, m, tok, set ? &iv : nullptr, sample, answer_ids);
}

LossBreakdown distill_loss(Tape& t, const ReasoningTrace& trace, const StudentStates& stu,
                           const DistillConfig& cfg) {
  cfg.validate();
  if (trace.hidden.size() != stu.hidden.size())
    throw std::invalid_argument("distill_loss: teacher has " +
                                std::to_string(trace.hidden.size()) +
                                " layers, student has " + std::to_string(stu.hidden.size()));
  int alen = trace.answer_len();
  const bool want_mse = cfg.loss_mode != "kl";
  const bool want_kl = cfg.loss_mode != "mse";

  LossBreakdown out;
  Tensor total = t.scalar(0.0);
  if (want_mse) {
    for (size_t l = 0; l < stu.hidden.size(); ++l) {
      int d = stu.hidden[l].dims().cols();
      check_finite(trace.hidden[l], d, "teacher hidden", trace.layers[l]);
      check_finite(stu.hidden[l].val(), d, "student hidden", trace.layers[l]);
      Tensor target = t.constant(Dims{alen, d}, trace.hidden[l]);
      Tensor part = mse(target, stu.hidden[l]);
      out.mse_part += part.item();
      total = add(total, part);
    }
  }
  if (want_kl) {
    int vocab = stu.logits.dims().cols();
    check_finite(trace.logits, vocab, "teacher logits", -1);
    check_finite(stu.logits.val(), vocab, "student logits", -1);
    Tensor teacher = t.constant(Dims{alen, vocab}, trace.logits);
    Tensor kl = kl_divergence(teacher, stu.logits);
    out.kl_part = kl.item();
    if (cfg.loss_mode == "kl") {
      total = add(total, kl);
    } else if (cfg.kl_weight != 0.0) {
      // weight 0 drops the term entirely so mse+kl(λ=0) == mse bit-for-bit
      total = add(total, scale(kl, cfg.kl_weight));
    }
  }
  out.total = total;
  if (!std::isfinite(out.total.item()))
    throw std::runtime_error("distill_loss: non-finite loss total");
  return out;
}

namespace {

// One epoch loop shared by both trainers; whatever `iv` injects is trained
// through `params` while the base stays frozen.
TrainReport run_distill_loop(VLM& m, const Tokenizer& tok,
                             const std::vector<VQASample>& dataset, const TraceCache& cache,
                             int prompt_id, const DistillConfig& cfg,
                             std::vector<Param*> params, const Interventions& iv) {
  auto traces = select_prompt(cache, prompt_id);
  auto by_id = index_samples(dataset);
  for (const ReasoningTrace* tr : traces) sample_for(by_id, *tr);  // fail fast
  if (traces.front()->layers != adapted_layers(m.cfg))
    throw std::runtime_error("trace cache was generated for different adapted layers");
  if (cache.d_model != m.cfg.d_model || cache.vocab_size != m.cfg.vocab_size)
    throw std::runtime_error("trace cache dimensions do not match the model");

  m.set_trainable(false);
  AdamState adam;
  Rng shuffle(derive_seed(cfg.seed, "distill-shuffle-prompt-" + std::to_string(prompt_id)));

  TrainReport report;
  report.prompt_id = prompt_id;
  const size_t n = traces.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[shuffle.uniform_int(uint64_t(i))]);
    double ep_total = 0.0, ep_mse = 0.0, ep_kl = 0.0;
    for (size_t start = 0; start < n; start += size_t(cfg.batch_size)) {
      size_t stop = std::min(n, start + size_t(cfg.batch_size));
      for (size_t i = start; i < stop; ++i) {
        const ReasoningTrace& tr = *traces[order[i]];
        Tape t;
        StudentStates stu =
            student_forward(t, m, tok, &iv, sample_for(by_id, tr), tr.answer_ids);
        LossBreakdown lb = distill_loss(t, tr, stu, cfg);
        t.backward(lb.total);
        t.collect_param_grads();
        ep_total += lb.total.item();
        ep_mse += lb.mse_part;
        ep_kl += lb.kl_part;
      }
      double inv = 1.0 / double(stop - start);
      for (Param* p : params)
        for (double& g : p->grad) g *= inv;
      if (epoch == cfg.epochs - 1 && stop == n) {
        double sq = 0.0;
        for (Param* p : params) sq += p->grad_norm() * p->grad_norm();
        report.final_grad_norm = std::sqrt(sq);
      }
      adam_step_all(params, adam, cfg.lr);
    }
    report.loss_total.push_back(ep_total / double(n));
    report.loss_mse.push_back(ep_mse / double(n));
    report.loss_kl.push_back(ep_kl / double(n));
  }
  return report;
}

}  // namespace

std::pair<AdapterSet, TrainReport> train_adapter_set(VLM& m, const Tokenizer& tok,
                                                     const std::vector<VQASample>& dataset,
                                                     const TraceCache& cache, int prompt_id,
                                                     const DistillConfig& cfg) {
  cfg.validate();
  auto t0 = std::chrono::steady_clock::now();
  AdapterSet set(m.cfg, prompt_id, cfg.rank, cfg.pos, cfg.seed, cfg.with_skip);
  TrainReport report =
      run_distill_loop(m, tok, dataset, cache, prompt_id, cfg, set.params(), set.hooks());
  Checkpoint ck;
  set.add_to(ck);
  report.adapter_checksum = checkpoint_checksum(ck);
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(set), std::move(report)};
}

std::pair<LoraSet, TrainReport> train_lora_set(VLM& m, const Tokenizer& tok,
                                               const std::vector<VQASample>& dataset,
                                               const TraceCache& cache, int prompt_id,
                                               const DistillConfig& cfg) {
  cfg.validate();
  auto t0 = std::chrono::steady_clock::now();
  LoraSet set(m.cfg, cfg.rank, derive_seed(cfg.seed, "lora-prompt-" + std::to_string(prompt_id)));
  TrainReport report =
      run_distill_loop(m, tok, dataset, cache, prompt_id, cfg, set.params(), set.hooks());
  Checkpoint ck;
  set.add_to(ck);
  report.adapter_checksum = checkpoint_checksum(ck);
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(set), std::move(report)};
}

double teacher_agreement(VLM& m, const Tokenizer& tok, const std::vector<VQASample>& dataset,
                         const TraceCache& cache, int prompt_id, const Interventions* iv) {
  auto traces = select_prompt(cache, prompt_id);
  auto by_id = index_samples(dataset);
  size_t hits = 0, total = 0;
  for (const ReasoningTrace* tr : traces) {
    Tape t(false);
    StudentStates stu =
        student_forward(t, m, tok, iv, sample_for(by_id, *tr), tr->answer_ids);
    const auto& lg = stu.logits.val();
    int vocab = stu.logits.dims().cols();
    for (size_t i = 0; i < tr->answer_ids.size(); ++i) {
      const double* row = lg.data() + i * size_t(vocab);
      int best = 0;
      for (int v = 1; v < vocab; ++v)
        if (row[v] > row[best]) best = v;
      hits += size_t(best == tr->answer_ids[i]);
      ++total;
    }
  }
  return total == 0 ? 0.0 : double(hits) / double(total);
}

}  // namespace sdvlm
