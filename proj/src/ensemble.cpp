#include "sdvlm/ensemble.hpp"

#include "sdvlm/adam.hpp"
#include "sdvlm/checkpoint.hpp"
#include "sdvlm/ops.hpp"
#include "sdvlm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <unordered_map>

namespace sdvlm {

namespace {

Param gauss_param(const std::string& name, Dims dims, Rng& rng, double std) {
  Param p(name, dims);
  for (double& v : p.val) v = rng.gauss(0.0, std);
  return p;
}

void load_one(Param& p, const Checkpoint& ck) {
  const NamedTensor& t = ck.require(p.name);
  if (!(t.dims == p.dims))
    throw std::runtime_error(p.name + ": checkpoint shape " + t.dims.str() + " != " +
                             p.dims.str());
  p.val = t.data;
  p.grad.assign(p.val.size(), 0.0);
}

const VQASample& find_sample(const std::vector<VQASample>& ds, int id) {
  for (const VQASample& s : ds)
    if (s.sample_id == id) return s;
  throw std::runtime_error("label refers to sample " + std::to_string(id) +
                           " which is not in the dataset");
}

}  // namespace

LabelReport make_labels(const TraceCache& cache, const std::vector<int>& member_prompts) {
  auto is_member = [&](int pid) {
    return member_prompts.empty() ||
           std::find(member_prompts.begin(), member_prompts.end(), pid) !=
               member_prompts.end();
  };

  std::vector<int> sample_order;
  std::unordered_map<int, std::vector<const ReasoningTrace*>> by_sample;
  for (const ReasoningTrace& r : cache.records) {
    if (!is_member(r.prompt_id)) continue;
    auto [it, fresh] = by_sample.try_emplace(r.sample_id);
    if (fresh) sample_order.push_back(r.sample_id);
    it->second.push_back(&r);
  }

  LabelReport out;
  for (int sid : sample_order) {
    std::vector<const ReasoningTrace*> alive;
    for (const ReasoningTrace* tr : by_sample[sid])
      if (!tr->degenerate) alive.push_back(tr);
    if (alive.empty()) {
      ++out.dropped;
      continue;
    }
    std::sort(alive.begin(), alive.end(), [](const ReasoningTrace* a, const ReasoningTrace* b) {
      if (a->confidence != b->confidence) return a->confidence > b->confidence;
      return a->prompt_id < b->prompt_id;
    });
    double margin = alive.size() > 1 ? alive[0]->confidence - alive[1]->confidence : 0.0;
    out.labels.push_back({sid, alive[0]->prompt_id, margin});
  }
  return out;
}

void save_labels_csv(const LabelReport& lr, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f << "# dropped=" << lr.dropped << "\n";
  f << "sample_id,winner,margin\n";
  for (const ConfidenceLabel& l : lr.labels)
    f << l.sample_id << "," << l.winner << "," << l.margin << "\n";
  if (!f) throw std::runtime_error(path + ": write failed");
}

void EnsembleConfig::validate() const {
  if (hidden < 1) throw std::invalid_argument("predictor hidden width must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (lr <= 0.0) throw std::invalid_argument("lr must be > 0");
}

EnsembleWeightPredictor::EnsembleWeightPredictor(int d_model, int hidden,
                                                 std::vector<int> ids, uint64_t seed)
    : prompt_ids(std::move(ids)) {
  if (prompt_ids.empty())
    throw std::invalid_argument("predictor needs at least one member prompt");
  int n = int(prompt_ids.size());
  Rng rng(derive_seed(seed, "ensemble-predictor"));
  w1 = gauss_param("ensemble.w1", Dims{d_model, hidden}, rng, 1.0 / std::sqrt(d_model));
  b1 = Param("ensemble.b1", Dims{hidden});
  w2 = gauss_param("ensemble.w2", Dims{hidden, hidden}, rng, 1.0 / std::sqrt(hidden));
  b2 = Param("ensemble.b2", Dims{hidden});
  w3 = gauss_param("ensemble.w3", Dims{hidden, n}, rng, 1.0 / std::sqrt(hidden));
  b3 = Param("ensemble.b3", Dims{n});
}

std::vector<Param*> EnsembleWeightPredictor::params() {
  return {&w1, &b1, &w2, &b2, &w3, &b3};
}

Tensor EnsembleWeightPredictor::head_logits(Tape& t, const Tensor& x) {
  Tensor h1 = gelu(add_bias(matmul(x, t.leaf(w1)), t.leaf(b1)));
  Tensor h2 = gelu(add_bias(matmul(h1, t.leaf(w2)), t.leaf(b2)));
  return add_bias(matmul(h2, t.leaf(w3)), t.leaf(b3));
}

Tensor EnsembleWeightPredictor::weights(Tape& t, const Tensor& x) {
  return softmax(head_logits(t, x), -1);
}

void EnsembleWeightPredictor::add_to(Checkpoint& ck) const {
  for (const Param* p : {&w1, &b1, &w2, &b2, &w3, &b3}) ck.add(p->name, p->dims, p->val);
}

void EnsembleWeightPredictor::load_from(const Checkpoint& ck) {
  for (Param* p : params()) load_one(*p, ck);
}

std::vector<double> pooled_base_state(VLM& m, const Tokenizer& tok, const VQASample& s) {
  Tape t(false);
  TokenSequence seq = build_sequence(tok, render_bare(s.question), m.cfg.n_patches());
  LayerStates st = m.forward(t, seq, s.image_floats());
  const auto& h = st.per_layer_hidden.back().val();
  int n = int(seq.size()), d = m.cfg.d_model;
  std::vector<double> pooled(size_t(d), 0.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) pooled[size_t(c)] += h[size_t(r) * size_t(d) + size_t(c)];
  for (double& v : pooled) v /= double(n);
  return pooled;
}

std::pair<EnsembleWeightPredictor, EnsembleTrainInfo> train_predictor(
    VLM& m, const Tokenizer& tok, const std::vector<VQASample>& dataset,
    const LabelReport& labels, const std::vector<int>& member_prompts,
    const EnsembleConfig& cfg) {
  cfg.validate();
  if (labels.labels.empty()) throw std::invalid_argument("no labels to train on");
  if (member_prompts.empty()) throw std::invalid_argument("no member prompts");

  std::unordered_map<int, int> col_of;
  for (size_t i = 0; i < member_prompts.size(); ++i)
    col_of[member_prompts[i]] = int(i);

  const size_t n = labels.labels.size();
  const int d = m.cfg.d_model;
  std::vector<std::vector<double>> feats(n);
  std::vector<int> targets(n);
  std::unordered_map<int, int> winner_count;
  for (size_t i = 0; i < n; ++i) {
    const ConfidenceLabel& l = labels.labels[i];
    auto it = col_of.find(l.winner);
    if (it == col_of.end())
      throw std::invalid_argument("label winner " + std::to_string(l.winner) +
                                  " is not a member prompt");
    targets[i] = it->second;
    ++winner_count[l.winner];
    feats[i] = pooled_base_state(m, tok, find_sample(dataset, l.sample_id));
  }

  EnsembleTrainInfo info;
  info.distinct_winners = int(winner_count.size());
  size_t top = 0;
  for (auto& [pid, c] : winner_count) top = std::max(top, size_t(c));
  info.majority_baseline = double(top) / double(n);
  if (info.distinct_winners == 1)
    std::cerr << "warning: all labels name prompt " << labels.labels[0].winner
              << "; the predictor will be trivial\n";

  EnsembleWeightPredictor pred(d, cfg.hidden, member_prompts, cfg.seed);
  std::vector<Param*> params = pred.params();
  AdamState adam;
  Rng shuffle(derive_seed(cfg.seed, "ensemble-shuffle"));
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[shuffle.uniform_int(uint64_t(i))]);
    double ep_loss = 0.0;
    for (size_t start = 0; start < n; start += size_t(cfg.batch_size)) {
      size_t stop = std::min(n, start + size_t(cfg.batch_size));
      int bs = int(stop - start);
      std::vector<double> batch(size_t(bs) * size_t(d));
      std::vector<int> tg(static_cast<size_t>(bs));
      std::vector<int> rows(static_cast<size_t>(bs));
      for (int k = 0; k < bs; ++k) {
        size_t i = order[start + size_t(k)];
        std::copy(feats[i].begin(), feats[i].end(), batch.begin() + size_t(k) * size_t(d));
        tg[size_t(k)] = targets[i];
        rows[size_t(k)] = k;
      }
      Tape t;
      Tensor x = t.constant(Dims{bs, d}, std::move(batch));
      Tensor loss = cross_entropy(pred.head_logits(t, x), tg, rows);
      t.backward(loss);
      t.collect_param_grads();
      adam_step_all(params, adam, cfg.lr);
      ep_loss += loss.item() * bs;
    }
    info.loss.push_back(ep_loss / double(n));
  }

  size_t hits = 0;
  for (size_t i = 0; i < n; ++i) {
    Tape t(false);
    Tensor w = pred.weights(t, t.constant(Dims{1, d}, feats[i]));
    const auto& wv = w.val();
    int best = 0;
    for (size_t c = 1; c < wv.size(); ++c)
      if (wv[c] > wv[size_t(best)]) best = int(c);
    hits += size_t(best == targets[i]);
  }
  info.train_accuracy = double(hits) / double(n);
  return {std::move(pred), std::move(info)};
}

std::vector<double> ensemble_weights(VLM& m, const Tokenizer& tok,
                                     EnsembleWeightPredictor& p, const VQASample& s) {
  Tape t(false);
  Tensor w = p.weights(t, t.constant(Dims{1, m.cfg.d_model}, pooled_base_state(m, tok, s)));
  return w.val();
}

Interventions ensemble_hooks(std::vector<AdapterSet>& sets, const std::vector<double>& w) {
  if (sets.empty()) throw std::invalid_argument("ensemble needs at least one adapter set");
  if (sets.size() != w.size())
    throw std::invalid_argument("got " + std::to_string(w.size()) + " weights for " +
                                std::to_string(sets.size()) + " adapter sets");
  for (const AdapterSet& s : sets) {
    if (s.mask.pos != sets.front().mask.pos)
      throw std::invalid_argument("ensemble members disagree on the position mask");
    if (s.reft.size() != sets.front().reft.size())
      throw std::invalid_argument("ensemble members adapt different layer counts");
  }

  Interventions iv;
  size_t n_layers = sets.front().reft.size();
  for (size_t li = 0; li < n_layers; ++li) {
    std::vector<AdapterSet*> members;
    for (AdapterSet& s : sets) members.push_back(&s);
    PositionMask mask = sets.front().mask;
    std::vector<double> wi = w;
    int layer = sets.front().reft[li].layer_index;
    iv.out.push_back(
        {layer, [members, wi, mask, li](Tape& T, const Tensor& h, const Tensor& u) -> Tensor {
           // members trained without the skip branch contribute reft only
           auto one = [&](AdapterSet* s) {
             Tensor d = s->reft[li].delta(T, h);
             if (li < s->skip.size()) d = add(d, s->skip[li].delta(T, h, u));
             return d;
           };
           Tensor acc = scale(one(members[0]), wi[0]);
           for (size_t i = 1; i < members.size(); ++i)
             acc = add(acc, scale(one(members[i]), wi[i]));
           return mask_rows(T, acc, mask);
         }});
  }
  return iv;
}

LayerStates ensemble_forward(Tape& t, VLM& m, const Tokenizer& tok,
                             std::vector<AdapterSet>& sets, EnsembleWeightPredictor& p,
                             const VQASample& sample) {
  if (sets.size() != p.prompt_ids.size())
    throw std::invalid_argument("predictor outputs " + std::to_string(p.prompt_ids.size()) +
                                " weights but " + std::to_string(sets.size()) +
                                " adapter sets were given");
  for (size_t i = 0; i < sets.size(); ++i)
    if (sets[i].prompt_id != p.prompt_ids[i])
      throw std::invalid_argument("adapter set order does not match predictor columns");
  std::vector<double> w = ensemble_weights(m, tok, p, sample);
  Interventions iv = ensemble_hooks(sets, w);
  TokenSequence seq = build_sequence(tok, render_bare(sample.question), m.cfg.n_patches());
  return m.forward(t, seq, sample.image_floats(), &iv);
}

std::string ensemble_decode(VLM& m, const Tokenizer& tok, std::vector<AdapterSet>& sets,
                            EnsembleWeightPredictor& p, const VQASample& sample,
                            int budget) {
  if (budget < 1) throw std::invalid_argument("decode budget must be >= 1");
  if (sets.size() != p.prompt_ids.size())
    throw std::invalid_argument("predictor outputs " + std::to_string(p.prompt_ids.size()) +
                                " weights but " + std::to_string(sets.size()) +
                                " adapter sets were given");
  std::vector<double> w = ensemble_weights(m, tok, p, sample);
  Interventions iv = ensemble_hooks(sets, w);
  TokenSequence seq = build_sequence(tok, render_bare(sample.question), m.cfg.n_patches());
  TokenSequence full = m.greedy_decode(seq, sample.image_floats(), budget, tok.eos(), &iv);
  std::vector<int> answer(full.ids.begin() + std::ptrdiff_t(seq.size()), full.ids.end());
  return tok.decode(answer, /*skip_special=*/true);
}

}  // namespace sdvlm
