#include "sdvlm/trace.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "sdvlm/adapters.hpp"
#include "sdvlm/checkpoint.hpp"
#include "sdvlm/rng.hpp"
#include "sdvlm/threadpool.hpp"

namespace sdvlm {

namespace {

constexpr char kMagic[4] = {'S', 'D', 'T', 'C'};
constexpr uint32_t kVersion = 1;
constexpr int kEos = 1;
constexpr int kImg = 3;

template <typename T>
void put(std::vector<unsigned char>& buf, const T& v) {
  const auto* p = reinterpret_cast<const unsigned char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

void put_str(std::vector<unsigned char>& buf, const std::string& s) {
  put(buf, uint64_t(s.size()));
  buf.insert(buf.end(), s.begin(), s.end());
}

void put_f32(std::vector<unsigned char>& buf, const std::vector<double>& v) {
  for (double d : v) put(buf, float(d));
}

struct Reader {
  const unsigned char* p;
  size_t left;
  const std::string& path;

  template <typename T>
  T get() {
    if (left < sizeof(T)) throw std::runtime_error(path + ": truncated trace cache");
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    left -= sizeof(T);
    return v;
  }

  std::string get_str() {
    uint64_t n = get<uint64_t>();
    if (left < n) throw std::runtime_error(path + ": truncated trace cache");
    std::string s(reinterpret_cast<const char*>(p), size_t(n));
    p += n;
    left -= n;
    return s;
  }

  std::vector<double> get_f32(size_t n) {
    std::vector<double> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = double(get<float>());
    return v;
  }
};

std::vector<int> answer_tail(const TokenSequence& full, size_t prompt_len) {
  return {full.ids.begin() + long(prompt_len), full.ids.end()};
}

std::vector<double> slice_rows(const std::vector<double>& flat, int width, int row_start,
                               int rows) {
  return {flat.begin() + size_t(row_start) * size_t(width),
          flat.begin() + size_t(row_start + rows) * size_t(width)};
}

}  // namespace

TokenSequence build_sequence(const Tokenizer& tok, const std::string& text, int n_patches) {
  TokenSequence seq;
  seq.append(0, Seg::prompt);  // <bos>
  for (int id : tok.encode(text)) {
    if (id == kImg)
      for (int i = 0; i < n_patches; ++i) seq.append(kImg, Seg::image);
    else
      seq.append(id, Seg::prompt);
  }
  return seq;
}

uint64_t model_checksum(const VLM& m) {
  return checkpoint_checksum(m.to_checkpoint(""));
}

StepResult run_step1(VLM& m, const Tokenizer& tok, const PromptTemplate& tpl,
                     const VQASample& sample, int budget) {
  if (budget < 1) throw std::invalid_argument("step-1 budget must be >= 1");
  TokenSequence seq = build_sequence(tok, render_step1(tpl, sample.question), m.cfg.n_patches());
  std::vector<double> img = sample.image_floats();

  TokenSequence full = m.greedy_decode(seq, img, budget, kEos);
  StepResult r;
  r.answer_ids = answer_tail(full, seq.size());
  r.truncated = r.answer_ids.empty() || r.answer_ids.back() != kEos;
  r.text = tok.decode(r.answer_ids, /*skip_special=*/true);

  Tape t(false);
  LayerStates st = m.forward(t, seq, img);
  const std::vector<double>& h = st.per_layer_hidden.back().val();
  r.h1_final.assign(h.end() - m.cfg.d_model, h.end());
  return r;
}

ReasoningTrace run_step2(VLM& m, const Tokenizer& tok, const PromptTemplate& tpl,
                         const VQASample& sample, const std::string& y1_hat,
                         const TraceConfig& tcfg) {
  TokenSequence seq =
      build_sequence(tok, render_step2(tpl, sample.question, y1_hat), m.cfg.n_patches());
  if (int(seq.size()) + tcfg.step2_budget > m.cfg.max_seq_len)
    throw std::runtime_error(
        "step-2 sequence of " + std::to_string(seq.size()) + " tokens plus budget " +
        std::to_string(tcfg.step2_budget) + " exceeds max_seq_len " +
        std::to_string(m.cfg.max_seq_len) + "; shrink the step-1 budget or the prompt");
  std::vector<double> img = sample.image_floats();

  TokenSequence full = m.greedy_decode(seq, img, tcfg.step2_budget, kEos);
  ReasoningTrace tr;
  tr.sample_id = sample.sample_id;
  tr.prompt_id = tpl.id;
  tr.answer_ids = answer_tail(full, seq.size());
  tr.y2_hat = tok.decode(tr.answer_ids, /*skip_special=*/true);
  tr.degenerate = tr.answer_ids.back() != kEos || tr.y2_hat.empty();

  // one teacher-forced pass over [p, x, ŷ2]; position i generates token i+1,
  // so the answer tokens were produced at rows L-1 .. L+alen-2
  int L = int(seq.size()), alen = tr.answer_len();
  Tape t(false);
  LayerStates st = m.forward(t, full, img);
  tr.layers = adapted_layers(m.cfg);
  for (int l : tr.layers)
    tr.hidden.push_back(
        slice_rows(st.per_layer_hidden[size_t(l)].val(), m.cfg.d_model, L - 1, alen));
  tr.logits = slice_rows(st.logits.val(), m.cfg.vocab_size, L - 1, alen);
  tr.confidence = top_token_confidence(
      slice_rows(st.logits.val(), m.cfg.vocab_size, L - 1, 1));
  return tr;
}

TraceCache generate_traces(VLM& m, const Tokenizer& tok, const PromptLibrary& lib,
                           const std::vector<VQASample>& dataset,
                           const std::vector<int>& prompt_ids, const TraceConfig& tcfg,
                           const std::string& config_note) {
  if (prompt_ids.empty()) throw std::invalid_argument("generate_traces: no prompts selected");
  for (int id : prompt_ids) lib.by_id(id);  // unknown ids throw before any work

  TraceCache c;
  c.model_checksum = model_checksum(m);
  c.library_checksum = lib.checksum();
  c.config = config_note;
  c.d_model = m.cfg.d_model;
  c.vocab_size = m.cfg.vocab_size;
  c.records.resize(dataset.size() * prompt_ids.size());

  parallel_for(c.records.size(), tcfg.jobs, [&](size_t idx) {
    size_t si = idx / prompt_ids.size();
    size_t pi = idx % prompt_ids.size();
    const VQASample& s = dataset[si];
    const PromptTemplate& tpl = lib.by_id(prompt_ids[pi]);
    StepResult s1 = run_step1(m, tok, tpl, s, tcfg.step1_budget);
    ReasoningTrace tr = run_step2(m, tok, tpl, s, s1.text, tcfg);
    tr.y1_hat = s1.text;
    tr.degenerate = tr.degenerate || s1.truncated || s1.text.empty();
    c.records[idx] = std::move(tr);
  });
  return c;
}

void save_traces(const TraceCache& cache, const std::string& path) {
  std::vector<unsigned char> buf;
  put(buf, kVersion);
  put(buf, cache.model_checksum);
  put(buf, cache.library_checksum);
  put_str(buf, cache.config);
  put(buf, int32_t(cache.d_model));
  put(buf, int32_t(cache.vocab_size));
  put(buf, uint64_t(cache.records.size()));
  for (const ReasoningTrace& r : cache.records) {
    put(buf, int32_t(r.sample_id));
    put(buf, int32_t(r.prompt_id));
    put_str(buf, r.y1_hat);
    put_str(buf, r.y2_hat);
    put(buf, uint8_t(r.degenerate ? 1 : 0));
    put(buf, r.confidence);
    put(buf, uint64_t(r.answer_ids.size()));
    for (int id : r.answer_ids) put(buf, int32_t(id));
    put(buf, uint64_t(r.layers.size()));
    for (size_t li = 0; li < r.layers.size(); ++li) {
      put(buf, int32_t(r.layers[li]));
      if (r.hidden[li].size() != r.answer_ids.size() * size_t(cache.d_model))
        throw std::runtime_error("trace cache: hidden state shape mismatch while saving");
      put_f32(buf, r.hidden[li]);
    }
    if (r.logits.size() != r.answer_ids.size() * size_t(cache.vocab_size))
      throw std::runtime_error("trace cache: logits shape mismatch while saving");
    put_f32(buf, r.logits);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot write trace cache");
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  uint64_t sum = fnv1a64(buf.data(), buf.size());
  out.write(reinterpret_cast<const char*>(&sum), sizeof(sum));
  if (!out) throw std::runtime_error(path + ": trace cache write failed");
}

TraceCache load_traces(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": no such trace cache");
  std::vector<unsigned char> all((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (all.size() < 4 + sizeof(uint64_t) || std::memcmp(all.data(), kMagic, 4) != 0)
    throw std::runtime_error(path + ": not a trace cache");
  size_t payload_len = all.size() - 4 - sizeof(uint64_t);
  uint64_t stored;
  std::memcpy(&stored, all.data() + 4 + payload_len, sizeof(stored));
  if (fnv1a64(all.data() + 4, payload_len) != stored)
    throw std::runtime_error(path + ": trace cache checksum mismatch");

  Reader rd{all.data() + 4, payload_len, path};
  if (rd.get<uint32_t>() != kVersion)
    throw std::runtime_error(path + ": unsupported trace cache version");
  TraceCache c;
  c.model_checksum = rd.get<uint64_t>();
  c.library_checksum = rd.get<uint64_t>();
  c.config = rd.get_str();
  c.d_model = rd.get<int32_t>();
  c.vocab_size = rd.get<int32_t>();
  uint64_t n = rd.get<uint64_t>();
  c.records.resize(size_t(n));
  for (ReasoningTrace& r : c.records) {
    r.sample_id = rd.get<int32_t>();
    r.prompt_id = rd.get<int32_t>();
    r.y1_hat = rd.get_str();
    r.y2_hat = rd.get_str();
    r.degenerate = rd.get<uint8_t>() != 0;
    r.confidence = rd.get<double>();
    uint64_t alen = rd.get<uint64_t>();
    if (alen == 0) throw std::runtime_error(path + ": record with empty answer");
    r.answer_ids.resize(size_t(alen));
    for (int& id : r.answer_ids) id = rd.get<int32_t>();
    uint64_t nl = rd.get<uint64_t>();
    r.layers.resize(size_t(nl));
    r.hidden.resize(size_t(nl));
    for (size_t li = 0; li < nl; ++li) {
      r.layers[li] = rd.get<int32_t>();
      r.hidden[li] = rd.get_f32(size_t(alen) * size_t(c.d_model));
    }
    r.logits = rd.get_f32(size_t(alen) * size_t(c.vocab_size));
  }
  if (rd.left != 0) throw std::runtime_error(path + ": trailing bytes in trace cache");
  return c;
}

void export_traces_json(const TraceCache& cache, const std::string& path) {
  nlohmann::json j;
  j["model_checksum"] = cache.model_checksum;
  j["library_checksum"] = cache.library_checksum;
  j["config"] = cache.config;
  j["d_model"] = cache.d_model;
  j["vocab_size"] = cache.vocab_size;
  j["records"] = nlohmann::json::array();
  for (const ReasoningTrace& r : cache.records) {
    nlohmann::json rec;
    rec["sample_id"] = r.sample_id;
    rec["prompt_id"] = r.prompt_id;
    rec["y1_hat"] = r.y1_hat;
    rec["y2_hat"] = r.y2_hat;
    rec["answer_ids"] = r.answer_ids;
    rec["confidence"] = r.confidence;
    rec["degenerate"] = r.degenerate;
    rec["layers"] = r.layers;
    nlohmann::json norms = nlohmann::json::array();
    for (const auto& h : r.hidden) {
      double ss = 0.0;
      for (double v : h) ss += v * v;
      norms.push_back(std::sqrt(ss));
    }
    rec["hidden_norms"] = norms;  // payload summarized, raw f32 lives in the cache
    j["records"].push_back(std::move(rec));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot write json export");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error(path + ": json export write failed");
}

}  // namespace sdvlm
