#include "doctest.h"

#include "sdvlm/adapters.hpp"
#include "sdvlm/ops.hpp"
#include "sdvlm/trace.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

using namespace sdvlm;

namespace {

// Two deliberately short templates so decode loops stay cheap.
PromptLibrary tiny_library() {
  std::vector<PromptTemplate> ts;
  ts.push_back({1, "analyze", "look {images} analyze the question : {question}",
                "recall {images} analysis : {query1_answer} now answer : {question}"});
  ts.push_back({2, "direct", "see {images} think about : {question}",
                "use {images} notes : {query1_answer} reply to : {question}"});
  return PromptLibrary(std::move(ts));
}

// Tokenizer + config + samples that agree on vocabulary and image geometry.
struct Bench {
  Tokenizer tok;
  VLMConfig cfg;
  PromptLibrary lib;
  std::vector<VQASample> samples;
};

Bench make_bench(int n_samples) {
  PromptLibrary lib = tiny_library();
  auto [train, eval] = generate_dataset(31, n_samples, 1);
  std::vector<std::string> corpus;
  for (const PromptTemplate& t : lib.templates()) {
    corpus.push_back(t.step1);
    corpus.push_back(t.step2);
  }
  for (const VQASample& s : train) {
    corpus.push_back(s.question);
    corpus.push_back(s.gold);
  }
  corpus.push_back("0 1 2 3 4 5 6 yes no red green blue yellow");
  Tokenizer tok = Tokenizer::from_corpus(corpus);

  VLMConfig cfg;
  cfg.d_model = 8;
  cfg.n_decoder_layers = 2;
  cfg.n_heads = 2;
  cfg.vocab_size = int(tok.vocab().size());
  cfg.max_seq_len = 96;
  cfg.vision = VisionConfig{32, 16, 1, 8};  // 4 patches on the 32x32 corpus images
  cfg.skip_source_layer = 0;
  cfg.seed = 5;
  return Bench{std::move(tok), cfg, std::move(lib), std::move(train)};
}

void zero(Param& p) { std::fill(p.val.begin(), p.val.end(), 0.0); }

void identity(Param& p, double scale = 1.0) {
  int n = p.dims.rows();
  REQUIRE(p.dims.cols() == n);
  std::fill(p.val.begin(), p.val.end(), 0.0);
  for (int i = 0; i < n; ++i) p.val[size_t(i) * size_t(n) + size_t(i)] = scale;
}

}  // namespace

TEST_CASE("build_sequence expands <img> into the patch span") {
  Bench b = make_bench(2);
  std::string text = render_step1(b.lib.by_id(1), b.samples[0].question);
  TokenSequence s = build_sequence(b.tok, text, 4);
  CHECK(s.ids[0] == 0);  // <bos>
  auto [start, len] = s.image_span();
  CHECK(len == 4);
  for (int i = 0; i < len; ++i) CHECK(s.ids[size_t(start + i)] == 3);
  CHECK_NOTHROW(s.validate(int(b.tok.vocab().size())));
  // words outside the image run carry prompt tags
  CHECK(s.segs[0] == Seg::prompt);
  CHECK(s.segs.back() == Seg::prompt);
}

TEST_CASE("run_step1 is deterministic and exposes the state behind token one") {
  Bench b = make_bench(2);
  VLM m(b.cfg);
  const PromptTemplate& tpl = b.lib.by_id(1);
  StepResult r1 = run_step1(m, b.tok, tpl, b.samples[0], 4);
  StepResult r2 = run_step1(m, b.tok, tpl, b.samples[0], 4);
  CHECK(r1.text == r2.text);
  CHECK(r1.answer_ids == r2.answer_ids);
  REQUIRE(!r1.answer_ids.empty());

  // h1_final is the last-layer row whose head output picked the first token
  TokenSequence seq =
      build_sequence(b.tok, render_step1(tpl, b.samples[0].question), b.cfg.n_patches());
  Tape t(false);
  LayerStates st = m.forward(t, seq, b.samples[0].image_floats());
  const auto& h = st.per_layer_hidden.back().val();
  std::vector<double> last_row(h.end() - b.cfg.d_model, h.end());
  REQUIRE(r1.h1_final.size() == last_row.size());
  CHECK(std::memcmp(r1.h1_final.data(), last_row.data(),
                    last_row.size() * sizeof(double)) == 0);
  const auto& lg = st.logits.val();
  int vocab = b.cfg.vocab_size;
  int best = 0;
  for (int i = 1; i < vocab; ++i)
    if (lg[lg.size() - size_t(vocab) + size_t(i)] >
        lg[lg.size() - size_t(vocab) + size_t(best)])
      best = i;
  CHECK(best == r1.answer_ids[0]);
}

TEST_CASE("run_step2 captures aligned teacher states") {
  Bench b = make_bench(2);
  VLM m(b.cfg);
  TraceConfig tc;
  tc.step2_budget = 3;
  ReasoningTrace tr = run_step2(m, b.tok, b.lib.by_id(2), b.samples[1],
                                "analyze the question now", tc);
  int alen = tr.answer_len();
  REQUIRE(alen >= 1);
  REQUIRE(alen <= 3);
  CHECK(tr.layers == adapted_layers(b.cfg));
  REQUIRE(tr.hidden.size() == tr.layers.size());
  for (const auto& h : tr.hidden) CHECK(h.size() == size_t(alen) * size_t(b.cfg.d_model));
  CHECK(tr.logits.size() == size_t(alen) * size_t(b.cfg.vocab_size));
  CHECK(tr.confidence > 0.0);
  CHECK(tr.confidence < 1.0);

  // feeding the captured logits back through the loss is exactly self-KL = 0
  Tape t;
  Tensor p = t.constant(Dims{alen, b.cfg.vocab_size}, tr.logits);
  Tensor q = t.leaf(Dims{alen, b.cfg.vocab_size}, tr.logits, true);
  CHECK(kl_divergence(p, q).item() == 0.0);

  // the teacher-forced rows really are the generating positions: the argmax
  // of captured logits row i reproduces answer token i (greedy decode did it)
  for (int i = 0; i < alen; ++i) {
    int best = 0;
    for (int v = 1; v < b.cfg.vocab_size; ++v)
      if (tr.logits[size_t(i) * size_t(b.cfg.vocab_size) + size_t(v)] >
          tr.logits[size_t(i) * size_t(b.cfg.vocab_size) + size_t(best)])
        best = v;
    CHECK(best == tr.answer_ids[size_t(i)]);
  }
}

TEST_CASE("step-2 sequences that cannot fit the budget are rejected by name") {
  Bench b = make_bench(2);
  b.cfg.max_seq_len = 48;
  VLM m(b.cfg);
  TraceConfig tc;
  std::string huge(200, 'x');  // unknown word would throw later; use known words
  huge.clear();
  for (int i = 0; i < 40; ++i) huge += "analysis ";
  try {
    run_step2(m, b.tok, b.lib.by_id(1), b.samples[0], huge, tc);
    FAIL("expected an overflow error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("max_seq_len") != std::string::npos);
    CHECK(std::string(e.what()).find("budget") != std::string::npos);
  }
}

TEST_CASE("rigged copy model routes the step-1 analysis into step two") {
  // one-hot embeddings + uniform attention + identity head = frequency voter
  PromptLibrary lib = tiny_library();
  std::vector<std::string> corpus = {"zebra what color is it"};
  for (const PromptTemplate& t : lib.templates()) {
    corpus.push_back(t.step1);
    corpus.push_back(t.step2);
  }
  Tokenizer tok = Tokenizer::from_corpus(corpus);
  int vocab = int(tok.vocab().size());

  VLMConfig cfg;
  cfg.d_model = vocab;
  cfg.n_decoder_layers = 1;
  cfg.n_heads = 1;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = 128;
  cfg.vision = VisionConfig{8, 4, 1, 4};
  cfg.skip_source_layer = 0;
  cfg.seed = 1;
  VLM m(cfg);

  identity(m.tok_emb);  // tok_emb is [vocab × vocab]
  zero(m.pos_emb);
  VLM::Block& blk = m.blocks[0];
  zero(blk.wq);
  zero(blk.bq);
  zero(blk.wk);
  zero(blk.bk);
  identity(blk.wv, 100.0);  // swamp the copy-last-token residual
  zero(blk.bv);
  identity(blk.wo);
  zero(blk.bo);
  zero(blk.fc1);
  zero(blk.fc1_b);
  zero(blk.fc2);
  zero(blk.fc2_b);
  identity(m.w_out);
  zero(m.b_out);
  for (Param* p : {&m.patch_w, &m.patch_b, &m.vis_pos, &m.vis_proj_w, &m.vis_proj_b}) zero(*p);
  for (VLM::Block& vb : m.vis_blocks)
    for (Param* p : {&vb.wq, &vb.bq, &vb.wk, &vb.bk, &vb.wv, &vb.bv, &vb.wo, &vb.bo, &vb.fc1,
                     &vb.fc1_b, &vb.fc2, &vb.fc2_b})
      zero(*p);

  VQASample sample;
  sample.sample_id = 0;
  sample.question = "what color is it";
  sample.image.assign(8 * 8 * 3, 0);

  TraceConfig tc;
  tc.step2_budget = 3;
  int zebra = tok.id("zebra");

  std::string analysis = "zebra zebra zebra zebra zebra";
  ReasoningTrace with = run_step2(m, tok, lib.by_id(1), sample, analysis, tc);
  CHECK(std::count(with.answer_ids.begin(), with.answer_ids.end(), zebra) > 0);

  ReasoningTrace without = run_step2(m, tok, lib.by_id(1), sample, "", tc);
  CHECK(std::count(without.answer_ids.begin(), without.answer_ids.end(), zebra) == 0);
}

TEST_CASE("generate_traces: full cartesian product, no weight mutation") {
  Bench b = make_bench(3);
  VLM m(b.cfg);
  TraceConfig tc;
  tc.step1_budget = 4;
  tc.step2_budget = 3;
  uint64_t before = model_checksum(m);

  TraceCache cache = generate_traces(m, b.tok, b.lib, b.samples, {1, 2}, tc, "note");
  CHECK(cache.records.size() == b.samples.size() * 2);
  CHECK(model_checksum(m) == before);
  CHECK(cache.model_checksum == before);
  CHECK(cache.library_checksum == b.lib.checksum());
  CHECK(cache.d_model == b.cfg.d_model);
  CHECK(cache.vocab_size == b.cfg.vocab_size);

  // sample-major order with prompts cycling fastest
  for (size_t i = 0; i < cache.records.size(); ++i) {
    CHECK(cache.records[i].sample_id == b.samples[i / 2].sample_id);
    CHECK(cache.records[i].prompt_id == int(i % 2) + 1);
  }

  // distinct prompts produce distinct teacher states on every sample
  for (size_t s = 0; s < b.samples.size(); ++s) {
    const ReasoningTrace& a = cache.records[s * 2];
    const ReasoningTrace& c = cache.records[s * 2 + 1];
    bool distinct = a.hidden[0].size() != c.hidden[0].size() ||
                    std::memcmp(a.hidden[0].data(), c.hidden[0].data(),
                                a.hidden[0].size() * sizeof(double)) != 0;
    CHECK(distinct);
  }

  CHECK_THROWS_AS(generate_traces(m, b.tok, b.lib, b.samples, {}, tc),
                  std::invalid_argument);
  CHECK_THROWS_AS(generate_traces(m, b.tok, b.lib, b.samples, {9}, tc),
                  std::invalid_argument);
}

TEST_CASE("concurrent and serial trace generation agree exactly") {
  Bench b = make_bench(3);
  VLM m(b.cfg);
  TraceConfig serial;
  serial.step1_budget = 3;
  serial.step2_budget = 2;
  serial.jobs = 1;
  TraceConfig par = serial;
  par.jobs = 4;

  TraceCache c1 = generate_traces(m, b.tok, b.lib, b.samples, {1, 2}, serial);
  TraceCache c2 = generate_traces(m, b.tok, b.lib, b.samples, {1, 2}, par);
  REQUIRE(c1.records.size() == c2.records.size());
  for (size_t i = 0; i < c1.records.size(); ++i) {
    const ReasoningTrace &a = c1.records[i], &bb = c2.records[i];
    CHECK(a.sample_id == bb.sample_id);
    CHECK(a.prompt_id == bb.prompt_id);
    CHECK(a.y1_hat == bb.y1_hat);
    CHECK(a.y2_hat == bb.y2_hat);
    CHECK(a.answer_ids == bb.answer_ids);
    CHECK(a.confidence == bb.confidence);
    CHECK(a.degenerate == bb.degenerate);
    REQUIRE(a.hidden.size() == bb.hidden.size());
    for (size_t l = 0; l < a.hidden.size(); ++l)
      REQUIRE(std::memcmp(a.hidden[l].data(), bb.hidden[l].data(),
                          a.hidden[l].size() * sizeof(double)) == 0);
    REQUIRE(std::memcmp(a.logits.data(), bb.logits.data(),
                        a.logits.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("trace cache round-trips through disk at f32 precision") {
  Bench b = make_bench(2);
  VLM m(b.cfg);
  TraceConfig tc;
  tc.step1_budget = 3;
  tc.step2_budget = 2;
  TraceCache cache = generate_traces(m, b.tok, b.lib, b.samples, {1, 2}, tc, "cfg=abc");

  std::string path = "trace_rt.bin";
  save_traces(cache, path);
  TraceCache back = load_traces(path);
  CHECK(back.model_checksum == cache.model_checksum);
  CHECK(back.library_checksum == cache.library_checksum);
  CHECK(back.config == "cfg=abc");
  REQUIRE(back.records.size() == cache.records.size());
  for (size_t i = 0; i < back.records.size(); ++i) {
    const ReasoningTrace &a = cache.records[i], &r = back.records[i];
    CHECK(r.y1_hat == a.y1_hat);
    CHECK(r.y2_hat == a.y2_hat);
    CHECK(r.answer_ids == a.answer_ids);
    CHECK(r.confidence == a.confidence);  // stored as f64
    for (size_t l = 0; l < r.hidden.size(); ++l)
      for (size_t k = 0; k < r.hidden[l].size(); ++k)
        CHECK(r.hidden[l][k] == double(float(a.hidden[l][k])));  // f32 exact
  }

  // a second save of the loaded cache is byte-identical (f32 is idempotent)
  std::string path2 = "trace_rt2.bin";
  save_traces(back, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);

  // corruption is caught
  std::string mangled = s1;
  mangled[mangled.size() / 2] = char(mangled[mangled.size() / 2] ^ 0x40);
  std::ofstream bad("trace_bad.bin", std::ios::binary | std::ios::trunc);
  bad.write(mangled.data(), std::streamsize(mangled.size()));
  bad.close();
  CHECK_THROWS_AS((void)load_traces("trace_bad.bin"), std::runtime_error);
  std::ofstream trunc("trace_trunc.bin", std::ios::binary | std::ios::trunc);
  trunc.write(s1.data(), std::streamsize(s1.size() / 2));
  trunc.close();
  CHECK_THROWS_AS((void)load_traces("trace_trunc.bin"), std::runtime_error);
  CHECK_THROWS_AS((void)load_traces("no_such_trace.bin"), std::runtime_error);

  // json export mentions every record
  export_traces_json(cache, "trace_rt.json");
  std::ifstream jf("trace_rt.json");
  std::string js((std::istreambuf_iterator<char>(jf)), std::istreambuf_iterator<char>());
  CHECK(js.find("\"records\"") != std::string::npos);
  CHECK(js.find("hidden_norms") != std::string::npos);
  CHECK(js.find("cfg=abc") != std::string::npos);

  for (const char* f : {"trace_rt.bin", "trace_rt2.bin", "trace_bad.bin", "trace_trunc.bin",
                        "trace_rt.json"})
    std::remove(f);
}
