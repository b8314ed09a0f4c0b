#include "sdvlm/model.hpp"

#include "sdvlm/checkpoint.hpp"
#include "sdvlm/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace sdvlm {

void VLMConfig::validate() const {
  auto bad = [](const std::string& why) { throw std::invalid_argument("VLMConfig: " + why); };
  if (d_model <= 0 || n_decoder_layers <= 0 || n_heads <= 0) bad("non-positive core sizes");
  if (vocab_size <= 0) bad("vocab_size must be set from the tokenizer");
  if (max_seq_len <= 0) bad("max_seq_len must be positive");
  if (d_model % n_heads != 0) bad("d_model not divisible by n_heads");
  if (vision.d_vision % n_heads != 0) bad("d_vision not divisible by n_heads");
  if (vision.image_size <= 0 || vision.patch_size <= 0 || vision.n_vision_layers <= 0 ||
      vision.d_vision <= 0)
    bad("non-positive vision sizes");
  if (vision.image_size % vision.patch_size != 0) bad("image_size not divisible by patch_size");
  if (skip_source_layer < 0 || skip_source_layer >= vision.n_vision_layers)
    bad("skip_source_layer outside vision encoder");
}

void TokenSequence::validate(int vocab_size) const {
  if (ids.size() != segs.size())
    throw std::invalid_argument("TokenSequence: ids/segs length mismatch");
  for (int id : ids)
    if (id < 0 || id >= vocab_size)
      throw std::invalid_argument("TokenSequence: id " + std::to_string(id) +
                                  " outside vocab of " + std::to_string(vocab_size));
  bool in_span = false, done = false;
  for (const Seg& s : segs) {
    if (s == Seg::image) {
      if (done) throw std::invalid_argument("TokenSequence: image positions not contiguous");
      in_span = true;
    } else if (in_span) {
      in_span = false;
      done = true;
    }
  }
}

std::pair<int, int> TokenSequence::image_span() const {
  int start = -1, len = 0;
  for (size_t i = 0; i < segs.size(); ++i) {
    if (segs[i] == Seg::image) {
      if (start < 0) start = int(i);
      ++len;
    }
  }
  return {start < 0 ? 0 : start, len};
}

namespace {

void init_gauss(Param& p, Rng& rng, double std) {
  for (double& v : p.val) v = rng.gauss(0.0, std);
}

void init_block(VLM::Block& b, const std::string& prefix, int d, Rng& rng) {
  auto mk = [&](Param& p, const char* n, Dims dm, double std) {
    p = Param(prefix + n, std::move(dm));
    if (std > 0) init_gauss(p, rng, std);
  };
  const double w = 0.02;
  mk(b.wq, "wq", Dims{d, d}, w);
  mk(b.bq, "bq", Dims{d}, 0);
  mk(b.wk, "wk", Dims{d, d}, w);
  mk(b.bk, "bk", Dims{d}, 0);
  mk(b.wv, "wv", Dims{d, d}, w);
  mk(b.bv, "bv", Dims{d}, 0);
  mk(b.wo, "wo", Dims{d, d}, w);
  mk(b.bo, "bo", Dims{d}, 0);
  mk(b.ln1_g, "ln1_g", Dims{d}, 0);
  std::fill(b.ln1_g.val.begin(), b.ln1_g.val.end(), 1.0);
  mk(b.ln1_b, "ln1_b", Dims{d}, 0);
  mk(b.ln2_g, "ln2_g", Dims{d}, 0);
  std::fill(b.ln2_g.val.begin(), b.ln2_g.val.end(), 1.0);
  mk(b.ln2_b, "ln2_b", Dims{d}, 0);
  mk(b.fc1, "fc1", Dims{d, 2 * d}, w);
  mk(b.fc1_b, "fc1_b", Dims{2 * d}, 0);
  mk(b.fc2, "fc2", Dims{2 * d, d}, w);
  mk(b.fc2_b, "fc2_b", Dims{d}, 0);
}

void block_params(VLM::Block& b, std::vector<Param*>& out) {
  for (Param* p : {&b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln1_g,
                   &b.ln1_b, &b.ln2_g, &b.ln2_b, &b.fc1, &b.fc1_b, &b.fc2, &b.fc2_b})
    out.push_back(p);
}

std::vector<int> iota_ids(int n) {
  std::vector<int> v(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) v[size_t(i)] = i;
  return v;
}

}  // namespace

VLM::VLM(VLMConfig c) : cfg(c) {
  cfg.validate();
  Rng rng(cfg.seed);
  const double w = 0.02;
  tok_emb = Param("tok_emb", Dims{cfg.vocab_size, cfg.d_model});
  init_gauss(tok_emb, rng, w);
  pos_emb = Param("pos_emb", Dims{cfg.max_seq_len, cfg.d_model});
  init_gauss(pos_emb, rng, w);
  blocks.resize(size_t(cfg.n_decoder_layers));
  for (int i = 0; i < cfg.n_decoder_layers; ++i)
    init_block(blocks[size_t(i)], "blk" + std::to_string(i) + ".", cfg.d_model, rng);
  w_out = Param("w_out", Dims{cfg.d_model, cfg.vocab_size});
  init_gauss(w_out, rng, w);
  b_out = Param("b_out", Dims{cfg.vocab_size});

  int dv = cfg.vision.d_vision;
  patch_w = Param("patch_w", Dims{cfg.patch_dim(), dv});
  init_gauss(patch_w, rng, w);
  patch_b = Param("patch_b", Dims{dv});
  vis_pos = Param("vis_pos", Dims{cfg.n_patches(), dv});
  init_gauss(vis_pos, rng, w);
  vis_blocks.resize(size_t(cfg.vision.n_vision_layers));
  for (int i = 0; i < cfg.vision.n_vision_layers; ++i)
    init_block(vis_blocks[size_t(i)], "vis" + std::to_string(i) + ".", dv, rng);
  vis_proj_w = Param("vis_proj_w", Dims{dv, cfg.d_model});
  init_gauss(vis_proj_w, rng, w);
  vis_proj_b = Param("vis_proj_b", Dims{cfg.d_model});
}

std::vector<Param*> VLM::params() {
  std::vector<Param*> out = {&tok_emb, &pos_emb};
  for (Block& b : blocks) block_params(b, out);
  out.push_back(&w_out);
  out.push_back(&b_out);
  out.push_back(&patch_w);
  out.push_back(&patch_b);
  out.push_back(&vis_pos);
  for (Block& b : vis_blocks) block_params(b, out);
  out.push_back(&vis_proj_w);
  out.push_back(&vis_proj_b);
  return out;
}

void VLM::set_trainable(bool on) {
  // write only on change so concurrent same-value calls stay race-free
  for (Param* p : params())
    if (p->trainable != on) p->trainable = on;
}

size_t VLM::param_count() const {
  size_t n = 0;
  for (Param* p : const_cast<VLM*>(this)->params()) n += p->val.size();
  return n;
}

Tensor VLM::block_forward(Tape& t, Block& b, const Tensor& x, bool causal,
                          const Tensor* wo_delta) {
  int n = x.dims().rows(), d = x.dims().cols();
  int nh = cfg.n_heads, dh = d / nh;
  Tensor q = add_bias(matmul(x, t.leaf(b.wq)), t.leaf(b.bq));
  Tensor k = add_bias(matmul(x, t.leaf(b.wk)), t.leaf(b.bk));
  Tensor v = add_bias(matmul(x, t.leaf(b.wv)), t.leaf(b.bv));

  Tensor mask;
  if (causal) {
    std::vector<double> mv(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) mv[size_t(i) * n + j] = -1e9;
    mask = t.constant(Dims{n, n}, std::move(mv));
  }

  Tensor cat;
  double inv = 1.0 / std::sqrt(double(dh));
  for (int h = 0; h < nh; ++h) {
    Tensor qh = slice(q, 1, h * dh, dh);
    Tensor kh = slice(k, 1, h * dh, dh);
    Tensor vh = slice(v, 1, h * dh, dh);
    Tensor sc = scale(matmul(qh, transpose(kh)), inv);
    if (causal) sc = add(sc, mask);
    Tensor oh = matmul(softmax(sc, 1), vh);
    cat = h == 0 ? oh : concat(cat, oh, 1);
  }
  Tensor om = matmul(cat, t.leaf(b.wo));
  if (wo_delta) om = add(om, matmul(cat, *wo_delta));
  Tensor o = add_bias(om, t.leaf(b.bo));
  Tensor a = layer_norm(add(x, o), t.leaf(b.ln1_g), t.leaf(b.ln1_b));
  Tensor m1 = gelu(add_bias(matmul(a, t.leaf(b.fc1)), t.leaf(b.fc1_b)));
  Tensor mlp = add_bias(matmul(m1, t.leaf(b.fc2)), t.leaf(b.fc2_b));
  return layer_norm(add(a, mlp), t.leaf(b.ln2_g), t.leaf(b.ln2_b));
}

VLM::VisionOut VLM::encode_image(Tape& t, const std::vector<double>& image) {
  int S = cfg.vision.image_size, ps = cfg.vision.patch_size;
  if (int(image.size()) != S * S * 3)
    throw std::invalid_argument("encode_image: expected " + std::to_string(S * S * 3) +
                                " values for a " + std::to_string(S) + "x" + std::to_string(S) +
                                " image, got " + std::to_string(image.size()));
  for (double v : image)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("encode_image: pixel value outside [0,1]");

  int grid = S / ps, P = cfg.n_patches(), pd = cfg.patch_dim();
  std::vector<double> patches(size_t(P) * pd);
  for (int pr = 0; pr < grid; ++pr)
    for (int pc = 0; pc < grid; ++pc) {
      double* dst = patches.data() + size_t(pr * grid + pc) * pd;
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          for (int c = 0; c < 3; ++c)
            *dst++ = image[size_t(((pr * ps + y) * S + pc * ps + x) * 3 + c)];
    }

  Tensor h = add(add_bias(matmul(t.constant(Dims{P, pd}, std::move(patches)), t.leaf(patch_w)),
                          t.leaf(patch_b)),
                 t.leaf(vis_pos));
  Tensor features;
  for (int l = 0; l < cfg.vision.n_vision_layers; ++l) {
    h = block_forward(t, vis_blocks[size_t(l)], h, /*causal=*/false, nullptr);
    if (l == cfg.skip_source_layer) features = h;
  }
  std::vector<double> pool(size_t(P), 1.0 / double(P));
  Tensor u = matmul(t.constant(Dims{1, P}, std::move(pool)), features);
  Tensor proj = add_bias(matmul(h, t.leaf(vis_proj_w)), t.leaf(vis_proj_b));
  return VisionOut{proj, features, u};
}

void VLM::check_interventions(const Interventions* iv) const {
  if (!iv) return;
  for (const OutputHook& h : iv->out)
    if (h.layer < 0 || h.layer >= cfg.n_decoder_layers)
      throw std::invalid_argument("intervention on nonexistent layer " +
                                  std::to_string(h.layer));
  for (const WoHook& h : iv->wo)
    if (h.layer < 0 || h.layer >= cfg.n_decoder_layers)
      throw std::invalid_argument("intervention on nonexistent layer " +
                                  std::to_string(h.layer));
}

LayerStates VLM::forward(Tape& t, const TokenSequence& seq, const std::vector<double>& image,
                         const Interventions* iv) {
  seq.validate(cfg.vocab_size);
  check_interventions(iv);
  int n = int(seq.size());
  if (n == 0) throw std::invalid_argument("forward: empty sequence");
  if (n > cfg.max_seq_len)
    throw std::invalid_argument("forward: sequence of " + std::to_string(n) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  auto [img_start, img_len] = seq.image_span();

  LayerStates out;
  Tensor emb = gather_rows(t.leaf(tok_emb), seq.ids);
  Tensor u;
  if (img_len > 0) {
    if (img_len != cfg.n_patches())
      throw std::invalid_argument("forward: image span of " + std::to_string(img_len) +
                                  " tokens, model emits " + std::to_string(cfg.n_patches()) +
                                  " patches");
    VisionOut vis = encode_image(t, image);
    out.vision_features_u = vis.features;
    u = vis.u_pooled;
    Tensor mid = vis.patch_tokens;
    if (img_start > 0) mid = concat(slice(emb, 0, 0, img_start), mid, 0);
    int rest = n - img_start - img_len;
    if (rest > 0) mid = concat(mid, slice(emb, 0, img_start + img_len, rest), 0);
    emb = mid;
  } else {
    u = t.zeros(Dims{1, cfg.vision.d_vision});
  }
  out.u_pooled = u;

  Tensor x = add(emb, gather_rows(t.leaf(pos_emb), iota_ids(n)));
  out.per_layer_hidden.reserve(size_t(cfg.n_decoder_layers));
  for (int l = 0; l < cfg.n_decoder_layers; ++l) {
    Tensor wo_delta;
    bool have_wo = false;
    if (iv)
      for (const WoHook& h : iv->wo)
        if (h.layer == l) {
          Tensor d = h.delta_w(t);
          wo_delta = have_wo ? add(wo_delta, d) : d;
          have_wo = true;
        }
    Tensor h = block_forward(t, blocks[size_t(l)], x, /*causal=*/true,
                             have_wo ? &wo_delta : nullptr);
    // all output deltas read the same block output, then sum onto it
    if (iv) {
      Tensor acc;
      bool any = false;
      for (const OutputHook& oh : iv->out)
        if (oh.layer == l) {
          Tensor d = oh.delta(t, h, u);
          acc = any ? add(acc, d) : d;
          any = true;
        }
      if (any) h = add(h, acc);
    }
    x = h;
    out.per_layer_hidden.push_back(x);
  }
  out.logits = add_bias(matmul(x, t.leaf(w_out)), t.leaf(b_out));
  return out;
}

LayerStates VLM::forward_from(Tape& t, const std::vector<double>& h_prev, int seq_len,
                              int start_layer, const std::vector<double>& u_pooled,
                              const Interventions* iv) {
  check_interventions(iv);
  if (start_layer <= 0 || start_layer >= cfg.n_decoder_layers)
    throw std::invalid_argument("forward_from: start_layer " + std::to_string(start_layer) +
                                " outside (0, " + std::to_string(cfg.n_decoder_layers) + ")");
  if (iv)
    for (const OutputHook& h : iv->out)
      if (h.layer < start_layer)
        throw std::invalid_argument("forward_from: hook on layer " + std::to_string(h.layer) +
                                    " precedes the cached prefix");
  if (int(h_prev.size()) != seq_len * cfg.d_model)
    throw std::invalid_argument("forward_from: prefix size mismatch");
  if (int(u_pooled.size()) != cfg.vision.d_vision)
    throw std::invalid_argument("forward_from: u size mismatch");

  LayerStates out;
  out.per_layer_hidden.assign(size_t(cfg.n_decoder_layers), Tensor{});
  Tensor x = t.constant(Dims{seq_len, cfg.d_model}, h_prev);
  Tensor u = t.constant(Dims{1, cfg.vision.d_vision}, u_pooled);
  out.u_pooled = u;
  for (int l = start_layer; l < cfg.n_decoder_layers; ++l) {
    Tensor wo_delta;
    bool have_wo = false;
    if (iv)
      for (const WoHook& h : iv->wo)
        if (h.layer == l) {
          Tensor d = h.delta_w(t);
          wo_delta = have_wo ? add(wo_delta, d) : d;
          have_wo = true;
        }
    Tensor h = block_forward(t, blocks[size_t(l)], x, /*causal=*/true,
                             have_wo ? &wo_delta : nullptr);
    if (iv) {
      Tensor acc;
      bool any = false;
      for (const OutputHook& oh : iv->out)
        if (oh.layer == l) {
          Tensor d = oh.delta(t, h, u);
          acc = any ? add(acc, d) : d;
          any = true;
        }
      if (any) h = add(h, acc);
    }
    x = h;
    out.per_layer_hidden[size_t(l)] = x;
  }
  out.logits = add_bias(matmul(x, t.leaf(w_out)), t.leaf(b_out));
  return out;
}

TokenSequence VLM::greedy_decode(const TokenSequence& seq, const std::vector<double>& image,
                                 int max_new_tokens, int eos_id, const Interventions* iv) {
  if (max_new_tokens < 1)
    throw std::invalid_argument("greedy_decode: max_new_tokens must be >= 1");
  TokenSequence cur = seq;
  for (int step = 0; step < max_new_tokens; ++step) {
    if (int(cur.size()) >= cfg.max_seq_len) break;
    Tape t(false);
    LayerStates st = forward(t, cur, image, iv);
    const auto& lv = st.logits.val();
    int n = int(cur.size()), V = cfg.vocab_size;
    const double* row = lv.data() + size_t(n - 1) * V;
    int best = 0;
    for (int i = 1; i < V; ++i)
      if (row[i] > row[best]) best = i;
    cur.append(best, Seg::answer);
    if (best == eos_id) break;
  }
  return cur;
}

Checkpoint VLM::to_checkpoint(const std::string& meta) const {
  Checkpoint ck;
  ck.meta = meta;
  for (Param* p : const_cast<VLM*>(this)->params()) ck.add(p->name, p->dims, p->val);
  return ck;
}

VLM VLM::from_checkpoint(const Checkpoint& ck, const VLMConfig& cfg) {
  VLM m(cfg);
  for (Param* p : m.params()) {
    const NamedTensor& t = ck.require(p->name);
    if (!(t.dims == p->dims))
      throw std::runtime_error("checkpoint tensor '" + p->name + "' is " + t.dims.str() +
                               ", model expects " + p->dims.str());
    p->val = t.data;
  }
  return m;
}

double top_token_confidence(const std::vector<double>& logits_row) {
  if (logits_row.empty()) throw std::invalid_argument("top_token_confidence: empty logits");
  double mx = logits_row[0];
  for (double v : logits_row) mx = std::max(mx, v);
  double sum = 0.0, top = 0.0;
  for (double v : logits_row) sum += std::exp(v - mx);
  top = 1.0 / sum;  // exp(mx - mx) / sum
  return top;
}

}  // namespace sdvlm
