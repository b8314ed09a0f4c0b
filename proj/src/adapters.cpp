#include "sdvlm/adapters.hpp"

#include <cmath>
#include <stdexcept>

#include "sdvlm/checkpoint.hpp"

namespace sdvlm {

namespace {

std::vector<double> gaussian(Rng& rng, size_t n, double std) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.gauss(0.0, std);
  return v;
}

// r orthonormal rows of length k via modified Gram-Schmidt on Gaussian draws
std::vector<double> orthonormal_rows(Rng& rng, int r, int k) {
  if (r > k)
    throw std::invalid_argument("adapter rank " + std::to_string(r) + " exceeds width " +
                                std::to_string(k));
  std::vector<double> m = gaussian(rng, size_t(r) * size_t(k), 1.0);
  for (int i = 0; i < r; ++i) {
    double* ri = m.data() + size_t(i) * size_t(k);
    for (int j = 0; j < i; ++j) {
      const double* rj = m.data() + size_t(j) * size_t(k);
      double dot = 0.0;
      for (int c = 0; c < k; ++c) dot += ri[c] * rj[c];
      for (int c = 0; c < k; ++c) ri[c] -= dot * rj[c];
    }
    double norm = 0.0;
    for (int c = 0; c < k; ++c) norm += ri[c] * ri[c];
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw std::runtime_error("degenerate draw during orthonormal init");
    for (int c = 0; c < k; ++c) ri[c] /= norm;
  }
  return m;
}

Param make_param(const std::string& name, Dims dims, std::vector<double> val) {
  Param p;
  p.name = name;
  p.dims = dims;
  p.val = std::move(val);
  p.grad.assign(p.val.size(), 0.0);
  p.trainable = true;
  return p;
}

void check_width(const Tensor& h, int k, const char* who) {
  if (h.dims().cols() != k)
    throw std::invalid_argument(std::string(who) + ": hidden width " + h.dims().str() +
                                " does not match adapter width " + std::to_string(k));
}

void load_param(Param& p, const Checkpoint& ck) {
  const NamedTensor& t = ck.require(p.name);
  if (!(t.dims == p.dims))
    throw std::runtime_error(p.name + ": checkpoint shape " + t.dims.str() + " != " +
                             p.dims.str());
  p.val = t.data;
  p.grad.assign(p.val.size(), 0.0);
}

}  // namespace

ReftAdapter::ReftAdapter(int layer, int r, int k, Rng& rng, const std::string& prefix)
    : layer_index(layer), rank(r) {
  if (r < 1) throw std::invalid_argument("reft rank must be >= 1");
  A_down = make_param(prefix + ".reft.A_down", Dims{r, k},
                      gaussian(rng, size_t(r) * size_t(k), 1.0 / std::sqrt(double(k))));
  B_up = make_param(prefix + ".reft.B_up", Dims{k, r},
                    std::vector<double>(size_t(k) * size_t(r), 0.0));
}

Tensor ReftAdapter::delta(Tape& T, const Tensor& h) {
  check_width(h, A_down.dims.cols(), "reft");
  Tensor down = matmul(h, transpose(T.leaf(A_down)));  // [seq × r]
  return matmul(down, transpose(T.leaf(B_up)));        // [seq × k]
}

SkipAdapter::SkipAdapter(int layer, int r, int k, int u_dim, Rng& rng, const std::string& prefix)
    : layer_index(layer), rank(r) {
  if (r < 1) throw std::invalid_argument("skip rank must be >= 1");
  W = make_param(prefix + ".skip.W", Dims{r, k}, std::vector<double>(size_t(r) * size_t(k), 0.0));
  b = make_param(prefix + ".skip.b", Dims{r}, std::vector<double>(size_t(r), 0.0));
  A_u = make_param(prefix + ".skip.A_u", Dims{r, u_dim},
                   std::vector<double>(size_t(r) * size_t(u_dim), 0.0));
  R = make_param(prefix + ".skip.R", Dims{r, k}, orthonormal_rows(rng, r, k));
}

Tensor SkipAdapter::delta(Tape& T, const Tensor& h, const Tensor& u_row) {
  check_width(h, W.dims.cols(), "skip");
  if (u_row.dims().rows() != 1 || u_row.dims().cols() != A_u.dims.cols())
    throw std::invalid_argument("skip: pooled vision feature " + u_row.dims().str() +
                                " does not match A_u " + A_u.dims.str());
  int n = h.dims().rows();
  Tensor s = add_bias(matmul(h, transpose(T.leaf(W))), T.leaf(b));  // [seq × r]
  Tensor z = matmul(u_row, transpose(T.leaf(A_u)));                 // [1 × r]
  Tensor ones = T.constant(Dims{n, 1}, std::vector<double>(size_t(n), 1.0));
  Tensor pre = add(s, matmul(ones, z));  // u broadcast across positions
  return matmul(pre, T.leaf(R));         // row form of R^T(...)
}

LoraAdapter::LoraAdapter(int layer, int r, int k, Rng& rng, const std::string& prefix)
    : layer_index(layer), rank(r) {
  if (r < 1) throw std::invalid_argument("lora rank must be >= 1");
  A_down = make_param(prefix + ".lora.A_down", Dims{r, k},
                      gaussian(rng, size_t(r) * size_t(k), 1.0 / std::sqrt(double(k))));
  B_up = make_param(prefix + ".lora.B_up", Dims{k, r},
                    std::vector<double>(size_t(k) * size_t(r), 0.0));
}

Tensor LoraAdapter::weight_delta(Tape& T) {
  return matmul(transpose(T.leaf(A_down)), transpose(T.leaf(B_up)));  // [k × k]
}

std::vector<int> adapted_layers(const VLMConfig& cfg) {
  std::vector<int> out;
  for (int l = std::max(0, cfg.n_decoder_layers - 3); l < cfg.n_decoder_layers; ++l)
    out.push_back(l);
  return out;
}

AdapterSet::AdapterSet(const VLMConfig& cfg, int pid, int r, int pos, uint64_t seed,
                       bool with_skip)
    : prompt_id(pid), mask{pos} {
  if (pos < 0) throw std::invalid_argument("position mask must be >= 0");
  Rng rng(derive_seed(seed, "adapters-prompt-" + std::to_string(pid)));
  for (int l : adapted_layers(cfg)) {
    std::string prefix = "prompt" + std::to_string(pid) + ".layer" + std::to_string(l);
    reft.emplace_back(l, r, cfg.d_model, rng, prefix);
    if (with_skip) skip.emplace_back(l, r, cfg.d_model, cfg.vision.d_vision, rng, prefix);
  }
}

std::vector<Param*> AdapterSet::params() {
  std::vector<Param*> out;
  for (size_t i = 0; i < reft.size(); ++i) {
    out.push_back(&reft[i].A_down);
    out.push_back(&reft[i].B_up);
    if (i < skip.size()) {
      out.push_back(&skip[i].W);
      out.push_back(&skip[i].b);
      out.push_back(&skip[i].A_u);
      out.push_back(&skip[i].R);
    }
  }
  return out;
}

size_t AdapterSet::param_count() const {
  size_t n = 0;
  for (const ReftAdapter& a : reft) n += a.A_down.val.size() + a.B_up.val.size();
  for (const SkipAdapter& s : skip)
    n += s.W.val.size() + s.b.val.size() + s.A_u.val.size() + s.R.val.size();
  return n;
}

Tensor mask_rows(Tape& t, const Tensor& delta, const PositionMask& m) {
  int n = delta.dims().rows(), k = delta.dims().cols();
  if (m.saturated(n)) return delta;
  std::vector<double> mv(size_t(n) * size_t(k), 0.0);
  for (int i = 0; i < n; ++i)
    if (m.covers(i, n)) std::fill_n(mv.begin() + size_t(i) * size_t(k), size_t(k), 1.0);
  return mul(delta, t.constant(Dims{n, k}, std::move(mv)));
}

Interventions AdapterSet::hooks() {
  Interventions iv;
  for (size_t i = 0; i < reft.size(); ++i) {
    ReftAdapter* ra = &reft[i];
    SkipAdapter* sa = i < skip.size() ? &skip[i] : nullptr;
    PositionMask m = mask;
    iv.out.push_back(
        {ra->layer_index, [ra, sa, m](Tape& T, const Tensor& h, const Tensor& u) -> Tensor {
           Tensor d = ra->delta(T, h);
           if (sa) d = add(d, sa->delta(T, h, u));
           return mask_rows(T, d, m);
         }});
  }
  return iv;
}

void AdapterSet::add_to(Checkpoint& ck) const {
  for (const ReftAdapter& a : reft) {
    ck.add(a.A_down.name, a.A_down.dims, a.A_down.val);
    ck.add(a.B_up.name, a.B_up.dims, a.B_up.val);
  }
  for (const SkipAdapter& s : skip) {
    ck.add(s.W.name, s.W.dims, s.W.val);
    ck.add(s.b.name, s.b.dims, s.b.val);
    ck.add(s.A_u.name, s.A_u.dims, s.A_u.val);
    ck.add(s.R.name, s.R.dims, s.R.val);
  }
}

void AdapterSet::load_from(const Checkpoint& ck) {
  for (Param* p : params()) load_param(*p, ck);
}

LoraSet::LoraSet(const VLMConfig& cfg, int r, uint64_t seed) {
  Rng rng(derive_seed(seed, "lora"));
  for (int l : adapted_layers(cfg))
    loras.emplace_back(l, r, cfg.d_model, rng, "layer" + std::to_string(l));
}

std::vector<Param*> LoraSet::params() {
  std::vector<Param*> out;
  for (LoraAdapter& a : loras) {
    out.push_back(&a.A_down);
    out.push_back(&a.B_up);
  }
  return out;
}

size_t LoraSet::param_count() const {
  size_t n = 0;
  for (const LoraAdapter& a : loras) n += a.A_down.val.size() + a.B_up.val.size();
  return n;
}

Interventions LoraSet::hooks() {
  Interventions iv;
  for (LoraAdapter& a : loras) {
    LoraAdapter* p = &a;
    iv.wo.push_back({p->layer_index, [p](Tape& T) { return p->weight_delta(T); }});
  }
  return iv;
}

void LoraSet::add_to(Checkpoint& ck) const {
  for (const LoraAdapter& a : loras) {
    ck.add(a.A_down.name, a.A_down.dims, a.A_down.val);
    ck.add(a.B_up.name, a.B_up.dims, a.B_up.val);
  }
}

void LoraSet::load_from(const Checkpoint& ck) {
  for (Param* p : params()) load_param(*p, ck);
}

}  // namespace sdvlm
