#include "sdvlm/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace sdvlm {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using MapC = Eigen::Map<const Mat>;

MapC vmap(const Tape::Node& n) { return MapC(n.val.data(), n.dims.rows(), n.dims.cols()); }
MapM gmap(Tape::Node& n) { return MapM(n.grad.data(), n.dims.rows(), n.dims.cols()); }
MapC gc(const Tape::Node& n) { return MapC(n.grad.data(), n.dims.rows(), n.dims.cols()); }

void check_same_tape(const Tensor& a, const Tensor& b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands recorded on different tapes");
}

constexpr double kGeluC = 0.7978845608028654;   // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// Stable log-sum-exp of one row.
double lse_row(const double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b);
  if (a.dims().rank() != 2 || b.dims().rank() != 2 || a.dims().cols() != b.dims().rows()) {
    throw_shape_mismatch("matmul", a.dims(), b.dims());
  }
  Tape& T = *a.tape;
  int m = a.dims().rows(), n = b.dims().cols();
  std::vector<double> out(size_t(m) * n);
  MapM(out.data(), m, n).noalias() = vmap(T.node(a.id)) * vmap(T.node(b.id));
  int aid = a.id, bid = b.id, oid = int(T.size());
  return T.make_node(Dims{m, n}, std::move(out), T.any_requires_grad({a, b}),
                     [aid, bid, oid](Tape& t) {
                       auto& an = t.node(aid);
                       auto& bn = t.node(bid);
                       MapC d = gc(t.node(oid));
                       if (an.requires_grad) gmap(an).noalias() += d * vmap(bn).transpose();
                       if (bn.requires_grad) gmap(bn).noalias() += vmap(an).transpose() * d;
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b);
  if (!(a.dims() == b.dims())) throw_shape_mismatch("add", a.dims(), b.dims());
  Tape& T = *a.tape;
  const auto& av = T.node(a.id).val;
  const auto& bv = T.node(b.id).val;
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  int aid = a.id, bid = b.id, oid = int(T.size());
  return T.make_node(a.dims(), std::move(out), T.any_requires_grad({a, b}),
                     [aid, bid, oid](Tape& t) {
                       const auto& d = t.node(oid).grad;
                       auto& an = t.node(aid);
                       auto& bn = t.node(bid);
                       if (an.requires_grad)
                         for (size_t i = 0; i < d.size(); ++i) an.grad[i] += d[i];
                       if (bn.requires_grad)
                         for (size_t i = 0; i < d.size(); ++i) bn.grad[i] += d[i];
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b);
  if (!(a.dims() == b.dims())) throw_shape_mismatch("sub", a.dims(), b.dims());
  Tape& T = *a.tape;
  const auto& av = T.node(a.id).val;
  const auto& bv = T.node(b.id).val;
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  int aid = a.id, bid = b.id, oid = int(T.size());
  return T.make_node(a.dims(), std::move(out), T.any_requires_grad({a, b}),
                     [aid, bid, oid](Tape& t) {
                       const auto& d = t.node(oid).grad;
                       auto& an = t.node(aid);
                       auto& bn = t.node(bid);
                       if (an.requires_grad)
                         for (size_t i = 0; i < d.size(); ++i) an.grad[i] += d[i];
                       if (bn.requires_grad)
                         for (size_t i = 0; i < d.size(); ++i) bn.grad[i] -= d[i];
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b);
  if (!(a.dims() == b.dims())) throw_shape_mismatch("mul", a.dims(), b.dims());
  Tape& T = *a.tape;
  const auto& av = T.node(a.id).val;
  const auto& bv = T.node(b.id).val;
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  int aid = a.id, bid = b.id, oid = int(T.size());
  return T.make_node(a.dims(), std::move(out), T.any_requires_grad({a, b}),
                     [aid, bid, oid](Tape& t) {
                       const auto& d = t.node(oid).grad;
                       auto& an = t.node(aid);
                       auto& bn = t.node(bid);
                       if (an.requires_grad)
                         for (size_t i = 0; i < d.size(); ++i) an.grad[i] += d[i] * bn.val[i];
                       if (bn.requires_grad)
                         for (size_t i = 0; i < d.size(); ++i) bn.grad[i] += d[i] * an.val[i];
                     });
}

Tensor scale(const Tensor& a, double c) {
  Tape& T = *a.tape;
  std::vector<double> out = T.node(a.id).val;
  for (double& v : out) v *= c;
  int aid = a.id, oid = int(T.size());
  return T.make_node(a.dims(), std::move(out), T.any_requires_grad({a}),
                     [aid, oid, c](Tape& t) {
                       const auto& d = t.node(oid).grad;
                       auto& an = t.node(aid);
                       if (!an.requires_grad) return;
                       for (size_t i = 0; i < d.size(); ++i) an.grad[i] += c * d[i];
                     });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  check_same_tape(a, bias);
  if (a.dims().rank() != 2 || bias.dims().rank() != 1 ||
      bias.dims().d[0] != a.dims().cols()) {
    throw_shape_mismatch("add_bias", a.dims(), bias.dims());
  }
  Tape& T = *a.tape;
  int m = a.dims().rows(), n = a.dims().cols();
  const auto& av = T.node(a.id).val;
  const auto& bv = T.node(bias.id).val;
  std::vector<double> out(av.size());
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out[size_t(r) * n + c] = av[size_t(r) * n + c] + bv[size_t(c)];
  int aid = a.id, bid = bias.id, oid = int(T.size());
  return T.make_node(a.dims(), std::move(out), T.any_requires_grad({a, bias}),
                     [aid, bid, oid, m, n](Tape& t) {
                       const auto& d = t.node(oid).grad;
                       auto& an = t.node(aid);
                       auto& bn = t.node(bid);
                       if (an.requires_grad)
                         for (size_t i = 0; i < d.size(); ++i) an.grad[i] += d[i];
                       if (bn.requires_grad)
                         for (int r = 0; r < m; ++r)
                           for (int c = 0; c < n; ++c) bn.grad[size_t(c)] += d[size_t(r) * n + c];
                     });
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  check_same_tape(a, b);
  if (a.dims().rank() != 2 || b.dims().rank() != 2 || axis < 0 || axis > 1)
    throw_shape_mismatch("concat", a.dims(), b.dims());
  int am = a.dims().rows(), an_ = a.dims().cols();
  int bm = b.dims().rows(), bn_ = b.dims().cols();
  Tape& T = *a.tape;
  const auto& av = T.node(a.id).val;
  const auto& bv = T.node(b.id).val;
  std::vector<double> out;
  Dims od;
  if (axis == 0) {
    if (an_ != bn_) throw_shape_mismatch("concat", a.dims(), b.dims());
    od = Dims{am + bm, an_};
    out = av;
    out.insert(out.end(), bv.begin(), bv.end());
  } else {
    if (am != bm) throw_shape_mismatch("concat", a.dims(), b.dims());
    od = Dims{am, an_ + bn_};
    out.resize(size_t(am) * (an_ + bn_));
    for (int r = 0; r < am; ++r) {
      std::copy(av.begin() + size_t(r) * an_, av.begin() + size_t(r + 1) * an_,
                out.begin() + size_t(r) * (an_ + bn_));
      std::copy(bv.begin() + size_t(r) * bn_, bv.begin() + size_t(r + 1) * bn_,
                out.begin() + size_t(r) * (an_ + bn_) + an_);
    }
  }
  int aid = a.id, bid = b.id, oid = int(T.size());
  return T.make_node(od, std::move(out), T.any_requires_grad({a, b}),
                     [aid, bid, oid, axis, am, an_, bm, bn_](Tape& t) {
                       const auto& d = t.node(oid).grad;
                       auto& anode = t.node(aid);
                       auto& bnode = t.node(bid);
                       if (axis == 0) {
                         size_t asz = size_t(am) * an_;
                         if (anode.requires_grad)
                           for (size_t i = 0; i < asz; ++i) anode.grad[i] += d[i];
                         if (bnode.requires_grad)
                           for (size_t i = 0; i < size_t(bm) * bn_; ++i)
                             bnode.grad[i] += d[asz + i];
                       } else {
                         int w = an_ + bn_;
                         for (int r = 0; r < am; ++r) {
                           if (anode.requires_grad)
                             for (int c = 0; c < an_; ++c)
                               anode.grad[size_t(r) * an_ + c] += d[size_t(r) * w + c];
                           if (bnode.requires_grad)
                             for (int c = 0; c < bn_; ++c)
                               bnode.grad[size_t(r) * bn_ + c] += d[size_t(r) * w + an_ + c];
                         }
                       }
                     });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  Tape& T = *a.tape;
  const Dims& ad = a.dims();
  if (ad.rank() == 1) {
    if (axis != 0 || start < 0 || len < 0 || start + len > ad.d[0])
      throw std::invalid_argument("slice: bad range [" + std::to_string(start) + "," +
                                  std::to_string(start + len) + ") on " + ad.str());
    const auto& av = T.node(a.id).val;
    std::vector<double> out(av.begin() + start, av.begin() + start + len);
    int aid = a.id, oid = int(T.size());
    return T.make_node(Dims{len}, std::move(out), T.any_requires_grad({a}),
                       [aid, oid, start, len](Tape& t) {
                         auto& an = t.node(aid);
                         if (!an.requires_grad) return;
                         const auto& d = t.node(oid).grad;
                         for (int i = 0; i < len; ++i) an.grad[size_t(start + i)] += d[size_t(i)];
                       });
  }
  if (ad.rank() != 2 || axis < 0 || axis > 1)
    throw std::invalid_argument("slice: axis " + std::to_string(axis) + " on " + ad.str());
  int m = ad.rows(), n = ad.cols();
  int lim = axis == 0 ? m : n;
  if (start < 0 || len < 0 || start + len > lim)
    throw std::invalid_argument("slice: bad range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") on " + ad.str());
  const auto& av = T.node(a.id).val;
  std::vector<double> out;
  Dims od;
  if (axis == 0) {
    od = Dims{len, n};
    out.assign(av.begin() + size_t(start) * n, av.begin() + size_t(start + len) * n);
  } else {
    od = Dims{m, len};
    out.resize(size_t(m) * len);
    for (int r = 0; r < m; ++r)
      std::copy(av.begin() + size_t(r) * n + start, av.begin() + size_t(r) * n + start + len,
                out.begin() + size_t(r) * len);
  }
  int aid = a.id, oid = int(T.size());
  return T.make_node(od, std::move(out), T.any_requires_grad({a}),
                     [aid, oid, axis, start, len, m, n](Tape& t) {
                       auto& an = t.node(aid);
                       if (!an.requires_grad) return;
                       const auto& d = t.node(oid).grad;
                       if (axis == 0) {
                         for (size_t i = 0; i < size_t(len) * n; ++i)
                           an.grad[size_t(start) * n + i] += d[i];
                       } else {
                         for (int r = 0; r < m; ++r)
                           for (int c = 0; c < len; ++c)
                             an.grad[size_t(r) * n + start + c] += d[size_t(r) * len + c];
                       }
                     });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  Tape& T = *table.tape;
  const Dims& td = table.dims();
  if (td.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank 2, got " + td.str());
  int V = td.rows(), dcols = td.cols();
  for (int id : ids)
    if (id < 0 || id >= V)
      throw std::invalid_argument("gather_rows: index " + std::to_string(id) +
                                  " outside table " + td.str());
  const auto& tv = T.node(table.id).val;
  std::vector<double> out(ids.size() * size_t(dcols));
  for (size_t r = 0; r < ids.size(); ++r)
    std::copy(tv.begin() + size_t(ids[r]) * dcols, tv.begin() + size_t(ids[r] + 1) * dcols,
              out.begin() + r * dcols);
  int tid = table.id, oid = int(T.size());
  return T.make_node(Dims{int(ids.size()), dcols}, std::move(out), T.any_requires_grad({table}),
                     [tid, oid, ids, dcols](Tape& t) {
                       auto& tn = t.node(tid);
                       if (!tn.requires_grad) return;
                       const auto& d = t.node(oid).grad;
                       for (size_t r = 0; r < ids.size(); ++r)
                         for (int c = 0; c < dcols; ++c)
                           tn.grad[size_t(ids[r]) * dcols + c] += d[r * dcols + c];
                     });
}

Tensor transpose(const Tensor& a) {
  Tape& T = *a.tape;
  if (a.dims().rank() != 2)
    throw std::invalid_argument("transpose: need rank 2, got " + a.dims().str());
  int m = a.dims().rows(), n = a.dims().cols();
  std::vector<double> out(size_t(m) * n);
  MapM(out.data(), n, m) = vmap(T.node(a.id)).transpose();
  int aid = a.id, oid = int(T.size());
  return T.make_node(Dims{n, m}, std::move(out), T.any_requires_grad({a}),
                     [aid, oid](Tape& t) {
                       auto& an = t.node(aid);
                       if (!an.requires_grad) return;
                       gmap(an).noalias() += gc(t.node(oid)).transpose();
                     });
}

Tensor sum_all(const Tensor& a) {
  Tape& T = *a.tape;
  const auto& av = T.node(a.id).val;
  double s = 0.0;
  for (double v : av) s += v;
  int aid = a.id, oid = int(T.size());
  return T.make_node(Dims{}, {s}, T.any_requires_grad({a}),
                     [aid, oid](Tape& t) {
                       auto& an = t.node(aid);
                       if (!an.requires_grad) return;
                       double d = t.node(oid).grad[0];
                       for (double& g : an.grad) g += d;
                     });
}

Tensor mean_all(const Tensor& a) {
  Tape& T = *a.tape;
  const auto& av = T.node(a.id).val;
  if (av.empty()) throw std::invalid_argument("mean_all: empty tensor");
  double s = 0.0;
  for (double v : av) s += v;
  double inv = 1.0 / double(av.size());
  int aid = a.id, oid = int(T.size());
  return T.make_node(Dims{}, {s * inv}, T.any_requires_grad({a}),
                     [aid, oid, inv](Tape& t) {
                       auto& an = t.node(aid);
                       if (!an.requires_grad) return;
                       double d = t.node(oid).grad[0] * inv;
                       for (double& g : an.grad) g += d;
                     });
}

Tensor gelu(const Tensor& a) {
  Tape& T = *a.tape;
  const auto& av = T.node(a.id).val;
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) {
    double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  }
  int aid = a.id, oid = int(T.size());
  return T.make_node(a.dims(), std::move(out), T.any_requires_grad({a}),
                     [aid, oid](Tape& t) {
                       auto& an = t.node(aid);
                       if (!an.requires_grad) return;
                       const auto& d = t.node(oid).grad;
                       for (size_t i = 0; i < d.size(); ++i) {
                         double x = an.val[i];
                         double u = kGeluC * (x + kGeluA * x * x * x);
                         double th = std::tanh(u);
                         double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
                         double g = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                         an.grad[i] += d[i] * g;
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_same_tape(x, gamma);
  check_same_tape(x, beta);
  Tape& T = *x.tape;
  const Dims& xd = x.dims();
  if (xd.rank() < 1 || xd.rank() > 2)
    throw std::invalid_argument("layer_norm: need rank 1 or 2, got " + xd.str());
  int m = xd.rank() == 2 ? xd.rows() : 1;
  int n = xd.rank() == 2 ? xd.cols() : xd.d[0];
  if (gamma.dims().rank() != 1 || gamma.dims().d[0] != n)
    throw_shape_mismatch("layer_norm", xd, gamma.dims());
  if (beta.dims().rank() != 1 || beta.dims().d[0] != n)
    throw_shape_mismatch("layer_norm", xd, beta.dims());
  const auto& xv = T.node(x.id).val;
  const auto& gv = T.node(gamma.id).val;
  const auto& bv = T.node(beta.id).val;
  std::vector<double> out(xv.size());
  for (int r = 0; r < m; ++r) {
    const double* row = xv.data() + size_t(r) * n;
    double mu = 0.0;
    for (int c = 0; c < n; ++c) mu += row[c];
    mu /= n;
    double var = 0.0;
    for (int c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= n;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < n; ++c)
      out[size_t(r) * n + c] = (row[c] - mu) * inv * gv[size_t(c)] + bv[size_t(c)];
  }
  int xid = x.id, gid = gamma.id, bid = beta.id, oid = int(T.size());
  return T.make_node(xd, std::move(out), T.any_requires_grad({x, gamma, beta}),
                     [xid, gid, bid, oid, m, n, eps](Tape& t) {
                       auto& xn = t.node(xid);
                       auto& gn = t.node(gid);
                       auto& bn = t.node(bid);
                       const auto& d = t.node(oid).grad;
                       std::vector<double> xhat(static_cast<size_t>(n));
                       std::vector<double> dxhat(static_cast<size_t>(n));
                       for (int r = 0; r < m; ++r) {
                         const double* row = xn.val.data() + size_t(r) * n;
                         const double* drow = d.data() + size_t(r) * n;
                         double mu = 0.0;
                         for (int c = 0; c < n; ++c) mu += row[c];
                         mu /= n;
                         double var = 0.0;
                         for (int c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
                         var /= n;
                         double inv = 1.0 / std::sqrt(var + eps);
                         for (int c = 0; c < n; ++c) xhat[size_t(c)] = (row[c] - mu) * inv;
                         if (gn.requires_grad)
                           for (int c = 0; c < n; ++c) gn.grad[size_t(c)] += drow[c] * xhat[size_t(c)];
                         if (bn.requires_grad)
                           for (int c = 0; c < n; ++c) bn.grad[size_t(c)] += drow[c];
                         if (!xn.requires_grad) continue;
                         double mdx = 0.0, mdxx = 0.0;
                         for (int c = 0; c < n; ++c) {
                           dxhat[size_t(c)] = drow[c] * gn.val[size_t(c)];
                           mdx += dxhat[size_t(c)];
                           mdxx += dxhat[size_t(c)] * xhat[size_t(c)];
                         }
                         mdx /= n;
                         mdxx /= n;
                         for (int c = 0; c < n; ++c)
                           xn.grad[size_t(r) * n + c] +=
                               inv * (dxhat[size_t(c)] - mdx - xhat[size_t(c)] * mdxx);
                       }
                     });
}

Tensor softmax(const Tensor& x, int axis) {
  Tape& T = *x.tape;
  const Dims& xd = x.dims();
  if (xd.rank() < 1 || xd.rank() > 2)
    throw std::invalid_argument("softmax: need rank 1 or 2, got " + xd.str());
  if (axis == -1) axis = xd.rank() - 1;
  if (axis < 0 || axis >= xd.rank())
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " on " + xd.str());
  // Lines: contiguous rows for (rank2, axis1) and rank1; strided columns for axis 0.
  int m = xd.rank() == 2 ? xd.rows() : 1;
  int n = xd.rank() == 2 ? xd.cols() : xd.d[0];
  bool rowwise = (xd.rank() == 1) || axis == 1;
  int lines = rowwise ? m : n;
  int len = rowwise ? n : m;
  int stride = rowwise ? 1 : n;
  auto line_base = [rowwise, n](int li) { return rowwise ? size_t(li) * n : size_t(li); };
  const auto& xv = T.node(x.id).val;
  std::vector<double> out(xv.size());
  for (int li = 0; li < lines; ++li) {
    size_t base = line_base(li);
    double mx = xv[base];
    for (int i = 1; i < len; ++i) mx = std::max(mx, xv[base + size_t(i) * stride]);
    double s = 0.0;
    for (int i = 0; i < len; ++i) {
      double e = std::exp(xv[base + size_t(i) * stride] - mx);
      out[base + size_t(i) * stride] = e;
      s += e;
    }
    for (int i = 0; i < len; ++i) out[base + size_t(i) * stride] /= s;
  }
  int xid = x.id, oid = int(T.size());
  return T.make_node(xd, std::move(out), T.any_requires_grad({x}),
                     [xid, oid, lines, len, stride, line_base](Tape& t) {
                       auto& xn = t.node(xid);
                       if (!xn.requires_grad) return;
                       const auto& on = t.node(oid);
                       const auto& d = on.grad;
                       const auto& s = on.val;
                       for (int li = 0; li < lines; ++li) {
                         size_t base = line_base(li);
                         double dot = 0.0;
                         for (int i = 0; i < len; ++i) {
                           size_t k = base + size_t(i) * stride;
                           dot += d[k] * s[k];
                         }
                         for (int i = 0; i < len; ++i) {
                           size_t k = base + size_t(i) * stride;
                           xn.grad[k] += s[k] * (d[k] - dot);
                         }
                       }
                     });
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  check_same_tape(p_logits, q_logits);
  if (!(p_logits.dims() == q_logits.dims()) || p_logits.dims().rank() != 2)
    throw_shape_mismatch("kl_divergence", p_logits.dims(), q_logits.dims());
  Tape& T = *p_logits.tape;
  int m = p_logits.dims().rows(), n = p_logits.dims().cols();
  const auto& pv = T.node(p_logits.id).val;
  const auto& qv = T.node(q_logits.id).val;
  double total = 0.0;
  for (int r = 0; r < m; ++r) {
    const double* pr = pv.data() + size_t(r) * n;
    const double* qr = qv.data() + size_t(r) * n;
    double plse = lse_row(pr, n), qlse = lse_row(qr, n);
    for (int c = 0; c < n; ++c) {
      double lp = pr[c] - plse;
      total += std::exp(lp) * (lp - (qr[c] - qlse));
    }
  }
  // Teacher (p) is detached by contract: gradient flows to q only.
  int pid = p_logits.id, qid = q_logits.id, oid = int(T.size());
  return T.make_node(Dims{}, {total / m}, T.any_requires_grad({q_logits}),
                     [pid, qid, oid, m, n](Tape& t) {
                       auto& qn = t.node(qid);
                       if (!qn.requires_grad) return;
                       const auto& pn = t.node(pid);
                       double d = t.node(oid).grad[0] / m;
                       for (int r = 0; r < m; ++r) {
                         const double* pr = pn.val.data() + size_t(r) * n;
                         const double* qr = qn.val.data() + size_t(r) * n;
                         double plse = lse_row(pr, n), qlse = lse_row(qr, n);
                         for (int c = 0; c < n; ++c) {
                           double p = std::exp(pr[c] - plse);
                           double q = std::exp(qr[c] - qlse);
                           qn.grad[size_t(r) * n + c] += d * (q - p);
                         }
                       }
                     });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b);
  if (!(a.dims() == b.dims())) throw_shape_mismatch("mse", a.dims(), b.dims());
  Tape& T = *a.tape;
  const auto& av = T.node(a.id).val;
  const auto& bv = T.node(b.id).val;
  if (av.empty()) throw std::invalid_argument("mse: empty tensor");
  double s = 0.0;
  for (size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  double inv = 1.0 / double(av.size());
  // a is the (detached) target by contract: gradient flows to b only.
  int aid = a.id, bid = b.id, oid = int(T.size());
  return T.make_node(Dims{}, {s * inv}, T.any_requires_grad({b}),
                     [aid, bid, oid, inv](Tape& t) {
                       auto& bn = t.node(bid);
                       if (!bn.requires_grad) return;
                       const auto& an = t.node(aid);
                       double d = t.node(oid).grad[0];
                       for (size_t i = 0; i < bn.val.size(); ++i)
                         bn.grad[i] += d * 2.0 * (bn.val[i] - an.val[i]) * inv;
                     });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<int>& rows) {
  Tape& T = *logits.tape;
  const Dims& ld = logits.dims();
  if (ld.rank() != 2)
    throw std::invalid_argument("cross_entropy: logits must be rank 2, got " + ld.str());
  if (targets.size() != rows.size())
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(rows.size()) + " rows");
  if (rows.empty()) throw std::invalid_argument("cross_entropy: no rows selected");
  int m = ld.rows(), n = ld.cols();
  const auto& lv = T.node(logits.id).val;
  double total = 0.0;
  for (size_t i = 0; i < rows.size(); ++i) {
    int r = rows[i], tgt = targets[i];
    if (r < 0 || r >= m)
      throw std::invalid_argument("cross_entropy: row " + std::to_string(r) + " outside " + ld.str());
    if (tgt < 0 || tgt >= n)
      throw std::invalid_argument("cross_entropy: target " + std::to_string(tgt) + " outside " + ld.str());
    const double* row = lv.data() + size_t(r) * n;
    total += lse_row(row, n) - row[tgt];
  }
  double inv = 1.0 / double(rows.size());
  int lid = logits.id, oid = int(T.size());
  std::vector<int> tg = targets, rw = rows;
  return T.make_node(Dims{}, {total * inv}, T.any_requires_grad({logits}),
                     [lid, oid, tg, rw, n, inv](Tape& t) {
                       auto& ln = t.node(lid);
                       if (!ln.requires_grad) return;
                       double d = t.node(oid).grad[0] * inv;
                       for (size_t i = 0; i < rw.size(); ++i) {
                         const double* row = ln.val.data() + size_t(rw[i]) * n;
                         double lse = lse_row(row, n);
                         for (int c = 0; c < n; ++c) {
                           double p = std::exp(row[c] - lse);
                           ln.grad[size_t(rw[i]) * n + c] += d * (p - (c == tg[i] ? 1.0 : 0.0));
                         }
                       }
                     });
}

Tensor detach(const Tensor& a) {
  Tape& T = *a.tape;
  return T.constant(a.dims(), T.node(a.id).val);
}

}  // namespace sdvlm
