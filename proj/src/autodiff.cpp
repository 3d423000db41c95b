#include "vicregl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace vicregl {
namespace ad {

namespace {

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  n->requires_grad = needs;
  if (needs) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::move(fn);
  }
  return Var(n);
}

bool wants(const Node* p) { return p && p->requires_grad; }

}  // namespace

Var leaf(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(n);
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = false;
  return Var(n);
}

void backward(const Var& root) {
  VRL_CHECK_ARG(root.defined() && root.value().numel() == 1,
                "backward needs a defined scalar root");
  if (!root.requires_grad()) return;

  // Post-order over parent edges; reversed it yields child-before-parent.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    std::size_t next;
  };
  std::vector<Frame> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    n->ensure_grad();
    n->grad.fill(0.0);
  }
  root.node()->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  VRL_CHECK_ARG(a.value().same_shape(b.value()), "add shape mismatch ",
                shape_str(a.value().shape()), " vs ", shape_str(b.value().shape()));
  Tensor out = a.value();
  out.add_inplace(b.value());
  Node *pa = a.node(), *pb = b.node();
  return make_op(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (wants(pa)) pa->grad.add_inplace(n.grad);
    if (wants(pb)) pb->grad.add_inplace(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  VRL_CHECK_ARG(a.value().same_shape(b.value()), "sub shape mismatch ",
                shape_str(a.value().shape()), " vs ", shape_str(b.value().shape()));
  Tensor out = a.value();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  Node *pa = a.node(), *pb = b.node();
  return make_op(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (wants(pa)) pa->grad.add_inplace(n.grad);
    if (wants(pb)) pb->grad.axpy_inplace(-1.0, n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  VRL_CHECK_ARG(a.value().same_shape(b.value()), "mul shape mismatch");
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  Node *pa = a.node(), *pb = b.node();
  return make_op(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (wants(pa))
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        pa->grad[i] += n.grad[i] * pb->value[i];
    if (wants(pb))
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        pb->grad[i] += n.grad[i] * pa->value[i];
  });
}

Var square(const Var& a) {
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * a.value()[i];
  Node* pa = a.node();
  return make_op(std::move(out), {a}, [pa](Node& n) {
    if (wants(pa))
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        pa->grad[i] += 2.0 * pa->value[i] * n.grad[i];
  });
}

Var sqrt(const Var& a) {
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(a.value()[i]);
  Node* pa = a.node();
  return make_op(std::move(out), {a}, [pa](Node& n) {
    if (wants(pa))
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        pa->grad[i] += 0.5 / n.value[i] * n.grad[i];
  });
}

Var relu(const Var& a) {
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = a.value()[i] > 0.0 ? a.value()[i] : 0.0;
  Node* pa = a.node();
  return make_op(std::move(out), {a}, [pa](Node& n) {
    if (wants(pa))
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        if (pa->value[i] > 0.0) pa->grad[i] += n.grad[i];
  });
}

Var scale(const Var& a, double c) {
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = c * a.value()[i];
  Node* pa = a.node();
  return make_op(std::move(out), {a}, [pa, c](Node& n) {
    if (wants(pa)) pa->grad.axpy_inplace(c, n.grad);
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + c;
  Node* pa = a.node();
  return make_op(std::move(out), {a}, [pa](Node& n) {
    if (wants(pa)) pa->grad.add_inplace(n.grad);
  });
}

Var rsub_scalar(double c, const Var& a) {
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = c - a.value()[i];
  Node* pa = a.node();
  return make_op(std::move(out), {a}, [pa](Node& n) {
    if (wants(pa)) pa->grad.axpy_inplace(-1.0, n.grad);
  });
}

Var mul_const(const Var& a, Tensor mask) {
  VRL_CHECK_ARG(a.value().same_shape(mask), "mul_const shape mismatch");
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * mask[i];
  Node* pa = a.node();
  return make_op(std::move(out), {a}, [pa, m = std::move(mask)](Node& n) {
    if (wants(pa))
      for (std::size_t i = 0; i < n.grad.numel(); ++i) pa->grad[i] += n.grad[i] * m[i];
  });
}

Var add_n(const std::vector<Var>& xs) {
  VRL_CHECK_ARG(!xs.empty(), "add_n needs at least one input");
  Tensor out = xs[0].value();
  for (std::size_t i = 1; i < xs.size(); ++i) out.add_inplace(xs[i].value());
  std::vector<Node*> ps;
  for (const auto& x : xs) ps.push_back(x.node());
  return make_op(std::move(out), xs, [ps](Node& n) {
    for (Node* p : ps)
      if (wants(p)) p->grad.add_inplace(n.grad);
  });
}

// ---------------------------------------------------------------- reductions

Var mean_all(const Var& a) {
  const std::size_t n = a.value().numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a.value()[i];
  Node* pa = a.node();
  return make_op(Tensor::scalar(s / double(n)), {a}, [pa, n](Node& nd) {
    if (wants(pa)) {
      const double g = nd.grad[0] / double(n);
      for (std::size_t i = 0; i < n; ++i) pa->grad[i] += g;
    }
  });
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
  Node* pa = a.node();
  return make_op(Tensor::scalar(s), {a}, [pa](Node& nd) {
    if (wants(pa)) {
      const double g = nd.grad[0];
      for (std::size_t i = 0; i < pa->grad.numel(); ++i) pa->grad[i] += g;
    }
  });
}

Var col_sum(const Var& a) {
  VRL_CHECK_ARG(a.value().rank() == 2, "col_sum needs a matrix");
  const std::size_t rows = a.value().dim(0), cols = a.value().dim(1);
  Tensor out({cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j] += a.value()[i * cols + j];
  Node* pa = a.node();
  return make_op(std::move(out), {a}, [pa, rows, cols](Node& n) {
    if (wants(pa))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) pa->grad[i * cols + j] += n.grad[j];
  });
}

Var col_mean(const Var& a) { return scale(col_sum(a), 1.0 / double(a.value().dim(0))); }

Var sub_rowvec(const Var& m, const Var& v) {
  VRL_CHECK_ARG(m.value().rank() == 2 && v.value().rank() == 1 &&
                    m.value().dim(1) == v.value().dim(0),
                "sub_rowvec shape mismatch");
  const std::size_t rows = m.value().dim(0), cols = m.value().dim(1);
  Tensor out = m.value();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] -= v.value()[j];
  Node *pm = m.node(), *pv = v.node();
  return make_op(std::move(out), {m, v}, [pm, pv, rows, cols](Node& n) {
    if (wants(pm)) pm->grad.add_inplace(n.grad);
    if (wants(pv))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) pv->grad[j] -= n.grad[i * cols + j];
  });
}

Var add_rowvec(const Var& m, const Var& v) {
  VRL_CHECK_ARG(m.value().rank() == 2 && v.value().rank() == 1 &&
                    m.value().dim(1) == v.value().dim(0),
                "add_rowvec shape mismatch");
  const std::size_t rows = m.value().dim(0), cols = m.value().dim(1);
  Tensor out = m.value();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += v.value()[j];
  Node *pm = m.node(), *pv = v.node();
  return make_op(std::move(out), {m, v}, [pm, pv, rows, cols](Node& n) {
    if (wants(pm)) pm->grad.add_inplace(n.grad);
    if (wants(pv))
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) pv->grad[j] += n.grad[i * cols + j];
  });
}

// ------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  VRL_CHECK_ARG(a.value().rank() == 2 && b.value().rank() == 2, "matmul needs matrices");
  const std::size_t m = trans_a ? a.value().dim(1) : a.value().dim(0);
  const std::size_t ka = trans_a ? a.value().dim(0) : a.value().dim(1);
  const std::size_t kb = trans_b ? b.value().dim(1) : b.value().dim(0);
  const std::size_t n = trans_b ? b.value().dim(0) : b.value().dim(1);
  VRL_CHECK_ARG(ka == kb, "matmul inner dims mismatch: ", ka, " vs ", kb);
  Tensor out({m, n});
  gemm(trans_a, trans_b, m, n, ka, a.value().data(), b.value().data(), out.data());
  Node *pa = a.node(), *pb = b.node();
  const std::size_t k = ka;
  return make_op(std::move(out), {a, b}, [pa, pb, trans_a, trans_b, m, n, k](Node& nd) {
    const double* g = nd.grad.data();
    if (wants(pa)) {
      if (!trans_a)  // dA = op_b'(G x B): (m,k)
        gemm(false, !trans_b, m, k, n, g, pb->value.data(), pa->grad.data(), true);
      else if (!trans_b)  // A stored (k,m); dA = B x G^T
        gemm(false, true, k, m, n, pb->value.data(), g, pa->grad.data(), true);
      else  // A (k,m), B (n,k): dA = B^T x G^T
        gemm(true, true, k, m, n, pb->value.data(), g, pa->grad.data(), true);
    }
    if (wants(pb)) {
      if (!trans_b)  // dB = op_a'(A^T x G): (k,n)
        gemm(!trans_a, false, k, n, m, pa->value.data(), g, pb->grad.data(), true);
      else if (!trans_a)  // B stored (n,k); dB = G^T x A
        gemm(true, false, n, k, m, g, pa->value.data(), pb->grad.data(), true);
      else  // dB = G^T x A^T
        gemm(true, true, n, k, m, g, pa->value.data(), pb->grad.data(), true);
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  VRL_CHECK_ARG(x.value().rank() == 2 && w.value().rank() == 2, "linear needs matrices");
  VRL_CHECK_ARG(x.value().dim(1) == w.value().dim(1), "linear: in features mismatch, x ",
                shape_str(x.value().shape()), " w ", shape_str(w.value().shape()));
  Var y = matmul(x, w, false, true);
  if (b.defined()) y = add_rowvec(y, b);
  return y;
}

// ----------------------------------------------------------------- structural

Var reshape(const Var& a, std::vector<std::size_t> shape) {
  Tensor out = a.value().reshaped(shape);
  Node* pa = a.node();
  return make_op(std::move(out), {a}, [pa](Node& n) {
    if (wants(pa))
      for (std::size_t i = 0; i < n.grad.numel(); ++i) pa->grad[i] += n.grad[i];
  });
}

Var rows_from_map(const Var& map) {
  VRL_CHECK_ARG(map.value().rank() == 4, "rows_from_map needs (B,C,H,W)");
  const std::size_t B = map.value().dim(0), C = map.value().dim(1),
                    H = map.value().dim(2), W = map.value().dim(3);
  Tensor out({B * H * W, C});
  const double* src = map.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < H * W; ++p)
        out[(b * H * W + p) * C + c] = src[(b * C + c) * H * W + p];
  Node* pm = map.node();
  return make_op(std::move(out), {map}, [pm, B, C, H, W](Node& n) {
    if (!wants(pm)) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < H * W; ++p)
          pm->grad[(b * C + c) * H * W + p] += n.grad[(b * H * W + p) * C + c];
  });
}

Var map_from_rows(const Var& rows, std::size_t b, std::size_t h, std::size_t w) {
  VRL_CHECK_ARG(rows.value().rank() == 2 && rows.value().dim(0) == b * h * w,
                "map_from_rows: row count mismatch");
  const std::size_t C = rows.value().dim(1);
  Tensor out({b, C, h, w});
  const double* src = rows.value().data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < h * w; ++p)
        out[(bi * C + c) * h * w + p] = src[(bi * h * w + p) * C + c];
  Node* pr = rows.node();
  return make_op(std::move(out), {rows}, [pr, b, h, w, C](Node& n) {
    if (!wants(pr)) return;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < h * w; ++p)
          pr->grad[(bi * h * w + p) * C + c] += n.grad[(bi * C + c) * h * w + p];
  });
}

Var gather_rows(const Var& m, std::vector<std::size_t> idx) {
  VRL_CHECK_ARG(m.value().rank() == 2, "gather_rows needs a matrix");
  const std::size_t rows = m.value().dim(0), cols = m.value().dim(1);
  Tensor out({idx.size(), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    VRL_CHECK_ARG(idx[r] < rows, "gather_rows index out of range");
    const double* src = m.value().data() + idx[r] * cols;
    std::copy(src, src + cols, out.data() + r * cols);
  }
  Node* pm = m.node();
  return make_op(std::move(out), {m}, [pm, cols, id = std::move(idx)](Node& n) {
    if (!wants(pm)) return;
    for (std::size_t r = 0; r < id.size(); ++r) {
      double* dst = pm->grad.data() + id[r] * cols;
      const double* g = n.grad.data() + r * cols;
      for (std::size_t j = 0; j < cols; ++j) dst[j] += g[j];
    }
  });
}

Var concat_channels(const std::vector<Var>& maps) {
  VRL_CHECK_ARG(!maps.empty(), "concat_channels needs inputs");
  const std::size_t B = maps[0].value().dim(0), H = maps[0].value().dim(2),
                    W = maps[0].value().dim(3);
  std::size_t ctot = 0;
  for (const auto& m : maps) {
    VRL_CHECK_ARG(m.value().rank() == 4 && m.value().dim(0) == B &&
                      m.value().dim(2) == H && m.value().dim(3) == W,
                  "concat_channels: spatial/batch dims must agree");
    ctot += m.value().dim(1);
  }
  Tensor out({B, ctot, H, W});
  std::size_t coff = 0;
  for (const auto& m : maps) {
    const std::size_t C = m.value().dim(1);
    for (std::size_t b = 0; b < B; ++b)
      std::copy(m.value().data() + b * C * H * W, m.value().data() + (b + 1) * C * H * W,
                out.data() + (b * ctot + coff) * H * W);
    coff += C;
  }
  std::vector<Node*> ps;
  std::vector<std::size_t> chans;
  for (const auto& m : maps) {
    ps.push_back(m.node());
    chans.push_back(m.value().dim(1));
  }
  return make_op(std::move(out), maps, [ps, chans, B, H, W, ctot](Node& n) {
    std::size_t coff = 0;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      const std::size_t C = chans[k];
      if (wants(ps[k]))
        for (std::size_t b = 0; b < B; ++b) {
          const double* g = n.grad.data() + (b * ctot + coff) * H * W;
          double* dst = ps[k]->grad.data() + b * C * H * W;
          for (std::size_t i = 0; i < C * H * W; ++i) dst[i] += g[i];
        }
      coff += C;
    }
  });
}

// ------------------------------------------------------------------------ nn

namespace {

struct ConvDims {
  std::size_t B, Ci, H, W, Co, kh, kw, s, p, Ho, Wo;
};

void im2col(const ConvDims& d, const double* x, double* col) {
  const std::size_t cols = d.B * d.Ho * d.Wo;
#pragma omp parallel for schedule(static)
  for (long long rr = 0; rr < (long long)(d.Ci * d.kh * d.kw); ++rr) {
    const std::size_t r = (std::size_t)rr;
    const std::size_t ci = r / (d.kh * d.kw);
    const std::size_t di = (r / d.kw) % d.kh;
    const std::size_t dj = r % d.kw;
    double* out = col + r * cols;
    for (std::size_t b = 0; b < d.B; ++b) {
      const double* xc = x + (b * d.Ci + ci) * d.H * d.W;
      for (std::size_t oh = 0; oh < d.Ho; ++oh) {
        const long long ih = (long long)(oh * d.s + di) - (long long)d.p;
        double* orow = out + (b * d.Ho + oh) * d.Wo;
        if (ih < 0 || ih >= (long long)d.H) {
          for (std::size_t ow = 0; ow < d.Wo; ++ow) orow[ow] = 0.0;
          continue;
        }
        const double* xrow = xc + (std::size_t)ih * d.W;
        for (std::size_t ow = 0; ow < d.Wo; ++ow) {
          const long long iw = (long long)(ow * d.s + dj) - (long long)d.p;
          orow[ow] = (iw < 0 || iw >= (long long)d.W) ? 0.0 : xrow[(std::size_t)iw];
        }
      }
    }
  }
}

// conv works over large flat temporaries; reusing them avoids the repeated
// zero-initializing allocations that otherwise dominate small-step timings
double* conv_scratch(int which, std::size_t n) {
  thread_local std::vector<double> bufs[4];
  if (bufs[which].size() < n) bufs[which].resize(n);
  return bufs[which].data();
}

void col2im_acc(const ConvDims& d, const double* col, double* dx) {
  const std::size_t cols = d.B * d.Ho * d.Wo;
  // channels own disjoint slices of dx, so the outer loop is race-free
#pragma omp parallel for schedule(static)
  for (long long cc = 0; cc < (long long)d.Ci; ++cc) {
    const std::size_t ci = (std::size_t)cc;
    for (std::size_t di = 0; di < d.kh; ++di)
      for (std::size_t dj = 0; dj < d.kw; ++dj) {
        const std::size_t r = (ci * d.kh + di) * d.kw + dj;
        const double* src = col + r * cols;
        for (std::size_t b = 0; b < d.B; ++b) {
          double* xc = dx + (b * d.Ci + ci) * d.H * d.W;
          for (std::size_t oh = 0; oh < d.Ho; ++oh) {
            const long long ih = (long long)(oh * d.s + di) - (long long)d.p;
            if (ih < 0 || ih >= (long long)d.H) continue;
            const double* srow = src + (b * d.Ho + oh) * d.Wo;
            double* xrow = xc + (std::size_t)ih * d.W;
            for (std::size_t ow = 0; ow < d.Wo; ++ow) {
              const long long iw = (long long)(ow * d.s + dj) - (long long)d.p;
              if (iw >= 0 && iw < (long long)d.W) xrow[(std::size_t)iw] += srow[ow];
            }
          }
        }
      }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride,
           std::size_t pad) {
  VRL_CHECK_ARG(x.value().rank() == 4 && w.value().rank() == 4,
                "conv2d needs (B,Ci,H,W) input and (Co,Ci,kh,kw) weights");
  ConvDims d;
  d.B = x.value().dim(0);
  d.Ci = x.value().dim(1);
  d.H = x.value().dim(2);
  d.W = x.value().dim(3);
  d.Co = w.value().dim(0);
  d.kh = w.value().dim(2);
  d.kw = w.value().dim(3);
  d.s = stride;
  d.p = pad;
  VRL_CHECK_ARG(w.value().dim(1) == d.Ci, "conv2d channel mismatch: input ", d.Ci,
                ", weights expect ", w.value().dim(1));
  VRL_CHECK_ARG(d.H + 2 * d.p >= d.kh && d.W + 2 * d.p >= d.kw,
                "conv2d input smaller than kernel");
  d.Ho = (d.H + 2 * d.p - d.kh) / d.s + 1;
  d.Wo = (d.W + 2 * d.p - d.kw) / d.s + 1;

  const std::size_t K = d.Ci * d.kh * d.kw, cols = d.B * d.Ho * d.Wo;
  double* col = conv_scratch(0, K * cols);
  im2col(d, x.value().data(), col);
  double* ymat = conv_scratch(1, d.Co * cols);
  gemm(false, false, d.Co, cols, K, w.value().data(), col, ymat);

  Tensor out({d.B, d.Co, d.Ho, d.Wo});
  const bool has_bias = bias.defined();
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t co = 0; co < d.Co; ++co) {
      const double add = has_bias ? bias.value()[co] : 0.0;
      const double* src = ymat + co * cols + b * d.Ho * d.Wo;
      double* dst = out.data() + (b * d.Co + co) * d.Ho * d.Wo;
      for (std::size_t i = 0; i < d.Ho * d.Wo; ++i) dst[i] = src[i] + add;
    }

  std::vector<Var> parents{x, w};
  if (has_bias) parents.push_back(bias);
  Node *px = x.node(), *pw = w.node(), *pb = has_bias ? bias.node() : nullptr;
  return make_op(std::move(out), std::move(parents), [px, pw, pb, d, K, cols](Node& n) {
    // regroup incoming grad as (Co, B*Ho*Wo)
    double* gmat = conv_scratch(1, d.Co * cols);
    for (std::size_t b = 0; b < d.B; ++b)
      for (std::size_t co = 0; co < d.Co; ++co) {
        const double* src = n.grad.data() + (b * d.Co + co) * d.Ho * d.Wo;
        double* dst = gmat + co * cols + b * d.Ho * d.Wo;
        std::copy(src, src + d.Ho * d.Wo, dst);
      }
    if (wants(pb)) {
      for (std::size_t co = 0; co < d.Co; ++co) {
        double s = 0.0;
        const double* row = gmat + co * cols;
        for (std::size_t i = 0; i < cols; ++i) s += row[i];
        pb->grad[co] += s;
      }
    }
    if (wants(pw)) {
      double* col = conv_scratch(0, K * cols);
      im2col(d, px->value.data(), col);
      gemm(false, true, d.Co, K, cols, gmat, col, pw->grad.data(), true);
    }
    if (wants(px)) {
      double* dcol = conv_scratch(2, K * cols);
      gemm(true, false, K, cols, d.Co, pw->value.data(), gmat, dcol);
      col2im_acc(d, dcol, px->grad.data());
    }
  });
}

Var global_avg_pool(const Var& x) {
  VRL_CHECK_ARG(x.value().rank() == 4, "global_avg_pool needs (B,C,H,W)");
  const std::size_t B = x.value().dim(0), C = x.value().dim(1),
                    HW = x.value().dim(2) * x.value().dim(3);
  Tensor out({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = x.value().data() + (b * C + c) * HW;
      double s = 0.0;
      for (std::size_t i = 0; i < HW; ++i) s += src[i];
      out[b * C + c] = s / double(HW);
    }
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px, B, C, HW](Node& n) {
    if (!wants(px)) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const double g = n.grad[b * C + c] / double(HW);
        double* dst = px->grad.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) dst[i] += g;
      }
  });
}

namespace {

struct LerpAxis {
  std::vector<std::size_t> i0, i1;
  std::vector<double> f;
};

LerpAxis make_axis(std::size_t in, std::size_t out) {
  LerpAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.f.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = (double(o) + 0.5) * double(in) / double(out) - 0.5;
    if (s < 0.0) s = 0.0;
    if (s > double(in - 1)) s = double(in - 1);
    const std::size_t lo = (std::size_t)s;
    ax.i0[o] = lo;
    ax.i1[o] = std::min(lo + 1, in - 1);
    ax.f[o] = s - double(lo);
  }
  return ax;
}

}  // namespace

Var upsample_bilinear(const Var& x, std::size_t out_h, std::size_t out_w) {
  VRL_CHECK_ARG(x.value().rank() == 4, "upsample_bilinear needs (B,C,H,W)");
  const std::size_t B = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2),
                    W = x.value().dim(3);
  const LerpAxis ay = make_axis(H, out_h), axx = make_axis(W, out_w);
  Tensor out({B, C, out_h, out_w});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* src = x.value().data() + bc * H * W;
    double* dst = out.data() + bc * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) {
        const double fy = ay.f[i], fx = axx.f[j];
        const double v00 = src[ay.i0[i] * W + axx.i0[j]];
        const double v01 = src[ay.i0[i] * W + axx.i1[j]];
        const double v10 = src[ay.i1[i] * W + axx.i0[j]];
        const double v11 = src[ay.i1[i] * W + axx.i1[j]];
        dst[i * out_w + j] = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                             fy * ((1 - fx) * v10 + fx * v11);
      }
  }
  Node* px = x.node();
  return make_op(std::move(out), {x}, [px, B, C, H, W, out_h, out_w, ay, axx](Node& n) {
    if (!wants(px)) return;
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      double* dst = px->grad.data() + bc * H * W;
      const double* g = n.grad.data() + bc * out_h * out_w;
      for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j) {
          const double fy = ay.f[i], fx = axx.f[j], gv = g[i * out_w + j];
          dst[ay.i0[i] * W + axx.i0[j]] += (1 - fy) * (1 - fx) * gv;
          dst[ay.i0[i] * W + axx.i1[j]] += (1 - fy) * fx * gv;
          dst[ay.i1[i] * W + axx.i0[j]] += fy * (1 - fx) * gv;
          dst[ay.i1[i] * W + axx.i1[j]] += fy * fx * gv;
        }
    }
  });
}

// --------------------------------------------------------------- batch norm

namespace {

// Shared core over a strided per-channel view: for rows layout the channel
// stride is 1 and sample stride D; for maps the samples of one channel are
// (b, h, w) positions.
struct BnStats {
  Tensor xhat;    // same shape as x
  Tensor invstd;  // per channel
};

}  // namespace

Var batchnorm_rows(const Var& x, const Var& gamma, const Var& beta,
                   Tensor& running_mean, Tensor& running_var, bool training,
                   double momentum, double eps) {
  VRL_CHECK_ARG(x.value().rank() == 2, "batchnorm_rows needs (N,D)");
  const std::size_t N = x.value().dim(0), D = x.value().dim(1);
  VRL_CHECK_ARG(gamma.value().numel() == D && beta.value().numel() == D,
                "batchnorm_rows: parameter dims mismatch");
  VRL_CHECK_ARG(!training || N >= 2, "batchnorm_rows: training needs N >= 2");

  Tensor xhat({N, D}), invstd({D});
  if (training) {
    for (std::size_t d = 0; d < D; ++d) {
      double mu = 0.0;
      for (std::size_t i = 0; i < N; ++i) mu += x.value()[i * D + d];
      mu /= double(N);
      double var = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double c = x.value()[i * D + d] - mu;
        var += c * c;
      }
      var /= double(N);
      const double is = 1.0 / std::sqrt(var + eps);
      invstd[d] = is;
      for (std::size_t i = 0; i < N; ++i) xhat[i * D + d] = (x.value()[i * D + d] - mu) * is;
      running_mean[d] = (1.0 - momentum) * running_mean[d] + momentum * mu;
      running_var[d] =
          (1.0 - momentum) * running_var[d] + momentum * var * double(N) / double(N - 1);
    }
  } else {
    for (std::size_t d = 0; d < D; ++d) {
      const double is = 1.0 / std::sqrt(running_var[d] + eps);
      invstd[d] = is;
      for (std::size_t i = 0; i < N; ++i)
        xhat[i * D + d] = (x.value()[i * D + d] - running_mean[d]) * is;
    }
  }
  Tensor out({N, D});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d)
      out[i * D + d] = gamma.value()[d] * xhat[i * D + d] + beta.value()[d];

  Node *px = x.node(), *pg = gamma.node(), *pb = beta.node();
  return make_op(std::move(out), {x, gamma, beta},
                 [px, pg, pb, N, D, training, xh = std::move(xhat),
                  is = std::move(invstd)](Node& n) {
                   for (std::size_t d = 0; d < D; ++d) {
                     double sg = 0.0, sgx = 0.0;
                     for (std::size_t i = 0; i < N; ++i) {
                       const double g = n.grad[i * D + d];
                       sg += g;
                       sgx += g * xh[i * D + d];
                     }
                     if (wants(pg)) pg->grad[d] += sgx;
                     if (wants(pb)) pb->grad[d] += sg;
                     if (wants(px)) {
                       const double gam = pg->value[d], isd = is[d];
                       if (training) {
                         for (std::size_t i = 0; i < N; ++i) {
                           const double g = n.grad[i * D + d];
                           px->grad[i * D + d] +=
                               gam * isd *
                               (g - sg / double(N) - xh[i * D + d] * sgx / double(N));
                         }
                       } else {
                         for (std::size_t i = 0; i < N; ++i)
                           px->grad[i * D + d] += gam * isd * n.grad[i * D + d];
                       }
                     }
                   }
                 });
}

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                Tensor& running_var, bool training, double momentum, double eps) {
  VRL_CHECK_ARG(x.value().rank() == 4, "batchnorm2d needs (B,C,H,W)");
  const std::size_t B = x.value().dim(0), C = x.value().dim(1),
                    HW = x.value().dim(2) * x.value().dim(3);
  const std::size_t M = B * HW;
  VRL_CHECK_ARG(!training || M >= 2, "batchnorm2d: training needs B*H*W >= 2");

  Tensor xhat(x.value().shape()), invstd({C});
  auto idx = [&](std::size_t b, std::size_t c, std::size_t p) {
    return (b * C + c) * HW + p;
  };
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double mu = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < HW; ++p) mu += x.value()[idx(b, c, p)];
      mu /= double(M);
      double var = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < HW; ++p) {
          const double d = x.value()[idx(b, c, p)] - mu;
          var += d * d;
        }
      var /= double(M);
      const double is = 1.0 / std::sqrt(var + eps);
      invstd[c] = is;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < HW; ++p)
          xhat[idx(b, c, p)] = (x.value()[idx(b, c, p)] - mu) * is;
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
      running_var[c] =
          (1.0 - momentum) * running_var[c] + momentum * var * double(M) / double(M - 1);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      const double is = 1.0 / std::sqrt(running_var[c] + eps);
      invstd[c] = is;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < HW; ++p)
          xhat[idx(b, c, p)] = (x.value()[idx(b, c, p)] - running_mean[c]) * is;
    }
  }
  Tensor out(x.value().shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p)
        out[idx(b, c, p)] = gamma.value()[c] * xhat[idx(b, c, p)] + beta.value()[c];

  Node *px = x.node(), *pg = gamma.node(), *pb = beta.node();
  return make_op(
      std::move(out), {x, gamma, beta},
      [px, pg, pb, B, C, HW, M, training, xh = std::move(xhat),
       is = std::move(invstd)](Node& n) {
        auto idx = [&](std::size_t b, std::size_t c, std::size_t p) {
          return (b * C + c) * HW + p;
        };
        for (std::size_t c = 0; c < C; ++c) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < HW; ++p) {
              const double g = n.grad[idx(b, c, p)];
              sg += g;
              sgx += g * xh[idx(b, c, p)];
            }
          if (wants(pg)) pg->grad[c] += sgx;
          if (wants(pb)) pb->grad[c] += sg;
          if (wants(px)) {
            const double gam = pg->value[c], isd = is[c];
            if (training) {
              for (std::size_t b = 0; b < B; ++b)
                for (std::size_t p = 0; p < HW; ++p) {
                  const double g = n.grad[idx(b, c, p)];
                  px->grad[idx(b, c, p)] +=
                      gam * isd *
                      (g - sg / double(M) - xh[idx(b, c, p)] * sgx / double(M));
                }
            } else {
              for (std::size_t b = 0; b < B; ++b)
                for (std::size_t p = 0; p < HW; ++p)
                  px->grad[idx(b, c, p)] += gam * isd * n.grad[idx(b, c, p)];
            }
          }
        }
      });
}

Var cross_entropy_rows(const Var& logits, const std::vector<int>& labels) {
  VRL_CHECK_ARG(logits.value().rank() == 2, "cross_entropy_rows needs (N,K)");
  const std::size_t N = logits.value().dim(0), K = logits.value().dim(1);
  VRL_CHECK_ARG(labels.size() == N, "cross_entropy_rows: label count mismatch");
  Tensor probs({N, K});
  double loss = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double* row = logits.value().data() + i * K;
    VRL_CHECK_ARG(labels[i] >= 0 && (std::size_t)labels[i] < K,
                  "cross_entropy_rows: label out of range");
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < K; ++k) probs[i * K + k] = std::exp(row[k] - lse);
    loss += lse - row[labels[i]];
  }
  loss /= double(N);
  Node* pl = logits.node();
  return make_op(Tensor::scalar(loss), {logits},
                 [pl, N, K, labels, pr = std::move(probs)](Node& n) {
                   if (!wants(pl)) return;
                   const double g = n.grad[0] / double(N);
                   for (std::size_t i = 0; i < N; ++i)
                     for (std::size_t k = 0; k < K; ++k) {
                       double v = pr[i * K + k];
                       if ((std::size_t)labels[i] == k) v -= 1.0;
                       pl->grad[i * K + k] += g * v;
                     }
                 });
}

}  // namespace ad
}  // namespace vicregl
