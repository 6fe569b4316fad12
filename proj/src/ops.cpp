#include "tctrans/ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tct {

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

#ifndef NDEBUG
#define TCT_FINITE_GUARD(t, name) check_finite(t, name)
#else
#define TCT_FINITE_GUARD(t, name) ((void)0)
#endif

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::op_node(a.shape(), "add", {a, b});
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    out.raw().backward = [](Node<T>& n) {
      for (int pi = 0; pi < 2; ++pi) {
        Node<T>& p = *n.parents[size_t(pi)];
        if (!p.requires_grad) continue;
        auto& pg = p.grad_buf();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::op_node(a.shape(), "sub", {a, b});
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (out.requires_grad()) {
    out.raw().backward = [](Node<T>& n) {
      Node<T>& pa = *n.parents[0];
      Node<T>& pb = *n.parents[1];
      if (pa.requires_grad) {
        auto& g = pa.grad_buf();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.grad_buf();
        for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::op_node(a.shape(), "mul", {a, b});
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (out.requires_grad()) {
    out.raw().backward = [](Node<T>& n) {
      Node<T>& pa = *n.parents[0];
      Node<T>& pb = *n.parents[1];
      if (pa.requires_grad) {
        auto& g = pa.grad_buf();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.value[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.grad_buf();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.value[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::op_node(a.shape(), "scale", {a});
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (out.requires_grad()) {
    out.raw().backward = [c](Node<T>& n) {
      Node<T>& p = *n.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
    };
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::op_node(x.shape(), "relu", {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (out.requires_grad()) {
    // subgradient at 0 is 0
    out.raw().backward = [](Node<T>& n) {
      Node<T>& p = *n.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      for (size_t i = 0; i < g.size(); ++i) {
        if (p.value[i] > T(0)) g[i] += n.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::op_node(x.shape(), "abs", {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] < T(0) ? -xv[i] : xv[i];
  if (out.requires_grad()) {
    out.raw().backward = [](Node<T>& n) {
      Node<T>& p = *n.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      for (size_t i = 0; i < g.size(); ++i) {
        T v = p.value[i];
        if (v > T(0)) g[i] += n.grad[i];
        else if (v < T(0)) g[i] -= n.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::op_node(x.shape(), "sqrt", {x});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) {
    if (xv[i] < T(0)) throw NumericError("sqrt of negative value");
    ov[i] = std::sqrt(xv[i]);
  }
  if (out.requires_grad()) {
    out.raw().backward = [](Node<T>& n) {
      Node<T>& p = *n.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      for (size_t i = 0; i < g.size(); ++i) {
        if (n.value[i] > T(0)) g[i] += n.grad[i] * T(0.5) / n.value[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (v.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != v.dim(0)) {
    throw ShapeError("add_rowvec: incompatible shapes " + shape_str(x.shape()) +
                     " and " + shape_str(v.shape()));
  }
  const int d = v.dim(0);
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::op_node(x.shape(), "add_rowvec", {x, v});
  const auto& xv = x.data();
  const auto& vv = v.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T* orow = ov.data() + r * d;
    for (int i = 0; i < d; ++i) orow[i] = xr[i] + vv[size_t(i)];
  }
  if (out.requires_grad()) {
    out.raw().backward = [d, rows](Node<T>& n) {
      Node<T>& px = *n.parents[0];
      Node<T>& pv = *n.parents[1];
      if (px.requires_grad) {
        auto& g = px.grad_buf();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      }
      if (pv.requires_grad) {
        auto& g = pv.grad_buf();
        for (int64_t r = 0; r < rows; ++r) {
          const T* gr = n.grad.data() + r * d;
          for (int i = 0; i < d; ++i) g[size_t(i)] += gr[i];
        }
      }
    };
  }
  return out;
}

namespace {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + int64_t(i) * k;
    T* crow = c + int64_t(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + int64_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[M,K] += G[M,N] * B[K,N]^T
template <typename T>
void gemm_acc_bt(const T* g, const T* b, T* da, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* grow = g + int64_t(i) * n;
    T* darow = da + int64_t(i) * k;
    for (int p = 0; p < k; ++p) {
      const T* brow = b + int64_t(p) * n;
      T acc = T(0);
      for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
      darow[p] += acc;
    }
  }
}

// dB[K,N] += A[M,K]^T * G[M,N]
template <typename T>
void gemm_acc_at(const T* a, const T* g, T* db, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + int64_t(i) * k;
    const T* grow = g + int64_t(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      T* dbrow = db + int64_t(p) * n;
      for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2");
  }
  const int m = a.dim(a.rank() - 2);
  const int k = a.dim(a.rank() - 1);
  const int kb = b.dim(b.rank() - 2);
  const int n = b.dim(b.rank() - 1);
  if (k != kb) {
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  }
  const bool broadcast_b = (b.rank() == 2 && a.rank() > 2);
  if (!broadcast_b && a.rank() != b.rank()) {
    throw ShapeError("matmul: rank mismatch " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  }
  std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 2);
  if (!broadcast_b) {
    for (int i = 0; i + 2 < a.rank(); ++i) {
      if (a.dim(i) != b.dim(i)) {
        throw ShapeError("matmul: leading dims differ, " + shape_str(a.shape()) +
                         " @ " + shape_str(b.shape()));
      }
    }
  }
  out_shape.push_back(m);
  out_shape.push_back(n);
  const int64_t batches = a.numel() / (int64_t(m) * k);

  Tensor<T> out = Tensor<T>::op_node(std::move(out_shape), "matmul", {a, b});
  for (int64_t bi = 0; bi < batches; ++bi) {
    const T* ap = a.data().data() + bi * int64_t(m) * k;
    const T* bp = b.data().data() + (broadcast_b ? 0 : bi * int64_t(k) * n);
    T* cp = out.data().data() + bi * int64_t(m) * n;
    gemm_acc(ap, bp, cp, m, k, n);
  }
  TCT_FINITE_GUARD(out, "matmul");
  if (out.requires_grad()) {
    out.raw().backward = [m, k, n, batches, broadcast_b](Node<T>& nd) {
      Node<T>& pa = *nd.parents[0];
      Node<T>& pb = *nd.parents[1];
      for (int64_t bi = 0; bi < batches; ++bi) {
        const T* g = nd.grad.data() + bi * int64_t(m) * n;
        const T* ap = pa.value.data() + bi * int64_t(m) * k;
        const T* bp = pb.value.data() + (broadcast_b ? 0 : bi * int64_t(k) * n);
        if (pa.requires_grad) {
          gemm_acc_bt(g, bp, pa.grad_buf().data() + bi * int64_t(m) * k, m, k, n);
        }
        if (pb.requires_grad) {
          gemm_acc_at(ap, g,
                      pb.grad_buf().data() + (broadcast_b ? 0 : bi * int64_t(k) * n),
                      m, k, n);
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank must be >= 2");
  const int r = x.dim(x.rank() - 2);
  const int c = x.dim(x.rank() - 1);
  std::vector<int> out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  const int64_t batches = x.numel() / (int64_t(r) * c);
  Tensor<T> out = Tensor<T>::op_node(std::move(out_shape), "transpose", {x});
  for (int64_t bi = 0; bi < batches; ++bi) {
    const T* xp = x.data().data() + bi * int64_t(r) * c;
    T* op = out.data().data() + bi * int64_t(r) * c;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) op[int64_t(j) * r + i] = xp[int64_t(i) * c + j];
  }
  if (out.requires_grad()) {
    out.raw().backward = [r, c, batches](Node<T>& nd) {
      Node<T>& p = *nd.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      for (int64_t bi = 0; bi < batches; ++bi) {
        const T* gp = nd.grad.data() + bi * int64_t(r) * c;
        T* pg = g.data() + bi * int64_t(r) * c;
        for (int j = 0; j < c; ++j)
          for (int i = 0; i < r; ++i) pg[int64_t(i) * c + j] += gp[int64_t(j) * r + i];
      }
    };
  }
  return out;
}

namespace {

template <typename T>
void softmax_row(const T* x, T* p, int d) {
  T mx = x[0];
  for (int i = 1; i < d; ++i) mx = std::max(mx, x[i]);
  T sum = T(0);
  for (int i = 0; i < d; ++i) {
    p[i] = std::exp(x[i] - mx);
    sum += p[i];
  }
  T inv = T(1) / sum;
  for (int i = 0; i < d; ++i) p[i] *= inv;
}

}  // namespace

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("softmax: rank must be >= 1");
  const int d = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::op_node(x.shape(), "softmax", {x});
  for (int64_t r = 0; r < rows; ++r) {
    softmax_row(x.data().data() + r * d, out.data().data() + r * d, d);
  }
  TCT_FINITE_GUARD(out, "softmax");
  if (out.requires_grad()) {
    out.raw().backward = [d, rows](Node<T>& nd) {
      Node<T>& p = *nd.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      for (int64_t r = 0; r < rows; ++r) {
        const T* pr = nd.value.data() + r * d;
        const T* gr = nd.grad.data() + r * d;
        T* xg = g.data() + r * d;
        T dot = T(0);
        for (int i = 0; i < d; ++i) dot += gr[i] * pr[i];
        for (int i = 0; i < d; ++i) xg[i] += pr[i] * (gr[i] - dot);
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, T att_scale) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1)) {
    throw ShapeError("attention_probs: expected [M,d] x [M,d], got " +
                     shape_str(q.shape()) + " and " + shape_str(k.shape()));
  }
  const int m = q.dim(0);
  const int mk = k.dim(0);
  const int d = q.dim(1);
  Tensor<T> out = Tensor<T>::op_node({m, mk}, "attention_probs", {q, k});
  std::vector<T> srow(size_t(mk));
  for (int r = 0; r < m; ++r) {
    const T* qr = q.data().data() + int64_t(r) * d;
    for (int j = 0; j < mk; ++j) {
      const T* kj = k.data().data() + int64_t(j) * d;
      T acc = T(0);
      for (int e = 0; e < d; ++e) acc += qr[e] * kj[e];
      srow[size_t(j)] = acc * att_scale;
    }
    softmax_row(srow.data(), out.data().data() + int64_t(r) * mk, mk);
  }
  TCT_FINITE_GUARD(out, "attention_probs");
  if (out.requires_grad()) {
    out.raw().backward = [m, mk, d, att_scale](Node<T>& nd) {
      Node<T>& pq = *nd.parents[0];
      Node<T>& pk = *nd.parents[1];
      T* dq = pq.requires_grad ? pq.grad_buf().data() : nullptr;
      T* dk = pk.requires_grad ? pk.grad_buf().data() : nullptr;
      if (!dq && !dk) return;
      std::vector<T> ds(size_t(mk));
      for (int r = 0; r < m; ++r) {
        const T* pr = nd.value.data() + int64_t(r) * mk;
        const T* gr = nd.grad.data() + int64_t(r) * mk;
        T dot = T(0);
        for (int j = 0; j < mk; ++j) dot += gr[j] * pr[j];
        for (int j = 0; j < mk; ++j) ds[size_t(j)] = pr[j] * (gr[j] - dot) * att_scale;
        const T* qr = pq.value.data() + int64_t(r) * d;
        for (int j = 0; j < mk; ++j) {
          T s = ds[size_t(j)];
          if (s == T(0)) continue;
          const T* kj = pk.value.data() + int64_t(j) * d;
          if (dq) {
            T* dqr = dq + int64_t(r) * d;
            for (int e = 0; e < d; ++e) dqr[e] += s * kj[e];
          }
          if (dk) {
            T* dkj = dk + int64_t(j) * d;
            for (int e = 0; e < d; ++e) dkj[e] += s * qr[e];
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank must be >= 1");
  const int d = x.dim(x.rank() - 1);
  if (gamma.shape() != std::vector<int>{d} || beta.shape() != std::vector<int>{d}) {
    throw ShapeError("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
  }
  if (eps <= T(0)) throw ConfigError("layer_norm: eps must be positive");
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::op_node(x.shape(), "layer_norm", {x, gamma, beta});
  std::vector<T> mean(size_t(rows)), istd(size_t(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mu = T(0);
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= T(d);
    T var = T(0);
    for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= T(d);
    T is = T(1) / std::sqrt(var + eps);
    mean[size_t(r)] = mu;
    istd[size_t(r)] = is;
    T* orow = out.data().data() + r * d;
    const T* gm = gamma.data().data();
    const T* bt = beta.data().data();
    for (int i = 0; i < d; ++i) orow[i] = (xr[i] - mu) * is * gm[i] + bt[i];
  }
  TCT_FINITE_GUARD(out, "layer_norm");
  if (out.requires_grad()) {
    out.raw().backward = [d, rows, mean = std::move(mean),
                          istd = std::move(istd)](Node<T>& nd) {
      Node<T>& px = *nd.parents[0];
      Node<T>& pg = *nd.parents[1];
      Node<T>& pb = *nd.parents[2];
      T* dx = px.requires_grad ? px.grad_buf().data() : nullptr;
      T* dgm = pg.requires_grad ? pg.grad_buf().data() : nullptr;
      T* dbt = pb.requires_grad ? pb.grad_buf().data() : nullptr;
      const T* gm = pg.value.data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px.value.data() + r * d;
        const T* gr = nd.grad.data() + r * d;
        const T mu = mean[size_t(r)];
        const T is = istd[size_t(r)];
        T s1 = T(0), s2 = T(0);
        for (int i = 0; i < d; ++i) {
          T xhat = (xr[i] - mu) * is;
          T dyh = gr[i] * gm[i];
          s1 += dyh;
          s2 += dyh * xhat;
          if (dgm) dgm[i] += gr[i] * xhat;
          if (dbt) dbt[i] += gr[i];
        }
        if (dx) {
          T* dxr = dx + r * d;
          for (int i = 0; i < d; ++i) {
            T xhat = (xr[i] - mu) * is;
            T dyh = gr[i] * gm[i];
            dxr[i] += is * (dyh - s1 / T(d) - xhat * s2 / T(d));
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  if (x.rank() != 4) throw ShapeError("group_norm: expected NCHW input");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (groups <= 0 || c % groups != 0) {
    throw ShapeError("group_norm: channel count " + std::to_string(c) +
                     " not divisible by groups " + std::to_string(groups));
  }
  if (gamma.shape() != std::vector<int>{c} || beta.shape() != std::vector<int>{c}) {
    throw ShapeError("group_norm: gamma/beta must have shape [" + std::to_string(c) + "]");
  }
  if (eps <= T(0)) throw ConfigError("group_norm: eps must be positive");
  const int cpg = c / groups;
  const int64_t hw = int64_t(h) * w;
  const int64_t gsize = cpg * hw;
  Tensor<T> out = Tensor<T>::op_node(x.shape(), "group_norm", {x, gamma, beta});
  std::vector<T> mean(size_t(b) * groups), istd(size_t(b) * groups);
  for (int bi = 0; bi < b; ++bi) {
    for (int gi = 0; gi < groups; ++gi) {
      const T* xg = x.data().data() + (int64_t(bi) * c + int64_t(gi) * cpg) * hw;
      T mu = T(0);
      for (int64_t i = 0; i < gsize; ++i) mu += xg[i];
      mu /= T(gsize);
      T var = T(0);
      for (int64_t i = 0; i < gsize; ++i) var += (xg[i] - mu) * (xg[i] - mu);
      var /= T(gsize);
      T is = T(1) / std::sqrt(var + eps);
      mean[size_t(bi) * groups + gi] = mu;
      istd[size_t(bi) * groups + gi] = is;
      T* og = out.data().data() + (int64_t(bi) * c + int64_t(gi) * cpg) * hw;
      for (int ci = 0; ci < cpg; ++ci) {
        const T gm = gamma.data()[size_t(gi) * cpg + ci];
        const T bt = beta.data()[size_t(gi) * cpg + ci];
        const T* xc = xg + int64_t(ci) * hw;
        T* oc = og + int64_t(ci) * hw;
        for (int64_t i = 0; i < hw; ++i) oc[i] = (xc[i] - mu) * is * gm + bt;
      }
    }
  }
  TCT_FINITE_GUARD(out, "group_norm");
  if (out.requires_grad()) {
    out.raw().backward = [b, c, groups, cpg, hw, gsize, mean = std::move(mean),
                          istd = std::move(istd)](Node<T>& nd) {
      Node<T>& px = *nd.parents[0];
      Node<T>& pg = *nd.parents[1];
      Node<T>& pb = *nd.parents[2];
      T* dx = px.requires_grad ? px.grad_buf().data() : nullptr;
      T* dgm = pg.requires_grad ? pg.grad_buf().data() : nullptr;
      T* dbt = pb.requires_grad ? pb.grad_buf().data() : nullptr;
      for (int bi = 0; bi < b; ++bi) {
        for (int gi = 0; gi < groups; ++gi) {
          const int64_t base = (int64_t(bi) * c + int64_t(gi) * cpg) * hw;
          const T* xg = px.value.data() + base;
          const T* gr = nd.grad.data() + base;
          const T mu = mean[size_t(bi) * groups + gi];
          const T is = istd[size_t(bi) * groups + gi];
          T s1 = T(0), s2 = T(0);
          for (int ci = 0; ci < cpg; ++ci) {
            const T gm = pg.value[size_t(gi) * cpg + ci];
            const T* xc = xg + int64_t(ci) * hw;
            const T* gc = gr + int64_t(ci) * hw;
            T dg_acc = T(0), db_acc = T(0);
            for (int64_t i = 0; i < hw; ++i) {
              T xhat = (xc[i] - mu) * is;
              T dyh = gc[i] * gm;
              s1 += dyh;
              s2 += dyh * xhat;
              dg_acc += gc[i] * xhat;
              db_acc += gc[i];
            }
            if (dgm) dgm[size_t(gi) * cpg + ci] += dg_acc;
            if (dbt) dbt[size_t(gi) * cpg + ci] += db_acc;
          }
          if (dx) {
            for (int ci = 0; ci < cpg; ++ci) {
              const T gm = pg.value[size_t(gi) * cpg + ci];
              const T* xc = xg + int64_t(ci) * hw;
              const T* gc = gr + int64_t(ci) * hw;
              T* dxc = dx + base + int64_t(ci) * hw;
              for (int64_t i = 0; i < hw; ++i) {
                T xhat = (xc[i] - mu) * is;
                T dyh = gc[i] * gm;
                dxc[i] += is * (dyh - s1 / T(gsize) - xhat * s2 / T(gsize));
              }
            }
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d: input and weight must be rank 4");
  }
  const int b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int cout = weight.dim(0), wcin = weight.dim(1);
  const int kh = weight.dim(2), kw = weight.dim(3);
  if (kh != kw) throw ShapeError("conv2d: kernel must be square");
  const int k = kh;
  if (cin != wcin) {
    std::ostringstream os;
    os << "conv2d: input channels " << cin << " do not match weight channels " << wcin
       << " (input " << shape_str(input.shape()) << ", weight " << shape_str(weight.shape()) << ")";
    throw ShapeError(os.str());
  }
  if (bias.shape() != std::vector<int>{cout}) {
    throw ShapeError("conv2d: bias must have shape [" + std::to_string(cout) + "]");
  }
  if (k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw ShapeError("conv2d: padded input smaller than kernel");
  }
  const int ho = (h + 2 * padding - k) / stride + 1;
  const int wo = (w + 2 * padding - k) / stride + 1;

  Tensor<T> out = Tensor<T>::op_node({b, cout, ho, wo}, "conv2d", {input, weight, bias});
  auto& ov = out.data();
  const auto& iv = input.data();
  const auto& wv = weight.data();
  const auto& bv = bias.data();

  // valid output range for a given kernel offset: idx*stride - padding + koff in [0, extent)
  auto obegin = [padding, stride](int koff) {
    int lo = padding - koff;
    return lo <= 0 ? 0 : (lo + stride - 1) / stride;
  };
  auto oend = [padding, stride](int koff, int extent, int olimit) {
    int hi = (extent - 1 + padding - koff) / stride + 1;
    return hi < olimit ? hi : olimit;
  };

  for (int bi = 0; bi < b; ++bi) {
    for (int co = 0; co < cout; ++co) {
      T* oplane = ov.data() + (int64_t(bi) * cout + co) * ho * wo;
      for (int64_t i = 0; i < int64_t(ho) * wo; ++i) oplane[i] = bv[size_t(co)];
      for (int ci = 0; ci < cin; ++ci) {
        const T* iplane = iv.data() + (int64_t(bi) * cin + ci) * h * w;
        const T* wbase = wv.data() + (int64_t(co) * cin + ci) * k * k;
        for (int r = 0; r < k; ++r) {
          const int oh0 = obegin(r), oh1 = oend(r, h, ho);
          for (int c = 0; c < k; ++c) {
            const T wval = wbase[r * k + c];
            if (wval == T(0)) continue;
            const int ow0 = obegin(c), ow1 = oend(c, w, wo);
            for (int oh = oh0; oh < oh1; ++oh) {
              const T* irow = iplane + int64_t(oh * stride - padding + r) * w;
              T* orow = oplane + int64_t(oh) * wo;
              const int ibase = -padding + c;
              for (int ow = ow0; ow < ow1; ++ow) {
                orow[ow] += wval * irow[ow * stride + ibase];
              }
            }
          }
        }
      }
    }
  }
  TCT_FINITE_GUARD(out, "conv2d");

  if (out.requires_grad()) {
    out.raw().backward = [b, cin, cout, h, w, ho, wo, k, stride, padding,
                          obegin, oend](Node<T>& nd) {
      Node<T>& pin = *nd.parents[0];
      Node<T>& pw = *nd.parents[1];
      Node<T>& pbias = *nd.parents[2];
      T* din = pin.requires_grad ? pin.grad_buf().data() : nullptr;
      T* dw = pw.requires_grad ? pw.grad_buf().data() : nullptr;
      T* db = pbias.requires_grad ? pbias.grad_buf().data() : nullptr;
      const T* gv = nd.grad.data();
      for (int bi = 0; bi < b; ++bi) {
        for (int co = 0; co < cout; ++co) {
          const T* gplane = gv + (int64_t(bi) * cout + co) * ho * wo;
          if (db) {
            T acc = T(0);
            for (int64_t i = 0; i < int64_t(ho) * wo; ++i) acc += gplane[i];
            db[size_t(co)] += acc;
          }
          if (!din && !dw) continue;
          for (int ci = 0; ci < cin; ++ci) {
            const T* iplane = pin.value.data() + (int64_t(bi) * cin + ci) * h * w;
            const T* wbase = pw.value.data() + (int64_t(co) * cin + ci) * k * k;
            T* dinplane = din ? din + (int64_t(bi) * cin + ci) * h * w : nullptr;
            T* dwbase = dw ? dw + (int64_t(co) * cin + ci) * k * k : nullptr;
            for (int r = 0; r < k; ++r) {
              const int oh0 = obegin(r), oh1 = oend(r, h, ho);
              for (int c = 0; c < k; ++c) {
                const int ow0 = obegin(c), ow1 = oend(c, w, wo);
                const T wval = wbase[r * k + c];
                T dw_acc = T(0);
                for (int oh = oh0; oh < oh1; ++oh) {
                  const int64_t irow = int64_t(oh * stride - padding + r) * w;
                  const T* grow = gplane + int64_t(oh) * wo;
                  const int ibase = -padding + c;
                  for (int ow = ow0; ow < ow1; ++ow) {
                    const T g = grow[ow];
                    const int64_t ii = irow + ow * stride + ibase;
                    dw_acc += g * iplane[ii];
                    if (dinplane) dinplane[ii] += g * wval;
                  }
                }
                if (dwbase) dwbase[r * k + c] += dw_acc;
              }
            }
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const int64_t hw = int64_t(a.dim(2)) * a.dim(3);
  Tensor<T> out = Tensor<T>::op_node({n, ca + cb, a.dim(2), a.dim(3)}, "concat_ch", {a, b});
  auto& ov = out.data();
  for (int bi = 0; bi < n; ++bi) {
    std::copy_n(a.data().data() + int64_t(bi) * ca * hw, size_t(ca * hw),
                ov.data() + int64_t(bi) * (ca + cb) * hw);
    std::copy_n(b.data().data() + int64_t(bi) * cb * hw, size_t(cb * hw),
                ov.data() + int64_t(bi) * (ca + cb) * hw + ca * hw);
  }
  if (out.requires_grad()) {
    out.raw().backward = [n, ca, cb, hw](Node<T>& nd) {
      Node<T>& pa = *nd.parents[0];
      Node<T>& pb = *nd.parents[1];
      for (int bi = 0; bi < n; ++bi) {
        const T* g = nd.grad.data() + int64_t(bi) * (ca + cb) * hw;
        if (pa.requires_grad) {
          T* ga = pa.grad_buf().data() + int64_t(bi) * ca * hw;
          for (int64_t i = 0; i < int64_t(ca) * hw; ++i) ga[i] += g[i];
        }
        if (pb.requires_grad) {
          T* gb = pb.grad_buf().data() + int64_t(bi) * cb * hw;
          for (int64_t i = 0; i < int64_t(cb) * hw; ++i) gb[i] += g[ca * hw + i];
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat_lastdim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.rank() < 1) {
    throw ShapeError("concat_lastdim: rank mismatch");
  }
  for (int i = 0; i + 1 < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw ShapeError("concat_lastdim: leading dims differ, " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
    }
  }
  const int da = a.dim(a.rank() - 1), db = b.dim(b.rank() - 1);
  const int64_t rows = a.numel() / da;
  std::vector<int> out_shape = a.shape();
  out_shape.back() = da + db;
  Tensor<T> out = Tensor<T>::op_node(std::move(out_shape), "concat_last", {a, b});
  auto& ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * da, size_t(da), ov.data() + r * (da + db));
    std::copy_n(b.data().data() + r * db, size_t(db), ov.data() + r * (da + db) + da);
  }
  if (out.requires_grad()) {
    out.raw().backward = [da, db, rows](Node<T>& nd) {
      Node<T>& pa = *nd.parents[0];
      Node<T>& pb = *nd.parents[1];
      for (int64_t r = 0; r < rows; ++r) {
        const T* g = nd.grad.data() + r * (da + db);
        if (pa.requires_grad) {
          T* ga = pa.grad_buf().data() + r * da;
          for (int i = 0; i < da; ++i) ga[i] += g[i];
        }
        if (pb.requires_grad) {
          T* gb = pb.grad_buf().data() + r * db;
          for (int i = 0; i < db; ++i) gb[i] += g[da + i];
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, int index) {
  if (x.rank() != 4) throw ShapeError("slice_batch: expected NCHW input");
  const int b = x.dim(0);
  if (index < 0 || index >= b) {
    throw ShapeError("slice_batch: index " + std::to_string(index) + " out of range");
  }
  const int64_t chw = x.numel() / b;
  Tensor<T> out = Tensor<T>::op_node({1, x.dim(1), x.dim(2), x.dim(3)}, "slice_batch", {x});
  std::copy_n(x.data().data() + int64_t(index) * chw, size_t(chw), out.data().data());
  if (out.requires_grad()) {
    out.raw().backward = [index, chw](Node<T>& nd) {
      Node<T>& p = *nd.parents[0];
      if (!p.requires_grad) return;
      T* g = p.grad_buf().data() + int64_t(index) * chw;
      for (int64_t i = 0; i < chw; ++i) g[i] += nd.grad[size_t(i)];
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(1) != b.dim(1) ||
      a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_batch: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  Tensor<T> out = Tensor<T>::op_node({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)},
                                     "concat_batch", {a, b});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.data().size());
  if (out.requires_grad()) {
    const size_t na = a.data().size();
    out.raw().backward = [na](Node<T>& nd) {
      Node<T>& pa = *nd.parents[0];
      Node<T>& pb = *nd.parents[1];
      if (pa.requires_grad) {
        auto& g = pa.grad_buf();
        for (size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.grad_buf();
        for (size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[na + i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("upsample2x_nearest: rank must be >= 2");
  const int h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const int64_t planes = x.numel() / (int64_t(h) * w);
  std::vector<int> out_shape = x.shape();
  out_shape[out_shape.size() - 2] = 2 * h;
  out_shape[out_shape.size() - 1] = 2 * w;
  Tensor<T> out = Tensor<T>::op_node(std::move(out_shape), "upsample2x", {x});
  auto& ov = out.data();
  for (int64_t pl = 0; pl < planes; ++pl) {
    const T* xp = x.data().data() + pl * h * w;
    T* op = ov.data() + pl * 4 * h * w;
    for (int i = 0; i < h; ++i) {
      const T* xrow = xp + int64_t(i) * w;
      T* orow0 = op + int64_t(2 * i) * 2 * w;
      T* orow1 = orow0 + 2 * w;
      for (int j = 0; j < w; ++j) {
        orow0[2 * j] = orow0[2 * j + 1] = xrow[j];
        orow1[2 * j] = orow1[2 * j + 1] = xrow[j];
      }
    }
  }
  if (out.requires_grad()) {
    out.raw().backward = [h, w, planes](Node<T>& nd) {
      Node<T>& p = *nd.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      for (int64_t pl = 0; pl < planes; ++pl) {
        const T* gp = nd.grad.data() + pl * 4 * h * w;
        T* pg = g.data() + pl * h * w;
        for (int i = 0; i < h; ++i) {
          const T* grow0 = gp + int64_t(2 * i) * 2 * w;
          const T* grow1 = grow0 + 2 * w;
          T* prow = pg + int64_t(i) * w;
          for (int j = 0; j < w; ++j) {
            prow[j] += grow0[2 * j] + grow0[2 * j + 1] + grow1[2 * j] + grow1[2 * j + 1];
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  const int64_t n = x.numel();
  Tensor<T> out = Tensor<T>::op_node({1}, "mean_all", {x});
  T acc = T(0);
  for (const T& v : x.data()) acc += v;
  out.data()[0] = acc / T(n);
  if (out.requires_grad()) {
    out.raw().backward = [n](Node<T>& nd) {
      Node<T>& p = *nd.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      const T gv = nd.grad[0] / T(n);
      for (auto& e : g) e += gv;
    };
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::op_node({1}, "sum_all", {x});
  T acc = T(0);
  for (const T& v : x.data()) acc += v;
  out.data()[0] = acc;
  if (out.requires_grad()) {
    out.raw().backward = [](Node<T>& nd) {
      Node<T>& p = *nd.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      const T gv = nd.grad[0];
      for (auto& e : g) e += gv;
    };
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  Tensor<T> out = Tensor<T>::op_node(std::move(new_shape), "reshape", {x});
  out.data() = x.data();
  if (out.requires_grad()) {
    out.raw().backward = [](Node<T>& nd) {
      Node<T>& p = *nd.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> nchw_to_tokens(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(0) != 1) {
    throw ShapeError("nchw_to_tokens: expected [1,C,h,w], got " + shape_str(x.shape()));
  }
  const int c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t hw = int64_t(h) * w;
  Tensor<T> out = Tensor<T>::op_node({h * w, c}, "tokens", {x});
  auto& ov = out.data();
  for (int ci = 0; ci < c; ++ci) {
    const T* xp = x.data().data() + int64_t(ci) * hw;
    for (int64_t m = 0; m < hw; ++m) ov[size_t(m) * c + ci] = xp[m];
  }
  if (out.requires_grad()) {
    out.raw().backward = [c, hw](Node<T>& nd) {
      Node<T>& p = *nd.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      for (int ci = 0; ci < c; ++ci) {
        T* gp = g.data() + int64_t(ci) * hw;
        for (int64_t m = 0; m < hw; ++m) gp[m] += nd.grad[size_t(m) * c + ci];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> tokens_to_nchw(const Tensor<T>& t, int h, int w) {
  if (t.rank() != 2 || t.dim(0) != h * w) {
    throw ShapeError("tokens_to_nchw: token count " +
                     std::to_string(t.rank() == 2 ? t.dim(0) : -1) +
                     " does not match grid " + std::to_string(h) + "x" + std::to_string(w));
  }
  const int c = t.dim(1);
  const int64_t hw = int64_t(h) * w;
  Tensor<T> out = Tensor<T>::op_node({1, c, h, w}, "untokens", {t});
  auto& ov = out.data();
  for (int ci = 0; ci < c; ++ci) {
    T* op = ov.data() + int64_t(ci) * hw;
    for (int64_t m = 0; m < hw; ++m) op[m] = t.data()[size_t(m) * c + ci];
  }
  if (out.requires_grad()) {
    out.raw().backward = [c, hw](Node<T>& nd) {
      Node<T>& p = *nd.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buf();
      for (int ci = 0; ci < c; ++ci) {
        const T* gp = nd.grad.data() + int64_t(ci) * hw;
        for (int64_t m = 0; m < hw; ++m) g[size_t(m) * c + ci] += gp[m];
      }
    };
  }
  return out;
}

#define TCT_INSTANTIATE_OPS(T)                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                 \
  template Tensor<T> relu(const Tensor<T>&);                                     \
  template Tensor<T> abs(const Tensor<T>&);                                      \
  template Tensor<T> sqrt(const Tensor<T>&);                                     \
  template Tensor<T> add_rowvec(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> transpose_last2(const Tensor<T>&);                          \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                          \
  template Tensor<T> attention_probs(const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,              \
                                const Tensor<T>&, T);                            \
  template Tensor<T> group_norm(const Tensor<T>&, int, const Tensor<T>&,         \
                                const Tensor<T>&, T);                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                            int, int);                                           \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> concat_lastdim(const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> slice_batch(const Tensor<T>&, int);                         \
  template Tensor<T> concat_batch(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> upsample2x_nearest(const Tensor<T>&);                       \
  template Tensor<T> mean_all(const Tensor<T>&);                                 \
  template Tensor<T> sum_all(const Tensor<T>&);                                  \
  template Tensor<T> reshape(const Tensor<T>&, std::vector<int>);                \
  template Tensor<T> nchw_to_tokens(const Tensor<T>&);                           \
  template Tensor<T> tokens_to_nchw(const Tensor<T>&, int, int);

TCT_INSTANTIATE_OPS(float)
TCT_INSTANTIATE_OPS(double)
#undef TCT_INSTANTIATE_OPS

}  // namespace tct
