#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <limits>

#include "cdp/tensor.hpp"

// Differentiable ops over TensorT<S>. Forward values are computed eagerly;
// backward closures are attached to the tape when gradients are tracked.
// Heavy lifting (matmul, conv via im2col) goes through Eigen GEMM.

namespace cdp {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;
template <typename S>
using EArr = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using EAMap = Eigen::Map<EArr<S>>;
template <typename S>
using ECAMap = Eigen::Map<const EArr<S>>;

// ---------------------------------------------------------------------------
// Attention mask
// ---------------------------------------------------------------------------

struct AttentionMask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> allowed;  // rows*cols, row-major

  static AttentionMask all_allowed(int r, int c) {
    AttentionMask m;
    m.rows = r;
    m.cols = c;
    m.allowed.assign(static_cast<size_t>(r) * c, 1);
    return m;
  }

  bool at(int r, int c) const { return allowed[static_cast<size_t>(r) * cols + c] != 0; }
  void set(int r, int c, bool v) { allowed[static_cast<size_t>(r) * cols + c] = v ? 1 : 0; }

  // Invariant: no fully-masked query row.
  void validate() const {
    for (int r = 0; r < rows; ++r) {
      bool any = false;
      for (int c = 0; c < cols; ++c)
        if (at(r, c)) {
          any = true;
          break;
        }
      if (!any)
        throw TensorError("AttentionMask: query row " + std::to_string(r) +
                          " has no allowed keys");
    }
  }
};

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw TensorError("broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `sh` aligned (right) against `out`, 0 on broadcast dims.
inline std::vector<int64_t> broadcast_strides(const Shape& sh, const Shape& out) {
  std::vector<int64_t> full(out.size(), 0);
  int64_t stride = 1;
  size_t off = out.size() - sh.size();
  for (int i = static_cast<int>(sh.size()) - 1; i >= 0; --i) {
    full[off + i] = (sh[i] == 1 && out[off + i] != 1) ? 0 : stride;
    stride *= sh[i];
  }
  return full;
}

// Walks every index of `out`, calling f(i_out, i_a, i_b).
template <typename F>
void bc_walk(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb,
             F&& f) {
  int r = static_cast<int>(out.size());
  int64_t n = shape_numel(out);
  std::vector<int> idx(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      idx[d]++;
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      idx[d] = 0;
      ia -= static_cast<int64_t>(out[d]) * sa[d];
      ib -= static_cast<int64_t>(out[d]) * sb[d];
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

template <typename S>
TensorT<S> binary_op(const TensorT<S>& a, const TensorT<S>& b, BinOp op) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const auto& av = a.data();
  const auto& bv = b.data();

  Shape os;
  std::vector<S> ov;
  bool same = (as == bs);
  if (same) {
    os = as;
    ov.resize(av.size());
    switch (op) {
      case BinOp::Add:
        for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
        break;
      case BinOp::Sub:
        for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] - bv[i];
        break;
      case BinOp::Mul:
        for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
        break;
      case BinOp::Div:
        for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] / bv[i];
        break;
    }
  } else {
    os = broadcast_shapes(as, bs);
    ov.resize(shape_numel(os));
    auto sa = broadcast_strides(as, os);
    auto sb = broadcast_strides(bs, os);
    switch (op) {
      case BinOp::Add:
        bc_walk(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) { ov[i] = av[ia] + bv[ib]; });
        break;
      case BinOp::Sub:
        bc_walk(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) { ov[i] = av[ia] - bv[ib]; });
        break;
      case BinOp::Mul:
        bc_walk(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) { ov[i] = av[ia] * bv[ib]; });
        break;
      case BinOp::Div:
        bc_walk(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) { ov[i] = av[ia] / bv[ib]; });
        break;
    }
  }

  auto pa = a.node();
  auto pb = b.node();
  return make_result<S>(
      os, std::move(ov), {a, b}, [pa, pb, os, same, op](Node<S>& out) {
        const auto& g = out.grad;
        const auto& av = pa->value;
        const auto& bv = pb->value;
        bool need_a = pa->requires_grad;
        bool need_b = pb->requires_grad;
        if (same) {
          if (need_a) {
            auto& ga = pa->grad;
            switch (op) {
              case BinOp::Add:
              case BinOp::Sub:
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                break;
              case BinOp::Mul:
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                break;
              case BinOp::Div:
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
                break;
            }
          }
          if (need_b) {
            auto& gb = pb->grad;
            switch (op) {
              case BinOp::Add:
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                break;
              case BinOp::Sub:
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                break;
              case BinOp::Mul:
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                break;
              case BinOp::Div:
                for (size_t i = 0; i < g.size(); ++i)
                  gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                break;
            }
          }
          return;
        }
        auto sa = broadcast_strides(pa->shape, os);
        auto sb = broadcast_strides(pb->shape, os);
        auto& ga = pa->grad;
        auto& gb = pb->grad;
        bc_walk(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
          switch (op) {
            case BinOp::Add:
              if (need_a) ga[ia] += g[i];
              if (need_b) gb[ib] += g[i];
              break;
            case BinOp::Sub:
              if (need_a) ga[ia] += g[i];
              if (need_b) gb[ib] -= g[i];
              break;
            case BinOp::Mul:
              if (need_a) ga[ia] += g[i] * bv[ib];
              if (need_b) gb[ib] += g[i] * av[ia];
              break;
            case BinOp::Div:
              if (need_a) ga[ia] += g[i] / bv[ib];
              if (need_b) gb[ib] -= g[i] * av[ia] / (bv[ib] * bv[ib]);
              break;
          }
        });
      });
}

}  // namespace detail

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(a, b, detail::BinOp::Add);
}
template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(a, b, detail::BinOp::Sub);
}
template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(a, b, detail::BinOp::Mul);
}
template <typename S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(a, b, detail::BinOp::Div);
}

// y = scale * x + shift, elementwise with scalar coefficients.
template <typename S>
TensorT<S> affine(const TensorT<S>& x, S scale, S shift = S(0)) {
  std::vector<S> ov(x.data().size());
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = scale * x.data()[i] + shift;
  auto px = x.node();
  return detail::make_result<S>(x.shape(), std::move(ov), {x}, [px, scale](detail::Node<S>& out) {
    if (!px->requires_grad) return;
    for (size_t i = 0; i < out.grad.size(); ++i) px->grad[i] += scale * out.grad[i];
  });
}

template <typename S>
TensorT<S> neg(const TensorT<S>& x) {
  return affine(x, S(-1));
}

// ---------------------------------------------------------------------------
// Matmul / linear
// ---------------------------------------------------------------------------

// [m,k] @ [k,n] or batched [B,m,k] @ [B,k,n].
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() == 2 && bs.size() == 2) {
    if (as[1] != bs[0])
      throw TensorError("matmul: inner dims differ " + shape_str(as) + " @ " + shape_str(bs));
    int m = as[0], k = as[1], n = bs[1];
    std::vector<S> ov(static_cast<size_t>(m) * n);
    ECMap<S> A(a.data().data(), m, k), B(b.data().data(), k, n);
    EMap<S>(ov.data(), m, n).noalias() = A * B;
    auto pa = a.node();
    auto pb = b.node();
    return detail::make_result<S>({m, n}, std::move(ov), {a, b},
                                  [pa, pb, m, k, n](detail::Node<S>& out) {
                                    ECMap<S> G(out.grad.data(), m, n);
                                    if (pa->requires_grad) {
                                      ECMap<S> B(pb->value.data(), k, n);
                                      EMap<S>(pa->grad.data(), m, k).noalias() += G * B.transpose();
                                    }
                                    if (pb->requires_grad) {
                                      ECMap<S> A(pa->value.data(), m, k);
                                      EMap<S>(pb->grad.data(), k, n).noalias() += A.transpose() * G;
                                    }
                                  });
  }
  if (as.size() == 3 && bs.size() == 3) {
    if (as[0] != bs[0] || as[2] != bs[1])
      throw TensorError("matmul: batched shapes differ " + shape_str(as) + " @ " + shape_str(bs));
    int bt = as[0], m = as[1], k = as[2], n = bs[2];
    std::vector<S> ov(static_cast<size_t>(bt) * m * n);
    for (int i = 0; i < bt; ++i) {
      ECMap<S> A(a.data().data() + static_cast<size_t>(i) * m * k, m, k);
      ECMap<S> B(b.data().data() + static_cast<size_t>(i) * k * n, k, n);
      EMap<S>(ov.data() + static_cast<size_t>(i) * m * n, m, n).noalias() = A * B;
    }
    auto pa = a.node();
    auto pb = b.node();
    return detail::make_result<S>(
        {bt, m, n}, std::move(ov), {a, b}, [pa, pb, bt, m, k, n](detail::Node<S>& out) {
          for (int i = 0; i < bt; ++i) {
            ECMap<S> G(out.grad.data() + static_cast<size_t>(i) * m * n, m, n);
            if (pa->requires_grad) {
              ECMap<S> B(pb->value.data() + static_cast<size_t>(i) * k * n, k, n);
              EMap<S>(pa->grad.data() + static_cast<size_t>(i) * m * k, m, k).noalias() +=
                  G * B.transpose();
            }
            if (pb->requires_grad) {
              ECMap<S> A(pa->value.data() + static_cast<size_t>(i) * m * k, m, k);
              EMap<S>(pb->grad.data() + static_cast<size_t>(i) * k * n, k, n).noalias() +=
                  A.transpose() * G;
            }
          }
        });
  }
  throw TensorError("matmul: unsupported ranks " + shape_str(as) + " @ " + shape_str(bs));
}

// y = x @ W^T + b with x:[..,in], W:[out,in], b:[out].
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() != 2 || xs.empty() || xs.back() != ws[1])
    throw TensorError("linear: input " + shape_str(xs) + " incompatible with weight " +
                      shape_str(ws));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != ws[0]))
    throw TensorError("linear: bias " + shape_str(b.shape()) + " incompatible with weight " +
                      shape_str(ws));
  int in = ws[1], outd = ws[0];
  int64_t rows = x.numel() / in;
  Shape os = xs;
  os.back() = outd;
  std::vector<S> ov(rows * outd);
  ECMap<S> X(x.data().data(), rows, in), W(w.data().data(), outd, in);
  EMap<S> Y(ov.data(), rows, outd);
  Y.noalias() = X * W.transpose();
  if (b.defined()) {
    ECMap<S> B(b.data().data(), 1, outd);
    Y.rowwise() += B.row(0);
  }
  auto px = x.node();
  auto pw = w.node();
  auto pbn = b.defined() ? b.node() : nullptr;
  std::vector<TensorT<S>> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return detail::make_result<S>(
      os, std::move(ov), parents, [px, pw, pbn, rows, in, outd](detail::Node<S>& out) {
        ECMap<S> G(out.grad.data(), rows, outd);
        if (px->requires_grad) {
          ECMap<S> W(pw->value.data(), outd, in);
          EMap<S>(px->grad.data(), rows, in).noalias() += G * W;
        }
        if (pw->requires_grad) {
          ECMap<S> X(px->value.data(), rows, in);
          EMap<S>(pw->grad.data(), outd, in).noalias() += G.transpose() * X;
        }
        if (pbn && pbn->requires_grad) {
          EMap<S> B(pbn->grad.data(), 1, outd);
          B.row(0) += G.colwise().sum();
        }
      });
}

template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w) {
  return linear(x, w, TensorT<S>());
}

// ---------------------------------------------------------------------------
// Conv1d (cross-correlation) via im2col
// ---------------------------------------------------------------------------

// x: [B,Cin,T] or [Cin,T]; kernels: [Cout,Cin,K]; optional bias [Cout].
template <typename S>
TensorT<S> conv1d(const TensorT<S>& x, const TensorT<S>& kernels, const TensorT<S>& bias,
                  int stride = 1, int padding = 0) {
  bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2)
    throw TensorError("conv1d: input must be [B,Cin,T] or [Cin,T], got " + shape_str(x.shape()));
  if (kernels.rank() != 3)
    throw TensorError("conv1d: kernels must be [Cout,Cin,K], got " + shape_str(kernels.shape()));
  int B = batched ? x.dim(0) : 1;
  int cin = x.dim(batched ? 1 : 0);
  int T = x.dim(batched ? 2 : 1);
  int cout = kernels.dim(0), kcin = kernels.dim(1), K = kernels.dim(2);
  if (kcin != cin)
    throw TensorError("conv1d: channel mismatch, input " + shape_str(x.shape()) + " kernels " +
                      shape_str(kernels.shape()));
  int tout = (T + 2 * padding - K) / stride + 1;
  if (T < 1 || tout < 1)
    throw TensorError("conv1d: invalid geometry T=" + std::to_string(T) + " K=" +
                      std::to_string(K) + " stride=" + std::to_string(stride) + " padding=" +
                      std::to_string(padding));

  // im2col: [B*tout, cin*K]
  int64_t colw = static_cast<int64_t>(cin) * K;
  std::vector<S> col(static_cast<size_t>(B) * tout * colw, S(0));
  const S* xd = x.data().data();
  for (int bb = 0; bb < B; ++bb) {
    for (int t = 0; t < tout; ++t) {
      S* crow = col.data() + (static_cast<size_t>(bb) * tout + t) * colw;
      int t0 = t * stride - padding;
      for (int c = 0; c < cin; ++c) {
        const S* xrow = xd + (static_cast<size_t>(bb) * cin + c) * T;
        for (int k = 0; k < K; ++k) {
          int ti = t0 + k;
          if (ti >= 0 && ti < T) crow[static_cast<size_t>(c) * K + k] = xrow[ti];
        }
      }
    }
  }

  // out rows = col @ W2^T, W2 = kernels reshaped [cout, cin*K]
  std::vector<S> orows(static_cast<size_t>(B) * tout * cout);
  {
    ECMap<S> C(col.data(), static_cast<int64_t>(B) * tout, colw);
    ECMap<S> W2(kernels.data().data(), cout, colw);
    EMap<S> O(orows.data(), static_cast<int64_t>(B) * tout, cout);
    O.noalias() = C * W2.transpose();
    if (bias.defined()) {
      ECMap<S> Bm(bias.data().data(), 1, cout);
      O.rowwise() += Bm.row(0);
    }
  }
  // transpose per sample to [B, cout, tout]
  Shape os = batched ? Shape{B, cout, tout} : Shape{cout, tout};
  std::vector<S> ov(static_cast<size_t>(B) * cout * tout);
  for (int bb = 0; bb < B; ++bb)
    for (int t = 0; t < tout; ++t)
      for (int c = 0; c < cout; ++c)
        ov[(static_cast<size_t>(bb) * cout + c) * tout + t] =
            orows[(static_cast<size_t>(bb) * tout + t) * cout + c];

  auto px = x.node();
  auto pk = kernels.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  std::vector<TensorT<S>> parents = {x, kernels};
  if (bias.defined()) parents.push_back(bias);
  auto saved_col = std::make_shared<std::vector<S>>(std::move(col));
  return detail::make_result<S>(
      os, std::move(ov), parents,
      [px, pk, pb, saved_col, B, cin, T, cout, K, tout, stride, padding,
       colw](detail::Node<S>& out) {
        // grad rows [B*tout, cout] from out grad [B, cout, tout]
        std::vector<S> grows(static_cast<size_t>(B) * tout * cout);
        for (int bb = 0; bb < B; ++bb)
          for (int c = 0; c < cout; ++c)
            for (int t = 0; t < tout; ++t)
              grows[(static_cast<size_t>(bb) * tout + t) * cout + c] =
                  out.grad[(static_cast<size_t>(bb) * cout + c) * tout + t];
        ECMap<S> G(grows.data(), static_cast<int64_t>(B) * tout, cout);
        if (pk->requires_grad) {
          ECMap<S> C(saved_col->data(), static_cast<int64_t>(B) * tout, colw);
          EMap<S>(pk->grad.data(), cout, colw).noalias() += G.transpose() * C;
        }
        if (pb && pb->requires_grad) {
          EMap<S> Bg(pb->grad.data(), 1, cout);
          Bg.row(0) += G.colwise().sum();
        }
        if (px->requires_grad) {
          std::vector<S> dcol(static_cast<size_t>(B) * tout * colw);
          ECMap<S> W2(pk->value.data(), cout, colw);
          EMap<S>(dcol.data(), static_cast<int64_t>(B) * tout, colw).noalias() = G * W2;
          // col2im scatter
          for (int bb = 0; bb < B; ++bb)
            for (int t = 0; t < tout; ++t) {
              const S* crow = dcol.data() + (static_cast<size_t>(bb) * tout + t) * colw;
              int t0 = t * stride - padding;
              for (int c = 0; c < cin; ++c) {
                S* xg = px->grad.data() + (static_cast<size_t>(bb) * cin + c) * T;
                for (int k = 0; k < K; ++k) {
                  int ti = t0 + k;
                  if (ti >= 0 && ti < T) xg[ti] += crow[static_cast<size_t>(c) * K + k];
                }
              }
            }
        }
      });
}

template <typename S>
TensorT<S> conv1d(const TensorT<S>& x, const TensorT<S>& kernels, int stride = 1,
                  int padding = 0) {
  return conv1d(x, kernels, TensorT<S>(), stride, padding);
}

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps = S(1e-5)) {
  int D = x.dim(-1);
  if (D == 0) throw TensorError("layer_norm: empty normalised dimension");
  if (eps <= S(0)) throw TensorError("layer_norm: eps must be positive");
  if (gamma.numel() != D || beta.numel() != D)
    throw TensorError("layer_norm: gamma/beta size must equal " + std::to_string(D));
  int64_t rows = x.numel() / D;
  std::vector<S> ov(x.numel());
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  auto invstd = std::make_shared<std::vector<S>>(rows);
  const S* xd = x.data().data();
  const S* gd = gamma.data().data();
  const S* bd = beta.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = xd + r * D;
    S mean = 0;
    for (int i = 0; i < D; ++i) mean += row[i];
    mean /= D;
    S var = 0;
    for (int i = 0; i < D; ++i) {
      S d = row[i] - mean;
      var += d * d;
    }
    var /= D;
    S is = S(1) / std::sqrt(var + eps);
    (*invstd)[r] = is;
    for (int i = 0; i < D; ++i) {
      S xh = (row[i] - mean) * is;
      (*xhat)[r * D + i] = xh;
      ov[r * D + i] = xh * gd[i] + bd[i];
    }
  }
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  return detail::make_result<S>(
      x.shape(), std::move(ov), {x, gamma, beta},
      [px, pg, pb, xhat, invstd, rows, D](detail::Node<S>& out) {
        const S* gd = pg->value.data();
        for (int64_t r = 0; r < rows; ++r) {
          const S* g = out.grad.data() + r * D;
          const S* xh = xhat->data() + r * D;
          if (pg->requires_grad || pb->requires_grad) {
            for (int i = 0; i < D; ++i) {
              if (pg->requires_grad) pg->grad[i] += g[i] * xh[i];
              if (pb->requires_grad) pb->grad[i] += g[i];
            }
          }
          if (px->requires_grad) {
            S sum_gg = 0, sum_ggx = 0;
            for (int i = 0; i < D; ++i) {
              S gg = g[i] * gd[i];
              sum_gg += gg;
              sum_ggx += gg * xh[i];
            }
            S is = (*invstd)[r];
            S* xg = px->grad.data() + r * D;
            for (int i = 0; i < D; ++i) {
              S gg = g[i] * gd[i];
              xg[i] += is * (gg - sum_gg / D - xh[i] * sum_ggx / D);
            }
          }
        }
      });
}

// Group norm over [B,C,T]; normalises each (sample, group) over (C/g * T).
template <typename S>
TensorT<S> group_norm(const TensorT<S>& x, int groups, const TensorT<S>& gamma,
                      const TensorT<S>& beta, S eps = S(1e-5)) {
  if (x.rank() != 3) throw TensorError("group_norm: input must be [B,C,T]");
  int B = x.dim(0), C = x.dim(1), T = x.dim(2);
  if (C % groups != 0)
    throw TensorError("group_norm: channels " + std::to_string(C) + " not divisible by groups " +
                      std::to_string(groups));
  if (gamma.numel() != C || beta.numel() != C)
    throw TensorError("group_norm: gamma/beta size must equal channels");
  int cg = C / groups;
  int64_t gl = static_cast<int64_t>(cg) * T;
  std::vector<S> ov(x.numel());
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  auto invstd = std::make_shared<std::vector<S>>(static_cast<size_t>(B) * groups);
  const S* xd = x.data().data();
  const S* gd = gamma.data().data();
  const S* bd = beta.data().data();
  for (int b = 0; b < B; ++b) {
    for (int g = 0; g < groups; ++g) {
      const S* base = xd + (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * cg) * T;
      S mean = 0;
      for (int64_t i = 0; i < gl; ++i) mean += base[i];
      mean /= gl;
      S var = 0;
      for (int64_t i = 0; i < gl; ++i) {
        S d = base[i] - mean;
        var += d * d;
      }
      var /= gl;
      S is = S(1) / std::sqrt(var + eps);
      (*invstd)[static_cast<size_t>(b) * groups + g] = is;
      int64_t off = (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * cg) * T;
      for (int c = 0; c < cg; ++c) {
        S ga = gd[g * cg + c], be = bd[g * cg + c];
        for (int t = 0; t < T; ++t) {
          int64_t i = off + static_cast<int64_t>(c) * T + t;
          S xh = (xd[i] - mean) * is;
          (*xhat)[i] = xh;
          ov[i] = xh * ga + be;
        }
      }
    }
  }
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  return detail::make_result<S>(
      x.shape(), std::move(ov), {x, gamma, beta},
      [px, pg, pb, xhat, invstd, B, C, T, groups, cg, gl](detail::Node<S>& out) {
        const S* gd = pg->value.data();
        for (int b = 0; b < B; ++b) {
          for (int g = 0; g < groups; ++g) {
            int64_t off = (static_cast<int64_t>(b) * C + static_cast<int64_t>(g) * cg) * T;
            const S* gr = out.grad.data() + off;
            const S* xh = xhat->data() + off;
            if (pg->requires_grad || pb->requires_grad) {
              for (int c = 0; c < cg; ++c)
                for (int t = 0; t < T; ++t) {
                  int64_t i = static_cast<int64_t>(c) * T + t;
                  if (pg->requires_grad) pg->grad[g * cg + c] += gr[i] * xh[i];
                  if (pb->requires_grad) pb->grad[g * cg + c] += gr[i];
                }
            }
            if (px->requires_grad) {
              S sum_gg = 0, sum_ggx = 0;
              for (int c = 0; c < cg; ++c) {
                S ga = gd[g * cg + c];
                for (int t = 0; t < T; ++t) {
                  int64_t i = static_cast<int64_t>(c) * T + t;
                  S gg = gr[i] * ga;
                  sum_gg += gg;
                  sum_ggx += gg * xh[i];
                }
              }
              S is = (*invstd)[static_cast<size_t>(b) * groups + g];
              S* xg = px->grad.data() + off;
              for (int c = 0; c < cg; ++c) {
                S ga = gd[g * cg + c];
                for (int t = 0; t < T; ++t) {
                  int64_t i = static_cast<int64_t>(c) * T + t;
                  S gg = gr[i] * ga;
                  xg[i] += is * (gg - sum_gg / gl - xh[i] * sum_ggx / gl);
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax family (last axis, max-subtracted)
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> softmax_last(const TensorT<S>& x) {
  int D = x.dim(-1);
  int64_t rows = x.numel() / D;
  std::vector<S> ov(x.numel());
  const S* xd = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    ECAMap<S> row(xd + r * D, D);
    EAMap<S> out(ov.data() + r * D, D);
    out = (row - row.maxCoeff()).exp();
    out /= out.sum();
  }
  auto px = x.node();
  return detail::make_result<S>(x.shape(), std::move(ov), {x},
                                [px, rows, D](detail::Node<S>& out) {
                                  if (!px->requires_grad) return;
                                  for (int64_t r = 0; r < rows; ++r) {
                                    const S* y = out.value.data() + r * D;
                                    const S* g = out.grad.data() + r * D;
                                    S dot = 0;
                                    for (int i = 0; i < D; ++i) dot += y[i] * g[i];
                                    S* xg = px->grad.data() + r * D;
                                    for (int i = 0; i < D; ++i) xg[i] += y[i] * (g[i] - dot);
                                  }
                                });
}

template <typename S>
TensorT<S> log_softmax_last(const TensorT<S>& x) {
  int D = x.dim(-1);
  int64_t rows = x.numel() / D;
  std::vector<S> ov(x.numel());
  const S* xd = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = xd + r * D;
    S mx = -std::numeric_limits<S>::infinity();
    for (int i = 0; i < D; ++i) mx = std::max(mx, row[i]);
    S sum = 0;
    for (int i = 0; i < D; ++i) sum += std::exp(row[i] - mx);
    S lse = mx + std::log(sum);
    for (int i = 0; i < D; ++i) ov[r * D + i] = row[i] - lse;
  }
  auto px = x.node();
  return detail::make_result<S>(x.shape(), std::move(ov), {x},
                                [px, rows, D](detail::Node<S>& out) {
                                  if (!px->requires_grad) return;
                                  for (int64_t r = 0; r < rows; ++r) {
                                    const S* y = out.value.data() + r * D;
                                    const S* g = out.grad.data() + r * D;
                                    S gsum = 0;
                                    for (int i = 0; i < D; ++i) gsum += g[i];
                                    S* xg = px->grad.data() + r * D;
                                    for (int i = 0; i < D; ++i)
                                      xg[i] += g[i] - std::exp(y[i]) * gsum;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
template <typename S, typename FwdF, typename BwdF>
TensorT<S> unary_op(const TensorT<S>& x, FwdF fwd, BwdF dfdx) {
  std::vector<S> ov(x.data().size());
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(x.data()[i]);
  auto px = x.node();
  return make_result<S>(x.shape(), std::move(ov), {x}, [px, dfdx](Node<S>& out) {
    if (!px->requires_grad) return;
    for (size_t i = 0; i < out.grad.size(); ++i)
      px->grad[i] += out.grad[i] * dfdx(px->value[i], out.value[i]);
  });
}
}  // namespace detail

// Exact (erf-based) GELU, vectorized: the MLP hidden activation is the
// largest elementwise tensor in the encoder, so scalar loops dominate here.
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
  const S inv_sqrt2 = S(0.7071067811865475);
  std::vector<S> ov(x.data().size());
  {
    ECAMap<S> v(x.data().data(), ov.size());
    EAMap<S>(ov.data(), ov.size()) = S(0.5) * v * (S(1) + (v * inv_sqrt2).erf());
  }
  auto px = x.node();
  return detail::make_result<S>(x.shape(), std::move(ov), {x}, [px](detail::Node<S>& out) {
    if (!px->requires_grad) return;
    const S inv_sqrt2 = S(0.7071067811865475);
    const S inv_sqrt2pi = S(0.3989422804014327);
    ECAMap<S> v(px->value.data(), px->value.size());
    ECAMap<S> g(out.grad.data(), out.grad.size());
    EAMap<S> xg(px->grad.data(), px->grad.size());
    auto phi = S(0.5) * (S(1) + (v * inv_sqrt2).erf());
    auto pdf = inv_sqrt2pi * (S(-0.5) * v * v).exp();
    xg += g * (phi + v * pdf);
  });
}

template <typename S>
TensorT<S> mish(const TensorT<S>& x) {
  auto softplus = [](S v) { return v > S(20) ? v : std::log1p(std::exp(v)); };
  return detail::unary_op(
      x, [=](S v) { return v * std::tanh(softplus(v)); },
      [=](S v, S) {
        S sp = softplus(v);
        S th = std::tanh(sp);
        S sig = S(1) / (S(1) + std::exp(-v));
        return th + v * (S(1) - th * th) * sig;
      });
}

template <typename S>
TensorT<S> tanh(const TensorT<S>& x) {
  return detail::unary_op(x, [](S v) { return std::tanh(v); },
                          [](S, S y) { return S(1) - y * y; });
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  return detail::unary_op(x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
                          [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
TensorT<S> exp(const TensorT<S>& x) {
  return detail::unary_op(x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
TensorT<S> log(const TensorT<S>& x) {
  return detail::unary_op(x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <typename S>
TensorT<S> sqrt(const TensorT<S>& x) {
  return detail::unary_op(x, [](S v) { return std::sqrt(v); },
                          [](S, S y) { return S(0.5) / y; });
}

template <typename S>
TensorT<S> square(const TensorT<S>& x) {
  return detail::unary_op(x, [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
  S s = 0;
  for (S v : x.data()) s += v;
  auto px = x.node();
  return detail::make_result<S>({1}, {s}, {x}, [px](detail::Node<S>& out) {
    if (!px->requires_grad) return;
    S g = out.grad[0];
    for (auto& v : px->grad) v += g;
  });
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& x) {
  S s = 0;
  for (S v : x.data()) s += v;
  S n = static_cast<S>(x.numel());
  auto px = x.node();
  return detail::make_result<S>({1}, {s / n}, {x}, [px, n](detail::Node<S>& out) {
    if (!px->requires_grad) return;
    S g = out.grad[0] / n;
    for (auto& v : px->grad) v += g;
  });
}

// Sum over one axis, keeping it as size 1.
template <typename S>
TensorT<S> sum_axis_keep(const TensorT<S>& x, int axis) {
  int r = x.rank();
  if (axis < 0) axis += r;
  Shape os = x.shape();
  int n = os[axis];
  os[axis] = 1;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  std::vector<S> ov(outer * inner, S(0));
  const S* xd = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int k = 0; k < n; ++k)
      for (int64_t i = 0; i < inner; ++i)
        ov[o * inner + i] += xd[(o * n + k) * inner + i];
  auto px = x.node();
  return detail::make_result<S>(os, std::move(ov), {x},
                                [px, outer, inner, n](detail::Node<S>& out) {
                                  if (!px->requires_grad) return;
                                  for (int64_t o = 0; o < outer; ++o)
                                    for (int k = 0; k < n; ++k)
                                      for (int64_t i = 0; i < inner; ++i)
                                        px->grad[(o * n + k) * inner + i] +=
                                            out.grad[o * inner + i];
                                });
}

template <typename S>
TensorT<S> mean_axis_keep(const TensorT<S>& x, int axis) {
  int r = x.rank();
  int ax = axis < 0 ? axis + r : axis;
  return affine(sum_axis_keep(x, ax), S(1) / S(x.shape()[ax]));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  // A single -1 is inferred.
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[infer] = static_cast<int>(x.numel() / known);
  if (shape_numel(shape) != x.numel())
    throw TensorError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<S> ov = x.data();
  auto px = x.node();
  return detail::make_result<S>(std::move(shape), std::move(ov), {x},
                                [px](detail::Node<S>& out) {
                                  if (!px->requires_grad) return;
                                  for (size_t i = 0; i < out.grad.size(); ++i)
                                    px->grad[i] += out.grad[i];
                                });
}

template <typename S>
TensorT<S> permute(const TensorT<S>& x, const std::vector<int>& perm) {
  int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw TensorError("permute: rank mismatch");
  Shape os(r);
  for (int i = 0; i < r; ++i) os[i] = x.shape()[perm[i]];
  std::vector<int64_t> xstr(r, 1);
  for (int i = r - 2; i >= 0; --i) xstr[i] = xstr[i + 1] * x.shape()[i + 1];
  std::vector<int64_t> src_stride(r);
  for (int i = 0; i < r; ++i) src_stride[i] = xstr[perm[i]];
  int64_t n = x.numel();
  std::vector<S> ov(n);
  const S* xd = x.data().data();
  {
    std::vector<int> idx(r, 0);
    int64_t is = 0;
    for (int64_t i = 0; i < n; ++i) {
      ov[i] = xd[is];
      for (int d = r - 1; d >= 0; --d) {
        idx[d]++;
        is += src_stride[d];
        if (idx[d] < os[d]) break;
        idx[d] = 0;
        is -= os[d] * src_stride[d];
      }
    }
  }
  auto px = x.node();
  return detail::make_result<S>(os, std::move(ov), {x},
                                [px, os, src_stride, r, n](detail::Node<S>& out) {
                                  if (!px->requires_grad) return;
                                  std::vector<int> idx(r, 0);
                                  int64_t is = 0;
                                  for (int64_t i = 0; i < n; ++i) {
                                    px->grad[is] += out.grad[i];
                                    for (int d = r - 1; d >= 0; --d) {
                                      idx[d]++;
                                      is += src_stride[d];
                                      if (idx[d] < os[d]) break;
                                      idx[d] = 0;
                                      is -= os[d] * src_stride[d];
                                    }
                                  }
                                });
}

template <typename S>
TensorT<S> slice(const TensorT<S>& x, int axis, int start, int len) {
  int r = x.rank();
  if (axis < 0) axis += r;
  if (start < 0 || len < 0 || start + len > x.shape()[axis])
    throw TensorError("slice: range [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") out of bounds for axis size " +
                      std::to_string(x.shape()[axis]));
  Shape os = x.shape();
  os[axis] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  int n = x.shape()[axis];
  std::vector<S> ov(outer * len * inner);
  const S* xd = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(xd + (o * n + start) * inner, xd + (o * n + start + len) * inner,
              ov.begin() + o * len * inner);
  auto px = x.node();
  return detail::make_result<S>(os, std::move(ov), {x},
                                [px, outer, inner, n, start, len](detail::Node<S>& out) {
                                  if (!px->requires_grad) return;
                                  for (int64_t o = 0; o < outer; ++o)
                                    for (int64_t i = 0; i < len * inner; ++i)
                                      px->grad[(o * n + start) * inner + i] +=
                                          out.grad[o * len * inner + i];
                                });
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& xs, int axis) {
  if (xs.empty()) throw TensorError("concat: empty input list");
  int r = xs[0].rank();
  if (axis < 0) axis += r;
  Shape os = xs[0].shape();
  int total = 0;
  for (const auto& t : xs) {
    for (int i = 0; i < r; ++i)
      if (i != axis && t.shape()[i] != os[i])
        throw TensorError("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                          shape_str(os));
    total += t.shape()[axis];
  }
  os[axis] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= os[i];
  for (int i = axis + 1; i < r; ++i) inner *= os[i];
  std::vector<S> ov(shape_numel(os));
  int64_t off = 0;
  for (const auto& t : xs) {
    int n = t.shape()[axis];
    const S* xd = t.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(xd + o * n * inner, xd + (o + 1) * n * inner,
                ov.begin() + (o * total + off) * inner);
    off += n;
  }
  std::vector<std::shared_ptr<detail::Node<S>>> pnodes;
  std::vector<int> sizes;
  for (const auto& t : xs) {
    pnodes.push_back(t.node());
    sizes.push_back(t.shape()[axis]);
  }
  return detail::make_result<S>(
      os, std::move(ov), xs, [pnodes, sizes, outer, inner, total](detail::Node<S>& out) {
        int64_t off = 0;
        for (size_t pi = 0; pi < pnodes.size(); ++pi) {
          auto& p = pnodes[pi];
          int n = sizes[pi];
          if (p->requires_grad) {
            for (int64_t o = 0; o < outer; ++o)
              for (int64_t i = 0; i < n * inner; ++i)
                p->grad[o * n * inner + i] += out.grad[(o * total + off) * inner + i];
          }
          off += n;
        }
      });
}

// Broadcast x up to `shape` (numpy rules); backward reduces back down.
template <typename S>
TensorT<S> broadcast_to(const TensorT<S>& x, const Shape& shape) {
  Shape chk = detail::broadcast_shapes(x.shape(), shape);
  if (chk != shape)
    throw TensorError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " +
                      shape_str(shape));
  auto st = detail::broadcast_strides(x.shape(), shape);
  std::vector<int64_t> zero(shape.size(), 0);
  std::vector<S> ov(shape_numel(shape));
  const S* xd = x.data().data();
  detail::bc_walk(shape, st, zero, [&](int64_t i, int64_t ia, int64_t) { ov[i] = xd[ia]; });
  auto px = x.node();
  return detail::make_result<S>(shape, std::move(ov), {x},
                                [px, shape, st, zero](detail::Node<S>& out) {
                                  if (!px->requires_grad) return;
                                  detail::bc_walk(shape, st, zero,
                                                  [&](int64_t i, int64_t ia, int64_t) {
                                                    px->grad[ia] += out.grad[i];
                                                  });
                                });
}

// Replicate-pad the last axis on the right.
template <typename S>
TensorT<S> pad_last_replicate(const TensorT<S>& x, int n_right) {
  if (n_right == 0) return x;
  int T = x.dim(-1);
  int64_t rows = x.numel() / T;
  Shape os = x.shape();
  os.back() = T + n_right;
  std::vector<S> ov(rows * (T + n_right));
  const S* xd = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(xd + r * T, xd + (r + 1) * T, ov.begin() + r * (T + n_right));
    for (int i = 0; i < n_right; ++i) ov[r * (T + n_right) + T + i] = xd[r * T + T - 1];
  }
  auto px = x.node();
  return detail::make_result<S>(os, std::move(ov), {x},
                                [px, rows, T, n_right](detail::Node<S>& out) {
                                  if (!px->requires_grad) return;
                                  for (int64_t r = 0; r < rows; ++r) {
                                    for (int i = 0; i < T; ++i)
                                      px->grad[r * T + i] += out.grad[r * (T + n_right) + i];
                                    for (int i = 0; i < n_right; ++i)
                                      px->grad[r * T + T - 1] +=
                                          out.grad[r * (T + n_right) + T + i];
                                  }
                                });
}

// Nearest-neighbour upsample of the last axis by 2.
template <typename S>
TensorT<S> upsample_last_x2(const TensorT<S>& x) {
  int T = x.dim(-1);
  int64_t rows = x.numel() / T;
  Shape os = x.shape();
  os.back() = 2 * T;
  std::vector<S> ov(rows * 2 * T);
  const S* xd = x.data().data();
  for (int64_t r = 0; r < rows; ++r)
    for (int i = 0; i < T; ++i) {
      ov[r * 2 * T + 2 * i] = xd[r * T + i];
      ov[r * 2 * T + 2 * i + 1] = xd[r * T + i];
    }
  auto px = x.node();
  return detail::make_result<S>(os, std::move(ov), {x}, [px, rows, T](detail::Node<S>& out) {
    if (!px->requires_grad) return;
    for (int64_t r = 0; r < rows; ++r)
      for (int i = 0; i < T; ++i)
        px->grad[r * T + i] += out.grad[r * 2 * T + 2 * i] + out.grad[r * 2 * T + 2 * i + 1];
  });
}

// Inverted dropout; callers invoke this on the training path only.
template <typename S>
TensorT<S> dropout(const TensorT<S>& x, S p, Rng& rng) {
  if (p <= S(0)) return x;
  S keep = S(1) - p;
  auto mask = std::make_shared<std::vector<S>>(x.data().size());
  std::vector<S> ov(x.data().size());
  for (size_t i = 0; i < ov.size(); ++i) {
    S m = rng.uniform() >= p ? S(1) / keep : S(0);
    (*mask)[i] = m;
    ov[i] = x.data()[i] * m;
  }
  auto px = x.node();
  return detail::make_result<S>(x.shape(), std::move(ov), {x}, [px, mask](detail::Node<S>& out) {
    if (!px->requires_grad) return;
    for (size_t i = 0; i < out.grad.size(); ++i) px->grad[i] += out.grad[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Additive bias tensor from a mask: 0 where allowed, -inf where not.
template <typename S>
TensorT<S> mask_bias(const AttentionMask& mask) {
  std::vector<S> b(mask.allowed.size());
  const S ninf = -std::numeric_limits<S>::infinity();
  for (size_t i = 0; i < b.size(); ++i) b[i] = mask.allowed[i] ? S(0) : ninf;
  return TensorT<S>::from_data({mask.rows, mask.cols}, std::move(b));
}

// Q:[h,n,d], K:[h,m,d], V:[h,m,d] -> [h,n,d]. Masked logits get -inf before
// the (max-subtracted) softmax.
template <typename S>
TensorT<S> scaled_dot_product_attention(const TensorT<S>& q, const TensorT<S>& k,
                                        const TensorT<S>& v,
                                        const AttentionMask* mask = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
    throw TensorError("attention: expected [h,n,d] inputs");
  int h = q.dim(0), n = q.dim(1), d = q.dim(2);
  int m = k.dim(1);
  if (k.dim(0) != h || v.dim(0) != h || k.dim(2) != d || v.dim(1) != m)
    throw TensorError("attention: inconsistent shapes Q" + shape_str(q.shape()) + " K" +
                      shape_str(k.shape()) + " V" + shape_str(v.shape()));
  if (mask) {
    if (mask->rows != n || mask->cols != m)
      throw TensorError("attention: mask " + std::to_string(mask->rows) + "x" +
                        std::to_string(mask->cols) + " does not match n=" + std::to_string(n) +
                        " m=" + std::to_string(m));
    mask->validate();
  }
  TensorT<S> logits = matmul(q, permute(k, {0, 2, 1}));
  logits = affine(logits, S(1) / std::sqrt(S(d)));
  if (mask) logits = add(logits, mask_bias<S>(*mask));
  TensorT<S> attn = softmax_last(logits);
  return matmul(attn, v);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
  auto d = sub(a, b);
  return mean_all(mul(d, d));
}

}  // namespace cdp
