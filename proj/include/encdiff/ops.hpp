#pragma once

#include "encdiff/rng.hpp"
#include "encdiff/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace encdiff::ag {

template <typename Scalar>
using MatRow = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapRow = Eigen::Map<MatRow<Scalar>>;
template <typename Scalar>
using CMapRow = Eigen::Map<const MatRow<Scalar>>;

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

inline Eigen::Index spatial_size(const Shape& s) {
  Eigen::Index n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return make_result<Scalar>(a.shape(), a.value() + b.value(), {a, b}, [](Node<Scalar>& n) {
    if (n.input_needs_grad(0)) n.input(0)->grad += n.grad;
    if (n.input_needs_grad(1)) n.input(1)->grad += n.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  return make_result<Scalar>(a.shape(), a.value() * s, {a}, [s](Node<Scalar>& n) { n.input(0)->grad += s * n.grad; });
}

/// x[N, C, ...] + v[N, C] broadcast over trailing dims.
template <typename Scalar>
Tensor<Scalar> add_channel_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& v) {
  detail::require(x.rank() >= 2 && v.rank() == 2 && v.dim(0) == x.dim(0) && v.dim(1) == x.dim(1),
                  "add_channel_bias: shape mismatch");
  const Eigen::Index S = detail::spatial_size(x.shape());
  const Eigen::Index NC = v.size();
  Array<Scalar> out = x.value();
  for (Eigen::Index i = 0; i < NC; ++i) out.segment(i * S, S) += v.value()[i];
  return make_result<Scalar>(x.shape(), std::move(out), {x, v}, [S, NC](Node<Scalar>& n) {
    if (n.input_needs_grad(0)) n.input(0)->grad += n.grad;
    if (n.input_needs_grad(1))
      for (Eigen::Index i = 0; i < NC; ++i) n.input(1)->grad[i] += n.grad.segment(i * S, S).sum();
  });
}

/// y = x * scale + shift with scale, shift of shape [N, C].
template <typename Scalar>
Tensor<Scalar> modulate(const Tensor<Scalar>& x, const Tensor<Scalar>& scale_nc, const Tensor<Scalar>& shift_nc) {
  detail::require(x.rank() >= 2 && scale_nc.shape() == Shape{x.dim(0), x.dim(1)} && shift_nc.shape() == scale_nc.shape(),
                  "modulate: channel mismatch");
  const Eigen::Index S = detail::spatial_size(x.shape());
  const Eigen::Index NC = scale_nc.size();
  Array<Scalar> out(x.size());
  for (Eigen::Index i = 0; i < NC; ++i)
    out.segment(i * S, S) = x.value().segment(i * S, S) * scale_nc.value()[i] + shift_nc.value()[i];
  return make_result<Scalar>(x.shape(), std::move(out), {x, scale_nc, shift_nc}, [S, NC](Node<Scalar>& n) {
    const auto& g = n.grad;
    const auto& xv = n.input(0)->value;
    const auto& sv = n.input(1)->value;
    for (Eigen::Index i = 0; i < NC; ++i) {
      const auto gs = g.segment(i * S, S);
      if (n.input_needs_grad(0)) n.input(0)->grad.segment(i * S, S) += gs * sv[i];
      if (n.input_needs_grad(1)) n.input(1)->grad[i] += (gs * xv.segment(i * S, S)).sum();
      if (n.input_needs_grad(2)) n.input(2)->grad[i] += gs.sum();
    }
  });
}

template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) {
  const Array<Scalar> sig = (Scalar(1) + (-x.value()).exp()).inverse();
  Array<Scalar> out = x.value() * sig;
  return make_result<Scalar>(x.shape(), std::move(out), {x}, [sig](Node<Scalar>& n) {
    const auto& xv = n.input(0)->value;
    n.input(0)->grad += n.grad * sig * (Scalar(1) + xv * (Scalar(1) - sig));
  });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return make_result<Scalar>(x.shape(), x.value().max(Scalar(0)), {x}, [](Node<Scalar>& n) {
    n.input(0)->grad += (n.input(0)->value > Scalar(0)).select(n.grad, Scalar(0));
  });
}

/// x[..., I] W[O, I]^T + b[O]
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  const int I = w.dim(1), O = w.dim(0);
  detail::require(x.shape().back() == I, "linear: input width " + std::to_string(x.shape().back()) + " != " + std::to_string(I));
  const Eigen::Index M = x.size() / I;
  Shape out_shape = x.shape();
  out_shape.back() = O;
  Array<Scalar> out(M * O);
  MapRow<Scalar> Y(out.data(), M, O);
  CMapRow<Scalar> X(x.data(), M, I), W(w.data(), O, I);
  Y.noalias() = X * W.transpose();
  if (b) Y.rowwise() += b.value().matrix().transpose();
  return make_result<Scalar>(std::move(out_shape), std::move(out), {x, w, b}, [M, I, O](Node<Scalar>& n) {
    CMapRow<Scalar> G(n.grad.data(), M, O);
    if (n.input_needs_grad(0)) {
      MapRow<Scalar> GX(n.input(0)->grad.data(), M, I);
      GX.noalias() += G * CMapRow<Scalar>(n.input(1)->value.data(), O, I);
    }
    if (n.input_needs_grad(1)) {
      MapRow<Scalar> GW(n.input(1)->grad.data(), O, I);
      GW.noalias() += G.transpose() * CMapRow<Scalar>(n.input(0)->value.data(), M, I);
    }
    if (n.input_needs_grad(2)) n.input(2)->grad += G.colwise().sum().transpose().array();
  });
}

/// Independent per-group affine maps: y[b, g] = W[g] x[b, g] + bias[g].
/// x[B, G, I], W[G, O, I], bias[G, O].
template <typename Scalar>
Tensor<Scalar> grouped_linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  detail::require(x.rank() == 3 && w.rank() == 3 && x.dim(1) == w.dim(0) && x.dim(2) == w.dim(2),
                  "grouped_linear: shape mismatch");
  const int B = x.dim(0), G = x.dim(1), I = x.dim(2), O = w.dim(1);
  Array<Scalar> out(static_cast<Eigen::Index>(B) * G * O);
  for (int bi = 0; bi < B; ++bi)
    for (int g = 0; g < G; ++g) {
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> y(out.data() + (static_cast<Eigen::Index>(bi) * G + g) * O, O);
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> xv(x.data() + (static_cast<Eigen::Index>(bi) * G + g) * I, I);
      y.noalias() = CMapRow<Scalar>(w.data() + static_cast<Eigen::Index>(g) * O * I, O, I) * xv;
      y += b.value().segment(static_cast<Eigen::Index>(g) * O, O).matrix();
    }
  return make_result<Scalar>({B, G, O}, std::move(out), {x, w, b}, [B, G, I, O](Node<Scalar>& n) {
    for (int bi = 0; bi < B; ++bi)
      for (int g = 0; g < G; ++g) {
        const Eigen::Index xo = (static_cast<Eigen::Index>(bi) * G + g) * I;
        const Eigen::Index yo = (static_cast<Eigen::Index>(bi) * G + g) * O;
        Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> gy(n.grad.data() + yo, O);
        CMapRow<Scalar> W(n.input(1)->value.data() + static_cast<Eigen::Index>(g) * O * I, O, I);
        if (n.input_needs_grad(0))
          Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(n.input(0)->grad.data() + xo, I).noalias() += W.transpose() * gy;
        if (n.input_needs_grad(1)) {
          Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> xv(n.input(0)->value.data() + xo, I);
          MapRow<Scalar>(n.input(1)->grad.data() + static_cast<Eigen::Index>(g) * O * I, O, I).noalias() += gy * xv.transpose();
        }
        if (n.input_needs_grad(2)) n.input(2)->grad.segment(static_cast<Eigen::Index>(g) * O, O) += gy.array();
      }
  });
}

namespace detail {

struct ConvGeom {
  int C, H, W, K, stride, pad, Ho, Wo;
};

// Output columns [lo, hi) whose input column ox * stride - pad + kx lies inside [0, W).
inline void valid_range(const ConvGeom& g, int kx, int& lo, int& hi) {
  const int off = kx - g.pad;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = g.W - 1 - off < 0 ? 0 : std::min(g.Wo, (g.W - 1 - off) / g.stride + 1);
  if (hi < lo) hi = lo;
}

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeom& g, Scalar* cols) {
  const int L = g.Ho * g.Wo;
  for (int c = 0; c < g.C; ++c)
    for (int ky = 0; ky < g.K; ++ky)
      for (int kx = 0; kx < g.K; ++kx) {
        Scalar* row = cols + (static_cast<Eigen::Index>(c * g.K + ky) * g.K + kx) * L;
        int lo, hi;
        valid_range(g, kx, lo, hi);
        const int off = kx - g.pad;
        for (int oy = 0; oy < g.Ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          Scalar* dst = row + oy * g.Wo;
          if (iy < 0 || iy >= g.H) {
            std::fill(dst, dst + g.Wo, Scalar(0));
            continue;
          }
          const Scalar* src = x + (static_cast<Eigen::Index>(c) * g.H + iy) * g.W + off;
          std::fill(dst, dst + lo, Scalar(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.Wo, Scalar(0));
        }
      }
}

template <typename Scalar>
void col2im_add(const Scalar* cols, const ConvGeom& g, Scalar* x) {
  const int L = g.Ho * g.Wo;
  for (int c = 0; c < g.C; ++c)
    for (int ky = 0; ky < g.K; ++ky)
      for (int kx = 0; kx < g.K; ++kx) {
        const Scalar* row = cols + (static_cast<Eigen::Index>(c * g.K + ky) * g.K + kx) * L;
        int lo, hi;
        valid_range(g, kx, lo, hi);
        const int off = kx - g.pad;
        for (int oy = 0; oy < g.Ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.H) continue;
          Scalar* dst = x + (static_cast<Eigen::Index>(c) * g.H + iy) * g.W + off;
          const Scalar* src = row + oy * g.Wo;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b, int stride, int pad) {
  detail::require(x.rank() == 4 && w.rank() == 4 && w.dim(1) == x.dim(1) && w.dim(2) == w.dim(3),
                  "conv2d: shape mismatch " + shape_str(x.shape()) + " * " + shape_str(w.shape()));
  const int N = x.dim(0), O = w.dim(0);
  detail::ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad, 0, 0};
  g.Ho = (g.H + 2 * pad - g.K) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.K) / stride + 1;
  const Eigen::Index CKK = static_cast<Eigen::Index>(g.C) * g.K * g.K, L = static_cast<Eigen::Index>(g.Ho) * g.Wo;
  const Eigen::Index in_sz = static_cast<Eigen::Index>(g.C) * g.H * g.W;
  const bool pointwise = g.K == 1 && stride == 1 && pad == 0;
  Array<Scalar> out(static_cast<Eigen::Index>(N) * O * L);
  Array<Scalar> cols(pointwise ? 0 : CKK * L);
  CMapRow<Scalar> Wm(w.data(), O, CKK);
  for (int n = 0; n < N; ++n) {
    const Scalar* xn = x.data() + n * in_sz;
    if (!pointwise) detail::im2col(xn, g, cols.data());
    CMapRow<Scalar> Cm(pointwise ? xn : cols.data(), CKK, L);
    MapRow<Scalar> Y(out.data() + static_cast<Eigen::Index>(n) * O * L, O, L);
    Y.noalias() = Wm * Cm;
    if (b) Y.colwise() += b.value().matrix();
  }
  return make_result<Scalar>({N, O, g.Ho, g.Wo}, std::move(out), {x, w, b},
                             [g, N, O, CKK, L, in_sz, pointwise](Node<Scalar>& nd) {
    const Node<Scalar>* xin = nd.input(0);
    const Node<Scalar>* win = nd.input(1);
    CMapRow<Scalar> Wm(win->value.data(), O, CKK);
    Array<Scalar> cols(pointwise ? 0 : CKK * L), gcols(pointwise ? 0 : CKK * L);
    for (int n = 0; n < N; ++n) {
      CMapRow<Scalar> G(nd.grad.data() + static_cast<Eigen::Index>(n) * O * L, O, L);
      if (nd.input_needs_grad(1)) {
        const Scalar* xn = xin->value.data() + n * in_sz;
        if (!pointwise) detail::im2col(xn, g, cols.data());
        CMapRow<Scalar> Cm(pointwise ? xn : cols.data(), CKK, L);
        MapRow<Scalar>(nd.input(1)->grad.data(), O, CKK).noalias() += G * Cm.transpose();
      }
      if (nd.input_needs_grad(0)) {
        if (pointwise) {
          MapRow<Scalar>(nd.input(0)->grad.data() + n * in_sz, CKK, L).noalias() += Wm.transpose() * G;
        } else {
          MapRow<Scalar>(gcols.data(), CKK, L).noalias() = Wm.transpose() * G;
          detail::col2im_add(gcols.data(), g, nd.input(0)->grad.data() + n * in_sz);
        }
      }
      if (nd.input_needs_grad(2)) nd.input(2)->grad += G.rowwise().sum().array();
    }
  });
}

/// Group normalization over (C / groups) x spatial per sample, with optional
/// per-channel affine parameters.
template <typename Scalar>
Tensor<Scalar> group_norm(const Tensor<Scalar>& x, int groups, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5)) {
  detail::require(x.rank() >= 2 && x.dim(1) % groups == 0, "group_norm: channels not divisible by groups");
  const int N = x.dim(0), C = x.dim(1), cpg = C / groups;
  const Eigen::Index S = detail::spatial_size(x.shape());
  const Eigen::Index gsz = cpg * S;
  Array<Scalar> xhat(x.size()), rstd(static_cast<Eigen::Index>(N) * groups);
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(N) * groups; ++k) {
    const auto seg = x.value().segment(k * gsz, gsz);
    const Scalar mean = seg.mean();
    const Scalar var = (seg - mean).square().mean();
    rstd[k] = Scalar(1) / std::sqrt(var + eps);
    xhat.segment(k * gsz, gsz) = (seg - mean) * rstd[k];
  }
  Array<Scalar> out = xhat;
  if (gamma) {
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        auto seg = out.segment((static_cast<Eigen::Index>(n) * C + c) * S, S);
        seg = seg * gamma.value()[c] + (beta ? beta.value()[c] : Scalar(0));
      }
  }
  return make_result<Scalar>(x.shape(), std::move(out), {x, gamma, beta},
                             [xhat, rstd, N, C, groups, cpg, S, gsz](Node<Scalar>& nd) {
    Array<Scalar> gxhat = nd.grad;
    if (nd.inputs[1]) {
      const auto& gm = nd.input(1)->value;
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const Eigen::Index o = (static_cast<Eigen::Index>(n) * C + c) * S;
          if (nd.input_needs_grad(1)) nd.input(1)->grad[c] += (nd.grad.segment(o, S) * xhat.segment(o, S)).sum();
          if (nd.input_needs_grad(2)) nd.input(2)->grad[c] += nd.grad.segment(o, S).sum();
          gxhat.segment(o, S) *= gm[c];
        }
    }
    if (nd.input_needs_grad(0)) {
      for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(N) * groups; ++k) {
        const auto gh = gxhat.segment(k * gsz, gsz);
        const auto xh = xhat.segment(k * gsz, gsz);
        const Scalar m1 = gh.mean(), m2 = (gh * xh).mean();
        nd.input(0)->grad.segment(k * gsz, gsz) += rstd[k] * (gh - m1 - xh * m2);
      }
    }
    (void)cpg;
  });
}

/// Concatenate along dim 1 for tensors [N, Ca, ...] and [N, Cb, ...].
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.rank() == b.rank() && a.dim(0) == b.dim(0) && detail::spatial_size(a.shape()) == detail::spatial_size(b.shape()),
                  "concat_channels: shape mismatch");
  const int N = a.dim(0);
  const Eigen::Index sa = a.size() / N, sb = b.size() / N;
  Array<Scalar> out(a.size() + b.size());
  for (int n = 0; n < N; ++n) {
    out.segment(n * (sa + sb), sa) = a.value().segment(n * sa, sa);
    out.segment(n * (sa + sb) + sa, sb) = b.value().segment(n * sb, sb);
  }
  Shape s = a.shape();
  s[1] += b.dim(1);
  return make_result<Scalar>(std::move(s), std::move(out), {a, b}, [N, sa, sb](Node<Scalar>& nd) {
    for (int n = 0; n < N; ++n) {
      if (nd.input_needs_grad(0)) nd.input(0)->grad.segment(n * sa, sa) += nd.grad.segment(n * (sa + sb), sa);
      if (nd.input_needs_grad(1)) nd.input(1)->grad.segment(n * sb, sb) += nd.grad.segment(n * (sa + sb) + sa, sb);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest2x(const Tensor<Scalar>& x) {
  detail::require(x.rank() == 4, "upsample: expects NCHW");
  const int NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Array<Scalar> out(static_cast<Eigen::Index>(NC) * 4 * H * W);
  for (int p = 0; p < NC; ++p)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        out[(static_cast<Eigen::Index>(p) * 2 * H + y) * 2 * W + xx] = x.value()[(static_cast<Eigen::Index>(p) * H + y / 2) * W + xx / 2];
  return make_result<Scalar>({x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(out), {x}, [NC, H, W](Node<Scalar>& nd) {
    auto& gx = nd.input(0)->grad;
    for (int p = 0; p < NC; ++p)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx)
          gx[(static_cast<Eigen::Index>(p) * H + y / 2) * W + xx / 2] += nd.grad[(static_cast<Eigen::Index>(p) * 2 * H + y) * 2 * W + xx];
  });
}

/// [N, C, H, W] -> [N, H*W, C]
template <typename Scalar>
Tensor<Scalar> to_sequence(const Tensor<Scalar>& x) {
  const int N = x.dim(0), C = x.dim(1);
  const int L = x.dim(2) * x.dim(3);
  Array<Scalar> out(x.size());
  for (int n = 0; n < N; ++n)
    MapRow<Scalar>(out.data() + static_cast<Eigen::Index>(n) * L * C, L, C) =
        CMapRow<Scalar>(x.data() + static_cast<Eigen::Index>(n) * L * C, C, L).transpose();
  return make_result<Scalar>({N, L, C}, std::move(out), {x}, [N, C, L](Node<Scalar>& nd) {
    for (int n = 0; n < N; ++n)
      MapRow<Scalar>(nd.input(0)->grad.data() + static_cast<Eigen::Index>(n) * L * C, C, L) +=
          CMapRow<Scalar>(nd.grad.data() + static_cast<Eigen::Index>(n) * L * C, L, C).transpose();
  });
}

/// [N, H*W, C] -> [N, C, H, W]
template <typename Scalar>
Tensor<Scalar> from_sequence(const Tensor<Scalar>& s, int H, int W) {
  const int N = s.dim(0), L = s.dim(1), C = s.dim(2);
  detail::require(L == H * W, "from_sequence: length mismatch");
  Array<Scalar> out(s.size());
  for (int n = 0; n < N; ++n)
    MapRow<Scalar>(out.data() + static_cast<Eigen::Index>(n) * L * C, C, L) =
        CMapRow<Scalar>(s.data() + static_cast<Eigen::Index>(n) * L * C, L, C).transpose();
  return make_result<Scalar>({N, C, H, W}, std::move(out), {s}, [N, C, L](Node<Scalar>& nd) {
    for (int n = 0; n < N; ++n)
      MapRow<Scalar>(nd.input(0)->grad.data() + static_cast<Eigen::Index>(n) * L * C, L, C) +=
          CMapRow<Scalar>(nd.grad.data() + static_cast<Eigen::Index>(n) * L * C, C, L).transpose();
  });
}

/// Head-averaged attention weights of one call: [B, L, S] row-major.
struct AttentionWeights {
  int batch = 0, queries = 0, keys = 0;
  std::vector<double> weights;
};

/// Multi-head scaled dot-product attention. q[B, L, D], k/v[B, S, D]; the
/// feature dim is split into `heads` contiguous slices.
template <typename Scalar>
Tensor<Scalar> attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v, int heads,
                         AttentionWeights* capture = nullptr) {
  detail::require(q.rank() == 3 && k.rank() == 3 && v.shape() == k.shape() && q.dim(0) == k.dim(0) && q.dim(2) == k.dim(2),
                  "attention: shape mismatch");
  detail::require(k.dim(1) >= 1, "attention: needs at least one key");
  const int B = q.dim(0), L = q.dim(1), S = k.dim(1), D = q.dim(2);
  detail::require(D % heads == 0, "attention: dim not divisible by heads");
  const int dh = D / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  using Strided = Eigen::Map<const MatRow<Scalar>, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<MatRow<Scalar>, 0, Eigen::OuterStride<>>;

  Array<Scalar> probs(static_cast<Eigen::Index>(B) * heads * L * S);
  Array<Scalar> out(q.size());
  if (capture) {
    capture->batch = B;
    capture->queries = L;
    capture->keys = S;
    capture->weights.assign(static_cast<std::size_t>(B) * L * S, 0.0);
  }
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h) {
      Strided Q(q.data() + static_cast<Eigen::Index>(b) * L * D + h * dh, L, dh, Eigen::OuterStride<>(D));
      Strided K(k.data() + static_cast<Eigen::Index>(b) * S * D + h * dh, S, dh, Eigen::OuterStride<>(D));
      Strided V(v.data() + static_cast<Eigen::Index>(b) * S * D + h * dh, S, dh, Eigen::OuterStride<>(D));
      MapRow<Scalar> P(probs.data() + (static_cast<Eigen::Index>(b) * heads + h) * L * S, L, S);
      P.noalias() = (Q * K.transpose()) * inv_sqrt;
      for (int i = 0; i < L; ++i) {
        auto row = P.row(i).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
      }
      StridedMut(out.data() + static_cast<Eigen::Index>(b) * L * D + h * dh, L, dh, Eigen::OuterStride<>(D)).noalias() = P * V;
      if (capture) {
        double* dst = capture->weights.data() + static_cast<std::size_t>(b) * L * S;
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(L) * S; ++i)
          dst[i] += static_cast<double>(P.data()[i]) / heads;
      }
    }
  return make_result<Scalar>(q.shape(), std::move(out), {q, k, v}, [probs, B, L, S, D, heads, dh, inv_sqrt](Node<Scalar>& nd) {
    const Scalar* qv = nd.input(0)->value.data();
    const Scalar* kv = nd.input(1)->value.data();
    const Scalar* vv = nd.input(2)->value.data();
    MatRow<Scalar> dP(L, S), dZ(L, S);
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < heads; ++h) {
        const Eigen::Index qo = static_cast<Eigen::Index>(b) * L * D + h * dh;
        const Eigen::Index ko = static_cast<Eigen::Index>(b) * S * D + h * dh;
        Strided Q(qv + qo, L, dh, Eigen::OuterStride<>(D));
        Strided K(kv + ko, S, dh, Eigen::OuterStride<>(D));
        Strided V(vv + ko, S, dh, Eigen::OuterStride<>(D));
        Strided G(nd.grad.data() + qo, L, dh, Eigen::OuterStride<>(D));
        CMapRow<Scalar> P(probs.data() + (static_cast<Eigen::Index>(b) * heads + h) * L * S, L, S);
        if (nd.input_needs_grad(2))
          StridedMut(nd.input(2)->grad.data() + ko, S, dh, Eigen::OuterStride<>(D)).noalias() += P.transpose() * G;
        dP.noalias() = G * V.transpose();
        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot = (dP.array() * P.array()).rowwise().sum();
        dZ = (P.array() * (dP.array().colwise() - rowdot.array())) * inv_sqrt;
        if (nd.input_needs_grad(0))
          StridedMut(nd.input(0)->grad.data() + qo, L, dh, Eigen::OuterStride<>(D)).noalias() += dZ * K;
        if (nd.input_needs_grad(1))
          StridedMut(nd.input(1)->grad.data() + ko, S, dh, Eigen::OuterStride<>(D)).noalias() += dZ.transpose() * Q;
      }
  });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  detail::require(numel(shape) == x.size(), "reshape: size mismatch");
  return make_result<Scalar>(std::move(shape), x.value(), {x}, [](Node<Scalar>& nd) { nd.input(0)->grad += nd.grad; });
}

/// Inverted dropout with keep-probability 1 - p.
template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - p));
  Array<Scalar> mask(x.size());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() >= p ? keep_scale : Scalar(0);
  return make_result<Scalar>(x.shape(), x.value() * mask, {x}, [mask](Node<Scalar>& nd) { nd.input(0)->grad += nd.grad * mask; });
}

/// Broadcast a [1, ...] tensor to [N, ...].
template <typename Scalar>
Tensor<Scalar> repeat_batch(const Tensor<Scalar>& x, int N) {
  detail::require(x.dim(0) == 1, "repeat_batch: leading dim must be 1");
  const Eigen::Index s = x.size();
  Array<Scalar> out(s * N);
  for (int n = 0; n < N; ++n) out.segment(n * s, s) = x.value();
  Shape shape = x.shape();
  shape[0] = N;
  return make_result<Scalar>(std::move(shape), std::move(out), {x}, [N, s](Node<Scalar>& nd) {
    for (int n = 0; n < N; ++n) nd.input(0)->grad += nd.grad.segment(n * s, s);
  });
}

/// mean((a - b)^2) over all elements.
template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.size() == b.size(), "mse: size mismatch");
  const Array<Scalar> diff = a.value() - b.value();
  const Scalar n = static_cast<Scalar>(diff.size());
  Array<Scalar> out = Array<Scalar>::Constant(1, diff.square().sum() / n);
  return make_result<Scalar>({1}, std::move(out), {a, b}, [diff, n](Node<Scalar>& nd) {
    const Scalar g = nd.grad[0] * Scalar(2) / n;
    if (nd.input_needs_grad(0)) nd.input(0)->grad += g * diff;
    if (nd.input_needs_grad(1)) nd.input(1)->grad -= g * diff;
  });
}

/// sum_i x_i w_i with a constant weight vector; used to probe gradients.
template <typename Scalar>
Tensor<Scalar> weighted_sum(const Tensor<Scalar>& x, const Array<Scalar>& w) {
  detail::require(x.size() == w.size(), "weighted_sum: size mismatch");
  Array<Scalar> out = Array<Scalar>::Constant(1, (x.value() * w).sum());
  return make_result<Scalar>({1}, std::move(out), {x}, [w](Node<Scalar>& nd) { nd.input(0)->grad += nd.grad[0] * w; });
}

}  // namespace encdiff::ag
