#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "wsl/tape.hpp"

namespace wsl {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {

// im2col for one image: x[C,H,W] -> col[C*kh*kw, Ho*Wo].
template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t sh, int64_t sw, int64_t ph, int64_t pw, int64_t Ho, int64_t Wo, T* col) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* crow = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (int64_t ho = 0; ho < Ho; ++ho) {
          int64_t hi = ho * sh - ph + ki;
          if (hi < 0 || hi >= H) {
            std::fill(crow + ho * Wo, crow + (ho + 1) * Wo, T(0));
            continue;
          }
          const T* xrow = x + (c * H + hi) * W;
          for (int64_t wo = 0; wo < Wo; ++wo) {
            int64_t wi = wo * sw - pw + kj;
            crow[ho * Wo + wo] = (wi >= 0 && wi < W) ? xrow[wi] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t sh, int64_t sw, int64_t ph, int64_t pw, int64_t Ho, int64_t Wo, T* x) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* crow = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (int64_t ho = 0; ho < Ho; ++ho) {
          int64_t hi = ho * sh - ph + ki;
          if (hi < 0 || hi >= H) continue;
          T* xrow = x + (c * H + hi) * W;
          for (int64_t wo = 0; wo < Wo; ++wo) {
            int64_t wi = wo * sw - pw + kj;
            if (wi >= 0 && wi < W) xrow[wi] += crow[ho * Wo + wo];
          }
        }
      }
    }
  }
}

template <typename T>
void stable_log_softmax_row(const T* in, int64_t n, T inv_temp, T* out) {
  T mx = in[0] * inv_temp;
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i] * inv_temp);
  T sum = T(0);
  for (int64_t i = 0; i < n; ++i) sum += std::exp(in[i] * inv_temp - mx);
  T lse = mx + std::log(sum);
  for (int64_t i = 0; i < n; ++i) out[i] = in[i] * inv_temp - lse;
}

}  // namespace detail

// y = conv2d(x[N,C,H,W], w[Co,C,kh,kw]) + b[Co], stride (sh,sw), zero pad (ph,pw).
// One GEMM per image; im2col is recomputed in the backward pass to keep
// tape memory proportional to activations, not unrolled patches.
template <typename T>
Var conv2d(Tape<T>& tp, Var x, Var w, Var b, int64_t sh = 1, int64_t sw = 1,
           int64_t ph = 0, int64_t pw = 0) {
  const auto& xv = tp.val(x);
  const auto& wv = tp.val(w);
  if (xv.rank() != 4 || wv.rank() != 4) throw Error("conv2d: expect NCHW input and OIHW weight");
  int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != C) throw Error("conv2d: channel mismatch");
  int64_t Ho = (H + 2 * ph - kh) / sh + 1;
  int64_t Wo = (W + 2 * pw - kw) / sw + 1;
  if (Ho <= 0 || Wo <= 0) throw Error("conv2d: output would be empty");
  int64_t K = C * kh * kw;

  Tensor<T> out({N, Co, Ho, Wo});
  std::vector<T> col(static_cast<size_t>(K * Ho * Wo));
  ECMap<T> wm(wv.data(), Co, K);
  for (int64_t n = 0; n < N; ++n) {
    detail::im2col(xv.data() + n * C * H * W, C, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo, col.data());
    ECMap<T> cm(col.data(), K, Ho * Wo);
    EMap<T> om(out.data() + n * Co * Ho * Wo, Co, Ho * Wo);
    om.noalias() = wm * cm;
  }
  if (b.valid()) {
    const auto& bv = tp.val(b);
    if (bv.numel() != Co) throw Error("conv2d: bias size mismatch");
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < Co; ++c) {
        T* p = out.data() + (n * Co + c) * Ho * Wo;
        T bc = bv[c];
        for (int64_t i = 0; i < Ho * Wo; ++i) p[i] += bc;
      }
  }

  bool rg = tp.requires_grad(x) || tp.requires_grad(w) || (b.valid() && tp.requires_grad(b));
  Var y = tp.make_node(std::move(out), rg);
  if (rg) {
    tp.add_backward([&tp, x, w, b, y, N, C, H, W, Co, kh, kw, sh, sw, ph, pw, Ho, Wo, K] {
      const Tensor<T>& g = tp.grad_accum(y);
      const auto& xv = tp.val(x);
      const auto& wv = tp.val(w);
      ECMap<T> wm(wv.data(), Co, K);
      std::vector<T> col(static_cast<size_t>(K * Ho * Wo));
      Tensor<T>* gx = tp.requires_grad(x) ? &tp.grad_accum(x) : nullptr;
      Tensor<T>* gw = tp.requires_grad(w) ? &tp.grad_accum(w) : nullptr;
      EMap<T> gwm(gw ? gw->data() : nullptr, gw ? Co : 0, gw ? K : 0);
      for (int64_t n = 0; n < N; ++n) {
        ECMap<T> gm(g.data() + n * Co * Ho * Wo, Co, Ho * Wo);
        if (gw) {
          detail::im2col(xv.data() + n * C * H * W, C, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo,
                         col.data());
          ECMap<T> cm(col.data(), K, Ho * Wo);
          gwm.noalias() += gm * cm.transpose();
        }
        if (gx) {
          EMap<T> cm(col.data(), K, Ho * Wo);
          cm.noalias() = wm.transpose() * gm;
          detail::col2im_add(col.data(), C, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo,
                             gx->data() + n * C * H * W);
        }
      }
      if (b.valid() && tp.requires_grad(b)) {
        Tensor<T>& gb = tp.grad_accum(b);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < Co; ++c) {
            const T* p = g.data() + (n * Co + c) * Ho * Wo;
            T s = T(0);
            for (int64_t i = 0; i < Ho * Wo; ++i) s += p[i];
            gb[c] += s;
          }
      }
    });
  }
  return y;
}

// y = x[N,in] * w[out,in]^T + b[out]
template <typename T>
Var linear(Tape<T>& tp, Var x, Var w, Var b) {
  const auto& xv = tp.val(x);
  const auto& wv = tp.val(w);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
    throw Error("linear: shape mismatch " + xv.shape_str() + " vs " + wv.shape_str());
  int64_t N = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  Tensor<T> yv({N, out});
  ECMap<T> xm(xv.data(), N, in), wm(wv.data(), out, in);
  EMap<T> ym(yv.data(), N, out);
  ym.noalias() = xm * wm.transpose();
  if (b.valid()) {
    const auto& bv = tp.val(b);
    if (bv.numel() != out) throw Error("linear: bias size mismatch");
    for (int64_t n = 0; n < N; ++n)
      for (int64_t o = 0; o < out; ++o) yv.at2(n, o) += bv[o];
  }
  bool rg = tp.requires_grad(x) || tp.requires_grad(w) || (b.valid() && tp.requires_grad(b));
  Var y = tp.make_node(std::move(yv), rg);
  if (rg) {
    tp.add_backward([&tp, x, w, b, y, N, in, out] {
      const Tensor<T>& g = tp.grad_accum(y);
      ECMap<T> gm(g.data(), N, out);
      if (tp.requires_grad(x)) {
        ECMap<T> wm(tp.val(w).data(), out, in);
        EMap<T> gx(tp.grad_accum(x).data(), N, in);
        gx.noalias() += gm * wm;
      }
      if (tp.requires_grad(w)) {
        ECMap<T> xm(tp.val(x).data(), N, in);
        EMap<T> gw(tp.grad_accum(w).data(), out, in);
        gw.noalias() += gm.transpose() * xm;
      }
      if (b.valid() && tp.requires_grad(b)) {
        Tensor<T>& gb = tp.grad_accum(b);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t o = 0; o < out; ++o) gb[o] += g.at2(n, o);
      }
    });
  }
  return y;
}

template <typename T>
Var relu(Tape<T>& tp, Var x) {
  Tensor<T> out = tp.val(x);
  T* p = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) p[i] = p[i] > T(0) ? p[i] : T(0);
  Var y = tp.make_node(std::move(out), tp.requires_grad(x));
  if (tp.requires_grad(y)) {
    tp.add_backward([&tp, x, y] {
      const Tensor<T>& g = tp.grad_accum(y);
      const Tensor<T>& xv = tp.val(x);
      Tensor<T>& gx = tp.grad_accum(x);
      for (int64_t i = 0; i < g.numel(); ++i)
        if (xv[i] > T(0)) gx[i] += g[i];
    });
  }
  return y;
}

// y = sin(omega * x)
template <typename T>
Var sin_act(Tape<T>& tp, Var x, T omega) {
  const auto& xv = tp.val(x);
  Tensor<T> out(xv.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sin(omega * xv[i]);
  Var y = tp.make_node(std::move(out), tp.requires_grad(x));
  if (tp.requires_grad(y)) {
    tp.add_backward([&tp, x, y, omega] {
      const Tensor<T>& g = tp.grad_accum(y);
      const Tensor<T>& xv = tp.val(x);
      Tensor<T>& gx = tp.grad_accum(x);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * omega * std::cos(omega * xv[i]);
    });
  }
  return y;
}

// Max pooling with stride == kernel, floor output size.
template <typename T>
Var maxpool2d(Tape<T>& tp, Var x, int64_t kh, int64_t kw) {
  const auto& xv = tp.val(x);
  if (xv.rank() != 4) throw Error("maxpool2d: expect NCHW");
  int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t Ho = H / kh, Wo = W / kw;
  if (Ho == 0 || Wo == 0) throw Error("maxpool2d: input smaller than kernel");
  Tensor<T> out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
  int64_t oi = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t bidx = -1;
          for (int64_t i = 0; i < kh; ++i)
            for (int64_t j = 0; j < kw; ++j) {
              int64_t idx = ((n * C + c) * H + ho * kh + i) * W + wo * kw + j;
              if (xv[idx] > best) {
                best = xv[idx];
                bidx = idx;
              }
            }
          out[oi] = best;
          (*argmax)[static_cast<size_t>(oi)] = bidx;
        }
  Var y = tp.make_node(std::move(out), tp.requires_grad(x));
  if (tp.requires_grad(y)) {
    tp.add_backward([&tp, x, y, argmax] {
      const Tensor<T>& g = tp.grad_accum(y);
      Tensor<T>& gx = tp.grad_accum(x);
      for (int64_t i = 0; i < g.numel(); ++i) gx[(*argmax)[static_cast<size_t>(i)]] += g[i];
    });
  }
  return y;
}

// Adaptive average pooling to (oh, ow); bins follow the floor/ceil split.
template <typename T>
Var adaptive_avg_pool2d(Tape<T>& tp, Var x, int64_t oh, int64_t ow) {
  const auto& xv = tp.val(x);
  if (xv.rank() != 4) throw Error("adaptive_avg_pool2d: expect NCHW");
  int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H == 0 || W == 0) throw Error("adaptive_avg_pool2d: empty spatial input");
  auto bin = [](int64_t i, int64_t n, int64_t m) {
    return std::pair<int64_t, int64_t>{(i * m) / n, ((i + 1) * m + n - 1) / n};
  };
  Tensor<T> out({N, C, oh, ow});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < oh; ++i) {
        auto [h0, h1] = bin(i, oh, H);
        for (int64_t j = 0; j < ow; ++j) {
          auto [w0, w1] = bin(j, ow, W);
          T s = T(0);
          for (int64_t h = h0; h < h1; ++h)
            for (int64_t w = w0; w < w1; ++w) s += xv.at4(n, c, h, w);
          out.at4(n, c, i, j) = s / static_cast<T>((h1 - h0) * (w1 - w0));
        }
      }
  Var y = tp.make_node(std::move(out), tp.requires_grad(x));
  if (tp.requires_grad(y)) {
    tp.add_backward([&tp, x, y, oh, ow, N, C, H, W, bin] {
      const Tensor<T>& g = tp.grad_accum(y);
      Tensor<T>& gx = tp.grad_accum(x);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < oh; ++i) {
            auto [h0, h1] = bin(i, oh, H);
            for (int64_t j = 0; j < ow; ++j) {
              auto [w0, w1] = bin(j, ow, W);
              T gv = g.at4(n, c, i, j) / static_cast<T>((h1 - h0) * (w1 - w0));
              for (int64_t h = h0; h < h1; ++h)
                for (int64_t w = w0; w < w1; ++w) gx.at4(n, c, h, w) += gv;
            }
          }
    });
  }
  return y;
}

// Depth-to-space: x[N, C*r*r, H, W] -> y[N, C, H*r, W*r].
template <typename T>
Var pixel_shuffle(Tape<T>& tp, Var x, int64_t r) {
  const auto& xv = tp.val(x);
  if (xv.rank() != 4 || xv.dim(1) % (r * r) != 0) throw Error("pixel_shuffle: channels not divisible by r^2");
  int64_t N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t C = Ci / (r * r);
  Tensor<T> out({N, C, H * r, W * r});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t dh = 0; dh < r; ++dh)
        for (int64_t dw = 0; dw < r; ++dw) {
          int64_t ci = c * r * r + dh * r + dw;
          for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w)
              out.at4(n, c, h * r + dh, w * r + dw) = xv.at4(n, ci, h, w);
        }
  Var y = tp.make_node(std::move(out), tp.requires_grad(x));
  if (tp.requires_grad(y)) {
    tp.add_backward([&tp, x, y, r, N, C, H, W] {
      const Tensor<T>& g = tp.grad_accum(y);
      Tensor<T>& gx = tp.grad_accum(x);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t dh = 0; dh < r; ++dh)
            for (int64_t dw = 0; dw < r; ++dw) {
              int64_t ci = c * r * r + dh * r + dw;
              for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w)
                  gx.at4(n, ci, h, w) += g.at4(n, c, h * r + dh, w * r + dw);
            }
    });
  }
  return y;
}

// Batch norm, training mode: normalizes with batch statistics and, when
// running stats are supplied, updates them in place (side effect outside
// the tape, matching inference-time storage).
template <typename T>
Var batchnorm_train(Tape<T>& tp, Var x, Var gamma, Var beta, Tensor<T>* run_mean,
                    Tensor<T>* run_var, T momentum = T(0.1), T eps = T(1e-5)) {
  const auto& xv = tp.val(x);
  if (xv.rank() != 4) throw Error("batchnorm: expect NCHW");
  int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t m = N * H * W;
  if (m < 2) throw Error("batchnorm_train: needs at least 2 samples per channel");
  auto mean = std::make_shared<std::vector<T>>(C, T(0));
  auto invstd = std::make_shared<std::vector<T>>(C, T(0));
  std::vector<T> varv(C, T(0));
  for (int64_t c = 0; c < C; ++c) {
    T s = T(0);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) s += xv.at4(n, c, h, w);
    (*mean)[c] = s / static_cast<T>(m);
    T v = T(0);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          T d = xv.at4(n, c, h, w) - (*mean)[c];
          v += d * d;
        }
    varv[c] = v / static_cast<T>(m);
    (*invstd)[c] = T(1) / std::sqrt(varv[c] + eps);
  }
  if (run_mean && run_var) {
    for (int64_t c = 0; c < C; ++c) {
      T unbiased = varv[c] * static_cast<T>(m) / static_cast<T>(m - 1);
      (*run_mean)[c] = (T(1) - momentum) * (*run_mean)[c] + momentum * (*mean)[c];
      (*run_var)[c] = (T(1) - momentum) * (*run_var)[c] + momentum * unbiased;
    }
  }
  const auto& gv = tp.val(gamma);
  const auto& bv = tp.val(beta);
  Tensor<T> out(xv.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          out.at4(n, c, h, w) =
              gv[c] * (xv.at4(n, c, h, w) - (*mean)[c]) * (*invstd)[c] + bv[c];
  bool rg = tp.requires_grad(x) || tp.requires_grad(gamma) || tp.requires_grad(beta);
  Var y = tp.make_node(std::move(out), rg);
  if (rg) {
    tp.add_backward([&tp, x, gamma, beta, y, mean, invstd, N, C, H, W, m] {
      const Tensor<T>& g = tp.grad_accum(y);
      const Tensor<T>& xv = tp.val(x);
      const Tensor<T>& gv = tp.val(gamma);
      for (int64_t c = 0; c < C; ++c) {
        T sum_g = T(0), sum_gx = T(0);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
              T xhat = (xv.at4(n, c, h, w) - (*mean)[c]) * (*invstd)[c];
              T go = g.at4(n, c, h, w);
              sum_g += go;
              sum_gx += go * xhat;
            }
        if (tp.requires_grad(beta)) tp.grad_accum(beta)[c] += sum_g;
        if (tp.requires_grad(gamma)) tp.grad_accum(gamma)[c] += sum_gx;
        if (tp.requires_grad(x)) {
          Tensor<T>& gx = tp.grad_accum(x);
          T inv_m = T(1) / static_cast<T>(m);
          for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < H; ++h)
              for (int64_t w = 0; w < W; ++w) {
                T xhat = (xv.at4(n, c, h, w) - (*mean)[c]) * (*invstd)[c];
                T go = g.at4(n, c, h, w);
                gx.at4(n, c, h, w) +=
                    gv[c] * (*invstd)[c] * (go - inv_m * sum_g - xhat * inv_m * sum_gx);
              }
        }
      }
    });
  }
  return y;
}

// Batch norm, inference mode. All five inputs are differentiable; this is
// how gradients reach predicted running statistics. Variance is clamped at
// zero before the sqrt since decoded values can go negative.
template <typename T>
Var batchnorm_eval(Tape<T>& tp, Var x, Var gamma, Var beta, Var mean, Var var, T eps = T(1e-5)) {
  const auto& xv = tp.val(x);
  if (xv.rank() != 4) throw Error("batchnorm: expect NCHW");
  int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const auto& gv = tp.val(gamma);
  const auto& bv = tp.val(beta);
  const auto& mv = tp.val(mean);
  const auto& vv = tp.val(var);
  if (gv.numel() != C || bv.numel() != C || mv.numel() != C || vv.numel() != C)
    throw Error("batchnorm_eval: per-channel parameter size mismatch");
  auto invstd = std::make_shared<std::vector<T>>(C);
  for (int64_t c = 0; c < C; ++c)
    (*invstd)[c] = T(1) / std::sqrt(std::max(vv[c], T(0)) + eps);
  Tensor<T> out(xv.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      T a = gv[c] * (*invstd)[c];
      T b2 = bv[c] - a * mv[c];
      const T* xp = xv.data() + (n * C + c) * H * W;
      T* op = out.data() + (n * C + c) * H * W;
      for (int64_t i = 0; i < H * W; ++i) op[i] = a * xp[i] + b2;
    }
  bool rg = tp.requires_grad(x) || tp.requires_grad(gamma) || tp.requires_grad(beta) ||
            tp.requires_grad(mean) || tp.requires_grad(var);
  Var y = tp.make_node(std::move(out), rg);
  if (rg) {
    tp.add_backward([&tp, x, gamma, beta, mean, var, y, invstd, N, C, H, W, eps] {
      const Tensor<T>& g = tp.grad_accum(y);
      const Tensor<T>& xv = tp.val(x);
      const Tensor<T>& gv = tp.val(gamma);
      const Tensor<T>& mv = tp.val(mean);
      const Tensor<T>& vv = tp.val(var);
      for (int64_t c = 0; c < C; ++c) {
        T inv = (*invstd)[c];
        T sum_g = T(0), sum_g_xm = T(0);
        for (int64_t n = 0; n < N; ++n) {
          const T* gp = g.data() + (n * C + c) * H * W;
          const T* xp = xv.data() + (n * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i) {
            sum_g += gp[i];
            sum_g_xm += gp[i] * (xp[i] - mv[c]);
          }
        }
        if (tp.requires_grad(x)) {
          Tensor<T>& gx = tp.grad_accum(x);
          T a = gv[c] * inv;
          for (int64_t n = 0; n < N; ++n) {
            T* gxp = gx.data() + (n * C + c) * H * W;
            const T* gp = g.data() + (n * C + c) * H * W;
            for (int64_t i = 0; i < H * W; ++i) gxp[i] += a * gp[i];
          }
        }
        if (tp.requires_grad(gamma)) tp.grad_accum(gamma)[c] += sum_g_xm * inv;
        if (tp.requires_grad(beta)) tp.grad_accum(beta)[c] += sum_g;
        if (tp.requires_grad(mean)) tp.grad_accum(mean)[c] += -gv[c] * inv * sum_g;
        if (tp.requires_grad(var) && vv[c] > T(0))
          tp.grad_accum(var)[c] += -T(0.5) * gv[c] * inv * inv * inv * sum_g_xm;
      }
    });
  }
  return y;
}

// Mean cross entropy with integer labels: -(1/N) sum log softmax(p)[label].
template <typename T>
Var softmax_ce(Tape<T>& tp, Var logits, const std::vector<int>& labels) {
  const auto& pv = tp.val(logits);
  if (pv.rank() != 2) throw Error("softmax_ce: expect [N, classes]");
  int64_t N = pv.dim(0), C = pv.dim(1);
  if (static_cast<int64_t>(labels.size()) != N) throw Error("softmax_ce: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= C) throw Error("softmax_ce: label out of range");
  if (N == 0) throw Error("softmax_ce: empty batch");
  std::vector<T> logp(static_cast<size_t>(C));
  T loss = T(0);
  for (int64_t n = 0; n < N; ++n) {
    detail::stable_log_softmax_row(pv.data() + n * C, C, T(1), logp.data());
    loss -= logp[static_cast<size_t>(labels[static_cast<size_t>(n)])];
  }
  loss /= static_cast<T>(N);
  Var y = tp.make_node(Tensor<T>::scalar(loss), tp.requires_grad(logits));
  if (tp.requires_grad(y)) {
    auto lab = std::make_shared<std::vector<int>>(labels);
    tp.add_backward([&tp, logits, y, lab, N, C] {
      T go = tp.grad_accum(y)[0];
      const Tensor<T>& pv = tp.val(logits);
      Tensor<T>& gp = tp.grad_accum(logits);
      std::vector<T> logp(static_cast<size_t>(C));
      T w = go / static_cast<T>(N);
      for (int64_t n = 0; n < N; ++n) {
        detail::stable_log_softmax_row(pv.data() + n * C, C, T(1), logp.data());
        for (int64_t c = 0; c < C; ++c) {
          T soft = std::exp(logp[static_cast<size_t>(c)]);
          T tgt = (c == (*lab)[static_cast<size_t>(n)]) ? T(1) : T(0);
          gp.at2(n, c) += w * (soft - tgt);
        }
      }
    });
  }
  return y;
}

// Mean soft-label cross entropy: -(1/N) sum_n sum_c q[n,c] log softmax(p)[n,c].
template <typename T>
Var soft_ce(Tape<T>& tp, Var logits, const Tensor<T>& q) {
  const auto& pv = tp.val(logits);
  if (pv.rank() != 2 || !pv.same_shape(q)) throw Error("soft_ce: shape mismatch");
  int64_t N = pv.dim(0), C = pv.dim(1);
  if (N == 0) throw Error("soft_ce: empty batch");
  std::vector<T> logp(static_cast<size_t>(C));
  T loss = T(0);
  for (int64_t n = 0; n < N; ++n) {
    detail::stable_log_softmax_row(pv.data() + n * C, C, T(1), logp.data());
    for (int64_t c = 0; c < C; ++c) loss -= q.at2(n, c) * logp[static_cast<size_t>(c)];
  }
  loss /= static_cast<T>(N);
  Var y = tp.make_node(Tensor<T>::scalar(loss), tp.requires_grad(logits));
  if (tp.requires_grad(y)) {
    auto qs = std::make_shared<Tensor<T>>(q);
    tp.add_backward([&tp, logits, y, qs, N, C] {
      T go = tp.grad_accum(y)[0];
      const Tensor<T>& pv = tp.val(logits);
      Tensor<T>& gp = tp.grad_accum(logits);
      std::vector<T> logp(static_cast<size_t>(C));
      T w = go / static_cast<T>(N);
      for (int64_t n = 0; n < N; ++n) {
        detail::stable_log_softmax_row(pv.data() + n * C, C, T(1), logp.data());
        T qsum = T(0);
        for (int64_t c = 0; c < C; ++c) qsum += qs->at2(n, c);
        for (int64_t c = 0; c < C; ++c)
          gp.at2(n, c) += w * (qsum * std::exp(logp[static_cast<size_t>(c)]) - qs->at2(n, c));
      }
    });
  }
  return y;
}

// Temperature-softened KL divergence scaled by T^2, averaged over the batch.
// Reference (detached) distribution comes from t_logits; gradient flows only
// into p_logits. With swap_order the predicted distribution takes the
// reference slot instead.
template <typename T>
Var kl_distill(Tape<T>& tp, Var p_logits, const Tensor<T>& t_logits, T temp,
               bool swap_order = false) {
  if (temp <= T(0)) throw Error("kl_distill: temperature must be positive");
  const auto& pv = tp.val(p_logits);
  if (pv.rank() != 2 || !pv.same_shape(t_logits)) throw Error("kl_distill: shape mismatch");
  int64_t N = pv.dim(0), C = pv.dim(1);
  if (N == 0) throw Error("kl_distill: empty batch");
  T inv_temp = T(1) / temp;
  std::vector<T> logp(static_cast<size_t>(C)), logt(static_cast<size_t>(C));
  T loss = T(0);
  for (int64_t n = 0; n < N; ++n) {
    detail::stable_log_softmax_row(pv.data() + n * C, C, inv_temp, logp.data());
    detail::stable_log_softmax_row(t_logits.data() + n * C, C, inv_temp, logt.data());
    for (int64_t c = 0; c < C; ++c) {
      size_t ci = static_cast<size_t>(c);
      if (swap_order) {
        T qp = std::exp(logp[ci]);
        loss += qp * (logp[ci] - logt[ci]);
      } else {
        T qt = std::exp(logt[ci]);
        loss += qt * (logt[ci] - logp[ci]);
      }
    }
  }
  loss *= temp * temp / static_cast<T>(N);
  Var y = tp.make_node(Tensor<T>::scalar(loss), tp.requires_grad(p_logits));
  if (tp.requires_grad(y)) {
    auto ts = std::make_shared<Tensor<T>>(t_logits);
    tp.add_backward([&tp, p_logits, y, ts, N, C, temp, inv_temp, swap_order] {
      T go = tp.grad_accum(y)[0];
      const Tensor<T>& pv = tp.val(p_logits);
      Tensor<T>& gp = tp.grad_accum(p_logits);
      std::vector<T> logp(static_cast<size_t>(C)), logt(static_cast<size_t>(C));
      T w = go * temp / static_cast<T>(N);
      for (int64_t n = 0; n < N; ++n) {
        detail::stable_log_softmax_row(pv.data() + n * C, C, inv_temp, logp.data());
        detail::stable_log_softmax_row(ts->data() + n * C, C, inv_temp, logt.data());
        if (!swap_order) {
          for (int64_t c = 0; c < C; ++c) {
            size_t ci = static_cast<size_t>(c);
            gp.at2(n, c) += w * (std::exp(logp[ci]) - std::exp(logt[ci]));
          }
        } else {
          // d/dp_j [ sum_i q_i (log q_i - log t_i) ], q = softmax(p/T)
          T inner = T(0);
          for (int64_t c = 0; c < C; ++c) {
            size_t ci = static_cast<size_t>(c);
            inner += std::exp(logp[ci]) * (logp[ci] - logt[ci]);
          }
          for (int64_t c = 0; c < C; ++c) {
            size_t ci = static_cast<size_t>(c);
            gp.at2(n, c) += w * std::exp(logp[ci]) * ((logp[ci] - logt[ci]) - inner);
          }
        }
      }
    });
  }
  return y;
}

// Mean squared error over all elements; target is detached.
template <typename T>
Var mse_vs_const(Tape<T>& tp, Var a, const Tensor<T>& b) {
  const auto& av = tp.val(a);
  if (!av.same_shape(b)) throw Error("mse: shape mismatch");
  int64_t n = av.numel();
  if (n == 0) throw Error("mse: empty input");
  T loss = T(0);
  for (int64_t i = 0; i < n; ++i) {
    T d = av[i] - b[i];
    loss += d * d;
  }
  loss /= static_cast<T>(n);
  Var y = tp.make_node(Tensor<T>::scalar(loss), tp.requires_grad(a));
  if (tp.requires_grad(y)) {
    auto bs = std::make_shared<Tensor<T>>(b);
    tp.add_backward([&tp, a, y, bs, n] {
      T go = tp.grad_accum(y)[0];
      const Tensor<T>& av = tp.val(a);
      Tensor<T>& ga = tp.grad_accum(a);
      T w = T(2) * go / static_cast<T>(n);
      for (int64_t i = 0; i < n; ++i) ga[i] += w * (av[i] - (*bs)[i]);
    });
  }
  return y;
}

}  // namespace wsl
