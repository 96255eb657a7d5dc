#pragma once

// Layer kernels on channel-major activations (C, N, H, W). Keeping channels
// outermost turns every convolution into one GEMM over the whole batch and makes
// batch-norm statistics a contiguous per-row reduction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include <Eigen/Core>

namespace priorseg::layers {

template <class T>
struct Tensor {
  std::size_t c = 0, n = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::size_t c_, std::size_t n_, std::size_t h_, std::size_t w_, T fill = T(0))
      : c(c_), n(n_), h(h_), w(w_), data(c_ * n_ * h_ * w_, fill) {}

  std::size_t plane() const { return n * h * w; }
  T* channel(std::size_t ch) { return data.data() + ch * plane(); }
  const T* channel(std::size_t ch) const { return data.data() + ch * plane(); }
  T& at(std::size_t ch, std::size_t b, std::size_t y, std::size_t x) {
    return data[((ch * n + b) * h + y) * w + x];
  }
  const T& at(std::size_t ch, std::size_t b, std::size_t y, std::size_t x) const {
    return data[((ch * n + b) * h + y) * w + x];
  }
};

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

/// Unfolds k x k same-padded neighbourhoods: (C*k*k) x (N*H*W), row-major.
template <class T>
MatR<T> im2col(const Tensor<T>& x, std::size_t k) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(x.h), W = static_cast<std::ptrdiff_t>(x.w);
  MatR<T> col(static_cast<Eigen::Index>(x.c * k * k), static_cast<Eigen::Index>(x.plane()));
  for (std::size_t ci = 0; ci < x.c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col.row(static_cast<Eigen::Index>((ci * k + ky) * k + kx)).data();
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t b = 0; b < x.n; ++b) {
          const T* src = x.data.data() + (ci * x.n + b) * x.h * x.w;
          T* dst = row + b * x.h * x.w;
          for (std::ptrdiff_t y = 0; y < H; ++y) {
            const std::ptrdiff_t sy = y + oy;
            T* drow = dst + y * W;
            if (sy < 0 || sy >= H) {
              std::fill(drow, drow + W, T(0));
              continue;
            }
            const T* srow = src + sy * W;
            for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
              const std::ptrdiff_t sx = xx + ox;
              drow[xx] = (sx < 0 || sx >= W) ? T(0) : srow[sx];
            }
          }
        }
      }
  return col;
}

/// Adjoint of im2col: scatters columns back onto a (C, N, H, W) tensor.
template <class T>
Tensor<T> col2im(const MatR<T>& col, std::size_t c, std::size_t n, std::size_t h, std::size_t w,
                 std::size_t k) {
  Tensor<T> x(c, n, h, w);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col.row(static_cast<Eigen::Index>((ci * k + ky) * k + kx)).data();
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t b = 0; b < n; ++b) {
          T* dst = x.data.data() + (ci * n + b) * h * w;
          const T* src = row + b * h * w;
          for (std::ptrdiff_t y = 0; y < H; ++y) {
            const std::ptrdiff_t sy = y + oy;
            if (sy < 0 || sy >= H) continue;
            for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
              const std::ptrdiff_t sx = xx + ox;
              if (sx >= 0 && sx < W) dst[sy * W + sx] += src[y * W + xx];
            }
          }
        }
      }
  return x;
}

/// Same-padded k x k convolution; weight is (Cout, Cin, k, k). Bias optional.
template <class T>
Tensor<T> conv_forward(const Tensor<T>& x, const std::vector<T>& weight, const T* bias,
                       std::size_t cout, std::size_t k) {
  Tensor<T> y(cout, x.n, x.h, x.w);
  const auto K = static_cast<Eigen::Index>(x.c * k * k);
  const auto P = static_cast<Eigen::Index>(x.plane());
  CMapR<T> W(weight.data(), static_cast<Eigen::Index>(cout), K);
  MapR<T> Y(y.data.data(), static_cast<Eigen::Index>(cout), P);
  if (k == 1) {
    Y.noalias() = W * CMapR<T>(x.data.data(), K, P);
  } else {
    Y.noalias() = W * im2col(x, k);
  }
  if (bias)
    for (std::size_t co = 0; co < cout; ++co) Y.row(static_cast<Eigen::Index>(co)).array() += bias[co];
  return y;
}

/// Accumulates dW (and dbias) and returns dx when need_dx.
template <class T>
Tensor<T> conv_backward(const Tensor<T>& x, const std::vector<T>& weight, const Tensor<T>& dy,
                        std::size_t k, std::vector<T>& dweight, T* dbias, bool need_dx) {
  const auto K = static_cast<Eigen::Index>(x.c * k * k);
  const auto P = static_cast<Eigen::Index>(x.plane());
  const auto cout = static_cast<Eigen::Index>(dy.c);
  CMapR<T> dY(dy.data.data(), cout, P);
  CMapR<T> W(weight.data(), cout, K);
  MapR<T> dW(dweight.data(), cout, K);
  if (dbias)
    for (Eigen::Index co = 0; co < cout; ++co) {
      T acc = 0;
      for (const T* v = dY.row(co).data(); v != dY.row(co).data() + P; ++v) acc += *v;
      dbias[co] += acc;
    }
  if (k == 1) {
    CMapR<T> X(x.data.data(), K, P);
    dW.noalias() += dY * X.transpose();
    if (!need_dx) return {};
    Tensor<T> dx(x.c, x.n, x.h, x.w);
    MapR<T>(dx.data.data(), K, P).noalias() = W.transpose() * dY;
    return dx;
  }
  const MatR<T> col = im2col(x, k);
  dW.noalias() += dY * col.transpose();
  if (!need_dx) return {};
  MatR<T> dcol = W.transpose() * dY;
  return col2im(dcol, x.c, x.n, x.h, x.w, k);
}

/// Per-channel batch normalization cache.
template <class T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  std::vector<T> mean;
  std::vector<T> var;  // biased batch variance
};

template <class T>
Tensor<T> batchnorm_train(const Tensor<T>& z, const std::vector<T>& gamma, const std::vector<T>& beta,
                          T eps, BatchNormCache<T>& cache) {
  const std::size_t P = z.plane();
  Tensor<T> y(z.c, z.n, z.h, z.w);
  cache.xhat = Tensor<T>(z.c, z.n, z.h, z.w);
  cache.inv_std.assign(z.c, T(0));
  cache.mean.assign(z.c, T(0));
  cache.var.assign(z.c, T(0));
  for (std::size_t ch = 0; ch < z.c; ++ch) {
    const T* src = z.channel(ch);
    T mean = 0;
    for (std::size_t i = 0; i < P; ++i) mean += src[i];
    mean /= static_cast<T>(P);
    T var = 0;
    for (std::size_t i = 0; i < P; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(P);
    const T inv = T(1) / std::sqrt(var + eps);
    T* xh = cache.xhat.channel(ch);
    T* dst = y.channel(ch);
    for (std::size_t i = 0; i < P; ++i) {
      xh[i] = (src[i] - mean) * inv;
      dst[i] = gamma[ch] * xh[i] + beta[ch];
    }
    cache.mean[ch] = mean;
    cache.var[ch] = var;
    cache.inv_std[ch] = inv;
  }
  return y;
}

template <class T>
Tensor<T> batchnorm_eval(const Tensor<T>& z, const std::vector<T>& gamma, const std::vector<T>& beta,
                         const std::vector<T>& running_mean, const std::vector<T>& running_var, T eps) {
  Tensor<T> y(z.c, z.n, z.h, z.w);
  const std::size_t P = z.plane();
  for (std::size_t ch = 0; ch < z.c; ++ch) {
    const T inv = T(1) / std::sqrt(running_var[ch] + eps);
    const T scale = gamma[ch] * inv;
    const T shift = beta[ch] - running_mean[ch] * scale;
    const T* src = z.channel(ch);
    T* dst = y.channel(ch);
    for (std::size_t i = 0; i < P; ++i) dst[i] = scale * src[i] + shift;
  }
  return y;
}

/// Gradient through training-mode batch norm; accumulates dgamma/dbeta.
template <class T>
Tensor<T> batchnorm_backward(const Tensor<T>& dy, const std::vector<T>& gamma,
                             const BatchNormCache<T>& cache, std::vector<T>& dgamma,
                             std::vector<T>& dbeta) {
  const std::size_t P = dy.plane();
  const T inv_p = T(1) / static_cast<T>(P);
  Tensor<T> dz(dy.c, dy.n, dy.h, dy.w);
  for (std::size_t ch = 0; ch < dy.c; ++ch) {
    const T* g = dy.channel(ch);
    const T* xh = cache.xhat.channel(ch);
    T sum_g = 0, sum_gx = 0;
    for (std::size_t i = 0; i < P; ++i) {
      sum_g += g[i];
      sum_gx += g[i] * xh[i];
    }
    dgamma[ch] += sum_gx;
    dbeta[ch] += sum_g;
    const T scale = gamma[ch] * cache.inv_std[ch];
    T* out = dz.channel(ch);
    for (std::size_t i = 0; i < P; ++i)
      out[i] = scale * (g[i] - inv_p * sum_g - xh[i] * inv_p * sum_gx);
  }
  return dz;
}

template <class T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.data) v = v > T(0) ? v : T(0);
}

/// Zeroes gradient where the ReLU output was not positive.
template <class T>
void relu_backward_inplace(Tensor<T>& grad, const Tensor<T>& out) {
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    if (!(out.data[i] > T(0))) grad.data[i] = T(0);
}

/// 2x2 stride-2 max pooling. argmax holds the flat source index per output.
template <class T>
Tensor<T> maxpool2_forward(const Tensor<T>& x, std::vector<std::size_t>& argmax) {
  Tensor<T> y(x.c, x.n, x.h / 2, x.w / 2);
  argmax.assign(y.data.size(), 0);
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < x.c; ++ch)
    for (std::size_t b = 0; b < x.n; ++b)
      for (std::size_t i = 0; i < y.h; ++i)
        for (std::size_t j = 0; j < y.w; ++j, ++o) {
          const std::size_t base = ((ch * x.n + b) * x.h + 2 * i) * x.w + 2 * j;
          std::size_t best = base;
          for (std::size_t cand : {base + 1, base + x.w, base + x.w + 1})
            if (x.data[cand] > x.data[best]) best = cand;
          y.data[o] = x.data[best];
          argmax[o] = best;
        }
  return y;
}

template <class T>
Tensor<T> maxpool2_backward(const Tensor<T>& dy, const std::vector<std::size_t>& argmax,
                            std::size_t h, std::size_t w) {
  Tensor<T> dx(dy.c, dy.n, h, w);
  for (std::size_t o = 0; o < dy.data.size(); ++o) dx.data[argmax[o]] += dy.data[o];
  return dx;
}

/// 2x2 stride-2 transposed convolution; weight is (Cin, Cout, 2, 2).
template <class T>
MatR<T> deconv_matrix(const std::vector<T>& weight, std::size_t cin, std::size_t cout) {
  MatR<T> wt(static_cast<Eigen::Index>(cout * 4), static_cast<Eigen::Index>(cin));
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t t = 0; t < 4; ++t)
        wt(static_cast<Eigen::Index>(co * 4 + t), static_cast<Eigen::Index>(ci)) =
            weight[(ci * cout + co) * 4 + t];
  return wt;
}

template <class T>
Tensor<T> deconv2_forward(const Tensor<T>& x, const std::vector<T>& weight, const std::vector<T>& bias,
                          std::size_t cout) {
  const MatR<T> wt = deconv_matrix(weight, x.c, cout);
  const auto P = static_cast<Eigen::Index>(x.plane());
  const MatR<T> z = wt * CMapR<T>(x.data.data(), static_cast<Eigen::Index>(x.c), P);
  Tensor<T> y(cout, x.n, x.h * 2, x.w * 2);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t t = 0; t < 4; ++t) {
      const T* src = z.row(static_cast<Eigen::Index>(co * 4 + t)).data();
      const std::size_t a = t / 2, bb = t % 2;
      std::size_t p = 0;
      for (std::size_t b = 0; b < x.n; ++b)
        for (std::size_t i = 0; i < x.h; ++i)
          for (std::size_t j = 0; j < x.w; ++j, ++p)
            y.at(co, b, 2 * i + a, 2 * j + bb) = src[p] + bias[co];
    }
  return y;
}

template <class T>
Tensor<T> deconv2_backward(const Tensor<T>& x, const std::vector<T>& weight, const Tensor<T>& dy,
                           std::vector<T>& dweight, std::vector<T>& dbias) {
  const std::size_t cout = dy.c;
  const auto P = static_cast<Eigen::Index>(x.plane());
  MatR<T> dz(static_cast<Eigen::Index>(cout * 4), P);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t t = 0; t < 4; ++t) {
      T* dst = dz.row(static_cast<Eigen::Index>(co * 4 + t)).data();
      const std::size_t a = t / 2, bb = t % 2;
      std::size_t p = 0;
      for (std::size_t b = 0; b < x.n; ++b)
        for (std::size_t i = 0; i < x.h; ++i)
          for (std::size_t j = 0; j < x.w; ++j, ++p) dst[p] = dy.at(co, b, 2 * i + a, 2 * j + bb);
    }
    T s = 0;
    const T* g = dy.channel(co);
    for (std::size_t i = 0; i < dy.plane(); ++i) s += g[i];
    dbias[co] += s;
  }
  CMapR<T> X(x.data.data(), static_cast<Eigen::Index>(x.c), P);
  const MatR<T> dwt = dz * X.transpose();
  for (std::size_t ci = 0; ci < x.c; ++ci)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t t = 0; t < 4; ++t)
        dweight[(ci * cout + co) * 4 + t] +=
            dwt(static_cast<Eigen::Index>(co * 4 + t), static_cast<Eigen::Index>(ci));
  const MatR<T> wt = deconv_matrix(weight, x.c, cout);
  Tensor<T> dx(x.c, x.n, x.h, x.w);
  MapR<T>(dx.data.data(), static_cast<Eigen::Index>(x.c), P).noalias() = wt.transpose() * dz;
  return dx;
}

/// Stacks a above b along the channel axis.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> y(a.c + b.c, a.n, a.h, a.w);
  std::copy(a.data.begin(), a.data.end(), y.data.begin());
  std::copy(b.data.begin(), b.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return y;
}

template <class T>
void split_channels(const Tensor<T>& y, std::size_t ca, Tensor<T>& a, Tensor<T>& b) {
  a = Tensor<T>(ca, y.n, y.h, y.w);
  b = Tensor<T>(y.c - ca, y.n, y.h, y.w);
  std::copy_n(y.data.begin(), a.data.size(), a.data.begin());
  std::copy(y.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()), y.data.end(), b.data.begin());
}

/// Softmax across channels at every pixel.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& z) {
  Tensor<T> p(z.c, z.n, z.h, z.w);
  const std::size_t P = z.plane();
  for (std::size_t i = 0; i < P; ++i) {
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t ch = 0; ch < z.c; ++ch) m = std::max(m, z.data[ch * P + i]);
    T s = 0;
    for (std::size_t ch = 0; ch < z.c; ++ch) {
      const T e = std::exp(z.data[ch * P + i] - m);
      p.data[ch * P + i] = e;
      s += e;
    }
    for (std::size_t ch = 0; ch < z.c; ++ch) p.data[ch * P + i] /= s;
  }
  return p;
}

template <class T>
Tensor<T> softmax_backward(const Tensor<T>& p, const Tensor<T>& dp) {
  Tensor<T> dz(p.c, p.n, p.h, p.w);
  const std::size_t P = p.plane();
  for (std::size_t i = 0; i < P; ++i) {
    T dot = 0;
    for (std::size_t ch = 0; ch < p.c; ++ch) dot += p.data[ch * P + i] * dp.data[ch * P + i];
    for (std::size_t ch = 0; ch < p.c; ++ch)
      dz.data[ch * P + i] = p.data[ch * P + i] * (dp.data[ch * P + i] - dot);
  }
  return dz;
}

}  // namespace priorseg::layers
