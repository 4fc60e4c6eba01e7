#include "slimunet/ops.hpp"

#include <cmath>

#include "blas.hpp"

namespace slimunet::ops {
namespace {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T>
bool wants(const Node<T>& out, std::size_t i) {
  return out.inputs[i]->requires_grad;
}

template <class T>
T* gbuf(Node<T>& out, std::size_t i) {
  return out.inputs[i]->grad_buffer().data();
}

template <class T>
const T* val(const Node<T>& out, std::size_t i) {
  return out.inputs[i]->value.data();
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + x * pdf;
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& o) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (wants(o, i)) o.inputs[i]->accumulate(o.grad);
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& o) {
    if (wants(o, 0)) o.inputs[0]->accumulate(o.grad);
    if (wants(o, 1)) {
      T* g = gbuf(o, 1);
      for (std::int64_t i = 0; i < o.grad.numel(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& o) {
    T* g = gbuf(o, 0);
    for (std::int64_t i = 0; i < o.grad.numel(); ++i) g[i] += s * o.grad[i];
  });
}

template <class T>
Var<T> add_per_channel(const Var<T>& x, const Var<T>& e) {
  const auto& xs = x.shape();
  if (xs.size() < 2 || e.shape() != Shape{xs[0], xs[1]}) {
    throw DimensionError("add_per_channel: expected e of shape [B,C] for x " + shape_str(xs) +
                         ", got " + shape_str(e.shape()));
  }
  const std::int64_t bc = xs[0] * xs[1];
  const std::int64_t inner = x.value().numel() / bc;
  Tensor<T> out(xs);
  for (std::int64_t i = 0; i < bc; ++i) {
    const T add_v = e.value()[i];
    const T* src = x.value().data() + i * inner;
    T* dst = out.data() + i * inner;
    for (std::int64_t j = 0; j < inner; ++j) dst[j] = src[j] + add_v;
  }
  return make_result<T>(std::move(out), {x, e}, [bc, inner](Node<T>& o) {
    if (wants(o, 0)) o.inputs[0]->accumulate(o.grad);
    if (wants(o, 1)) {
      T* ge = gbuf(o, 1);
      for (std::int64_t i = 0; i < bc; ++i) {
        T s = 0;
        const T* g = o.grad.data() + i * inner;
        for (std::int64_t j = 0; j < inner; ++j) s += g[j];
        ge[i] += s;
      }
    }
  });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* bias, int stride, int pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3]) {
    throw DimensionError("conv2d: incompatible input " + shape_str(xs) + " and weight " + shape_str(ws));
  }
  const int B = static_cast<int>(xs[0]), Cin = static_cast<int>(xs[1]);
  const int H = static_cast<int>(xs[2]), W = static_cast<int>(xs[3]);
  const int Cout = static_cast<int>(ws[0]), k = static_cast<int>(ws[2]);
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  const int HWo = Ho * Wo, HW = H * W;
  const int K = Cin * k * k;
  const int N = B * HWo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  // cols[K, N]
  std::vector<T> cols(static_cast<std::size_t>(K) * N);
  const T* xd = x.value().data();
  if (pointwise) {
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < Cin; ++c)
        std::copy_n(xd + (static_cast<std::int64_t>(b) * Cin + c) * HW, HW,
                    cols.data() + static_cast<std::int64_t>(c) * N + b * HWo);
  } else {
    for (int c = 0; c < Cin; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          T* row = cols.data() + static_cast<std::int64_t>((c * k + ky) * k + kx) * N;
          for (int b = 0; b < B; ++b) {
            const T* plane = xd + (static_cast<std::int64_t>(b) * Cin + c) * HW;
            T* dst = row + b * HWo;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) {
                std::fill_n(dst + oy * Wo, Wo, T(0));
                continue;
              }
              for (int ox = 0; ox < Wo; ++ox) {
                const int ix = ox * stride - pad + kx;
                dst[oy * Wo + ox] = (ix >= 0 && ix < W) ? plane[iy * W + ix] : T(0);
              }
            }
          }
        }
  }

  std::vector<T> y2(static_cast<std::size_t>(Cout) * N);
  detail::gemm(false, false, Cout, N, K, T(1), w.value().data(), K, cols.data(), N, T(0), y2.data(), N);

  Tensor<T> out(Shape{B, Cout, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co) {
      const T bv = bias ? bias->value()[co] : T(0);
      const T* src = y2.data() + static_cast<std::int64_t>(co) * N + b * HWo;
      T* dst = out.data() + (static_cast<std::int64_t>(b) * Cout + co) * HWo;
      for (int i = 0; i < HWo; ++i) dst[i] = src[i] + bv;
    }

  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const bool any_grad = grad_enabled() && (x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad()));
  if (!any_grad) cols.clear();

  return make_result<T>(std::move(out), std::move(inputs),
                        [cols = std::move(cols), B, Cin, H, W, Cout, k, Ho, Wo, stride, pad, K, N, HWo, HW,
                         pointwise, has_bias = bias != nullptr](Node<T>& o) {
    std::vector<T> dy2(static_cast<std::size_t>(Cout) * N);
    for (int b = 0; b < B; ++b)
      for (int co = 0; co < Cout; ++co)
        std::copy_n(o.grad.data() + (static_cast<std::int64_t>(b) * Cout + co) * HWo, HWo,
                    dy2.data() + static_cast<std::int64_t>(co) * N + b * HWo);
    if (wants(o, 1)) {
      detail::gemm(false, true, Cout, K, N, T(1), dy2.data(), N, cols.data(), N, T(1), gbuf(o, 1), K);
    }
    if (has_bias && wants(o, 2)) {
      T* gb = gbuf(o, 2);
      for (int co = 0; co < Cout; ++co) {
        T s = 0;
        const T* r = dy2.data() + static_cast<std::int64_t>(co) * N;
        for (int i = 0; i < N; ++i) s += r[i];
        gb[co] += s;
      }
    }
    if (wants(o, 0)) {
      std::vector<T> dcols(static_cast<std::size_t>(K) * N);
      detail::gemm(true, false, K, N, Cout, T(1), val(o, 1), K, dy2.data(), N, T(0), dcols.data(), N);
      T* gx = gbuf(o, 0);
      if (pointwise) {
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < Cin; ++c) {
            T* dst = gx + (static_cast<std::int64_t>(b) * Cin + c) * HW;
            const T* src = dcols.data() + static_cast<std::int64_t>(c) * N + b * HWo;
            for (int i = 0; i < HW; ++i) dst[i] += src[i];
          }
      } else {
        for (int c = 0; c < Cin; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const T* row = dcols.data() + static_cast<std::int64_t>((c * k + ky) * k + kx) * N;
              for (int b = 0; b < B; ++b) {
                T* plane = gx + (static_cast<std::int64_t>(b) * Cin + c) * HW;
                const T* src = row + b * HWo;
                for (int oy = 0; oy < Ho; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= H) continue;
                  for (int ox = 0; ox < Wo; ++ox) {
                    const int ix = ox * stride - pad + kx;
                    if (ix >= 0 && ix < W) plane[iy * W + ix] += src[oy * Wo + ox];
                  }
                }
              }
            }
      }
    }
  });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* bias) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.empty() || ws.size() != 2 || xs.back() != ws[1]) {
    throw DimensionError("linear: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
  }
  const int in = static_cast<int>(ws[1]), outf = static_cast<int>(ws[0]);
  const int rows = static_cast<int>(x.value().numel() / in);
  Shape os = xs;
  os.back() = outf;
  Tensor<T> out(os);
  if (bias) {
    for (int r = 0; r < rows; ++r) std::copy_n(bias->value().data(), outf, out.data() + static_cast<std::int64_t>(r) * outf);
  }
  detail::gemm(false, true, rows, outf, in, T(1), x.value().data(), in, w.value().data(), in, bias ? T(1) : T(0),
               out.data(), outf);
  std::vector<Var<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return make_result<T>(std::move(out), std::move(inputs), [rows, in, outf, has_bias = bias != nullptr](Node<T>& o) {
    const T* dy = o.grad.data();
    if (wants(o, 0)) detail::gemm(false, false, rows, in, outf, T(1), dy, outf, val(o, 1), in, T(1), gbuf(o, 0), in);
    if (wants(o, 1)) detail::gemm(true, false, outf, in, rows, T(1), dy, outf, val(o, 0), in, T(1), gbuf(o, 1), in);
    if (has_bias && wants(o, 2)) {
      T* gb = gbuf(o, 2);
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < outf; ++j) gb[j] += dy[static_cast<std::int64_t>(r) * outf + j];
    }
  });
}

template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
  const auto& xs = x.shape();
  if (xs.size() < 2 || xs[1] % groups != 0 || gamma.value().numel() != xs[1] || beta.value().numel() != xs[1]) {
    throw DimensionError("group_norm: bad shapes for input " + shape_str(xs));
  }
  const std::int64_t B = xs[0], C = xs[1];
  const std::int64_t inner = x.value().numel() / (B * C);
  const std::int64_t cpg = C / groups;
  const std::int64_t gsize = cpg * inner;
  std::vector<T> mean(static_cast<std::size_t>(B * groups)), rstd(mean.size());
  Tensor<T> out(xs);
  const T* xd = x.value().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g) {
      const T* p = xd + (b * C + g * cpg) * inner;
      T m = 0;
      for (std::int64_t i = 0; i < gsize; ++i) m += p[i];
      m /= T(gsize);
      T v = 0;
      for (std::int64_t i = 0; i < gsize; ++i) v += (p[i] - m) * (p[i] - m);
      v /= T(gsize);
      const T r = T(1) / std::sqrt(v + eps);
      mean[b * groups + g] = m;
      rstd[b * groups + g] = r;
      for (std::int64_t c = 0; c < cpg; ++c) {
        const std::int64_t ch = g * cpg + c;
        const T ga = gamma.value()[ch], be = beta.value()[ch];
        const T* src = p + c * inner;
        T* dst = out.data() + (b * C + ch) * inner;
        for (std::int64_t i = 0; i < inner; ++i) dst[i] = (src[i] - m) * r * ga + be;
      }
    }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [mean = std::move(mean), rstd = std::move(rstd), B, C, inner, cpg, gsize, groups](Node<T>& o) {
    const T* xd = val(o, 0);
    const T* ga = val(o, 1);
    const T* dy = o.grad.data();
    T* gx = wants(o, 0) ? gbuf(o, 0) : nullptr;
    T* gg = wants(o, 1) ? gbuf(o, 1) : nullptr;
    T* gb = wants(o, 2) ? gbuf(o, 2) : nullptr;
    for (std::int64_t b = 0; b < B; ++b)
      for (int g = 0; g < groups; ++g) {
        const T m = mean[b * groups + g], r = rstd[b * groups + g];
        T sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (std::int64_t c = 0; c < cpg; ++c) {
          const std::int64_t ch = g * cpg + c;
          const std::int64_t off = (b * C + ch) * inner;
          T sg = 0, sb = 0;
          for (std::int64_t i = 0; i < inner; ++i) {
            const T xhat = (xd[off + i] - m) * r;
            const T d = dy[off + i];
            sg += d * xhat;
            sb += d;
            sum_dxhat += d * ga[ch];
            sum_dxhat_xhat += d * ga[ch] * xhat;
          }
          if (gg) gg[ch] += sg;
          if (gb) gb[ch] += sb;
        }
        if (!gx) continue;
        const T inv_n = T(1) / T(gsize);
        for (std::int64_t c = 0; c < cpg; ++c) {
          const std::int64_t ch = g * cpg + c;
          const std::int64_t off = (b * C + ch) * inner;
          for (std::int64_t i = 0; i < inner; ++i) {
            const T xhat = (xd[off + i] - m) * r;
            const T dxhat = dy[off + i] * ga[ch];
            gx[off + i] += r * inv_n * (T(gsize) * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
          }
        }
      }
  });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::int64_t C = x.shape().back();
  if (gamma.value().numel() != C || beta.value().numel() != C) {
    throw DimensionError("layer_norm: affine size mismatch for input " + shape_str(x.shape()));
  }
  const std::int64_t rows = x.value().numel() / C;
  std::vector<T> mean(static_cast<std::size_t>(rows)), rstd(mean.size());
  Tensor<T> out(x.shape());
  const T* xd = x.value().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* p = xd + r * C;
    T m = 0;
    for (std::int64_t i = 0; i < C; ++i) m += p[i];
    m /= T(C);
    T v = 0;
    for (std::int64_t i = 0; i < C; ++i) v += (p[i] - m) * (p[i] - m);
    v /= T(C);
    const T rs = T(1) / std::sqrt(v + eps);
    mean[r] = m;
    rstd[r] = rs;
    T* dst = out.data() + r * C;
    for (std::int64_t i = 0; i < C; ++i) dst[i] = (p[i] - m) * rs * gamma.value()[i] + beta.value()[i];
  }
  return make_result<T>(std::move(out), {x, gamma, beta}, [mean = std::move(mean), rstd = std::move(rstd), rows, C](Node<T>& o) {
    const T* xd = val(o, 0);
    const T* ga = val(o, 1);
    const T* dy = o.grad.data();
    T* gx = wants(o, 0) ? gbuf(o, 0) : nullptr;
    T* gg = wants(o, 1) ? gbuf(o, 1) : nullptr;
    T* gb = wants(o, 2) ? gbuf(o, 2) : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T m = mean[r], rs = rstd[r];
      const T* p = xd + r * C;
      const T* d = dy + r * C;
      T sum_dxhat = 0, sum_dxhat_xhat = 0;
      for (std::int64_t i = 0; i < C; ++i) {
        const T xhat = (p[i] - m) * rs;
        if (gg) gg[i] += d[i] * xhat;
        if (gb) gb[i] += d[i];
        sum_dxhat += d[i] * ga[i];
        sum_dxhat_xhat += d[i] * ga[i] * xhat;
      }
      if (!gx) continue;
      for (std::int64_t i = 0; i < C; ++i) {
        const T xhat = (p[i] - m) * rs;
        gx[r * C + i] += rs / T(C) * (T(C) * d[i] * ga[i] - sum_dxhat - xhat * sum_dxhat_xhat);
      }
    }
  });
}

template <class T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const T v = x.value()[i];
    out[i] = v * sigmoid(v);
  }
  return make_result<T>(std::move(out), {x}, [](Node<T>& o) {
    const T* xd = val(o, 0);
    T* g = gbuf(o, 0);
    for (std::int64_t i = 0; i < o.grad.numel(); ++i) {
      const T s = sigmoid(xd[i]);
      g[i] += o.grad[i] * s * (T(1) + xd[i] * (T(1) - s));
    }
  });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = gelu_value(x.value()[i]);
  return make_result<T>(std::move(out), {x}, [](Node<T>& o) {
    const T* xd = val(o, 0);
    T* g = gbuf(o, 0);
    for (std::int64_t i = 0; i < o.grad.numel(); ++i) g[i] += o.grad[i] * gelu_grad(xd[i]);
  });
}

template <class T>
Var<T> geglu(const Var<T>& x) {
  const std::int64_t two_f = x.shape().back();
  if (two_f % 2 != 0) throw DimensionError("geglu: last dimension must be even");
  const std::int64_t F = two_f / 2;
  const std::int64_t rows = x.value().numel() / two_f;
  Shape os = x.shape();
  os.back() = F;
  Tensor<T> out(os);
  const T* xd = x.value().data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < F; ++j) out[r * F + j] = xd[r * two_f + j] * gelu_value(xd[r * two_f + F + j]);
  return make_result<T>(std::move(out), {x}, [rows, F, two_f](Node<T>& o) {
    const T* xd = val(o, 0);
    T* g = gbuf(o, 0);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < F; ++j) {
        const T a = xd[r * two_f + j], gate = xd[r * two_f + F + j];
        const T dy = o.grad[r * F + j];
        g[r * two_f + j] += dy * gelu_value(gate);
        g[r * two_f + F + j] += dy * a * gelu_grad(gate);
      }
  });
}

template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int batch, int heads) {
  const std::int64_t C = q.shape().back();
  if (k.shape().back() != C || v.shape() != k.shape() || C % heads != 0 ||
      q.value().numel() % (batch * C) != 0 || k.value().numel() % (batch * C) != 0) {
    throw DimensionError("attention: incompatible q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) +
                         " v " + shape_str(v.shape()));
  }
  const int Lq = static_cast<int>(q.value().numel() / (batch * C));
  const int Lk = static_cast<int>(k.value().numel() / (batch * C));
  const int d = static_cast<int>(C / heads);
  const int ld = static_cast<int>(C);
  const T scale_v = T(1) / std::sqrt(T(d));

  std::vector<T> probs(static_cast<std::size_t>(batch) * heads * Lq * Lk);
  Tensor<T> out(q.shape());
  for (int b = 0; b < batch; ++b)
    for (int h = 0; h < heads; ++h) {
      T* P = probs.data() + (static_cast<std::int64_t>(b) * heads + h) * Lq * Lk;
      const T* Q = q.value().data() + static_cast<std::int64_t>(b) * Lq * C + h * d;
      const T* Kp = k.value().data() + static_cast<std::int64_t>(b) * Lk * C + h * d;
      const T* Vp = v.value().data() + static_cast<std::int64_t>(b) * Lk * C + h * d;
      detail::gemm(false, true, Lq, Lk, d, scale_v, Q, ld, Kp, ld, T(0), P, Lk);
      for (int i = 0; i < Lq; ++i) {
        T* row = P + static_cast<std::int64_t>(i) * Lk;
        const T mx = *std::max_element(row, row + Lk);
        T s = 0;
        for (int j = 0; j < Lk; ++j) {
          row[j] = std::exp(row[j] - mx);
          s += row[j];
        }
        for (int j = 0; j < Lk; ++j) row[j] /= s;
      }
      T* O = out.data() + static_cast<std::int64_t>(b) * Lq * C + h * d;
      detail::gemm(false, false, Lq, d, Lk, T(1), P, Lk, Vp, ld, T(0), O, ld);
    }

  return make_result<T>(std::move(out), {q, k, v}, [probs = std::move(probs), batch, heads, Lq, Lk, d, ld, C, scale_v](Node<T>& o) {
    std::vector<T> dP(static_cast<std::size_t>(Lq) * Lk);
    T* gq = wants(o, 0) ? gbuf(o, 0) : nullptr;
    T* gk = wants(o, 1) ? gbuf(o, 1) : nullptr;
    T* gv = wants(o, 2) ? gbuf(o, 2) : nullptr;
    for (int b = 0; b < batch; ++b)
      for (int h = 0; h < heads; ++h) {
        const T* P = probs.data() + (static_cast<std::int64_t>(b) * heads + h) * Lq * Lk;
        const std::int64_t qoff = static_cast<std::int64_t>(b) * Lq * C + h * d;
        const std::int64_t koff = static_cast<std::int64_t>(b) * Lk * C + h * d;
        const T* dO = o.grad.data() + qoff;
        if (gv) detail::gemm(true, false, Lk, d, Lq, T(1), P, Lk, dO, ld, T(1), gv + koff, ld);
        if (!gq && !gk) continue;
        detail::gemm(false, true, Lq, Lk, d, T(1), dO, ld, val(o, 2) + koff, ld, T(0), dP.data(), Lk);
        for (int i = 0; i < Lq; ++i) {
          const T* pr = P + static_cast<std::int64_t>(i) * Lk;
          T* dr = dP.data() + static_cast<std::int64_t>(i) * Lk;
          T dot = 0;
          for (int j = 0; j < Lk; ++j) dot += pr[j] * dr[j];
          for (int j = 0; j < Lk; ++j) dr[j] = pr[j] * (dr[j] - dot);
        }
        if (gq) detail::gemm(false, false, Lq, d, Lk, scale_v, dP.data(), Lk, val(o, 1) + koff, ld, T(1), gq + qoff, ld);
        if (gk) detail::gemm(true, false, Lk, d, Lq, scale_v, dP.data(), Lk, val(o, 0) + qoff, ld, T(1), gk + koff, ld);
      }
  });
}

template <class T>
Var<T> to_tokens(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("to_tokens: expected NCHW, got " + shape_str(s));
  const std::int64_t B = s[0], C = s[1], HW = s[2] * s[3];
  Tensor<T> out(Shape{B * HW, C});
  const T* xd = x.value().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < HW; ++i) out[(b * HW + i) * C + c] = xd[(b * C + c) * HW + i];
  return make_result<T>(std::move(out), {x}, [B, C, HW](Node<T>& o) {
    T* g = gbuf(o, 0);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < HW; ++i) g[(b * C + c) * HW + i] += o.grad[(b * HW + i) * C + c];
  });
}

template <class T>
Var<T> from_tokens(const Var<T>& x, std::int64_t batch, std::int64_t height, std::int64_t width) {
  const std::int64_t HW = height * width;
  if (x.shape().size() != 2 || x.shape()[0] != batch * HW) {
    throw DimensionError("from_tokens: token tensor " + shape_str(x.shape()) + " does not match spatial size");
  }
  const std::int64_t C = x.shape()[1];
  Tensor<T> out(Shape{batch, C, height, width});
  const T* xd = x.value().data();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < HW; ++i) out[(b * C + c) * HW + i] = xd[(b * HW + i) * C + c];
  return make_result<T>(std::move(out), {x}, [batch, C, HW](Node<T>& o) {
    T* g = gbuf(o, 0);
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < HW; ++i) g[(b * HW + i) * C + c] += o.grad[(b * C + c) * HW + i];
  });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
    throw DimensionError("concat_channels: " + shape_str(as) + " vs " + shape_str(bs));
  }
  const std::int64_t B = as[0], Ca = as[1], Cb = bs[1], HW = as[2] * as[3];
  Tensor<T> out(Shape{B, Ca + Cb, as[2], as[3]});
  for (std::int64_t n = 0; n < B; ++n) {
    std::copy_n(a.value().data() + n * Ca * HW, Ca * HW, out.data() + n * (Ca + Cb) * HW);
    std::copy_n(b.value().data() + n * Cb * HW, Cb * HW, out.data() + (n * (Ca + Cb) + Ca) * HW);
  }
  return make_result<T>(std::move(out), {a, b}, [B, Ca, Cb, HW](Node<T>& o) {
    for (std::int64_t n = 0; n < B; ++n) {
      const T* src = o.grad.data() + n * (Ca + Cb) * HW;
      if (wants(o, 0)) {
        T* g = gbuf(o, 0) + n * Ca * HW;
        for (std::int64_t i = 0; i < Ca * HW; ++i) g[i] += src[i];
      }
      if (wants(o, 1)) {
        T* g = gbuf(o, 1) + n * Cb * HW;
        for (std::int64_t i = 0; i < Cb * HW; ++i) g[i] += src[Ca * HW + i];
      }
    }
  });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("upsample: expected NCHW, got " + shape_str(s));
  const std::int64_t planes = s[0] * s[1], H = s[2], W = s[3];
  Tensor<T> out(Shape{s[0], s[1], 2 * H, 2 * W});
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = x.value().data() + p * H * W;
    T* dst = out.data() + p * 4 * H * W;
    for (std::int64_t y = 0; y < 2 * H; ++y)
      for (std::int64_t xx = 0; xx < 2 * W; ++xx) dst[y * 2 * W + xx] = src[(y / 2) * W + xx / 2];
  }
  return make_result<T>(std::move(out), {x}, [planes, H, W](Node<T>& o) {
    T* g = gbuf(o, 0);
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* src = o.grad.data() + p * 4 * H * W;
      T* dst = g + p * H * W;
      for (std::int64_t y = 0; y < 2 * H; ++y)
        for (std::int64_t xx = 0; xx < 2 * W; ++xx) dst[(y / 2) * W + xx / 2] += src[y * 2 * W + xx];
    }
  });
}

template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mse");
  const std::int64_t n = a.value().numel();
  double s = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.value()[i] - b.value()[i]);
    s += d * d;
  }
  Tensor<T> out(Shape{1}, std::vector<T>{static_cast<T>(s / static_cast<double>(n))});
  return make_result<T>(std::move(out), {a, b}, [n](Node<T>& o) {
    const T c = T(2) * o.grad[0] / T(n);
    const T* ad = val(o, 0);
    const T* bd = val(o, 1);
    if (wants(o, 0)) {
      T* g = gbuf(o, 0);
      for (std::int64_t i = 0; i < n; ++i) g[i] += c * (ad[i] - bd[i]);
    }
    if (wants(o, 1)) {
      T* g = gbuf(o, 1);
      for (std::int64_t i = 0; i < n; ++i) g[i] -= c * (ad[i] - bd[i]);
    }
  });
}

template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw DimensionError("weighted_sum: size mismatch");
  T s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].item();
  Tensor<T> out(Shape{1}, std::vector<T>{s});
  return make_result<T>(std::move(out), terms, [weights](Node<T>& o) {
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (wants(o, i)) gbuf(o, i)[0] += weights[i] * o.grad[0];
  });
}

#define SLIMUNET_INSTANTIATE_OPS(T)                                                              \
  template Var<T> add(const Var<T>&, const Var<T>&);                                             \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                             \
  template Var<T> scale(const Var<T>&, T);                                                       \
  template Var<T> add_per_channel(const Var<T>&, const Var<T>&);                                 \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>*, int, int);                 \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>*);                           \
  template Var<T> group_norm(const Var<T>&, const Var<T>&, const Var<T>&, int, T);               \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                    \
  template Var<T> silu(const Var<T>&);                                                           \
  template Var<T> gelu(const Var<T>&);                                                           \
  template Var<T> geglu(const Var<T>&);                                                          \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int, int);              \
  template Var<T> to_tokens(const Var<T>&);                                                      \
  template Var<T> from_tokens(const Var<T>&, std::int64_t, std::int64_t, std::int64_t);          \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                 \
  template Var<T> upsample_nearest2x(const Var<T>&);                                             \
  template Var<T> mse(const Var<T>&, const Var<T>&);                                             \
  template Var<T> weighted_sum(const std::vector<Var<T>>&, const std::vector<T>&);

SLIMUNET_INSTANTIATE_OPS(float)
SLIMUNET_INSTANTIATE_OPS(double)

}  // namespace slimunet::ops
