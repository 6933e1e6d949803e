#include "levit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gemm.hpp"
#include "tensor_impl.hpp"

namespace levit {

namespace {

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw std::invalid_argument(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) +
                                " vs " + dtype_name(b.dtype()) + ")");
  }
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.ndim() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

std::int64_t spatial_size(const Shape& s) {
  std::int64_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

// ---- im2col helpers ------------------------------------------------------

template <typename T>
void im2col(const T* in, std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, int stride, int pad, std::int64_t ho, std::int64_t wo, T* col) {
  for (std::int64_t c = 0; c < channels; ++c) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride - pad + ki;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride - pad + kj;
            row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    ? in[(c * h + iy) * w + ix]
                                    : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, int stride, int pad, std::int64_t ho, std::int64_t wo, T* in) {
  for (std::int64_t c = 0; c < channels; ++c) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride - pad + kj;
            if (ix < 0 || ix >= w) continue;
            in[(c * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

bool is_direct_pointwise(const Shape& weight, int stride, int padding) {
  return weight[2] == 1 && weight[3] == 1 && stride == 1 && padding == 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Factories
// ---------------------------------------------------------------------------

Tensor random_normal(const Shape& shape, std::mt19937_64& rng, double stddev, DType dtype) {
  Tensor t = Tensor::zeros(shape, dtype);
  std::normal_distribution<double> dist(0.0, stddev);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_value(i, dist(rng));
  return t;
}

Tensor truncated_normal(const Shape& shape, std::mt19937_64& rng, double stddev, DType dtype) {
  Tensor t = Tensor::zeros(shape, dtype);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    t.set_value(i, z * stddev);
  }
  return t;
}

Tensor random_uniform(const Shape& shape, std::mt19937_64& rng, double low, double high,
                      DType dtype) {
  Tensor t = Tensor::zeros(shape, dtype);
  std::uniform_real_distribution<double> dist(low, high);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_value(i, dist(rng));
  return t;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

Shape conv2d_output_shape(const Shape& input, const Shape& weight, int stride, int padding) {
  if (input.size() != 4 || weight.size() != 4) {
    throw ShapeError("conv2d: expected BCHW input and (Cout,Cin,kh,kw) weight, got " +
                     shape_str(input) + " and " + shape_str(weight));
  }
  if (input[1] != weight[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(input[1]) +
                     " channels but weight expects " + std::to_string(weight[1]));
  }
  if (stride < 1 || padding < 0) {
    throw std::invalid_argument("conv2d: stride must be positive and padding non-negative");
  }
  const std::int64_t hp = input[2] + 2 * padding;
  const std::int64_t wp = input[3] + 2 * padding;
  if (hp < weight[2] || wp < weight[3]) {
    throw ShapeError("conv2d: kernel " + shape_str(weight) + " larger than padded input " +
                     shape_str(input));
  }
  return {input[0], weight[0], (hp - weight[2]) / stride + 1, (wp - weight[3]) / stride + 1};
}

std::int64_t conv2d_macs(const Shape& input, const Shape& weight, int stride, int padding) {
  const Shape out = conv2d_output_shape(input, weight, stride, padding);
  return out[0] * out[1] * out[2] * out[3] * weight[1] * weight[2] * weight[3];
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  const Shape out_shape = conv2d_output_shape(input.shape(), weight.shape(), stride, padding);
  require_same_dtype(input, weight, "conv2d");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != weight.dim(0))) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match Cout " +
                     std::to_string(weight.dim(0)));
  }
  const std::int64_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const std::int64_t ho = out_shape[2], wo = out_shape[3];
  const std::int64_t patch = cin * kh * kw, sites = ho * wo;
  const bool direct = is_direct_pointwise(weight.shape(), stride, padding);

  Tensor out = Tensor::zeros(out_shape, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    const T* wt = weight.data<T>().data();
    T* y = out.data<T>().data();
    std::vector<T> col(direct ? 0 : static_cast<std::size_t>(patch * sites));
    for (std::int64_t b = 0; b < batch; ++b) {
      const T* xb = x + b * cin * h * w;
      const T* cols = xb;
      if (!direct) {
        im2col(xb, cin, h, w, kh, kw, stride, padding, ho, wo, col.data());
        cols = col.data();
      }
      T* yb = y + b * cout * sites;
      gemm<T>(false, false, cout, sites, patch, wt, patch, cols, sites, yb, sites, false);
      if (bias.defined()) {
        const T* bb = bias.data<T>().data();
        for (std::int64_t c = 0; c < cout; ++c) {
          for (std::int64_t p = 0; p < sites; ++p) yb[c * sites + p] += bb[c];
        }
      }
    }
  });

  return attach_grad(out, "conv2d", {input, weight, bias}, [=](const Tensor& g) {
    Tensor gin = input.requires_grad() ? Tensor::zeros(input.shape(), input.dtype()) : Tensor();
    Tensor gw = Tensor::zeros(weight.shape(), weight.dtype());
    Tensor gb = bias.defined() ? Tensor::zeros(bias.shape(), bias.dtype()) : Tensor();
    dispatch(input.dtype(), [&]<typename T>() {
      const T* x = input.data<T>().data();
      const T* wt = weight.data<T>().data();
      const T* gy = g.data<T>().data();
      T* gwp = gw.data<T>().data();
      std::vector<T> col(direct ? 0 : static_cast<std::size_t>(patch * sites));
      std::vector<T> gcol(static_cast<std::size_t>(patch * sites));
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* gyb = gy + b * cout * sites;
        const T* xb = x + b * cin * h * w;
        const T* cols = xb;
        if (!direct) {
          im2col(xb, cin, h, w, kh, kw, stride, padding, ho, wo, col.data());
          cols = col.data();
        }
        gemm<T>(false, true, cout, patch, sites, gyb, sites, cols, sites, gwp, patch, true);
        if (gin.defined()) {
          T* gxb = gin.data<T>().data() + b * cin * h * w;
          if (direct) {
            gemm<T>(true, false, patch, sites, cout, wt, patch, gyb, sites, gxb, sites, true);
          } else {
            gemm<T>(true, false, patch, sites, cout, wt, patch, gyb, sites, gcol.data(), sites,
                    false);
            col2im(gcol.data(), cin, h, w, kh, kw, stride, padding, ho, wo, gxb);
          }
        }
        if (gb.defined()) {
          T* gbp = gb.data<T>().data();
          for (std::int64_t c = 0; c < cout; ++c) {
            T acc = 0;
            for (std::int64_t p = 0; p < sites; ++p) acc += gyb[c * sites + p];
            gbp[c] += acc;
          }
        }
      }
    });
    return std::vector<Tensor>{gin, gw, gb};
  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, Mode mode, double momentum,
                  double epsilon) {
  if (input.ndim() < 2) throw ShapeError("batch_norm: input must be (B, C, ...)");
  const std::int64_t batch = input.dim(0), channels = input.dim(1);
  const std::int64_t spatial = spatial_size(input.shape());
  for (const Tensor* p : {&gamma, &beta, static_cast<const Tensor*>(&running_mean), static_cast<const Tensor*>(&running_var)}) {
    if (p->ndim() != 1 || p->dim(0) != channels) {
      throw ShapeError("batch_norm: parameter shape " + shape_str(p->shape()) +
                       " does not match channel extent " + std::to_string(channels));
    }
  }
  if (epsilon < 0) throw std::invalid_argument("batch_norm: epsilon must be non-negative");
  const std::int64_t count = batch * spatial;
  const bool train = mode == Mode::Train;

  Tensor out = Tensor::zeros(input.shape(), input.dtype());
  // Per-channel statistics used by the forward pass, kept for backward.
  std::vector<double> mean_c(static_cast<std::size_t>(channels));
  std::vector<double> invstd_c(static_cast<std::size_t>(channels));
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    const T* gm = gamma.data<T>().data();
    const T* bt = beta.data<T>().data();
    T* rm = running_mean.data<T>().data();
    T* rv = running_var.data<T>().data();
    T* y = out.data<T>().data();
    for (std::int64_t c = 0; c < channels; ++c) {
      double mu, var;
      if (train) {
        double s = 0;
        for (std::int64_t b = 0; b < batch; ++b) {
          const T* xc = x + (b * channels + c) * spatial;
          for (std::int64_t p = 0; p < spatial; ++p) s += xc[p];
        }
        mu = s / static_cast<double>(count);
        double ss = 0;
        for (std::int64_t b = 0; b < batch; ++b) {
          const T* xc = x + (b * channels + c) * spatial;
          for (std::int64_t p = 0; p < spatial; ++p) {
            const double d = xc[p] - mu;
            ss += d * d;
          }
        }
        var = ss / static_cast<double>(count);
        rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * mu);
        rv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * var);
      } else {
        mu = rm[c];
        var = rv[c];
      }
      const double invstd = 1.0 / std::sqrt(var + epsilon);
      mean_c[static_cast<std::size_t>(c)] = mu;
      invstd_c[static_cast<std::size_t>(c)] = invstd;
      const T a = static_cast<T>(gm[c] * invstd);
      const T off = static_cast<T>(bt[c] - gm[c] * mu * invstd);
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* xc = x + (b * channels + c) * spatial;
        T* yc = y + (b * channels + c) * spatial;
        for (std::int64_t p = 0; p < spatial; ++p) yc[p] = a * xc[p] + off;
      }
    }
  });

  return attach_grad(out, "batch_norm", {input, gamma, beta}, [=](const Tensor& g) {
    Tensor gin = Tensor::zeros(input.shape(), input.dtype());
    Tensor ggamma = Tensor::zeros(gamma.shape(), gamma.dtype());
    Tensor gbeta = Tensor::zeros(beta.shape(), beta.dtype());
    dispatch(input.dtype(), [&]<typename T>() {
      const T* x = input.data<T>().data();
      const T* gy = g.data<T>().data();
      const T* gm = gamma.data<T>().data();
      T* gx = gin.data<T>().data();
      for (std::int64_t c = 0; c < channels; ++c) {
        const double mu = mean_c[static_cast<std::size_t>(c)];
        const double invstd = invstd_c[static_cast<std::size_t>(c)];
        double sum_g = 0, sum_gx = 0;
        for (std::int64_t b = 0; b < batch; ++b) {
          const T* xc = x + (b * channels + c) * spatial;
          const T* gc = gy + (b * channels + c) * spatial;
          for (std::int64_t p = 0; p < spatial; ++p) {
            sum_g += gc[p];
            sum_gx += gc[p] * (xc[p] - mu) * invstd;
          }
        }
        ggamma.data<T>()[static_cast<std::size_t>(c)] = static_cast<T>(sum_gx);
        gbeta.data<T>()[static_cast<std::size_t>(c)] = static_cast<T>(sum_g);
        const double n = static_cast<double>(count);
        for (std::int64_t b = 0; b < batch; ++b) {
          const T* xc = x + (b * channels + c) * spatial;
          const T* gc = gy + (b * channels + c) * spatial;
          T* gxc = gx + (b * channels + c) * spatial;
          for (std::int64_t p = 0; p < spatial; ++p) {
            if (train) {
              const double xhat = (xc[p] - mu) * invstd;
              gxc[p] = static_cast<T>(gm[c] * invstd * (gc[p] - sum_g / n - xhat * sum_gx / n));
            } else {
              gxc[p] = static_cast<T>(gm[c] * invstd * gc[p]);
            }
          }
        }
      }
    });
    return std::vector<Tensor>{gin, ggamma, gbeta};
  });
}

Tensor layer_norm_channels(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                           double epsilon) {
  if (input.ndim() < 2) throw ShapeError("layer_norm: input must be (B, C, ...)");
  const std::int64_t batch = input.dim(0), channels = input.dim(1);
  const std::int64_t spatial = spatial_size(input.shape());
  for (const Tensor* p : {&gamma, &beta}) {
    if (p->ndim() != 1 || p->dim(0) != channels) {
      throw ShapeError("layer_norm: parameter shape " + shape_str(p->shape()) +
                       " does not match channel extent " + std::to_string(channels));
    }
  }
  const std::int64_t sites = batch * spatial;
  std::vector<double> mean_s(static_cast<std::size_t>(sites));
  std::vector<double> invstd_s(static_cast<std::size_t>(sites));
  Tensor out = Tensor::zeros(input.shape(), input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    const T* gm = gamma.data<T>().data();
    const T* bt = beta.data<T>().data();
    T* y = out.data<T>().data();
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t p = 0; p < spatial; ++p) {
        const T* xs = x + b * channels * spatial + p;
        double s = 0;
        for (std::int64_t c = 0; c < channels; ++c) s += xs[c * spatial];
        const double mu = s / static_cast<double>(channels);
        double ss = 0;
        for (std::int64_t c = 0; c < channels; ++c) {
          const double d = xs[c * spatial] - mu;
          ss += d * d;
        }
        const double invstd = 1.0 / std::sqrt(ss / static_cast<double>(channels) + epsilon);
        const auto site = static_cast<std::size_t>(b * spatial + p);
        mean_s[site] = mu;
        invstd_s[site] = invstd;
        T* ys = y + b * channels * spatial + p;
        for (std::int64_t c = 0; c < channels; ++c) {
          ys[c * spatial] = static_cast<T>(gm[c] * (xs[c * spatial] - mu) * invstd + bt[c]);
        }
      }
    }
  });

  return attach_grad(out, "layer_norm", {input, gamma, beta}, [=](const Tensor& g) {
    Tensor gin = Tensor::zeros(input.shape(), input.dtype());
    Tensor ggamma = Tensor::zeros(gamma.shape(), gamma.dtype());
    Tensor gbeta = Tensor::zeros(beta.shape(), beta.dtype());
    dispatch(input.dtype(), [&]<typename T>() {
      const T* x = input.data<T>().data();
      const T* gy = g.data<T>().data();
      const T* gm = gamma.data<T>().data();
      T* gx = gin.data<T>().data();
      T* gg = ggamma.data<T>().data();
      T* gbp = gbeta.data<T>().data();
      const double n = static_cast<double>(channels);
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t p = 0; p < spatial; ++p) {
          const auto site = static_cast<std::size_t>(b * spatial + p);
          const double mu = mean_s[site], invstd = invstd_s[site];
          const std::int64_t base = b * channels * spatial + p;
          double sum_d = 0, sum_dx = 0;
          for (std::int64_t c = 0; c < channels; ++c) {
            const double xhat = (x[base + c * spatial] - mu) * invstd;
            const double gyc = gy[base + c * spatial];
            gg[c] += static_cast<T>(gyc * xhat);
            gbp[c] += static_cast<T>(gyc);
            const double d = gyc * gm[c];
            sum_d += d;
            sum_dx += d * xhat;
          }
          for (std::int64_t c = 0; c < channels; ++c) {
            const double xhat = (x[base + c * spatial] - mu) * invstd;
            const double d = gy[base + c * spatial] * gm[c];
            gx[base + c * spatial] = static_cast<T>(invstd * (d - sum_d / n - xhat * sum_dx / n));
          }
        }
      }
    });
    return std::vector<Tensor>{gin, ggamma, gbeta};
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Tensor hardswish(const Tensor& input) {
  Tensor out = Tensor::zeros(input.shape(), input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    auto x = input.data<T>();
    auto y = out.data<T>();
    for (std::size_t i = 0; i < x.size(); ++i) {
      y[i] = x[i] * std::clamp<T>(x[i] + T(3), T(0), T(6)) / T(6);
    }
  });
  return attach_grad(out, "hardswish", {input}, [input](const Tensor& g) {
    Tensor gin = Tensor::zeros(input.shape(), input.dtype());
    dispatch(input.dtype(), [&]<typename T>() {
      auto x = input.data<T>();
      auto gy = g.data<T>();
      auto gx = gin.data<T>();
      for (std::size_t i = 0; i < x.size(); ++i) {
        T d;
        if (x[i] <= T(-3)) {
          d = 0;
        } else if (x[i] >= T(3)) {
          d = 1;
        } else {
          d = (T(2) * x[i] + T(3)) / T(6);
        }
        gx[i] = gy[i] * d;
      }
    });
    return std::vector<Tensor>{gin};
  });
}

Tensor softmax_lastdim(const Tensor& input) {
  const std::int64_t n = input.dim(-1);
  const std::int64_t rows = input.numel() / n;
  Tensor out = Tensor::zeros(input.shape(), input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = x + r * n;
      T* yr = y + r * n;
      const T m = *std::max_element(xr, xr + n);
      T s = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        yr[i] = std::exp(xr[i] - m);
        s += yr[i];
      }
      const T inv = T(1) / s;
      for (std::int64_t i = 0; i < n; ++i) yr[i] *= inv;
    }
  });
  // The closure keeps its own copy of the probabilities; capturing `out`
  // itself would make the node own its output.
  return attach_grad(out, "softmax", {input}, [probs = out.detach(), n, rows](const Tensor& g) {
    Tensor gin = Tensor::zeros(probs.shape(), probs.dtype());
    dispatch(probs.dtype(), [&]<typename T>() {
      const T* y = probs.data<T>().data();
      const T* gy = g.data<T>().data();
      T* gx = gin.data<T>().data();
      for (std::int64_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::int64_t i = 0; i < n; ++i) dot += gy[r * n + i] * y[r * n + i];
        for (std::int64_t i = 0; i < n; ++i) gx[r * n + i] = y[r * n + i] * (gy[r * n + i] - dot);
      }
    });
    return std::vector<Tensor>{gin};
  });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

struct MatmulPlan {
  std::int64_t batch = 1;
  std::int64_t m = 0, k = 0, n = 0;
  bool a_batched = false, b_batched = false;
  Shape out_shape;
};

MatmulPlan plan_matmul(const Shape& a, const Shape& b, bool transpose_b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a) + " and " +
                     shape_str(b));
  }
  MatmulPlan p;
  p.m = a[a.size() - 2];
  p.k = a[a.size() - 1];
  const std::int64_t bk = transpose_b ? b[b.size() - 1] : b[b.size() - 2];
  p.n = transpose_b ? b[b.size() - 2] : b[b.size() - 1];
  if (bk != p.k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a) + " x " + shape_str(b) +
                     (transpose_b ? "^T" : ""));
  }
  const Shape lead_a(a.begin(), a.end() - 2);
  const Shape lead_b(b.begin(), b.end() - 2);
  Shape lead;
  if (lead_a == lead_b) {
    lead = lead_a;
    p.a_batched = p.b_batched = !lead.empty();
  } else if (lead_b.empty()) {
    lead = lead_a;
    p.a_batched = true;
  } else if (lead_a.empty()) {
    lead = lead_b;
    p.b_batched = true;
  } else {
    throw ShapeError("matmul: leading extents not broadcastable, " + shape_str(a) + " x " +
                     shape_str(b));
  }
  p.batch = shape_numel(lead);
  p.out_shape = lead;
  p.out_shape.push_back(p.m);
  p.out_shape.push_back(p.n);
  return p;
}

}  // namespace

std::int64_t matmul_macs(const Shape& a, const Shape& b, bool transpose_b) {
  const MatmulPlan p = plan_matmul(a, b, transpose_b);
  return p.batch * p.m * p.k * p.n;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_same_dtype(a, b, "matmul");
  const MatmulPlan p = plan_matmul(a.shape(), b.shape(), transpose_b);
  Tensor out = Tensor::zeros(p.out_shape, a.dtype());
  const std::int64_t a_stride = p.a_batched ? p.m * p.k : 0;
  const std::int64_t b_stride = p.b_batched ? p.k * p.n : 0;
  const std::int64_t ldb = transpose_b ? p.k : p.n;
  dispatch(a.dtype(), [&]<typename T>() {
    const T* ap = a.data<T>().data();
    const T* bp = b.data<T>().data();
    T* cp = out.data<T>().data();
    for (std::int64_t i = 0; i < p.batch; ++i) {
      gemm<T>(false, transpose_b, p.m, p.n, p.k, ap + i * a_stride, p.k, bp + i * b_stride, ldb,
              cp + i * p.m * p.n, p.n, false);
    }
  });
  return attach_grad(out, "matmul", {a, b}, [=](const Tensor& g) {
    Tensor ga = a.requires_grad() ? Tensor::zeros(a.shape(), a.dtype()) : Tensor();
    Tensor gb = b.requires_grad() ? Tensor::zeros(b.shape(), b.dtype()) : Tensor();
    dispatch(a.dtype(), [&]<typename T>() {
      const T* ap = a.data<T>().data();
      const T* bp = b.data<T>().data();
      const T* gp = g.data<T>().data();
      for (std::int64_t i = 0; i < p.batch; ++i) {
        const T* gi = gp + i * p.m * p.n;
        if (ga.defined()) {
          // dA = dC * B^T  (or dC * B when B was read transposed)
          T* gai = ga.data<T>().data() + i * a_stride;
          gemm<T>(false, !transpose_b, p.m, p.k, p.n, gi, p.n, bp + i * b_stride, ldb, gai, p.k,
                  true);
        }
        if (gb.defined()) {
          T* gbi = gb.data<T>().data() + i * b_stride;
          if (transpose_b) {
            // B is (n, k): dB = dC^T * A
            gemm<T>(true, false, p.n, p.k, p.m, gi, p.n, ap + i * a_stride, p.k, gbi, p.k, true);
          } else {
            // dB = A^T * dC
            gemm<T>(true, false, p.k, p.n, p.m, ap + i * a_stride, p.k, gi, p.n, gbi, p.n, true);
          }
        }
      }
    });
    return std::vector<Tensor>{ga, gb};
  });
}

// ---------------------------------------------------------------------------
// Pooling, elementwise, reductions
// ---------------------------------------------------------------------------

Tensor avgpool_global(const Tensor& input) {
  require_rank(input, 4, "avgpool_global");
  const std::int64_t bc = input.dim(0) * input.dim(1);
  const std::int64_t hw = input.dim(2) * input.dim(3);
  Tensor out = Tensor::zeros({input.dim(0), input.dim(1)}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    for (std::int64_t i = 0; i < bc; ++i) {
      T s = 0;
      for (std::int64_t p = 0; p < hw; ++p) s += x[i * hw + p];
      y[i] = s / static_cast<T>(hw);
    }
  });
  const Shape in_shape = input.shape();
  return attach_grad(out, "avgpool", {input}, [in_shape, bc, hw](const Tensor& g) {
    Tensor gin = Tensor::zeros(in_shape, g.dtype());
    dispatch(g.dtype(), [&]<typename T>() {
      const T* gy = g.data<T>().data();
      T* gx = gin.data<T>().data();
      for (std::int64_t i = 0; i < bc; ++i) {
        const T v = gy[i] / static_cast<T>(hw);
        for (std::int64_t p = 0; p < hw; ++p) gx[i * hw + p] = v;
      }
    });
    return std::vector<Tensor>{gin};
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "add");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool suffix = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!suffix) {
    throw ShapeError("add: shape " + shape_str(sb) + " does not broadcast onto " + shape_str(sa));
  }
  const std::int64_t inner = b.numel();
  const std::int64_t outer = a.numel() / inner;
  Tensor out = a.detach();
  dispatch(a.dtype(), [&]<typename T>() {
    T* y = out.data<T>().data();
    const T* bp = b.data<T>().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) y[o * inner + i] += bp[i];
    }
  });
  return attach_grad(out, "add", {a, b}, [=](const Tensor& g) {
    Tensor gb;
    if (b.requires_grad()) {
      if (outer == 1) {
        gb = g.reshape(b.shape());
      } else {
        gb = Tensor::zeros(b.shape(), b.dtype());
        dispatch(g.dtype(), [&]<typename T>() {
          const T* gp = g.data<T>().data();
          T* gbp = gb.data<T>().data();
          for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t i = 0; i < inner; ++i) gbp[i] += gp[o * inner + i];
          }
        });
      }
    }
    return std::vector<Tensor>{a.requires_grad() ? g : Tensor(), gb};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "mul");
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    auto x = a.data<T>();
    auto z = b.data<T>();
    auto y = out.data<T>();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  });
  return attach_grad(out, "mul", {a, b}, [a, b](const Tensor& g) {
    NoGradGuard guard;
    return std::vector<Tensor>{a.requires_grad() ? mul(g, b) : Tensor(),
                               b.requires_grad() ? mul(g, a) : Tensor()};
  });
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = a.detach();
  dispatch(a.dtype(), [&]<typename T>() {
    for (auto& v : out.data<T>()) v *= static_cast<T>(factor);
  });
  return attach_grad(out, "scale", {a}, [factor](const Tensor& g) {
    return std::vector<Tensor>{scale(g, factor)};
  });
}

Tensor scale_samples(const Tensor& a, std::span<const double> factors) {
  if (a.ndim() < 1 || static_cast<std::int64_t>(factors.size()) != a.dim(0)) {
    throw ShapeError("scale_samples: need one factor per sample of " + shape_str(a.shape()));
  }
  const std::int64_t per = a.numel() / a.dim(0);
  std::vector<double> f(factors.begin(), factors.end());
  auto apply = [per](const Tensor& src, const std::vector<double>& fs) {
    Tensor out = src.detach();
    dispatch(src.dtype(), [&]<typename T>() {
      T* y = out.data<T>().data();
      for (std::size_t b = 0; b < fs.size(); ++b) {
        const T s = static_cast<T>(fs[b]);
        for (std::int64_t i = 0; i < per; ++i) y[static_cast<std::int64_t>(b) * per + i] *= s;
      }
    });
    return out;
  };
  Tensor out = apply(a, f);
  return attach_grad(out, "scale_samples", {a}, [apply, f](const Tensor& g) {
    return std::vector<Tensor>{apply(g, f)};
  });
}

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::zeros({1}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    double s = 0;
    for (auto v : a.data<T>()) s += v;
    out.data<T>()[0] = static_cast<T>(s);
  });
  const Shape in_shape = a.shape();
  return attach_grad(out, "sum", {a}, [in_shape](const Tensor& g) {
    return std::vector<Tensor>{Tensor::full(in_shape, g.item(), g.dtype())};
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "linear");
  require_rank(weight, 2, "linear");
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(input.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  Tensor y = matmul(input, weight, /*transpose_b=*/true);
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Layout ops for attention
// ---------------------------------------------------------------------------

Tensor split_heads(const Tensor& input, std::int64_t channel_offset, std::int64_t heads,
                   std::int64_t head_dim) {
  require_rank(input, 4, "split_heads");
  const std::int64_t batch = input.dim(0), channels = input.dim(1);
  const std::int64_t tokens = input.dim(2) * input.dim(3);
  if (channel_offset < 0 || channel_offset + heads * head_dim > channels) {
    throw ShapeError("split_heads: channel range exceeds input " + shape_str(input.shape()));
  }
  Tensor out = Tensor::zeros({batch, heads, tokens, head_dim}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t j = 0; j < head_dim; ++j) {
          const T* src = x + (b * channels + channel_offset + h * head_dim + j) * tokens;
          T* dst = y + (b * heads + h) * tokens * head_dim + j;
          for (std::int64_t t = 0; t < tokens; ++t) dst[t * head_dim] = src[t];
        }
  });
  const Shape in_shape = input.shape();
  return attach_grad(out, "split_heads", {input}, [=](const Tensor& g) {
    Tensor gin = Tensor::zeros(in_shape, g.dtype());
    dispatch(g.dtype(), [&]<typename T>() {
      const T* gy = g.data<T>().data();
      T* gx = gin.data<T>().data();
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t j = 0; j < head_dim; ++j) {
            T* dst = gx + (b * channels + channel_offset + h * head_dim + j) * tokens;
            const T* src = gy + (b * heads + h) * tokens * head_dim + j;
            for (std::int64_t t = 0; t < tokens; ++t) dst[t] = src[t * head_dim];
          }
    });
    return std::vector<Tensor>{gin};
  });
}

Tensor merge_heads(const Tensor& input, std::int64_t height, std::int64_t width) {
  require_rank(input, 4, "merge_heads");
  const std::int64_t batch = input.dim(0), heads = input.dim(1), tokens = input.dim(2),
                     head_dim = input.dim(3);
  if (height * width != tokens) {
    throw ShapeError("merge_heads: " + std::to_string(tokens) + " tokens cannot form a " +
                     std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  Tensor out = Tensor::zeros({batch, heads * head_dim, height, width}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* x = input.data<T>().data();
    T* y = out.data<T>().data();
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t j = 0; j < head_dim; ++j) {
          T* dst = y + (b * heads * head_dim + h * head_dim + j) * tokens;
          const T* src = x + (b * heads + h) * tokens * head_dim + j;
          for (std::int64_t t = 0; t < tokens; ++t) dst[t] = src[t * head_dim];
        }
  });
  const Shape in_shape = input.shape();
  return attach_grad(out, "merge_heads", {input}, [=](const Tensor& g) {
    Tensor gin = Tensor::zeros(in_shape, g.dtype());
    dispatch(g.dtype(), [&]<typename T>() {
      const T* gy = g.data<T>().data();
      T* gx = gin.data<T>().data();
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t j = 0; j < head_dim; ++j) {
            const T* src = gy + (b * heads * head_dim + h * head_dim + j) * tokens;
            T* dst = gx + (b * heads + h) * tokens * head_dim + j;
            for (std::int64_t t = 0; t < tokens; ++t) dst[t * head_dim] = src[t];
          }
    });
    return std::vector<Tensor>{gin};
  });
}

Tensor subsample(const Tensor& input, int stride) {
  require_rank(input, 4, "subsample");
  if (stride < 1) throw std::invalid_argument("subsample: stride must be positive");
  const std::int64_t bc = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t ho = (h + stride - 1) / stride, wo = (w + stride - 1) / stride;
  std::vector<std::int64_t> index;
  index.reserve(static_cast<std::size_t>(bc * ho * wo));
  for (std::int64_t i = 0; i < bc; ++i)
    for (std::int64_t y = 0; y < ho; ++y)
      for (std::int64_t x = 0; x < wo; ++x) index.push_back((i * h + y * stride) * w + x * stride);
  return gather(input, std::move(index), {input.dim(0), input.dim(1), ho, wo});
}

Tensor gather(const Tensor& source, std::vector<std::int64_t> index, const Shape& out_shape) {
  if (static_cast<std::int64_t>(index.size()) != shape_numel(out_shape)) {
    throw ShapeError("gather: " + std::to_string(index.size()) + " indices for output " +
                     shape_str(out_shape));
  }
  const std::int64_t n = source.numel();
  for (auto i : index) {
    if (i < 0 || i >= n) throw std::out_of_range("gather: index " + std::to_string(i) + " out of range");
  }
  Tensor out = Tensor::zeros(out_shape, source.dtype());
  dispatch(source.dtype(), [&]<typename T>() {
    const T* x = source.data<T>().data();
    T* y = out.data<T>().data();
    for (std::size_t i = 0; i < index.size(); ++i) y[i] = x[index[i]];
  });
  const Shape in_shape = source.shape();
  return attach_grad(out, "gather", {source},
                     [in_shape, idx = std::move(index)](const Tensor& g) {
                       Tensor gin = Tensor::zeros(in_shape, g.dtype());
                       dispatch(g.dtype(), [&]<typename T>() {
                         const T* gy = g.data<T>().data();
                         T* gx = gin.data<T>().data();
                         for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += gy[i];
                       });
                       return std::vector<Tensor>{gin};
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  }
  for (int l : labels) {
    if (l < 0 || l >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor probs = Tensor::zeros(logits.shape(), logits.dtype());
  Tensor out = Tensor::zeros({1}, logits.dtype());
  dispatch(logits.dtype(), [&]<typename T>() {
    const T* x = logits.data<T>().data();
    T* p = probs.data<T>().data();
    double total = 0;
    for (std::int64_t b = 0; b < batch; ++b) {
      const T* xb = x + b * classes;
      const double m = *std::max_element(xb, xb + classes);
      double s = 0;
      for (std::int64_t k = 0; k < classes; ++k) s += std::exp(xb[k] - m);
      const double lse = m + std::log(s);
      for (std::int64_t k = 0; k < classes; ++k) p[b * classes + k] = static_cast<T>(std::exp(xb[k] - lse));
      total += lse - xb[lab[static_cast<std::size_t>(b)]];
    }
    out.data<T>()[0] = static_cast<T>(total / static_cast<double>(batch));
  });
  return attach_grad(out, "cross_entropy", {logits}, [probs, lab, batch, classes](const Tensor& g) {
    Tensor gin = probs.detach();
    const double scale_factor = g.item() / static_cast<double>(batch);
    dispatch(gin.dtype(), [&]<typename T>() {
      T* gx = gin.data<T>().data();
      for (std::int64_t b = 0; b < batch; ++b) gx[b * classes + lab[static_cast<std::size_t>(b)]] -= T(1);
      for (auto& v : gin.data<T>()) v *= static_cast<T>(scale_factor);
    });
    return std::vector<Tensor>{gin};
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const auto x = a.to_vector();
  const auto y = b.to_vector();
  double m = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::abs(x[i] - y[i]);
    if (std::isnan(d)) return std::numeric_limits<double>::infinity();
    m = std::max(m, d);
  }
  return m;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "argmax_rows");
  const auto v = logits.to_vector();
  const std::int64_t k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  for (std::size_t b = 0; b < out.size(); ++b) {
    const auto first = v.begin() + static_cast<std::ptrdiff_t>(b) * k;
    out[b] = static_cast<int>(std::max_element(first, first + k) - first);
  }
  return out;
}

}  // namespace levit
