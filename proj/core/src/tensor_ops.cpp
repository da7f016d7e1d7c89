#include "csmri/tensor_ops.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace csmri {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRM = Eigen::Map<const RowMat<T>>;

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!same_shape(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void expect_rank4(const Tensor<T>& x, const char* op) {
  if (x.shape().size() != 4) {
    throw ShapeError(std::string(op) + ": expected a [B,C,H,W] tensor, got " +
                     shape_str(x.shape()));
  }
}

template <typename T, typename Fn>
void maybe_record(std::initializer_list<const Tensor<T>*> inputs, Tensor<T>& out, Fn&& fn) {
  if (!should_record<T>(inputs)) return;
  out.set_requires_grad(true);
  std::vector<Tensor<T>> in;
  in.reserve(inputs.size());
  for (const auto* t : inputs) in.push_back(*t);
  Tape<T>::current()->record(std::move(in), out, std::forward<Fn>(fn));
}

// im2col writing into a wide [K, ldc] matrix at a column offset (batched
// lowering); dst points at this item's first column.
template <typename T>
void im2col_strided(const T* img, int C, int H, int W, int kH, int kW, int stride, int pad,
                    int Ho, int Wo, T* dst, size_t ldc) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kH; ++ki) {
      for (int kj = 0; kj < kW; ++kj) {
        T* row = dst + static_cast<size_t>((c * kH + ki) * kW + kj) * ldc;
        for (int ho = 0; ho < Ho; ++ho) {
          const int hi = ho * stride - pad + ki;
          if (hi < 0 || hi >= H) {
            std::fill(row + static_cast<size_t>(ho) * Wo, row + static_cast<size_t>(ho + 1) * Wo,
                      T(0));
            continue;
          }
          const T* src = img + (static_cast<size_t>(c) * H + hi) * W;
          T* out = row + static_cast<size_t>(ho) * Wo;
          for (int wo = 0; wo < Wo; ++wo) {
            const int wi = wo * stride - pad + kj;
            out[wo] = (wi >= 0 && wi < W) ? src[wi] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_strided(const T* src, size_t ldc, int C, int H, int W, int kH, int kW, int stride,
                    int pad, int Ho, int Wo, T* img) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kH; ++ki) {
      for (int kj = 0; kj < kW; ++kj) {
        const T* row = src + static_cast<size_t>((c * kH + ki) * kW + kj) * ldc;
        for (int ho = 0; ho < Ho; ++ho) {
          const int hi = ho * stride - pad + ki;
          if (hi < 0 || hi >= H) continue;
          T* dst = img + (static_cast<size_t>(c) * H + hi) * W;
          const T* in = row + static_cast<size_t>(ho) * Wo;
          for (int wo = 0; wo < Wo; ++wo) {
            const int wi = wo * stride - pad + kj;
            if (wi >= 0 && wi < W) dst[wi] += in[wo];
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& scratch(size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

template <typename T>
std::vector<T>& scratch2(size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

template <typename T>
std::vector<T>& scratch3(size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

}  // namespace

// --- elementwise / scalar ---------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  maybe_record<T>({&a, &b}, out, [](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    for (int k = 0; k < 2; ++k) {
      if (rec.inputs[k].requires_grad()) accumulate_grad(rec.inputs[k], g);
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  maybe_record<T>({&a, &b}, out, [](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    if (rec.inputs[0].requires_grad()) accumulate_grad(rec.inputs[0], g);
    if (rec.inputs[1].requires_grad()) {
      auto gb = rec.inputs[1].ensure_grad();
      for (size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  maybe_record<T>({&a, &b}, out, [](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    auto av = rec.inputs[0].data(), bv = rec.inputs[1].data();
    if (rec.inputs[0].requires_grad()) {
      auto ga = rec.inputs[0].ensure_grad();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (rec.inputs[1].requires_grad()) {
      auto gb = rec.inputs[1].ensure_grad();
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, double c) {
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + static_cast<T>(c);
  maybe_record<T>({&a}, out, [](typename Tape<T>::Record& rec) {
    accumulate_grad(rec.inputs[0], rec.output.grad());
  });
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, double c) {
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * static_cast<T>(c);
  maybe_record<T>({&a}, out, [c](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    auto ga = rec.inputs[0].ensure_grad();
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * static_cast<T>(c);
  });
  return out;
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
  maybe_record<T>({&a}, out, [](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    auto av = rec.inputs[0].data();
    auto ga = rec.inputs[0].ensure_grad();
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / av[i];
  });
  return out;
}

template <typename T>
Tensor<T> abs_op(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::abs(av[i]);
  maybe_record<T>({&a}, out, [](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    auto av = rec.inputs[0].data();
    auto ga = rec.inputs[0].ensure_grad();
    for (size_t i = 0; i < ga.size(); ++i) {
      if (av[i] > T(0)) ga[i] += g[i];
      else if (av[i] < T(0)) ga[i] -= g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, double lo, double hi) {
  if (lo > hi) throw ConfigError("clamp: lo > hi");
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  const T l = static_cast<T>(lo), h = static_cast<T>(hi);
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::min(std::max(av[i], l), h);
  maybe_record<T>({&a}, out, [l, h](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    auto av = rec.inputs[0].data();
    auto ga = rec.inputs[0].ensure_grad();
    for (size_t i = 0; i < ga.size(); ++i) {
      if (av[i] >= l && av[i] <= h) ga[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> gate(const Tensor<T>& scalar, const Tensor<T>& x) {
  if (scalar.numel() != 1) throw ShapeError("gate: gating tensor must be scalar");
  Tensor<T> out(x.shape());
  const T s = scalar.data()[0];
  auto xv = x.data();
  auto ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = s * xv[i];
  maybe_record<T>({&scalar, &x}, out, [](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    const T s = rec.inputs[0].data()[0];
    auto xv = rec.inputs[1].data();
    if (rec.inputs[0].requires_grad()) {
      T acc = 0;
      for (size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      rec.inputs[0].ensure_grad()[0] += acc;
    }
    if (rec.inputs[1].requires_grad()) {
      auto gx = rec.inputs[1].ensure_grad();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * s;
    }
  });
  return out;
}

template <typename T>
Tensor<T> per_image_affine(const Tensor<T>& x, const std::vector<T>& scale,
                           const std::vector<T>& shift) {
  const auto& shape = x.shape();
  const size_t batch = static_cast<size_t>(shape.at(0));
  if (scale.size() != batch || shift.size() != batch) {
    throw ShapeError("per_image_affine: coefficient count does not match batch");
  }
  const size_t per = x.numel() / batch;
  Tensor<T> out(shape);
  auto xv = x.data();
  auto ov = out.data();
  for (size_t b = 0; b < batch; ++b) {
    for (size_t i = 0; i < per; ++i) ov[b * per + i] = xv[b * per + i] * scale[b] + shift[b];
  }
  maybe_record<T>({&x}, out, [scale, per](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    auto gx = rec.inputs[0].ensure_grad();
    for (size_t b = 0; b < scale.size(); ++b) {
      for (size_t i = 0; i < per; ++i) gx[b * per + i] += g[b * per + i] * scale[b];
    }
  });
  return out;
}

// --- reductions ---------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T acc = 0;
  for (auto v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  maybe_record<T>({&a}, out, [](typename Tape<T>::Record& rec) {
    const T g = rec.output.grad()[0];
    auto ga = rec.inputs[0].ensure_grad();
    for (auto& v : ga) v += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  T acc = 0;
  for (auto v : a.data()) acc += v;
  const T inv_n = T(1) / static_cast<T>(a.numel());
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
  maybe_record<T>({&a}, out, [inv_n](typename Tape<T>::Record& rec) {
    const T g = rec.output.grad()[0] * inv_n;
    auto ga = rec.inputs[0].ensure_grad();
    for (auto& v : ga) v += g;
  });
  return out;
}

// --- activations ----------------------------------------------------------------

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, double slope) {
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  const T a = static_cast<T>(slope);
  switch (kind) {
    case Activation::kLeakyRelu:
      for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : a * xv[i];
      break;
    case Activation::kSigmoid:
      for (size_t i = 0; i < ov.size(); ++i) {
        const T v = xv[i];
        if (v >= T(0)) {
          ov[i] = T(1) / (T(1) + std::exp(-v));
        } else {
          const T e = std::exp(v);
          ov[i] = e / (T(1) + e);
        }
      }
      break;
    case Activation::kTanh:
      for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(xv[i]);
      break;
  }
  maybe_record<T>({&x}, out, [kind, a](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    auto xv = rec.inputs[0].data();
    auto yv = rec.output.data();
    auto gx = rec.inputs[0].ensure_grad();
    switch (kind) {
      case Activation::kLeakyRelu:
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (xv[i] > T(0) ? T(1) : a);
        break;
      case Activation::kSigmoid:
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * yv[i] * (T(1) - yv[i]);
        break;
      case Activation::kTanh:
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (T(1) - yv[i] * yv[i]);
        break;
    }
  });
  return out;
}

template <typename T>
Tensor<T> channelwise_dropout(const Tensor<T>& x, double rate, bool training, RngStream& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  expect_rank4(x, "channelwise_dropout");
  if (!training || rate == 0.0) return x;

  const int B = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1));
  const size_t plane = static_cast<size_t>(x.dim(2)) * static_cast<size_t>(x.dim(3));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(static_cast<size_t>(B) * C);
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : keep_scale;

  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (size_t bc = 0; bc < mask.size(); ++bc) {
    const T m = mask[bc];
    const size_t base = bc * plane;
    for (size_t i = 0; i < plane; ++i) ov[base + i] = xv[base + i] * m;
  }
  maybe_record<T>({&x}, out, [mask = std::move(mask), plane](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    auto gx = rec.inputs[0].ensure_grad();
    for (size_t bc = 0; bc < mask.size(); ++bc) {
      const T m = mask[bc];
      const size_t base = bc * plane;
      for (size_t i = 0; i < plane; ++i) gx[base + i] += g[base + i] * m;
    }
  });
  return out;
}

// --- batch norm ------------------------------------------------------------------

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     double momentum, double epsilon) {
  expect_rank4(x, "batch_norm");
  const int B = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1));
  const int H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
  if (gamma.numel() != static_cast<size_t>(C) || beta.numel() != static_cast<size_t>(C) ||
      running_mean.numel() != static_cast<size_t>(C) ||
      running_var.numel() != static_cast<size_t>(C)) {
    throw ShapeError("batch_norm: per-channel parameter size must equal C=" + std::to_string(C));
  }
  const size_t plane = static_cast<size_t>(H) * W;
  const size_t n = static_cast<size_t>(B) * plane;

  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  auto gv = gamma.data();
  auto bv = beta.data();

  auto index = [&](int b, int c) { return (static_cast<size_t>(b) * C + c) * plane; };

  if (!training) {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    std::vector<T> mu(rm.begin(), rm.end());
    std::vector<T> istd(C);
    for (int c = 0; c < C; ++c) {
      istd[c] = T(1) / std::sqrt(rv[c] + static_cast<T>(epsilon));
      const T scale = gv[c] * istd[c];
      const T shift = bv[c] - rm[c] * scale;
      for (int b = 0; b < B; ++b) {
        const size_t base = index(b, c);
        for (size_t i = 0; i < plane; ++i) ov[base + i] = xv[base + i] * scale + shift;
      }
    }
    maybe_record<T>({&x, &gamma, &beta}, out,
                    [C, plane, B, mu = std::move(mu),
                     istd = std::move(istd)](typename Tape<T>::Record& rec) {
                      auto g = rec.output.grad();
                      auto xv = rec.inputs[0].data();
                      auto gv = rec.inputs[1].data();
                      auto idx = [&](int b, int c) {
                        return (static_cast<size_t>(b) * C + c) * plane;
                      };
                      for (int c = 0; c < C; ++c) {
                        T dgamma = 0, dbeta = 0;
                        for (int b = 0; b < B; ++b) {
                          const size_t base = idx(b, c);
                          for (size_t i = 0; i < plane; ++i) {
                            const T gi = g[base + i];
                            dbeta += gi;
                            dgamma += gi * (xv[base + i] - mu[c]) * istd[c];
                          }
                        }
                        if (rec.inputs[1].requires_grad()) rec.inputs[1].ensure_grad()[c] += dgamma;
                        if (rec.inputs[2].requires_grad()) rec.inputs[2].ensure_grad()[c] += dbeta;
                        if (rec.inputs[0].requires_grad()) {
                          auto gx = rec.inputs[0].ensure_grad();
                          const T k = gv[c] * istd[c];
                          for (int b = 0; b < B; ++b) {
                            const size_t base = idx(b, c);
                            for (size_t i = 0; i < plane; ++i) gx[base + i] += g[base + i] * k;
                          }
                        }
                      }
                    });
    return out;
  }

  if (n < 2) throw ContractError("batch_norm: training mode needs B*H*W >= 2");

  std::vector<T> mean(C), inv_std(C), xhat(x.numel());
  auto rm = running_mean.data();
  auto rv = running_var.data();
  for (int c = 0; c < C; ++c) {
    T acc = 0;
    for (int b = 0; b < B; ++b) {
      const size_t base = index(b, c);
      for (size_t i = 0; i < plane; ++i) acc += xv[base + i];
    }
    const T mu = acc / static_cast<T>(n);
    T var_acc = 0;
    for (int b = 0; b < B; ++b) {
      const size_t base = index(b, c);
      for (size_t i = 0; i < plane; ++i) {
        const T d = xv[base + i] - mu;
        var_acc += d * d;
      }
    }
    const T var_biased = var_acc / static_cast<T>(n);
    const T istd = T(1) / std::sqrt(var_biased + static_cast<T>(epsilon));
    mean[c] = mu;
    inv_std[c] = istd;
    for (int b = 0; b < B; ++b) {
      const size_t base = index(b, c);
      for (size_t i = 0; i < plane; ++i) {
        const T xh = (xv[base + i] - mu) * istd;
        xhat[base + i] = xh;
        ov[base + i] = xh * gv[c] + bv[c];
      }
    }
    const T var_unbiased = var_acc / static_cast<T>(n - 1);
    const T mom = static_cast<T>(momentum);
    rm[c] = (T(1) - mom) * rm[c] + mom * mu;
    rv[c] = (T(1) - mom) * rv[c] + mom * var_unbiased;
  }

  maybe_record<T>({&x, &gamma, &beta}, out,
                  [C, B, plane, n, inv_std = std::move(inv_std),
                   xhat = std::move(xhat)](typename Tape<T>::Record& rec) {
                    auto g = rec.output.grad();
                    auto gv = rec.inputs[1].data();
                    auto idx = [&](int b, int c) {
                      return (static_cast<size_t>(b) * C + c) * plane;
                    };
                    const T inv_n = T(1) / static_cast<T>(n);
                    for (int c = 0; c < C; ++c) {
                      T sum_g = 0, sum_g_xhat = 0;
                      for (int b = 0; b < B; ++b) {
                        const size_t base = idx(b, c);
                        for (size_t i = 0; i < plane; ++i) {
                          sum_g += g[base + i];
                          sum_g_xhat += g[base + i] * xhat[base + i];
                        }
                      }
                      if (rec.inputs[1].requires_grad()) {
                        rec.inputs[1].ensure_grad()[c] += sum_g_xhat;
                      }
                      if (rec.inputs[2].requires_grad()) {
                        rec.inputs[2].ensure_grad()[c] += sum_g;
                      }
                      if (rec.inputs[0].requires_grad()) {
                        auto gx = rec.inputs[0].ensure_grad();
                        const T k = gv[c] * inv_std[c];
                        for (int b = 0; b < B; ++b) {
                          const size_t base = idx(b, c);
                          for (size_t i = 0; i < plane; ++i) {
                            gx[base + i] += k * (g[base + i] - inv_n * sum_g -
                                                 inv_n * xhat[base + i] * sum_g_xhat);
                          }
                        }
                      }
                    }
                  });
  return out;
}

// --- convolution ------------------------------------------------------------------

namespace {

template <typename T>
void conv_shape_checks(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                       int padding, bool transpose) {
  expect_rank4(x, transpose ? "conv_transpose2d" : "conv2d");
  if (w.shape().size() != 4) {
    throw ShapeError("conv weight must be [F,C,kH,kW], got " + shape_str(w.shape()));
  }
  if (stride < 1) throw ConfigError("conv stride must be >= 1");
  if (padding < 0) throw ConfigError("conv padding must be >= 0");
  const int64_t channels = transpose ? w.dim(0) : w.dim(1);
  if (x.dim(1) != channels) {
    throw ShapeError(std::string(transpose ? "conv_transpose2d" : "conv2d") +
                     ": input channels " + std::to_string(x.dim(1)) +
                     " do not match weight " + shape_str(w.shape()));
  }
  const int64_t bias_len = transpose ? w.dim(1) : w.dim(0);
  if (b.numel() != static_cast<size_t>(bias_len)) {
    throw ShapeError("conv bias length " + std::to_string(b.numel()) + ", expected " +
                     std::to_string(bias_len));
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int padding) {
  conv_shape_checks(x, w, b, stride, padding, false);
  const int B = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1));
  const int H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
  const int F = static_cast<int>(w.dim(0)), kH = static_cast<int>(w.dim(2)),
            kW = static_cast<int>(w.dim(3));
  const int num = H + 2 * padding - kH;
  const int numw = W + 2 * padding - kW;
  if (num < 0 || numw < 0 || num % stride != 0 || numw % stride != 0) {
    throw ConfigError("conv2d: output extent for input " + shape_str(x.shape()) + ", kernel " +
                      shape_str(w.shape()) + ", stride " + std::to_string(stride) + ", padding " +
                      std::to_string(padding) + " is not a positive integer");
  }
  const int Ho = num / stride + 1, Wo = numw / stride + 1;
  const int K = C * kH * kW, P = Ho * Wo;

  // One GEMM across the whole batch: col [K, B*P] with per-item column
  // blocks, evaluated into a [F, B*P] staging buffer and scattered to the
  // [B,F,P] layout.
  Tensor<T> out({B, F, Ho, Wo});
  auto& col = scratch<T>(static_cast<size_t>(K) * B * P);
  for (int bi = 0; bi < B; ++bi) {
    im2col_strided(x.data().data() + static_cast<size_t>(bi) * C * H * W, C, H, W, kH, kW, stride,
                   padding, Ho, Wo, col.data() + static_cast<size_t>(bi) * P,
                   static_cast<size_t>(B) * P);
  }
  CMapRM<T> wm(w.data().data(), F, K);
  CMapRM<T> cm(col.data(), K, static_cast<size_t>(B) * P);
  auto& stage = scratch2<T>(static_cast<size_t>(F) * B * P);
  MapRM<T> sm(stage.data(), F, static_cast<size_t>(B) * P);
  sm.noalias() = wm * cm;
  auto ov = out.data();
  for (int bi = 0; bi < B; ++bi) {
    for (int f = 0; f < F; ++f) {
      const T* src = stage.data() + static_cast<size_t>(f) * B * P + static_cast<size_t>(bi) * P;
      T* dst = ov.data() + (static_cast<size_t>(bi) * F + f) * P;
      const T bias = b.data()[f];
      for (int i = 0; i < P; ++i) dst[i] = src[i] + bias;
    }
  }

  maybe_record<T>({&x, &w, &b}, out,
                  [stride, padding, C, H, W, F, kH, kW, Ho, Wo](typename Tape<T>::Record& rec) {
                    const int K = C * kH * kW, P = Ho * Wo;
                    const int B = static_cast<int>(rec.inputs[0].dim(0));
                    auto g = rec.output.grad();
                    auto& x = rec.inputs[0];
                    auto& w = rec.inputs[1];
                    auto& b = rec.inputs[2];
                    CMapRM<T> wm(w.data().data(), F, K);

                    // Gather the output gradient as [F, B*P] once.
                    auto& gstage = scratch2<T>(static_cast<size_t>(F) * B * P);
                    for (int bi = 0; bi < B; ++bi) {
                      for (int f = 0; f < F; ++f) {
                        const T* src = g.data() + (static_cast<size_t>(bi) * F + f) * P;
                        T* dst = gstage.data() + static_cast<size_t>(f) * B * P +
                                 static_cast<size_t>(bi) * P;
                        std::copy(src, src + P, dst);
                      }
                    }
                    CMapRM<T> gm(gstage.data(), F, static_cast<size_t>(B) * P);

                    if (w.requires_grad()) {
                      auto& col = scratch<T>(static_cast<size_t>(K) * B * P);
                      for (int bi = 0; bi < B; ++bi) {
                        im2col_strided(x.data().data() + static_cast<size_t>(bi) * C * H * W, C, H,
                                       W, kH, kW, stride, padding, Ho, Wo,
                                       col.data() + static_cast<size_t>(bi) * P,
                                       static_cast<size_t>(B) * P);
                      }
                      CMapRM<T> cm(col.data(), K, static_cast<size_t>(B) * P);
                      MapRM<T> dwm(w.ensure_grad().data(), F, K);
                      dwm.noalias() += gm * cm.transpose();
                    }
                    if (b.requires_grad()) {
                      // Fixed-order accumulation; Eigen's vectorized sum peels
                      // by pointer alignment and would not replay bit-identically
                      // across allocations.
                      auto db = b.ensure_grad();
                      for (int bi = 0; bi < B; ++bi) {
                        const T* gp = g.data() + static_cast<size_t>(bi) * F * P;
                        for (int f = 0; f < F; ++f) {
                          T acc = 0;
                          for (int i = 0; i < P; ++i) acc += gp[static_cast<size_t>(f) * P + i];
                          db[f] += acc;
                        }
                      }
                    }
                    if (x.requires_grad()) {
                      auto& dcol = scratch3<T>(static_cast<size_t>(K) * B * P);
                      MapRM<T> dcm(dcol.data(), K, static_cast<size_t>(B) * P);
                      dcm.noalias() = wm.transpose() * gm;
                      for (int bi = 0; bi < B; ++bi) {
                        col2im_strided(dcol.data() + static_cast<size_t>(bi) * P,
                                       static_cast<size_t>(B) * P, C, H, W, kH, kW, stride,
                                       padding, Ho, Wo,
                                       x.ensure_grad().data() + static_cast<size_t>(bi) * C * H * W);
                      }
                    }
                  });
  return out;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding) {
  conv_shape_checks(x, w, b, stride, padding, true);
  const int B = static_cast<int>(x.dim(0)), F = static_cast<int>(x.dim(1));
  const int Hin = static_cast<int>(x.dim(2)), Win = static_cast<int>(x.dim(3));
  const int C = static_cast<int>(w.dim(1)), kH = static_cast<int>(w.dim(2)),
            kW = static_cast<int>(w.dim(3));
  const int H = (Hin - 1) * stride - 2 * padding + kH;
  const int W = (Win - 1) * stride - 2 * padding + kW;
  if (H < 1 || W < 1) {
    throw ConfigError("conv_transpose2d: output extent not positive for input " +
                      shape_str(x.shape()) + ", kernel " + shape_str(w.shape()));
  }
  const int K = C * kH * kW, P = Hin * Win;

  Tensor<T> out({B, C, H, W});
  const size_t plane = static_cast<size_t>(H) * W;
  // Gather input as [F, B*P], one GEMM, then per-item col2im.
  auto& xstage = scratch2<T>(static_cast<size_t>(F) * B * P);
  for (int bi = 0; bi < B; ++bi) {
    for (int f = 0; f < F; ++f) {
      const T* src = x.data().data() + (static_cast<size_t>(bi) * F + f) * P;
      std::copy(src, src + P,
                xstage.data() + static_cast<size_t>(f) * B * P + static_cast<size_t>(bi) * P);
    }
  }
  CMapRM<T> wm(w.data().data(), F, K);
  CMapRM<T> xm(xstage.data(), F, static_cast<size_t>(B) * P);
  auto& col = scratch<T>(static_cast<size_t>(K) * B * P);
  MapRM<T> cm(col.data(), K, static_cast<size_t>(B) * P);
  cm.noalias() = wm.transpose() * xm;
  for (int bi = 0; bi < B; ++bi) {
    T* ob = out.data().data() + static_cast<size_t>(bi) * C * plane;
    col2im_strided(col.data() + static_cast<size_t>(bi) * P, static_cast<size_t>(B) * P, C, H, W,
                   kH, kW, stride, padding, Hin, Win, ob);
    for (int c = 0; c < C; ++c) {
      const T bc = b.data()[c];
      for (size_t i = 0; i < plane; ++i) ob[c * plane + i] += bc;
    }
  }

  maybe_record<T>({&x, &w, &b}, out,
                  [stride, padding, C, H, W, F, kH, kW, Hin, Win](typename Tape<T>::Record& rec) {
                    const int K = C * kH * kW, P = Hin * Win;
                    const int B = static_cast<int>(rec.inputs[0].dim(0));
                    const size_t plane = static_cast<size_t>(H) * W;
                    auto g = rec.output.grad();
                    auto& x = rec.inputs[0];
                    auto& w = rec.inputs[1];
                    auto& b = rec.inputs[2];
                    CMapRM<T> wm(w.data().data(), F, K);
                    auto& gcol = scratch<T>(static_cast<size_t>(K) * B * P);
                    for (int bi = 0; bi < B; ++bi) {
                      im2col_strided(g.data() + static_cast<size_t>(bi) * C * plane, C, H, W, kH,
                                     kW, stride, padding, Hin, Win,
                                     gcol.data() + static_cast<size_t>(bi) * P,
                                     static_cast<size_t>(B) * P);
                    }
                    CMapRM<T> gcm(gcol.data(), K, static_cast<size_t>(B) * P);
                    if (w.requires_grad()) {
                      auto& xstage = scratch2<T>(static_cast<size_t>(F) * B * P);
                      for (int bi = 0; bi < B; ++bi) {
                        for (int f = 0; f < F; ++f) {
                          const T* src = x.data().data() + (static_cast<size_t>(bi) * F + f) * P;
                          std::copy(src, src + P,
                                    xstage.data() + static_cast<size_t>(f) * B * P +
                                        static_cast<size_t>(bi) * P);
                        }
                      }
                      CMapRM<T> xm(xstage.data(), F, static_cast<size_t>(B) * P);
                      MapRM<T> dwm(w.ensure_grad().data(), F, K);
                      dwm.noalias() += xm * gcm.transpose();
                    }
                    if (x.requires_grad()) {
                      auto& dstage = scratch3<T>(static_cast<size_t>(F) * B * P);
                      MapRM<T> dxm(dstage.data(), F, static_cast<size_t>(B) * P);
                      dxm.noalias() = wm * gcm;
                      auto gx = x.ensure_grad();
                      for (int bi = 0; bi < B; ++bi) {
                        for (int f = 0; f < F; ++f) {
                          const T* src = dstage.data() + static_cast<size_t>(f) * B * P +
                                         static_cast<size_t>(bi) * P;
                          T* dst = gx.data() + (static_cast<size_t>(bi) * F + f) * P;
                          for (int i = 0; i < P; ++i) dst[i] += src[i];
                        }
                      }
                    }
                    if (b.requires_grad()) {
                      auto db = b.ensure_grad();
                      for (int bi = 0; bi < B; ++bi) {
                        const T* gb = g.data() + static_cast<size_t>(bi) * C * plane;
                        for (int c = 0; c < C; ++c) {
                          T acc = 0;
                          for (size_t i = 0; i < plane; ++i) acc += gb[c * plane + i];
                          db[c] += acc;
                        }
                      }
                    }
                  });
  return out;
}

// --- structural ------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  expect_rank4(a, "concat_channels");
  expect_rank4(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int B = static_cast<int>(a.dim(0));
  const size_t plane = static_cast<size_t>(a.dim(2)) * a.dim(3);
  const size_t ca = static_cast<size_t>(a.dim(1)) * plane;
  const size_t cb = static_cast<size_t>(b.dim(1)) * plane;
  Tensor<T> out({a.dim(0), a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (int bi = 0; bi < B; ++bi) {
    std::copy(av.begin() + bi * ca, av.begin() + (bi + 1) * ca, ov.begin() + bi * (ca + cb));
    std::copy(bv.begin() + bi * cb, bv.begin() + (bi + 1) * cb,
              ov.begin() + bi * (ca + cb) + ca);
  }
  maybe_record<T>({&a, &b}, out, [B, ca, cb](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    for (int bi = 0; bi < B; ++bi) {
      if (rec.inputs[0].requires_grad()) {
        auto ga = rec.inputs[0].ensure_grad();
        for (size_t i = 0; i < ca; ++i) ga[bi * ca + i] += g[bi * (ca + cb) + i];
      }
      if (rec.inputs[1].requires_grad()) {
        auto gb = rec.inputs[1].ensure_grad();
        for (size_t i = 0; i < cb; ++i) gb[bi * cb + i] += g[bi * (ca + cb) + ca + i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> complex_magnitude(const Tensor<T>& x) {
  expect_rank4(x, "complex_magnitude");
  if (x.dim(1) != 2) {
    throw ShapeError("complex_magnitude expects 2 channels, got " + shape_str(x.shape()));
  }
  const int B = static_cast<int>(x.dim(0));
  const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out({x.dim(0), 1, x.dim(2), x.dim(3)});
  auto xv = x.data();
  auto ov = out.data();
  for (int b = 0; b < B; ++b) {
    const T* re = xv.data() + static_cast<size_t>(b) * 2 * plane;
    const T* im = re + plane;
    T* dst = ov.data() + static_cast<size_t>(b) * plane;
    for (size_t i = 0; i < plane; ++i) dst[i] = std::sqrt(re[i] * re[i] + im[i] * im[i]);
  }
  maybe_record<T>({&x}, out, [B, plane](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    auto xv = rec.inputs[0].data();
    auto yv = rec.output.data();
    auto gx = rec.inputs[0].ensure_grad();
    for (int b = 0; b < B; ++b) {
      const size_t xb = static_cast<size_t>(b) * 2 * plane;
      const size_t ob = static_cast<size_t>(b) * plane;
      for (size_t i = 0; i < plane; ++i) {
        const T mag = yv[ob + i];
        if (mag > T(0)) {
          const T s = g[ob + i] / mag;
          gx[xb + i] += s * xv[xb + i];
          gx[xb + plane + i] += s * xv[xb + plane + i];
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> replicate_channels(const Tensor<T>& x, int n) {
  expect_rank4(x, "replicate_channels");
  if (x.dim(1) != 1) {
    throw ShapeError("replicate_channels expects 1 channel, got " + shape_str(x.shape()));
  }
  if (n < 1) throw ConfigError("replicate_channels: n must be >= 1");
  const int B = static_cast<int>(x.dim(0));
  const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out({x.dim(0), n, x.dim(2), x.dim(3)});
  auto xv = x.data();
  auto ov = out.data();
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < n; ++c) {
      std::copy(xv.begin() + b * plane, xv.begin() + (b + 1) * plane,
                ov.begin() + (static_cast<size_t>(b) * n + c) * plane);
    }
  }
  maybe_record<T>({&x}, out, [B, n, plane](typename Tape<T>::Record& rec) {
    auto g = rec.output.grad();
    auto gx = rec.inputs[0].ensure_grad();
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < n; ++c) {
        const size_t base = (static_cast<size_t>(b) * n + c) * plane;
        for (size_t i = 0; i < plane; ++i) gx[b * plane + i] += g[base + i];
      }
    }
  });
  return out;
}

#define CSMRI_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> add_scalar(const Tensor<T>&, double);                                        \
  template Tensor<T> mul_scalar(const Tensor<T>&, double);                                        \
  template Tensor<T> log_op(const Tensor<T>&);                                                    \
  template Tensor<T> abs_op(const Tensor<T>&);                                                    \
  template Tensor<T> clamp(const Tensor<T>&, double, double);                                     \
  template Tensor<T> gate(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> per_image_affine(const Tensor<T>&, const std::vector<T>&,                    \
                                      const std::vector<T>&);                                     \
  template Tensor<T> sum_all(const Tensor<T>&);                                                   \
  template Tensor<T> mean_all(const Tensor<T>&);                                                  \
  template Tensor<T> activation(const Tensor<T>&, Activation, double);                            \
  template Tensor<T> channelwise_dropout(const Tensor<T>&, double, bool, RngStream&);             \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, \
                                Tensor<T>&, bool, double, double);                                \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);      \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,  \
                                      int);                                                       \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> complex_magnitude(const Tensor<T>&);                                         \
  template Tensor<T> replicate_channels(const Tensor<T>&, int);

CSMRI_INSTANTIATE_OPS(float)
CSMRI_INSTANTIATE_OPS(double)
#undef CSMRI_INSTANTIATE_OPS

}  // namespace csmri
