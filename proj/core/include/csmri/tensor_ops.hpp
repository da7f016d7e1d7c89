#pragma once

#include "csmri/autodiff.hpp"
#include "csmri/rng.hpp"
#include "csmri/tensor.hpp"

namespace csmri {

enum class Activation { kLeakyRelu, kSigmoid, kTanh };

// --- elementwise / scalar ---------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, double c);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, double c);
template <typename T>
Tensor<T> log_op(const Tensor<T>& a);
template <typename T>
Tensor<T> abs_op(const Tensor<T>& a);
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, double lo, double hi);

// Scalar tensor (shape {1}) times tensor; differentiable in both. This is the
// gating multiply: with the scalar exactly 0 the output is exactly 0.
template <typename T>
Tensor<T> gate(const Tensor<T>& scalar, const Tensor<T>& x);

// y[b,...] = x[b,...] * scale[b] + shift[b]; scale/shift are constants.
template <typename T>
Tensor<T> per_image_affine(const Tensor<T>& x, const std::vector<T>& scale,
                           const std::vector<T>& shift);

// --- reductions ---------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& a);

// --- activations / regularizers ----------------------------------------------

// The leaky-relu derivative at 0 is defined as the slope.
template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, double slope = 0.1);
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope = 0.1) {
  return activation(x, Activation::kLeakyRelu, slope);
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(x, Activation::kSigmoid);
}
template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  return activation(x, Activation::kTanh);
}

// Zeroes whole channels of [B,C,H,W] with probability `rate` in training mode
// and rescales survivors by 1/(1-rate); identity in eval mode.
template <typename T>
Tensor<T> channelwise_dropout(const Tensor<T>& x, double rate, bool training, RngStream& rng);

// --- normalization -------------------------------------------------------------

// Training mode normalizes with batch statistics and updates the running
// buffers in place (unbiased variance, momentum convention
// running = (1-momentum)*running + momentum*batch). Eval mode uses the
// running buffers. Requires B*H*W >= 2 in training mode.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     double momentum = 0.1, double epsilon = 1e-5);

// --- convolution -----------------------------------------------------------------

// Cross-correlation (no kernel flip): x [B,C,H,W], w [F,C,kH,kW], b [F].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int padding);

// Exact adjoint of conv2d's linear map at the same stride/padding, bias added
// after: x [B,F,H,W], w [F,C,kH,kW], b [C].
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding);

// --- structural ----------------------------------------------------------------

// Concatenate along the channel axis of [B,C,H,W].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// [B,2,H,W] -> [B,1,H,W], sqrt(re^2 + im^2).
template <typename T>
Tensor<T> complex_magnitude(const Tensor<T>& x);

// [B,1,H,W] -> [B,n,H,W]; backward sums over the replicas.
template <typename T>
Tensor<T> replicate_channels(const Tensor<T>& x, int n);

#define CSMRI_EXTERN_OPS(T)                                                                       \
  extern template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                              \
  extern template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                              \
  extern template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                              \
  extern template Tensor<T> add_scalar(const Tensor<T>&, double);                                 \
  extern template Tensor<T> mul_scalar(const Tensor<T>&, double);                                 \
  extern template Tensor<T> log_op(const Tensor<T>&);                                             \
  extern template Tensor<T> abs_op(const Tensor<T>&);                                             \
  extern template Tensor<T> clamp(const Tensor<T>&, double, double);                              \
  extern template Tensor<T> gate(const Tensor<T>&, const Tensor<T>&);                             \
  extern template Tensor<T> per_image_affine(const Tensor<T>&, const std::vector<T>&,             \
                                             const std::vector<T>&);                              \
  extern template Tensor<T> sum_all(const Tensor<T>&);                                            \
  extern template Tensor<T> mean_all(const Tensor<T>&);                                           \
  extern template Tensor<T> activation(const Tensor<T>&, Activation, double);                     \
  extern template Tensor<T> channelwise_dropout(const Tensor<T>&, double, bool, RngStream&);      \
  extern template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                       Tensor<T>&, Tensor<T>&, bool, double, double);             \
  extern template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,     \
                                   int);                                                          \
  extern template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,\
                                             int, int);                                           \
  extern template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                  \
  extern template Tensor<T> complex_magnitude(const Tensor<T>&);                                  \
  extern template Tensor<T> replicate_channels(const Tensor<T>&, int);

CSMRI_EXTERN_OPS(float)
CSMRI_EXTERN_OPS(double)
#undef CSMRI_EXTERN_OPS

}  // namespace csmri
