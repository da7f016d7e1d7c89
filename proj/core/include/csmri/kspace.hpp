#pragma once

#include <complex>
#include <filesystem>
#include <optional>
#include <vector>

#include "csmri/rng.hpp"
#include "csmri/tensor.hpp"

namespace csmri {

// 2D complex-valued image stored as two real planes. Converts losslessly to
// and from the 2-channel real tensor view the networks consume.
struct ComplexImage {
  int height = 0;
  int width = 0;
  std::vector<double> real, imag;
  double intensity_scale = 1.0;  // peak magnitude used as the PSNR/SSIM level

  ComplexImage() = default;
  ComplexImage(int h, int w)
      : height(h), width(w), real(static_cast<size_t>(h) * w, 0.0),
        imag(static_cast<size_t>(h) * w, 0.0) {}

  size_t numel() const { return real.size(); }
  std::complex<double> at(int r, int c) const {
    const size_t i = static_cast<size_t>(r) * width + c;
    return {real[i], imag[i]};
  }
  void set(int r, int c, std::complex<double> v) {
    const size_t i = static_cast<size_t>(r) * width + c;
    real[i] = v.real();
    imag[i] = v.imag();
  }
};

std::vector<double> magnitude(const ComplexImage& img);

// Cartesian line mask: a column is either fully kept or fully dropped.
struct SamplingMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> kept;  // per column
  double sampling_ratio = 0.0;

  bool is_kept(int col) const { return kept[static_cast<size_t>(col)] != 0; }
  size_t kept_count() const;
};

// One simulated acquisition y = mask o (F x + noise); measurements are
// exactly zero at unsampled locations.
struct KSpaceSample {
  ComplexImage measurements;
  SamplingMask mask;
  double noise_std = 0.0;
};

// Orthonormal centered transforms (DC component at (h/2, w/2)).
ComplexImage fft2_centered(const ComplexImage& img);
ComplexImage ifft2_centered(const ComplexImage& ksp);

// Keeps exactly floor(ratio*width) columns: a low-frequency band of
// max(4, width/32) columns (capped by the budget) is always kept, the rest
// drawn without replacement under a Gaussian profile of std width/6 centered
// on the zero-frequency column.
SamplingMask generate_mask(int width, int height, double ratio, RngStream& rng);

// Complex Gaussian noise: real and imaginary parts i.i.d. N(0, noise_std/sqrt(2)).
KSpaceSample acquire(const ComplexImage& x, const SamplingMask& mask, double noise_std,
                     RngStream& rng);

ComplexImage zero_fill(const KSpaceSample& sample);

// Hard replacement by default: sampled frequencies of the output equal y.
// With soft_lambda set, k <- (k + lambda*y)/(1 + lambda) at sampled locations.
ComplexImage data_consistency(const ComplexImage& x_net, const KSpaceSample& sample,
                              std::optional<double> soft_lambda = {});

// --- tensor bridge ------------------------------------------------------------

// [B,2,H,W] stack of the 2-channel real views.
template <typename T>
Tensor<T> images_to_tensor(const std::vector<const ComplexImage*>& images);
template <typename T>
Tensor<T> image_to_tensor(const ComplexImage& image);
template <typename T>
ComplexImage image_from_tensor(const Tensor<T>& t, int batch_index, double intensity_scale = 1.0);

// Per-batch acquisition data in network precision, consumed by dc_layer.
template <typename T>
struct KSpaceBatch {
  int height = 0, width = 0;
  std::vector<std::vector<uint8_t>> kept_columns;       // per item
  std::vector<std::vector<std::complex<T>>> measurements;  // per item, row-major
  std::optional<double> soft_lambda;

  static KSpaceBatch from_samples(const std::vector<const KSpaceSample*>& samples,
                                  std::optional<double> soft_lambda = {});
  size_t batch() const { return kept_columns.size(); }
};

// Differentiable data-consistency layer on the 2-channel view; the gradient
// passes through unsampled frequencies only.
template <typename T>
Tensor<T> dc_layer(const Tensor<T>& x, const KSpaceBatch<T>& batch);

// --- file formats ------------------------------------------------------------

// manifest.json (width, height, ratio, seed) + raw uint8 column bitmap.
void save_mask(const SamplingMask& mask, const std::filesystem::path& dir, uint64_t seed = 0);
SamplingMask load_mask(const std::filesystem::path& dir);

// Raw little-endian float32 interleaved (re, im) + JSON sidecar.
void save_complex_image(const ComplexImage& img, const std::filesystem::path& raw_path);
ComplexImage load_complex_image(const std::filesystem::path& raw_path);

#define CSMRI_EXTERN_KSPACE(T)                                                              \
  extern template Tensor<T> images_to_tensor(const std::vector<const ComplexImage*>&);     \
  extern template Tensor<T> image_to_tensor(const ComplexImage&);                          \
  extern template ComplexImage image_from_tensor(const Tensor<T>&, int, double);           \
  extern template struct KSpaceBatch<T>;                                                   \
  extern template Tensor<T> dc_layer(const Tensor<T>&, const KSpaceBatch<T>&);
CSMRI_EXTERN_KSPACE(float)
CSMRI_EXTERN_KSPACE(double)
#undef CSMRI_EXTERN_KSPACE

}  // namespace csmri
