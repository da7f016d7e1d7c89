#include "csmri/fft.hpp"

#include <cmath>
#include <map>
#include <numbers>

namespace csmri {
namespace {

bool is_pow2(size_t n) { return n != 0 && (n & (n - 1)) == 0; }

size_t next_pow2(size_t n) {
  size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Cached per-length tables: bit-reversal permutation and per-stage forward
// twiddles (evaluated in double, stored in the working precision).
template <typename T>
struct Pow2Plan {
  std::vector<uint32_t> bitrev;
  // One table per stage, stage s covers len = 2^(s+1), len/2 twiddles each.
  std::vector<std::vector<std::complex<T>>> twiddles;
};

template <typename T>
const Pow2Plan<T>& pow2_plan(size_t n) {
  thread_local std::map<size_t, Pow2Plan<T>> plans;
  auto it = plans.find(n);
  if (it != plans.end()) return it->second;

  Pow2Plan<T> plan;
  plan.bitrev.resize(n);
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    plan.bitrev[i] = static_cast<uint32_t>(j);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    std::vector<std::complex<T>> stage(len / 2);
    for (size_t k = 0; k < len / 2; ++k) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) /
                         static_cast<double>(len);
      stage[k] = std::complex<T>(static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang)));
    }
    plan.twiddles.push_back(std::move(stage));
  }
  return plans.emplace(n, std::move(plan)).first->second;
}

// In-place iterative radix-2 Cooley-Tukey; n must be a power of two.
template <typename T>
void fft_pow2(std::complex<T>* a, size_t n, bool inverse) {
  const auto& plan = pow2_plan<T>(n);
  for (size_t i = 1; i < n; ++i) {
    const size_t j = plan.bitrev[i];
    if (i < j) std::swap(a[i], a[j]);
  }
  size_t stage = 0;
  for (size_t len = 2; len <= n; len <<= 1, ++stage) {
    const auto& tw = plan.twiddles[stage];
    const size_t half = len / 2;
    for (size_t i = 0; i < n; i += len) {
      for (size_t k = 0; k < half; ++k) {
        const std::complex<T> w = inverse ? std::conj(tw[k]) : tw[k];
        const std::complex<T> u = a[i + k];
        const std::complex<T> v = a[i + k + half] * w;
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

// Bluestein's chirp-z for arbitrary n, built on the power-of-two kernel.
template <typename T>
struct BluesteinPlan {
  size_t m = 0;
  std::vector<std::complex<T>> chirp;    // forward chirp
  std::vector<std::complex<T>> kernel;   // FFT_m of the conjugate chirp
};

template <typename T>
const BluesteinPlan<T>& bluestein_plan(size_t n) {
  thread_local std::map<size_t, BluesteinPlan<T>> plans;
  auto it = plans.find(n);
  if (it != plans.end()) return it->second;

  BluesteinPlan<T> plan;
  plan.m = next_pow2(2 * n - 1);
  plan.chirp.resize(n);
  for (size_t k = 0; k < n; ++k) {
    // Angle uses k^2 mod 2n to keep the argument small and exact.
    const auto kk = static_cast<double>((k * k) % (2 * n));
    const double ang = -std::numbers::pi * kk / static_cast<double>(n);
    plan.chirp[k] = std::complex<T>(static_cast<T>(std::cos(ang)),
                                    static_cast<T>(std::sin(ang)));
  }
  std::vector<std::complex<T>> b(plan.m, std::complex<T>(0));
  b[0] = std::conj(plan.chirp[0]);
  for (size_t k = 1; k < n; ++k) b[k] = b[plan.m - k] = std::conj(plan.chirp[k]);
  fft_pow2(b.data(), plan.m, false);
  plan.kernel = std::move(b);
  return plans.emplace(n, std::move(plan)).first->second;
}

template <typename T>
void fft_bluestein(std::complex<T>* data, size_t n, bool inverse) {
  const auto& plan = bluestein_plan<T>(n);
  // Inverse via conjugation: IDFT(x) (unnormalized) = conj(DFT(conj(x))).
  if (inverse) {
    for (size_t k = 0; k < n; ++k) data[k] = std::conj(data[k]);
  }
  std::vector<std::complex<T>> a(plan.m, std::complex<T>(0));
  for (size_t k = 0; k < n; ++k) a[k] = data[k] * plan.chirp[k];
  fft_pow2(a.data(), plan.m, false);
  for (size_t k = 0; k < plan.m; ++k) a[k] *= plan.kernel[k];
  fft_pow2(a.data(), plan.m, true);
  const T inv_m = T(1) / static_cast<T>(plan.m);
  for (size_t k = 0; k < n; ++k) data[k] = a[k] * inv_m * plan.chirp[k];
  if (inverse) {
    for (size_t k = 0; k < n; ++k) data[k] = std::conj(data[k]);
  }
}

// out[i] = in[(i + offset) mod n] along rows, then columns.
template <typename T>
void roll2(std::complex<T>* data, int h, int w, int row_off, int col_off,
           std::vector<std::complex<T>>& scratch) {
  scratch.resize(static_cast<size_t>(h) * w);
  for (int r = 0; r < h; ++r) {
    const int src_r = (r + row_off) % h;
    const std::complex<T>* src = data + static_cast<size_t>(src_r) * w;
    std::complex<T>* dst = scratch.data() + static_cast<size_t>(r) * w;
    for (int c = 0; c < w; ++c) dst[c] = src[(c + col_off) % w];
  }
  std::copy(scratch.begin(), scratch.end(), data);
}

template <typename T>
void transform_rows_cols(std::complex<T>* data, int h, int w, bool inverse) {
  thread_local std::vector<std::complex<T>> col;
  for (int r = 0; r < h; ++r) dft_1d(data + static_cast<size_t>(r) * w, w, inverse);
  col.resize(h);
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r) col[r] = data[static_cast<size_t>(r) * w + c];
    dft_1d(col.data(), h, inverse);
    for (int r = 0; r < h; ++r) data[static_cast<size_t>(r) * w + c] = col[r];
  }
}

template <typename T>
void centered_2d(std::complex<T>* data, int h, int w, bool inverse) {
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(h) * w));
  if (h % 2 == 0 && w % 2 == 0) {
    // Even extents: shift-DFT-shift is a checkerboard modulation on both
    // sides (with an overall sign when (h+w)/2 is odd), no copies needed.
    const T parity = ((h / 2 + w / 2) % 2 == 0) ? T(1) : T(-1);
    for (int r = 0; r < h; ++r) {
      std::complex<T>* row = data + static_cast<size_t>(r) * w;
      for (int c = (r & 1) ? 0 : 1; c < w; c += 2) row[c] = -row[c];
    }
    transform_rows_cols(data, h, w, inverse);
    const T even_scale = parity * scale;
    const T odd_scale = -even_scale;
    for (int r = 0; r < h; ++r) {
      std::complex<T>* row = data + static_cast<size_t>(r) * w;
      const T base = (r & 1) ? odd_scale : even_scale;
      for (int c = 0; c < w; ++c) row[c] *= (c & 1) ? -base : base;
    }
    return;
  }
  thread_local std::vector<std::complex<T>> scratch;
  // ifftshift, transform, fftshift; scale 1/sqrt(hw) in each direction.
  roll2(data, h, w, h / 2, w / 2, scratch);
  transform_rows_cols(data, h, w, inverse);
  roll2(data, h, w, h - h / 2, w - w / 2, scratch);
  const size_t n = static_cast<size_t>(h) * w;
  for (size_t i = 0; i < n; ++i) data[i] *= scale;
}

}  // namespace

template <typename T>
void dft_1d(std::complex<T>* data, size_t n, bool inverse) {
  if (n <= 1) return;
  if (is_pow2(n)) {
    fft_pow2(data, n, inverse);
  } else {
    fft_bluestein(data, n, inverse);
  }
}

template <typename T>
void fft2_centered_inplace(std::complex<T>* data, int h, int w) {
  centered_2d(data, h, w, false);
}

template <typename T>
void ifft2_centered_inplace(std::complex<T>* data, int h, int w) {
  centered_2d(data, h, w, true);
}

template void dft_1d<float>(std::complex<float>*, size_t, bool);
template void dft_1d<double>(std::complex<double>*, size_t, bool);
template void fft2_centered_inplace<float>(std::complex<float>*, int, int);
template void fft2_centered_inplace<double>(std::complex<double>*, int, int);
template void ifft2_centered_inplace<float>(std::complex<float>*, int, int);
template void ifft2_centered_inplace<double>(std::complex<double>*, int, int);

}  // namespace csmri
