#pragma once

#include <complex>
#include <vector>

namespace csmri {

// Unnormalized 1D DFT, any length (radix-2 with a Bluestein fallback).
// Forward kernel e^{-2*pi*i*jk/n}; inverse uses the conjugate kernel and also
// applies no 1/n factor.
template <typename T>
void dft_1d(std::complex<T>* data, size_t n, bool inverse);

// Centered orthonormal 2D transforms on a row-major h*w buffer: the zero
// frequency sits at (h/2, w/2) and both directions carry 1/sqrt(h*w), so the
// pair is unitary and mutually inverse.
template <typename T>
void fft2_centered_inplace(std::complex<T>* data, int h, int w);
template <typename T>
void ifft2_centered_inplace(std::complex<T>* data, int h, int w);

extern template void dft_1d<float>(std::complex<float>*, size_t, bool);
extern template void dft_1d<double>(std::complex<double>*, size_t, bool);
extern template void fft2_centered_inplace<float>(std::complex<float>*, int, int);
extern template void fft2_centered_inplace<double>(std::complex<double>*, int, int);
extern template void ifft2_centered_inplace<float>(std::complex<float>*, int, int);
extern template void ifft2_centered_inplace<double>(std::complex<double>*, int, int);

}  // namespace csmri
