// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bigs/tensor.hpp"

namespace bigs {

/// Iterative radix-2 FFT.
///
/// Convention: the forward transform is unnormalized,
///   X[k] = sum_j x[j] exp(-2 pi i jk / n),
/// and the inverse carries the 1/n factor, so ifft(fft(x)) == x.
/// Lengths must be powers of two; callers zero-pad.
ComplexVector fft(const ComplexVector& x);
ComplexVector ifft(const ComplexVector& x);

/// In-place variants over split buffers of equal power-of-two length.
void fft_inplace(std::span<double> re, std::span<double> im, bool inverse);

bool is_power_of_two(std::size_t n);
std::size_t next_power_of_two(std::size_t n);

/// Linear (full) convolution of two real sequences via zero-padded FFT.
/// Result has length a.size() + b.size() - 1.
std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b);

}  // namespace bigs
