// SPDX-License-Identifier: Apache-2.0
#include "bigs/fft.hpp"

#include <cmath>
#include <numbers>
#include <unordered_map>
#include <utility>

namespace bigs {

namespace {

struct Twiddles {
  std::vector<double> cos, sin;  // angle 2 pi k / n, k < n/2
};

const Twiddles& twiddles(std::size_t n) {
  thread_local std::unordered_map<std::size_t, Twiddles> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  Twiddles t;
  t.cos.resize(n / 2);
  t.sin.resize(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    t.cos[k] = std::cos(a);
    t.sin[k] = std::sin(a);
  }
  return cache.emplace(n, std::move(t)).first->second;
}

}  // namespace

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_inplace(std::span<double> re, std::span<double> im, bool inverse) {
  const std::size_t n = re.size();
  if (im.size() != n) throw ShapeError("fft: re/im length mismatch");
  if (!is_power_of_two(n)) throw std::invalid_argument("fft: length " + std::to_string(n) + " is not a power of two");

  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }

  if (n == 1) return;
  const Twiddles& tw = twiddles(n);
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t stride = n / len;
    for (std::size_t k = 0; k < half; ++k) {
      const double wr = tw.cos[k * stride];
      const double wi = sign * tw.sin[k * stride];
      for (std::size_t i = k; i < n; i += len) {
        const std::size_t j = i + half;
        const double tr = re[j] * wr - im[j] * wi;
        const double ti = re[j] * wi + im[j] * wr;
        re[j] = re[i] - tr;
        im[j] = im[i] - ti;
        re[i] += tr;
        im[i] += ti;
      }
    }
  }

  if (inverse) {
    const double s = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      re[i] *= s;
      im[i] *= s;
    }
  }
}

ComplexVector fft(const ComplexVector& x) {
  ComplexVector y = x;
  fft_inplace(y.re, y.im, false);
  return y;
}

ComplexVector ifft(const ComplexVector& x) {
  ComplexVector y = x;
  fft_inplace(y.re, y.im, true);
  return y;
}

std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  const std::size_t out = a.size() + b.size() - 1;
  const std::size_t n = next_power_of_two(out);
  ComplexVector fa(n), fb(n);
  std::copy(a.begin(), a.end(), fa.re.begin());
  std::copy(b.begin(), b.end(), fb.re.begin());
  fft_inplace(fa.re, fa.im, false);
  fft_inplace(fb.re, fb.im, false);
  for (std::size_t k = 0; k < n; ++k) {
    const double r = fa.re[k] * fb.re[k] - fa.im[k] * fb.im[k];
    const double i = fa.re[k] * fb.im[k] + fa.im[k] * fb.re[k];
    fa.re[k] = r;
    fa.im[k] = i;
  }
  fft_inplace(fa.re, fa.im, true);
  fa.re.resize(out);
  return fa.re;
}

}  // namespace bigs
