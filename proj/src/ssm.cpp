// SPDX-License-Identifier: Apache-2.0
#include "bigs/ssm.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>

#include "bigs/fft.hpp"

namespace bigs {

namespace {

using cplx = std::complex<double>;

cplx get(const ComplexVector& v, std::size_t i) { return {v.re[i], v.im[i]}; }
void put(ComplexVector& v, std::size_t i, cplx z) {
  v.re[i] = z.real();
  v.im[i] = z.imag();
}

// A^l for l = 0..length-1 in closed form.
cplx power(cplx a, cplx log_a, std::size_t l) {
  if (l == 0) return {1.0, 0.0};
  if (a == cplx{0.0, 0.0}) return {0.0, 0.0};
  return std::exp(static_cast<double>(l) * log_a);
}

}  // namespace

void SsmParams::validate() const {
  const std::size_t n = modes();
  if (n == 0) throw std::invalid_argument("SsmParams: at least one mode required");
  if (im.size() != n || c_re.size() != n || c_im.size() != n || b_re.size() != n || b_im.size() != n) {
    throw ShapeError("SsmParams: all per-mode buffers must have " + std::to_string(n) + " entries");
  }
}

HippoMatrix hippo_matrix(int n) {
  if (n <= 0) throw std::invalid_argument("hippo_matrix: n must be positive, got " + std::to_string(n));
  HippoMatrix h;
  h.n = static_cast<std::size_t>(n);
  h.entries.assign(h.n * h.n, 0.0);
  for (std::size_t r = 0; r < h.n; ++r) {
    for (std::size_t c = 0; c < r; ++c) {
      h.entries[r * h.n + c] = -std::sqrt(2.0 * static_cast<double>(r) + 1.0) * std::sqrt(2.0 * static_cast<double>(c) + 1.0);
    }
    h.entries[r * h.n + r] = -(static_cast<double>(r) + 1.0);
  }
  return h;
}

SsmParams init_s4d(int n_state, double dt_min, double dt_max, Rng& rng) {
  if (n_state <= 0 || n_state % 2 != 0) {
    throw std::invalid_argument("init_s4d: n_state must be a positive even number, got " + std::to_string(n_state));
  }
  if (!(dt_min > 0.0 && dt_min < dt_max)) throw std::invalid_argument("init_s4d: need 0 < dt_min < dt_max");
  const std::size_t modes = static_cast<std::size_t>(n_state) / 2;
  SsmParams p;
  p.conjugate_pairs = true;
  p.log_neg_re.assign(modes, std::log(0.5));
  p.im.resize(modes);
  p.b_re.assign(modes, 1.0);
  p.b_im.assign(modes, 0.0);
  p.c_re.resize(modes);
  p.c_im.resize(modes);
  for (std::size_t n = 0; n < modes; ++n) {
    p.im[n] = std::numbers::pi * static_cast<double>(n);
    p.c_re[n] = rng.normal();
    p.c_im[n] = rng.normal();
  }
  p.log_dt = rng.uniform(std::log(dt_min), std::log(dt_max));
  p.d = 1.0;
  return p;
}

DiscreteSsm discretize(const SsmParams& p) {
  p.validate();
  const std::size_t n = p.modes();
  const double dt = std::exp(p.log_dt);
  DiscreteSsm out;
  out.a_bar = ComplexVector(n);
  out.b_bar = ComplexVector(n);
  out.c = ComplexVector(p.c_re, p.c_im);
  out.d = p.d;
  out.conjugate_pairs = p.conjugate_pairs;
  for (std::size_t i = 0; i < n; ++i) {
    const cplx lambda{-std::exp(p.log_neg_re[i]), p.im[i]};
    const cplx a = std::exp(dt * lambda);
    put(out.a_bar, i, a);
    put(out.b_bar, i, (a - 1.0) / lambda * cplx{p.b_re[i], p.b_im[i]});
  }
  return out;
}

Kernel materialize_kernel(const DiscreteSsm& d, std::size_t length) {
  if (length == 0) throw std::invalid_argument("materialize_kernel: length must be >= 1");
  const double s = d.conjugate_pairs ? 2.0 : 1.0;
  Kernel k;
  k.taps.assign(length, 0.0);
  for (std::size_t n = 0; n < d.modes(); ++n) {
    const cplx a = get(d.a_bar, n);
    const cplx w = get(d.c, n) * get(d.b_bar, n);
    const cplx log_a = a == cplx{0.0, 0.0} ? cplx{0.0, 0.0} : std::log(a);
    for (std::size_t l = 0; l < length; ++l) k.taps[l] += s * (w * power(a, log_a, l)).real();
  }
  return k;
}

std::vector<double> scan(const DiscreteSsm& d, std::span<const double> u) {
  const double s = d.conjugate_pairs ? 2.0 : 1.0;
  std::vector<cplx> x(d.modes(), cplx{0.0, 0.0});
  std::vector<double> y(u.size());
  for (std::size_t k = 0; k < u.size(); ++k) {
    double acc = 0.0;
    for (std::size_t n = 0; n < x.size(); ++n) {
      x[n] = get(d.a_bar, n) * x[n] + get(d.b_bar, n) * u[k];
      acc += (get(d.c, n) * x[n]).real();
    }
    y[k] = s * acc + d.d * u[k];
  }
  return y;
}

std::vector<double> convolve(const Kernel& k, double d_skip, std::span<const double> u) {
  if (k.length() != u.size()) {
    throw ShapeError("convolve: kernel length " + std::to_string(k.length()) + " != input length " +
                     std::to_string(u.size()));
  }
  const std::size_t L = u.size();
  std::vector<double> y = fft_convolve(k.taps, u);
  y.resize(L);
  for (std::size_t i = 0; i < L; ++i) y[i] += d_skip * u[i];
  return y;
}

Tensor ssm_apply(const SsmParams& p, const Tensor& x) {
  const std::size_t L = x.rows();
  const std::size_t d = x.cols();
  const Kernel k = materialize_kernel(discretize(p), L);
  Tensor out(x.shape());
  std::vector<double> col(L);
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t r = 0; r < L; ++r) col[r] = x.at(r, c);
    const auto y = convolve(k, p.d, col);
    for (std::size_t r = 0; r < L; ++r) out.at(r, c) = y[r];
  }
  return out;
}

// ---------------------------------------------------------------------------

Var discretize(const SsmVars& p) {
  const Tensor& lnr = p.log_neg_re.value();
  const Tensor& im = p.im.value();
  const Tensor& br = p.b_re.value();
  const Tensor& bi = p.b_im.value();
  const std::size_t n = lnr.numel();
  if (im.numel() != n || br.numel() != n || bi.numel() != n) throw ShapeError("discretize: per-mode size mismatch");
  const double dt = std::exp(p.log_dt.value()[0]);
  Tensor out({4, n});
  for (std::size_t i = 0; i < n; ++i) {
    const cplx lambda{-std::exp(lnr[i]), im[i]};
    const cplx a = std::exp(dt * lambda);
    const cplx b = (a - 1.0) / lambda * cplx{br[i], bi[i]};
    out.at(0, i) = a.real();
    out.at(1, i) = a.imag();
    out.at(2, i) = b.real();
    out.at(3, i) = b.imag();
  }
  Tape& tape = *p.log_neg_re.tape();
  const SsmVars v = p;
  return tape.record(std::move(out), {v.log_neg_re, v.im, v.b_re, v.b_im, v.log_dt}, [v](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    const Tensor& lnr = t.value(v.log_neg_re);
    const Tensor& im = t.value(v.im);
    const Tensor& br = t.value(v.b_re);
    const Tensor& bi = t.value(v.b_im);
    const double dt = std::exp(t.value(v.log_dt)[0]);
    const std::size_t n = lnr.numel();
    double g_dt = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const cplx lambda{-std::exp(lnr[i]), im[i]};
      const cplx a = std::exp(dt * lambda);
      const cplx bcont{br[i], bi[i]};
      const cplx ga{g.at(0, i), g.at(1, i)};
      const cplx gb{g.at(2, i), g.at(3, i)};
      // dA/dLambda = dt A,  dBbar/dLambda = B (dt A Lambda - (A - 1)) / Lambda^2
      const cplx dA_dl = dt * a;
      const cplx dB_dl = bcont * (dt * a * lambda - (a - 1.0)) / (lambda * lambda);
      const cplx g_lambda = std::conj(dA_dl) * ga + std::conj(dB_dl) * gb;
      // dA/ddt = Lambda A,  dBbar/ddt = B A
      g_dt += (std::conj(ga) * (lambda * a)).real() + (std::conj(gb) * (bcont * a)).real();
      if (t.needs_grad(v.log_neg_re)) t.grad(v.log_neg_re)[i] += g_lambda.real() * lambda.real();
      if (t.needs_grad(v.im)) t.grad(v.im)[i] += g_lambda.imag();
      const cplx g_bc = std::conj((a - 1.0) / lambda) * gb;
      if (t.needs_grad(v.b_re)) t.grad(v.b_re)[i] += g_bc.real();
      if (t.needs_grad(v.b_im)) t.grad(v.b_im)[i] += g_bc.imag();
    }
    if (t.needs_grad(v.log_dt)) t.grad(v.log_dt)[0] += g_dt * dt;
  });
}

Var materialize_kernel(Var discrete, Var c_re, Var c_im, std::size_t length, bool conjugate_pairs) {
  if (length == 0) throw std::invalid_argument("materialize_kernel: length must be >= 1");
  const Tensor& dv = discrete.value();
  const std::size_t n = dv.cols();
  if (dv.rows() != 4 || c_re.value().numel() != n || c_im.value().numel() != n) {
    throw ShapeError("materialize_kernel: expected [4 x n] discrete params and n-vectors for C");
  }
  const double s = conjugate_pairs ? 2.0 : 1.0;
  Tensor taps(Shape{length});
  const Tensor& cr = c_re.value();
  const Tensor& ci = c_im.value();
  for (std::size_t i = 0; i < n; ++i) {
    const cplx a{dv.at(0, i), dv.at(1, i)};
    const cplx w = cplx{cr[i], ci[i]} * cplx{dv.at(2, i), dv.at(3, i)};
    const cplx log_a = a == cplx{0.0, 0.0} ? cplx{0.0, 0.0} : std::log(a);
    for (std::size_t l = 0; l < length; ++l) taps[l] += s * (w * power(a, log_a, l)).real();
  }
  return discrete.tape()->record(std::move(taps), {discrete, c_re, c_im}, [=](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    const Tensor& dv = t.value(discrete);
    const Tensor& cr = t.value(c_re);
    const Tensor& ci = t.value(c_im);
    const std::size_t n = dv.cols();
    const bool want_d = t.needs_grad(discrete);
    for (std::size_t i = 0; i < n; ++i) {
      const cplx a{dv.at(0, i), dv.at(1, i)};
      const cplx bb{dv.at(2, i), dv.at(3, i)};
      const cplx c{cr[i], ci[i]};
      const cplx w = c * bb;
      const cplx log_a = a == cplx{0.0, 0.0} ? cplx{0.0, 0.0} : std::log(a);
      cplx g_w{0.0, 0.0};
      cplx g_a{0.0, 0.0};
      cplx prev{1.0, 0.0};  // A^{l-1}
      for (std::size_t l = 0; l < length; ++l) {
        const cplx pw = power(a, log_a, l);
        g_w += g[l] * std::conj(pw);
        if (l > 0) {
          g_a += g[l] * std::conj(w * static_cast<double>(l) * prev);
          prev = pw;
        }
      }
      g_w *= s;
      g_a *= s;
      const cplx g_c = std::conj(bb) * g_w;
      const cplx g_bb = std::conj(c) * g_w;
      if (t.needs_grad(c_re)) t.grad(c_re)[i] += g_c.real();
      if (t.needs_grad(c_im)) t.grad(c_im)[i] += g_c.imag();
      if (want_d) {
        Tensor& gd = t.grad(discrete);
        gd.at(0, i) += g_a.real();
        gd.at(1, i) += g_a.imag();
        gd.at(2, i) += g_bb.real();
        gd.at(3, i) += g_bb.imag();
      }
    }
  });
}

namespace {

// Spectrum of a real sequence zero-padded to n.
ComplexVector real_spectrum(std::span<const double> x, std::size_t n) {
  ComplexVector z(n);
  std::copy(x.begin(), x.end(), z.re.begin());
  fft_inplace(z.re, z.im, false);
  return z;
}

// Applies the real-kernel filter with spectrum `h` to every column of every
// sequence in `src`. Two real columns ride in one complex transform (re/im),
// which is exact because the filter is real. With `correlate` the conjugate
// spectrum is used, i.e. out[j] = sum_k taps[k-j] src[k].
void filter_columns(const Tensor& src, Tensor& dst, const ComplexVector& h, std::size_t seq_len, bool correlate) {
  const std::size_t n = h.size();
  const std::size_t d = src.cols();
  const std::size_t n_seq = src.rows() / seq_len;
  ComplexVector z(n);
  for (std::size_t b = 0; b < n_seq; ++b) {
    const std::size_t r0 = b * seq_len;
    for (std::size_t c = 0; c < d; c += 2) {
      const bool pair = c + 1 < d;
      std::fill(z.re.begin(), z.re.end(), 0.0);
      std::fill(z.im.begin(), z.im.end(), 0.0);
      for (std::size_t i = 0; i < seq_len; ++i) {
        z.re[i] = src.at(r0 + i, c);
        if (pair) z.im[i] = src.at(r0 + i, c + 1);
      }
      fft_inplace(z.re, z.im, false);
      for (std::size_t k = 0; k < n; ++k) {
        const cplx hk{h.re[k], correlate ? -h.im[k] : h.im[k]};
        const cplx v = cplx{z.re[k], z.im[k]} * hk;
        z.re[k] = v.real();
        z.im[k] = v.imag();
      }
      fft_inplace(z.re, z.im, true);
      for (std::size_t i = 0; i < seq_len; ++i) {
        dst.at(r0 + i, c) += z.re[i];
        if (pair) dst.at(r0 + i, c + 1) += z.im[i];
      }
    }
  }
}

}  // namespace

Var causal_conv(Var taps, Var d_skip, Var x, std::size_t seq_len) {
  const Tensor& tv = taps.value();
  const Tensor& xv = x.value();
  if (seq_len == 0 || xv.rows() % seq_len != 0) throw ShapeError("causal_conv: rows not divisible by seq_len");
  if (tv.numel() != seq_len) {
    throw ShapeError("causal_conv: kernel length " + std::to_string(tv.numel()) + " != sequence length " +
                     std::to_string(seq_len));
  }
  if (d_skip.value().numel() != 1) throw ShapeError("causal_conv: d_skip must be a scalar");
  const std::size_t n = next_power_of_two(2 * seq_len);
  const ComplexVector h = real_spectrum(tv.data(), n);
  const double dsk = d_skip.value()[0];
  Tensor out(xv.shape());
  filter_columns(xv, out, h, seq_len, false);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += dsk * xv[i];

  return x.tape()->record(std::move(out), {taps, d_skip, x}, [taps, d_skip, x, seq_len, n](Tape& t, Var out) {
    const Tensor& g = t.grad(out);
    const Tensor& xv = t.value(x);
    const Tensor& tv = t.value(taps);
    const double dsk = t.value(d_skip)[0];
    if (t.needs_grad(x)) {
      Tensor& gx = t.grad(x);
      const ComplexVector h = real_spectrum(tv.data(), n);
      filter_columns(g, gx, h, seq_len, true);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += dsk * g[i];
    }
    if (t.needs_grad(d_skip)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * xv[i];
      t.grad(d_skip)[0] += acc;
    }
    if (t.needs_grad(taps)) {
      // g_taps[l] = sum over sequences/columns of sum_k g[k] x[k-l]
      //           = ifft( sum conj(X) G )[l]
      const std::size_t d = xv.cols();
      const std::size_t n_seq = xv.rows() / seq_len;
      ComplexVector acc(n), zx(n), zg(n);
      for (std::size_t b = 0; b < n_seq; ++b) {
        const std::size_t r0 = b * seq_len;
        for (std::size_t c = 0; c < d; c += 2) {
          const bool pair = c + 1 < d;
          std::fill(zx.re.begin(), zx.re.end(), 0.0);
          std::fill(zx.im.begin(), zx.im.end(), 0.0);
          std::fill(zg.re.begin(), zg.re.end(), 0.0);
          std::fill(zg.im.begin(), zg.im.end(), 0.0);
          for (std::size_t i = 0; i < seq_len; ++i) {
            zx.re[i] = xv.at(r0 + i, c);
            zg.re[i] = g.at(r0 + i, c);
            if (pair) {
              zx.im[i] = xv.at(r0 + i, c + 1);
              zg.im[i] = g.at(r0 + i, c + 1);
            }
          }
          fft_inplace(zx.re, zx.im, false);
          fft_inplace(zg.re, zg.im, false);
          for (std::size_t k = 0; k < n; ++k) {
            // unpack the two real spectra: P = (Z[k] + conj Z[n-k]) / 2, Q = (Z[k] - conj Z[n-k]) / 2i
            const std::size_t m = (n - k) % n;
            const cplx x_k{zx.re[k], zx.im[k]}, x_m{zx.re[m], -zx.im[m]};
            const cplx g_k{zg.re[k], zg.im[k]}, g_m{zg.re[m], -zg.im[m]};
            const cplx xa = 0.5 * (x_k + x_m), xb = cplx{0.0, -0.5} * (x_k - x_m);
            const cplx ga = 0.5 * (g_k + g_m), gb = cplx{0.0, -0.5} * (g_k - g_m);
            const cplx s = std::conj(xa) * ga + std::conj(xb) * gb;
            acc.re[k] += s.real();
            acc.im[k] += s.imag();
          }
        }
      }
      fft_inplace(acc.re, acc.im, true);
      Tensor& gt = t.grad(taps);
      for (std::size_t l = 0; l < seq_len; ++l) gt[l] += acc.re[l];
    }
  });
}

Var ssm_kernel(const SsmVars& p, std::size_t length) {
  const Var disc = discretize(p);
  return materialize_kernel(disc, p.c_re, p.c_im, length, p.conjugate_pairs);
}

Var ssm_apply(const SsmVars& p, Var x, std::size_t seq_len) {
  const Var taps = ssm_kernel(p, seq_len);
  return causal_conv(taps, p.d, x, seq_len);
}

}  // namespace bigs
