// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bigs/autograd.hpp"
#include "bigs/rng.hpp"
#include "bigs/tensor.hpp"

namespace bigs {

/// Continuous-time diagonal SSM.
///
/// Mode n has Lambda_n = -exp(log_neg_re[n]) + i*im[n], so Re(Lambda) < 0 for
/// every parameter value. With `conjugate_pairs` set (the S4D layout) each
/// stored mode stands for a conjugate pair and outputs use 2*Re(.); a model
/// with n_state = N therefore stores N/2 modes.
struct SsmParams {
  std::vector<double> log_neg_re;
  std::vector<double> im;
  std::vector<double> c_re, c_im;
  std::vector<double> b_re, b_im;
  double d = 0.0;
  double log_dt = 0.0;
  bool conjugate_pairs = true;

  std::size_t modes() const { return log_neg_re.size(); }
  void validate() const;
};

/// Zero-order-hold discretization of SsmParams.
struct DiscreteSsm {
  ComplexVector a_bar;
  ComplexVector b_bar;
  ComplexVector c;
  double d = 0.0;
  bool conjugate_pairs = true;

  std::size_t modes() const { return a_bar.size(); }
};

/// Length-L convolution kernel K = (CB, CAB, ..., CA^{L-1}B).
struct Kernel {
  std::vector<double> taps;
  std::size_t length() const { return taps.size(); }
};

struct HippoMatrix {
  std::size_t n = 0;
  std::vector<double> entries;  // row-major n x n
  double at(std::size_t row, std::size_t col) const { return entries[row * n + col]; }
};

HippoMatrix hippo_matrix(int n);

/// S4D-Lin initialization: Lambda_n = -1/2 + i*pi*n for n < n_state/2,
/// B = 1, C ~ N(0,1) per component, log_dt ~ U[log dt_min, log dt_max], D = 1.
SsmParams init_s4d(int n_state, double dt_min, double dt_max, Rng& rng);

DiscreteSsm discretize(const SsmParams& p);

/// taps[l] = s * Re sum_n C_n B_n A_n^l with s = 2 for conjugate pairs, else 1.
/// Powers are evaluated in closed form, A^l = exp(l log A), so every tap is
/// independent of the requested length.
Kernel materialize_kernel(const DiscreteSsm& d, std::size_t length);

/// Recurrent reference: x_k = A x_{k-1} + B u_k, y_k = s Re(C x_k) + D u_k.
std::vector<double> scan(const DiscreteSsm& d, std::span<const double> u);

/// Causal convolution y_k = sum_{l<=k} taps[l] u_{k-l} + d_skip u_k via FFT.
std::vector<double> convolve(const Kernel& k, double d_skip, std::span<const double> u);

/// One shared kernel applied to every column of x [L x d].
Tensor ssm_apply(const SsmParams& p, const Tensor& x);

// ---------------------------------------------------------------------------
// Tape versions.

/// SSM parameters as tape variables. Frozen fields are tape constants.
struct SsmVars {
  Var log_neg_re, im, c_re, c_im, b_re, b_im, d, log_dt;
  bool conjugate_pairs = true;
};

/// Returns a [4 x modes] tensor: rows Re A, Im A, Re B, Im B.
Var discretize(const SsmVars& p);

Var materialize_kernel(Var discrete, Var c_re, Var c_im, std::size_t length, bool conjugate_pairs);

/// Causal convolution of every column of every length-seq_len sequence of
/// x [(B*L) x d] with taps [L], plus d_skip [1] * x.
Var causal_conv(Var taps, Var d_skip, Var x, std::size_t seq_len);

Var ssm_apply(const SsmVars& p, Var x, std::size_t seq_len);

/// Kernel taps as a tape variable (discretize + materialize).
Var ssm_kernel(const SsmVars& p, std::size_t length);

}  // namespace bigs
