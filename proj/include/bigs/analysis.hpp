// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bigs/model.hpp"
#include "json.hpp"

namespace bigs {

// ----------------------------------------------------------------------------
// Kernel inspection

inline constexpr int kCropRadius = 10;

struct KernelRecord {
  std::size_t layer = 0;
  Direction direction = Direction::forward;
  std::vector<double> taps;  // full kernel, tap l = lag l in the SSM's own orientation
  /// Relative positions -10..10. A forward kernel puts tap l at -l (position
  /// k-l feeds k); a backward kernel puts tap l at +l. The unused side is 0.
  std::vector<double> crop;
  std::vector<double> normalized;  // min-max of |crop|
};

struct KernelDump {
  std::size_t length = 0;
  std::size_t n_layers = 0;
  std::vector<KernelRecord> kernels;  // layer-major, forward before backward

  nlohmann::json header() const;
};

/// Every layer's forward and backward kernel at the model's max_len.
KernelDump dump_kernels(const Model& model);

/// Min-max scaling of absolute values; all zeros when the input is constant.
std::vector<double> minmax_abs(const std::vector<double>& v);

/// `kernels.csv` (layer,direction,relative_position,tap,normalized_tap),
/// `kernels_full.csv` (layer,direction,lag,tap) and `kernels_header.json`.
void write_kernel_dump(const std::filesystem::path& dir, const KernelDump& dump);

/// Largest absolute tap difference between two dumps of the same shape.
double kernel_drift(const KernelDump& a, const KernelDump& b);

// ----------------------------------------------------------------------------
// FLOP estimation

/// Counting rules. A multiply-accumulate counts `mac_flops`; FFTs, LayerNorm
/// and other elementwise work are counted in plain flops. The backward pass
/// costs `backward_multiplier` times the forward pass. Embeddings, the MLM
/// head and softmax are excluded.
/// An SSM costs three FFTs of the padded length plus the spectral product and
/// kernel materialization; `ssm_per_channel` multiplies the transform and
/// pointwise work by d, as a channel-by-channel implementation would run it.
struct FlopConvention {
  double mac_flops = 1.0;
  double backward_multiplier = 1.0;
  bool ssm_per_channel = false;
};

struct FlopComponent {
  std::string name;  // projections, ssm, attention, ffn, layernorm
  double flops = 0.0;
};

struct FlopReport {
  std::string model;
  std::size_t length = 0;
  std::vector<FlopComponent> components;
  double total = 0.0;

  double component(const std::string& name) const;
};

/// Forward+backward FLOPs for one sequence of `length` tokens.
FlopReport flop_estimate(const ModelConfig& cfg, std::size_t length, const FlopConvention& conv = {},
                         const std::string& name = "");

/// CSV `model,length,component,flops`, one row per component then a `total` row
/// per report.
std::string flop_csv(const std::vector<FlopReport>& reports);

// ----------------------------------------------------------------------------
// Probes

struct CausalityReport {
  std::size_t trials = 0;
  std::size_t forward_violations = 0;   // forward branch moved at k < j
  std::size_t backward_violations = 0;  // backward branch moved at k > j
  double max_forward_leak = 0.0;
  double max_backward_leak = 0.0;
  double min_self_response = 0.0;  // smallest change seen at k == j, to show the perturbation landed
};

/// Perturbs one random position per trial and checks that the forward SSM
/// output before it and the backward SSM output after it do not move.
CausalityReport probe_causality(const SsmParams& forward, const SsmParams& backward, std::size_t length,
                                std::size_t channels, std::size_t trials, std::uint64_t seed, double tol = 1e-12);

/// Same check through a model's first layer, perturbing one token per trial.
CausalityReport probe_causality(const Model& model, std::size_t length, std::size_t trials, std::uint64_t seed,
                                double tol = 1e-12);

struct RoutingReport {
  double kernel_delta = 0.0;  // max |K(u1) - K(u2)|
  double output_delta = 0.0;  // max |y(u1) - y(u2)|, to show the inputs differ
};

/// Runs the SSM on two inputs and compares the kernels each run materialized.
RoutingReport probe_static_routing(const SsmParams& p, const Tensor& u1, const Tensor& u2);

/// Max |difference| of one attention layer's head-0 score matrices on two inputs.
double probe_attention_routing(const Model& model, std::size_t layer, const Tensor& h1, const Tensor& h2);

}  // namespace bigs
