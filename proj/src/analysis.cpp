// SPDX-License-Identifier: Apache-2.0
#include "bigs/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "bigs/checkpoint.hpp"
#include "bigs/fft.hpp"
#include "bigs/ops.hpp"
#include "bigs/ssm.hpp"

namespace bigs {

namespace fs = std::filesystem;

// ----------------------------------------------------------------------------
// Kernels

std::vector<double> minmax_abs(const std::vector<double>& v) {
  std::vector<double> a(v.size());
  std::transform(v.begin(), v.end(), a.begin(), [](double x) { return std::abs(x); });
  if (a.empty()) return a;
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  const double mn = *lo, range = *hi - *lo;
  for (double& x : a) x = range > 0.0 ? (x - mn) / range : 0.0;
  return a;
}

nlohmann::json KernelDump::header() const {
  return {{"L", length},
          {"n_layers", n_layers},
          {"kernels_per_layer", 2},
          {"crop", {-kCropRadius, kCropRadius}},
          {"normalization", "min-max of absolute values over the cropped window, per (layer, direction)"},
          {"convention",
           "forward: tap l is the weight of position k-l on output k, shown at relative position -l; "
           "backward: tap l is the weight of position k+l on output k, shown at relative position +l"}};
}

KernelDump dump_kernels(const Model& model) {
  if (!model.has_ssm()) throw std::logic_error("no kernels to dump: model routes with attention");
  const ModelConfig& cfg = model.config();
  KernelDump dump;
  dump.length = static_cast<std::size_t>(cfg.max_len);
  dump.n_layers = static_cast<std::size_t>(cfg.n_layers);
  for (std::size_t layer = 0; layer < dump.n_layers; ++layer) {
    for (Direction dir : {Direction::forward, Direction::backward}) {
      KernelRecord r;
      r.layer = layer;
      r.direction = dir;
      r.taps = materialize_kernel(discretize(model.ssm_params(layer, dir)), dump.length).taps;
      r.crop.assign(2 * kCropRadius + 1, 0.0);
      for (int l = 0; l <= kCropRadius && static_cast<std::size_t>(l) < r.taps.size(); ++l) {
        const int rel = dir == Direction::forward ? -l : l;
        r.crop[static_cast<std::size_t>(rel + kCropRadius)] = r.taps[static_cast<std::size_t>(l)];
      }
      r.normalized = minmax_abs(r.crop);
      dump.kernels.push_back(std::move(r));
    }
  }
  return dump;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_kernel_dump(const fs::path& dir, const KernelDump& dump) {
  std::string crop = "layer,direction,relative_position,tap,normalized_tap\n";
  std::string full = "layer,direction,lag,tap\n";
  for (const auto& k : dump.kernels) {
    const std::string prefix = std::to_string(k.layer) + "," + to_string(k.direction) + ",";
    for (int rel = -kCropRadius; rel <= kCropRadius; ++rel) {
      const auto i = static_cast<std::size_t>(rel + kCropRadius);
      crop += prefix + std::to_string(rel) + "," + fmt(k.crop[i]) + "," + fmt(k.normalized[i]) + "\n";
    }
    for (std::size_t l = 0; l < k.taps.size(); ++l) full += prefix + std::to_string(l) + "," + fmt(k.taps[l]) + "\n";
  }
  write_file_atomic(dir / "kernels.csv", crop);
  write_file_atomic(dir / "kernels_full.csv", full);
  write_file_atomic(dir / "kernels_header.json", dump.header().dump(2) + "\n");
}

double kernel_drift(const KernelDump& a, const KernelDump& b) {
  if (a.kernels.size() != b.kernels.size()) throw std::invalid_argument("kernel_drift: dumps differ in kernel count");
  double m = 0.0;
  for (std::size_t i = 0; i < a.kernels.size(); ++i) {
    const auto& x = a.kernels[i].taps;
    const auto& y = b.kernels[i].taps;
    if (x.size() != y.size()) throw std::invalid_argument("kernel_drift: dumps differ in length");
    for (std::size_t l = 0; l < x.size(); ++l) m = std::max(m, std::abs(x[l] - y[l]));
  }
  return m;
}

// ----------------------------------------------------------------------------
// FLOPs

double FlopReport::component(const std::string& n) const {
  for (const auto& c : components)
    if (c.name == n) return c.flops;
  return 0.0;
}

FlopReport flop_estimate(const ModelConfig& cfg, std::size_t length, const FlopConvention& conv,
                         const std::string& name) {
  cfg.validate();
  if (length == 0) throw std::invalid_argument("flop_estimate: length must be positive");
  const double L = static_cast<double>(length);
  const double d = cfg.d_model;
  const double I = cfg.intermediate;
  const double modes = cfg.n_state / 2.0;

  // one SSM: kernel materialization (complex multiply-add per mode and lag),
  // three FFTs of the padded size, the spectral product and the skip term
  const double n_fft = static_cast<double>(next_power_of_two(2 * length));
  const double fft = 5.0 * n_fft * std::log2(n_fft);
  const double channels = conv.ssm_per_channel ? d : 1.0;
  const double one_ssm = 8.0 * modes * L + channels * (3.0 * fft + 6.0 * n_fft + 2.0 * L);
  const double layer_norm = 8.0 * L * d;

  double proj = 0.0, ssm = 0.0, att = 0.0, ffn = 0.0, ln = 0.0;  // per layer; macs for proj/att/ffn
  if (cfg.arch == Arch::gated) {
    proj = L * (3.0 * d * I + 4.0 * d * d);
    ln = layer_norm;
    if (cfg.routing == Routing::ssm) {
      ssm = 2.0 * one_ssm;
    } else {
      proj += L * 2.0 * d * d;
      att = 3.0 * L * L * d;  // shared scores, two weighted sums
    }
  } else {
    ffn = L * 2.0 * d * I;
    ln = 2.0 * layer_norm;
    if (cfg.routing == Routing::attention) {
      proj = L * 4.0 * d * d;
      att = 2.0 * L * L * d;
    } else {
      proj = L * 2.0 * d * d;
      ssm = 2.0 * one_ssm;
    }
  }

  const double scale = (1.0 + conv.backward_multiplier) * cfg.n_layers;
  FlopReport r;
  r.model = name.empty() ? to_string(cfg.arch) + "/" + to_string(cfg.routing) : name;
  r.length = length;
  r.components = {{"projections", scale * conv.mac_flops * proj},
                  {"ssm", scale * ssm},
                  {"attention", scale * conv.mac_flops * att},
                  {"ffn", scale * conv.mac_flops * ffn},
                  {"layernorm", scale * ln}};
  for (const auto& c : r.components) r.total += c.flops;
  return r;
}

std::string flop_csv(const std::vector<FlopReport>& reports) {
  std::string out = "model,length,component,flops\n";
  for (const auto& r : reports) {
    const std::string prefix = r.model + "," + std::to_string(r.length) + ",";
    for (const auto& c : r.components) out += prefix + c.name + "," + fmt(c.flops) + "\n";
    out += prefix + "total," + fmt(r.total) + "\n";
  }
  return out;
}

// ----------------------------------------------------------------------------
// Probes

namespace {

double max_row_delta(const Tensor& a, const Tensor& b, std::size_t row) {
  double m = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::abs(a.at(row, c) - b.at(row, c)));
  return m;
}

struct Branches {
  Tensor forward, backward;  // input order
};

Branches ssm_branches(const SsmParams& f, const SsmParams& b, const Tensor& u) {
  const std::size_t L = u.rows();
  Tape tape(false);
  Tensor fu = ssm_apply(f, u);
  Tensor flipped = flip(tape.constant(u), L).value();
  Tensor bu = flip(tape.constant(ssm_apply(b, flipped)), L).value();
  return {std::move(fu), std::move(bu)};
}

void record(CausalityReport& rep, const Branches& a, const Branches& b, std::size_t j, double tol) {
  const std::size_t L = a.forward.rows();
  double fwd = 0.0, bwd = 0.0;
  for (std::size_t k = 0; k < j; ++k) fwd = std::max(fwd, max_row_delta(a.forward, b.forward, k));
  for (std::size_t k = j + 1; k < L; ++k) bwd = std::max(bwd, max_row_delta(a.backward, b.backward, k));
  const double self = std::min(max_row_delta(a.forward, b.forward, j), max_row_delta(a.backward, b.backward, j));
  rep.forward_violations += fwd >= tol;
  rep.backward_violations += bwd >= tol;
  rep.max_forward_leak = std::max(rep.max_forward_leak, fwd);
  rep.max_backward_leak = std::max(rep.max_backward_leak, bwd);
  rep.min_self_response = rep.trials == 0 ? self : std::min(rep.min_self_response, self);
  ++rep.trials;
}

}  // namespace

CausalityReport probe_causality(const SsmParams& forward, const SsmParams& backward, std::size_t length,
                                std::size_t channels, std::size_t trials, std::uint64_t seed, double tol) {
  if (length == 0 || channels == 0) throw std::invalid_argument("probe_causality: empty input");
  Rng rng(seed, 0x70726f6265ULL);
  CausalityReport rep;
  for (std::size_t t = 0; t < trials; ++t) {
    Tensor u({length, channels});
    for (double& v : u.storage()) v = rng.normal();
    const std::size_t j = static_cast<std::size_t>(rng.below(length));
    Tensor up = u;
    for (std::size_t c = 0; c < channels; ++c) up.at(j, c) += 1.0 + rng.uniform();
    record(rep, ssm_branches(forward, backward, u), ssm_branches(forward, backward, up), j, tol);
  }
  return rep;
}

CausalityReport probe_causality(const Model& model, std::size_t length, std::size_t trials, std::uint64_t seed,
                                double tol) {
  const ModelConfig& cfg = model.config();
  if (cfg.arch != Arch::gated || cfg.routing != Routing::ssm) {
    // the stacked layout feeds the forward branch into the backward one
    throw std::logic_error("probe_causality: model-level probe needs a gated/ssm model");
  }
  Rng rng(seed, 0x70726f6265ULL);
  const auto regular = static_cast<std::uint64_t>(cfg.vocab_size - 5);
  auto run = [&](const std::vector<std::int32_t>& tokens) {
    ForwardTrace trace;
    Tape tape(false);
    model.forward(tape, tokens, length, {}, &trace);
    return Branches{trace.forward_branch.at(0), trace.backward_branch.at(0)};
  };
  CausalityReport rep;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<std::int32_t> tokens(length);
    for (auto& x : tokens) x = 5 + static_cast<std::int32_t>(rng.below(regular));
    const std::size_t j = static_cast<std::size_t>(rng.below(length));
    std::vector<std::int32_t> changed = tokens;
    changed[j] = 5 + static_cast<std::int32_t>((static_cast<std::uint64_t>(tokens[j] - 5) + 1 + rng.below(regular - 1)) %
                                               regular);
    record(rep, run(tokens), run(changed), j, tol);
  }
  return rep;
}

RoutingReport probe_static_routing(const SsmParams& p, const Tensor& u1, const Tensor& u2) {
  if (!u1.same_shape(u2)) throw ShapeError("probe_static_routing: inputs differ in shape");
  const std::size_t L = u1.rows();
  auto run = [&](const Tensor& u) {
    Tape tape(false);
    SsmVars v;
    v.log_neg_re = tape.constant(Tensor({p.modes()}, p.log_neg_re));
    v.im = tape.constant(Tensor({p.modes()}, p.im));
    v.c_re = tape.constant(Tensor({p.modes()}, p.c_re));
    v.c_im = tape.constant(Tensor({p.modes()}, p.c_im));
    v.b_re = tape.constant(Tensor({p.modes()}, p.b_re));
    v.b_im = tape.constant(Tensor({p.modes()}, p.b_im));
    v.d = tape.constant(Tensor::scalar(p.d));
    v.log_dt = tape.constant(Tensor::scalar(p.log_dt));
    v.conjugate_pairs = p.conjugate_pairs;
    const Var taps = ssm_kernel(v, L);
    const Var y = causal_conv(taps, v.d, tape.constant(u), L);
    return std::pair{taps.value(), y.value()};
  };
  const auto [k1, y1] = run(u1);
  const auto [k2, y2] = run(u2);
  RoutingReport r;
  for (std::size_t i = 0; i < k1.numel(); ++i) r.kernel_delta = std::max(r.kernel_delta, std::abs(k1[i] - k2[i]));
  for (std::size_t i = 0; i < y1.numel(); ++i) r.output_delta = std::max(r.output_delta, std::abs(y1[i] - y2[i]));
  return r;
}

double probe_attention_routing(const Model& model, std::size_t layer, const Tensor& h1, const Tensor& h2) {
  const Tensor a = attention_scores(model, layer, h1);
  const Tensor b = attention_scores(model, layer, h2);
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace bigs
