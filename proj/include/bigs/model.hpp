// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bigs/autograd.hpp"
#include "bigs/rng.hpp"
#include "bigs/ssm.hpp"

namespace bigs {

enum class Arch { stacked, gated };
enum class Routing { ssm, attention };
enum class Direction { forward, backward };

std::string to_string(Arch a);
std::string to_string(Routing r);
std::string to_string(Direction d);
Arch parse_arch(std::string_view s);
Routing parse_routing(std::string_view s);

struct ModelConfig {
  Arch arch = Arch::gated;
  Routing routing = Routing::ssm;
  int n_layers = 23;
  int d_model = 1024;
  int n_state = 64;
  int max_len = 128;
  int vocab_size = 30522;
  int n_heads = 16;
  int intermediate = 3072;
  double dropout = 0.1;
  bool use_position_embeddings = false;
  bool use_bias = false;
  bool train_ssm_imag = true;
  double ln_eps = 1e-12;
  double init_std = 0.02;
  double dt_min = 0.001;
  double dt_max = 0.1;

  /// Architecture-dependent defaults: 23 gated / 24 stacked layers,
  /// intermediate 3d gated / 4d stacked, position embeddings only for
  /// attention routing.
  static ModelConfig defaults(Arch arch, Routing routing, int d_model = 1024);
  static ModelConfig bigs_large();  // gated/SSM, d=1024, 23 layers
  static ModelConfig bert_large();  // stacked/attention, d=1024, 24 layers

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Analytic parameter count, itemized.
struct ParamCount {
  std::size_t block_weights = 0;  // projection matrices of one block
  std::size_t block_biases = 0;
  std::size_t block_layer_norms = 0;
  std::size_t block_ssm = 0;  // trainable SSM scalars of one block
  std::size_t per_layer = 0;
  std::size_t layers = 0;  // per_layer * n_layers
  std::size_t embeddings = 0;
  std::size_t head = 0;
  std::size_t total = 0;
};

ParamCount param_count(const ModelConfig& cfg);

/// Trainable scalars of one SSM under the model's parameterization.
std::size_t ssm_param_count(const ModelConfig& cfg);

/// Named SSM parameter handles inside a Model.
struct SsmSlot {
  Parameter* log_neg_re = nullptr;
  Parameter* im = nullptr;
  Parameter* c_re = nullptr;
  Parameter* c_im = nullptr;
  Parameter* d = nullptr;
  Parameter* log_dt = nullptr;
  Tensor frozen_im;  // used when im is not trainable
  Tensor b_re, b_im;  // frozen at 1 + 0i
};

struct GatedBlock {
  Parameter *ln_gain, *ln_bias;
  Parameter *w_v, *w_f, *w_b, *w_u1, *w_u2, *w_u, *w_o;
  std::map<std::string, Parameter*> biases;  // keyed by weight name
  SsmSlot ssm_fwd, ssm_bwd;
  // attention routing: one score map (Q, K) stands in for the SSM pair
  Parameter *w_q = nullptr, *w_k = nullptr;
};

struct StackedBlock {
  // attention routing
  Parameter *w_q = nullptr, *w_k = nullptr, *w_v = nullptr, *w_o = nullptr;
  // SSM routing
  SsmSlot ssm_fwd, ssm_bwd;
  Parameter *w_p1 = nullptr, *w_p2 = nullptr;
  Parameter *w_1, *w_2;
  Parameter *ln1_gain, *ln1_bias, *ln2_gain, *ln2_bias;
  std::map<std::string, Parameter*> biases;
};

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;  // required when training with dropout > 0
};

/// Intermediate activations captured during a forward pass.
struct ForwardTrace {
  std::vector<Tensor> forward_branch;   // SSM output of the forward direction, per layer
  std::vector<Tensor> backward_branch;  // SSM output of the backward direction, per layer, in input order
  std::vector<Tensor> layer_outputs;
};

/// Gated unit: X = LN(x); V = g(X W_v); F = g(X W_f); B = g(Flip(X) W_b);
/// U1 = SSM_f(F) W_u1; U2 = SSM_b(B) W_u2; U = g((U1 * Flip(U2)) W_u);
/// returns (U * V) W_o + x, with g = GELU and * elementwise.
Var gated_block(Tape& tape, const ModelConfig& cfg, const GatedBlock& b, Var x, std::size_t seq_len,
                const ForwardOptions& opts = {}, ForwardTrace* trace = nullptr);

/// Post-LN transformer layer: h = LN(x + Route(x)); LN(h + FFN(h)). The SSM
/// route runs the forward SSM, then the backward SSM inside Flip, each
/// followed by its d x d projection.
Var stacked_block(Tape& tape, const ModelConfig& cfg, const StackedBlock& b, Var x, std::size_t seq_len,
                  const ForwardOptions& opts = {}, ForwardTrace* trace = nullptr);

SsmVars ssm_vars(Tape& tape, const SsmSlot& s);

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }

  /// Changes the sequence length the model runs at. SSM kernels are simply
  /// materialized at the new length; a learned position table cannot be
  /// extended and is rejected.
  void set_max_len(int new_len);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter& param(std::string_view name);
  const Parameter& param(std::string_view name) const;
  std::size_t num_parameters() const;
  void zero_grad();

  /// Logits [(B*L) x vocab] for B = tokens.size() / seq_len sequences.
  Var forward(Tape& tape, std::span<const std::int32_t> tokens, std::size_t seq_len, const ForwardOptions& opts = {},
              ForwardTrace* trace = nullptr) const;

  /// Eval-mode logits without recording.
  Tensor logits(std::span<const std::int32_t> tokens, std::size_t seq_len) const;

  /// Current value of one layer's SSM.
  SsmParams ssm_params(std::size_t layer, Direction dir) const;
  bool has_ssm() const { return cfg_.routing == Routing::ssm; }

  const std::vector<GatedBlock>& gated_blocks() const { return gated_; }
  const std::vector<StackedBlock>& stacked_blocks() const { return stacked_; }

 private:
  Parameter* add_param(std::string name, Tensor value, bool decay);
  Parameter* add_matrix(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng);
  Parameter* add_norm(const std::string& name, double fill);
  SsmSlot add_ssm(const std::string& prefix, Rng& rng);

  ModelConfig cfg_;
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*, std::less<>> by_name_;

  Parameter* token_table_ = nullptr;
  Parameter* position_table_ = nullptr;
  Parameter *emb_ln_gain_ = nullptr, *emb_ln_bias_ = nullptr;
  std::vector<GatedBlock> gated_;
  std::vector<StackedBlock> stacked_;
  Parameter* head_w_ = nullptr;
  Parameter* head_b_ = nullptr;
  Parameter *head_ln_gain_ = nullptr, *head_ln_bias_ = nullptr;
  Parameter* out_bias_ = nullptr;
};

/// Route of a stacked/attention layer: probabilities of one head for one
/// sequence of hidden states [L x d]. Used by the static-routing probe.
Tensor attention_scores(const Model& model, std::size_t layer, const Tensor& hidden, std::size_t head = 0);

}  // namespace bigs
