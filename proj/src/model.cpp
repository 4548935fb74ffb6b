// SPDX-License-Identifier: Apache-2.0
#include "bigs/model.hpp"

#include <cmath>
#include <stdexcept>

#include "bigs/ops.hpp"

namespace bigs {

std::string to_string(Arch a) { return a == Arch::gated ? "gated" : "stacked"; }
std::string to_string(Routing r) { return r == Routing::ssm ? "ssm" : "attention"; }
std::string to_string(Direction d) { return d == Direction::forward ? "forward" : "backward"; }

Arch parse_arch(std::string_view s) {
  if (s == "gated") return Arch::gated;
  if (s == "stacked" || s == "stack") return Arch::stacked;
  throw std::invalid_argument("unknown arch '" + std::string(s) + "' (expected gated|stacked)");
}

Routing parse_routing(std::string_view s) {
  if (s == "ssm") return Routing::ssm;
  if (s == "attention" || s == "att") return Routing::attention;
  throw std::invalid_argument("unknown routing '" + std::string(s) + "' (expected ssm|attention)");
}

ModelConfig ModelConfig::defaults(Arch arch, Routing routing, int d_model) {
  ModelConfig c;
  c.arch = arch;
  c.routing = routing;
  c.d_model = d_model;
  c.n_layers = arch == Arch::gated ? 23 : 24;
  c.intermediate = arch == Arch::gated ? 3 * d_model : 4 * d_model;
  c.use_position_embeddings = routing == Routing::attention;
  return c;
}

ModelConfig ModelConfig::bigs_large() { return defaults(Arch::gated, Routing::ssm, 1024); }
ModelConfig ModelConfig::bert_large() { return defaults(Arch::stacked, Routing::attention, 1024); }

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
  if (n_layers < 0) fail("n_layers must be >= 0");
  if (d_model <= 0) fail("d_model must be positive");
  if (max_len <= 0) fail("max_len must be positive");
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (intermediate <= 0) fail("intermediate must be positive");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (routing == Routing::ssm && (n_state <= 0 || n_state % 2 != 0)) fail("n_state must be a positive even number");
  if (routing == Routing::attention && (n_heads <= 0 || d_model % n_heads != 0)) {
    fail("d_model must be divisible by n_heads");
  }
  if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
}

// ----------------------------------------------------------------------------
// Parameter counts

std::size_t ssm_param_count(const ModelConfig& cfg) {
  const std::size_t modes = static_cast<std::size_t>(cfg.n_state) / 2;
  // log_neg_re, c_re, c_im, (im) per mode; d and log_dt scalars
  return modes * (cfg.train_ssm_imag ? 4 : 3) + 2;
}

ParamCount param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t I = static_cast<std::size_t>(cfg.intermediate);
  const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
  ParamCount c;
  if (cfg.arch == Arch::gated) {
    // W_v, W_u: d x I; W_o: I x d; W_f, W_b, W_u1, W_u2: d x d
    c.block_weights = 3 * d * I + 4 * d * d;
    c.block_biases = cfg.use_bias ? (2 * I + 4 * d + d) : 0;
    c.block_layer_norms = 2 * d;
    c.block_ssm = 2 * ssm_param_count(cfg);
    if (cfg.routing == Routing::attention) {
      // forward/backward SSMs replaced by one attention map (Q, K)
      c.block_weights += 2 * d * d;
      c.block_biases += cfg.use_bias ? 2 * d : 0;
      c.block_ssm = 0;
    }
  } else {
    const std::size_t route = cfg.routing == Routing::attention ? 4 * d * d : 2 * d * d;
    c.block_weights = route + 2 * d * I;
    c.block_biases = cfg.use_bias ? ((cfg.routing == Routing::attention ? 4 * d : 2 * d) + I + d) : 0;
    c.block_layer_norms = 4 * d;
    c.block_ssm = cfg.routing == Routing::ssm ? 2 * ssm_param_count(cfg) : 0;
  }
  c.per_layer = c.block_weights + c.block_biases + c.block_layer_norms + c.block_ssm;
  c.layers = c.per_layer * static_cast<std::size_t>(cfg.n_layers);
  c.embeddings = V * d + 2 * d;
  if (cfg.use_position_embeddings) c.embeddings += static_cast<std::size_t>(cfg.max_len) * d;
  // transform d x d, LayerNorm, decoder tied to the token table
  c.head = d * d + 2 * d + (cfg.use_bias ? d + V : 0);
  c.total = c.layers + c.embeddings + c.head;
  return c;
}

// ----------------------------------------------------------------------------
// Construction

Parameter* Model::add_param(std::string name, Tensor value, bool decay) {
  if (by_name_.count(name)) throw std::logic_error("duplicate parameter " + name);
  params_.push_back(std::make_unique<Parameter>(name, std::move(value), decay));
  Parameter* p = params_.back().get();
  by_name_.emplace(std::move(name), p);
  return p;
}

Parameter* Model::add_matrix(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t({rows, cols});
  for (double& v : t.storage()) v = cfg_.init_std * rng.normal();
  return add_param(name, std::move(t), true);
}

Parameter* Model::add_norm(const std::string& name, double fill) {
  return add_param(name, Tensor({static_cast<std::size_t>(cfg_.d_model)}, fill), false);
}

SsmSlot Model::add_ssm(const std::string& prefix, Rng& rng) {
  const SsmParams p = init_s4d(cfg_.n_state, cfg_.dt_min, cfg_.dt_max, rng);
  const std::size_t m = p.modes();
  SsmSlot s;
  s.log_neg_re = add_param(prefix + ".log_neg_re", Tensor({m}, p.log_neg_re), false);
  if (cfg_.train_ssm_imag)
    s.im = add_param(prefix + ".im", Tensor({m}, p.im), false);
  else
    s.frozen_im = Tensor({m}, p.im);
  s.c_re = add_param(prefix + ".c_re", Tensor({m}, p.c_re), false);
  s.c_im = add_param(prefix + ".c_im", Tensor({m}, p.c_im), false);
  s.d = add_param(prefix + ".d", Tensor::scalar(p.d), false);
  s.log_dt = add_param(prefix + ".log_dt", Tensor::scalar(p.log_dt), false);
  s.b_re = Tensor({m}, p.b_re);
  s.b_im = Tensor({m}, p.b_im);
  return s;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
  const std::size_t I = static_cast<std::size_t>(cfg_.intermediate);
  const std::size_t V = static_cast<std::size_t>(cfg_.vocab_size);
  Rng rng(seed, 0x6d6f64656cULL);

  token_table_ = add_matrix("embed.token", V, d, rng);
  if (cfg_.use_position_embeddings) {
    position_table_ = add_matrix("embed.position", static_cast<std::size_t>(cfg_.max_len), d, rng);
  }
  emb_ln_gain_ = add_norm("embed.ln.gain", 1.0);
  emb_ln_bias_ = add_norm("embed.ln.bias", 0.0);

  auto bias = [&](std::map<std::string, Parameter*>& into, const std::string& prefix, const std::string& w,
                  std::size_t n) {
    if (cfg_.use_bias) into[w] = add_param(prefix + ".b_" + w.substr(2), Tensor({n}, 0.0), false);
  };

  for (int li = 0; li < cfg_.n_layers; ++li) {
    const std::string p = "layer" + std::to_string(li);
    if (cfg_.arch == Arch::gated) {
      GatedBlock b{};
      b.ln_gain = add_norm(p + ".ln.gain", 1.0);
      b.ln_bias = add_norm(p + ".ln.bias", 0.0);
      b.w_v = add_matrix(p + ".W_v", d, I, rng);
      b.w_f = add_matrix(p + ".W_f", d, d, rng);
      b.w_b = add_matrix(p + ".W_b", d, d, rng);
      b.w_u1 = add_matrix(p + ".W_u1", d, d, rng);
      b.w_u2 = add_matrix(p + ".W_u2", d, d, rng);
      b.w_u = add_matrix(p + ".W_u", d, I, rng);
      b.w_o = add_matrix(p + ".W_o", I, d, rng);
      bias(b.biases, p, "W_v", I);
      bias(b.biases, p, "W_f", d);
      bias(b.biases, p, "W_b", d);
      bias(b.biases, p, "W_u1", d);
      bias(b.biases, p, "W_u2", d);
      bias(b.biases, p, "W_u", I);
      bias(b.biases, p, "W_o", d);
      if (cfg_.routing == Routing::ssm) {
        b.ssm_fwd = add_ssm(p + ".ssm_fwd", rng);
        b.ssm_bwd = add_ssm(p + ".ssm_bwd", rng);
      } else {
        b.w_q = add_matrix(p + ".W_q", d, d, rng);
        b.w_k = add_matrix(p + ".W_k", d, d, rng);
        bias(b.biases, p, "W_q", d);
        bias(b.biases, p, "W_k", d);
      }
      gated_.push_back(std::move(b));
    } else {
      StackedBlock b{};
      if (cfg_.routing == Routing::attention) {
        b.w_q = add_matrix(p + ".W_q", d, d, rng);
        b.w_k = add_matrix(p + ".W_k", d, d, rng);
        b.w_v = add_matrix(p + ".W_v", d, d, rng);
        b.w_o = add_matrix(p + ".W_o", d, d, rng);
        bias(b.biases, p, "W_q", d);
        bias(b.biases, p, "W_k", d);
        bias(b.biases, p, "W_v", d);
        bias(b.biases, p, "W_o", d);
      } else {
        b.ssm_fwd = add_ssm(p + ".ssm_fwd", rng);
        b.ssm_bwd = add_ssm(p + ".ssm_bwd", rng);
        b.w_p1 = add_matrix(p + ".W_p1", d, d, rng);
        b.w_p2 = add_matrix(p + ".W_p2", d, d, rng);
        bias(b.biases, p, "W_p1", d);
        bias(b.biases, p, "W_p2", d);
      }
      b.ln1_gain = add_norm(p + ".ln1.gain", 1.0);
      b.ln1_bias = add_norm(p + ".ln1.bias", 0.0);
      b.w_1 = add_matrix(p + ".W_1", d, I, rng);
      b.w_2 = add_matrix(p + ".W_2", I, d, rng);
      bias(b.biases, p, "W_1", I);
      bias(b.biases, p, "W_2", d);
      b.ln2_gain = add_norm(p + ".ln2.gain", 1.0);
      b.ln2_bias = add_norm(p + ".ln2.bias", 0.0);
      stacked_.push_back(std::move(b));
    }
  }

  head_w_ = add_matrix("head.W_t", d, d, rng);
  if (cfg_.use_bias) head_b_ = add_param("head.b_t", Tensor({d}, 0.0), false);
  head_ln_gain_ = add_norm("head.ln.gain", 1.0);
  head_ln_bias_ = add_norm("head.ln.bias", 0.0);
  if (cfg_.use_bias) out_bias_ = add_param("head.out_bias", Tensor({V}, 0.0), false);
}

void Model::set_max_len(int new_len) {
  if (new_len <= 0) throw std::invalid_argument("set_max_len: length must be positive");
  if (position_table_ != nullptr && new_len > cfg_.max_len) {
    throw std::invalid_argument("cannot extend a model with a learned position table beyond " +
                                std::to_string(cfg_.max_len) + " positions");
  }
  cfg_.max_len = new_len;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

Parameter& Model::param(std::string_view name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return *it->second;
}

const Parameter& Model::param(std::string_view name) const { return const_cast<Model*>(this)->param(name); }

std::size_t Model::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

// ----------------------------------------------------------------------------
// Forward

SsmVars ssm_vars(Tape& tape, const SsmSlot& s) {
  SsmVars v;
  v.log_neg_re = tape.param(*s.log_neg_re);
  v.im = s.im ? tape.param(*s.im) : tape.constant(s.frozen_im);
  v.c_re = tape.param(*s.c_re);
  v.c_im = tape.param(*s.c_im);
  v.b_re = tape.constant(s.b_re);
  v.b_im = tape.constant(s.b_im);
  v.d = tape.param(*s.d);
  v.log_dt = tape.param(*s.log_dt);
  v.conjugate_pairs = true;
  return v;
}

SsmParams Model::ssm_params(std::size_t layer, Direction dir) const {
  if (!has_ssm()) throw std::logic_error("model has no SSM layers");
  if (layer >= static_cast<std::size_t>(cfg_.n_layers)) throw std::out_of_range("layer index out of range");
  const SsmSlot& s = cfg_.arch == Arch::gated ? (dir == Direction::forward ? gated_[layer].ssm_fwd : gated_[layer].ssm_bwd)
                                               : (dir == Direction::forward ? stacked_[layer].ssm_fwd
                                                                            : stacked_[layer].ssm_bwd);
  SsmParams p;
  p.log_neg_re = s.log_neg_re->value.storage();
  p.im = s.im ? s.im->value.storage() : s.frozen_im.storage();
  p.c_re = s.c_re->value.storage();
  p.c_im = s.c_im->value.storage();
  p.b_re = s.b_re.storage();
  p.b_im = s.b_im.storage();
  p.d = s.d->value[0];
  p.log_dt = s.log_dt->value[0];
  p.conjugate_pairs = true;
  return p;
}

namespace {

Var project(Tape& tape, Var x, Parameter* w, const std::map<std::string, Parameter*>& biases) {
  Var y = matmul(x, tape.param(*w));
  const std::string key = w->name.substr(w->name.rfind('.') + 1);
  if (auto it = biases.find(key); it != biases.end()) y = add_row(y, tape.param(*it->second));
  return y;
}

}  // namespace

Var gated_block(Tape& tape, const ModelConfig& cfg_, const GatedBlock& b, Var x, std::size_t L,
                const ForwardOptions& opts, ForwardTrace* trace) {
  if (x.value().cols() != static_cast<std::size_t>(cfg_.d_model)) {
    throw ShapeError("gated_block: input " + shape_str(x.shape()) + " does not have d_model columns");
  }
  const Var X = layer_norm(x, tape.param(*b.ln_gain), tape.param(*b.ln_bias), cfg_.ln_eps);
  const Var V = gelu(project(tape, X, b.w_v, b.biases));
  const Var F = gelu(project(tape, X, b.w_f, b.biases));
  const Var B = gelu(project(tape, flip(X, L), b.w_b, b.biases));
  Var sf, sb;
  if (cfg_.routing == Routing::ssm) {
    sf = ssm_apply(ssm_vars(tape, b.ssm_fwd), F, L);
    sb = ssm_apply(ssm_vars(tape, b.ssm_bwd), B, L);
  } else {
    // attention routing inside the gated unit: one score map over X, applied to F
    // and (in flipped order) to B
    const Var q = project(tape, X, b.w_q, b.biases);
    const Var k = project(tape, X, b.w_k, b.biases);
    const std::size_t heads = static_cast<std::size_t>(cfg_.n_heads);
    sf = attention(q, k, F, L, heads);
    sb = flip(attention(q, k, flip(B, L), L, heads), L);
  }
  if (trace) {
    trace->forward_branch.push_back(sf.value());
    trace->backward_branch.push_back(flip(sb, L).value());
  }
  const Var U1 = project(tape, sf, b.w_u1, b.biases);
  const Var U2 = project(tape, sb, b.w_u2, b.biases);
  const Var U = gelu(project(tape, mul(U1, flip(U2, L)), b.w_u, b.biases));
  Var O = project(tape, mul(U, V), b.w_o, b.biases);
  if (opts.training) O = dropout(O, cfg_.dropout, *opts.dropout_rng);
  return add(O, x);
}

Var stacked_block(Tape& tape, const ModelConfig& cfg_, const StackedBlock& b, Var x, std::size_t L,
                  const ForwardOptions& opts, ForwardTrace* trace) {
  if (x.value().cols() != static_cast<std::size_t>(cfg_.d_model)) {
    throw ShapeError("stacked_block: input " + shape_str(x.shape()) + " does not have d_model columns");
  }
  Var route;
  if (cfg_.routing == Routing::attention) {
    const Var q = project(tape, x, b.w_q, b.biases);
    const Var k = project(tape, x, b.w_k, b.biases);
    const Var v = project(tape, x, b.w_v, b.biases);
    route = project(tape, attention(q, k, v, L, static_cast<std::size_t>(cfg_.n_heads)), b.w_o, b.biases);
  } else {
    const Var sf = ssm_apply(ssm_vars(tape, b.ssm_fwd), x, L);
    const Var r1 = project(tape, sf, b.w_p1, b.biases);
    const Var sb = flip(ssm_apply(ssm_vars(tape, b.ssm_bwd), flip(r1, L), L), L);
    if (trace) {
      trace->forward_branch.push_back(sf.value());
      trace->backward_branch.push_back(sb.value());
    }
    route = project(tape, sb, b.w_p2, b.biases);
  }
  if (opts.training) route = dropout(route, cfg_.dropout, *opts.dropout_rng);
  const Var h = layer_norm(add(x, route), tape.param(*b.ln1_gain), tape.param(*b.ln1_bias), cfg_.ln_eps);
  Var f = project(tape, gelu(project(tape, h, b.w_1, b.biases)), b.w_2, b.biases);
  if (opts.training) f = dropout(f, cfg_.dropout, *opts.dropout_rng);
  return layer_norm(add(h, f), tape.param(*b.ln2_gain), tape.param(*b.ln2_bias), cfg_.ln_eps);
}

Var Model::forward(Tape& tape, std::span<const std::int32_t> tokens, std::size_t seq_len, const ForwardOptions& opts,
                   ForwardTrace* trace) const {
  if (seq_len == 0 || tokens.empty() || tokens.size() % seq_len != 0) {
    throw ShapeError("forward: " + std::to_string(tokens.size()) + " tokens do not form sequences of length " +
                     std::to_string(seq_len));
  }
  if (seq_len > static_cast<std::size_t>(cfg_.max_len)) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(seq_len) + " exceeds max_len " +
                                std::to_string(cfg_.max_len));
  }
  for (std::int32_t t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg_.vocab_size));
    }
  }
  if (opts.training && cfg_.dropout > 0.0 && opts.dropout_rng == nullptr) {
    throw std::invalid_argument("forward: training with dropout requires an rng");
  }

  const Var table = tape.param(*token_table_);
  Var x = gather_rows(table, tokens);
  if (position_table_) {
    std::vector<std::int32_t> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i % seq_len);
    x = add(x, gather_rows(tape.param(*position_table_), pos));
  }
  x = layer_norm(x, tape.param(*emb_ln_gain_), tape.param(*emb_ln_bias_), cfg_.ln_eps);
  if (opts.training) x = dropout(x, cfg_.dropout, *opts.dropout_rng);

  for (int li = 0; li < cfg_.n_layers; ++li) {
    x = cfg_.arch == Arch::gated ? gated_block(tape, cfg_, gated_[li], x, seq_len, opts, trace)
                                 : stacked_block(tape, cfg_, stacked_[li], x, seq_len, opts, trace);
    if (trace) trace->layer_outputs.push_back(x.value());
  }

  Var h = matmul(x, tape.param(*head_w_));
  if (head_b_) h = add_row(h, tape.param(*head_b_));
  h = layer_norm(gelu(h), tape.param(*head_ln_gain_), tape.param(*head_ln_bias_), cfg_.ln_eps);
  Var logits = matmul_nt(h, table);
  if (out_bias_) logits = add_row(logits, tape.param(*out_bias_));
  return logits;
}

Tensor Model::logits(std::span<const std::int32_t> tokens, std::size_t seq_len) const {
  Tape tape(false);
  return forward(tape, tokens, seq_len).value();
}

Tensor attention_scores(const Model& model, std::size_t layer, const Tensor& hidden, std::size_t head) {
  const ModelConfig& cfg = model.config();
  if (cfg.routing != Routing::attention || cfg.arch != Arch::stacked) {
    throw std::logic_error("attention_scores: model is not stacked/attention");
  }
  const StackedBlock& b = model.stacked_blocks().at(layer);
  Tensor q = matmul(hidden, b.w_q->value);
  Tensor k = matmul(hidden, b.w_k->value);
  auto add_bias = [&](Tensor& t, const char* key) {
    if (auto it = b.biases.find(key); it != b.biases.end())
      for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) t.at(r, c) += it->second->value[c];
  };
  add_bias(q, "W_q");
  add_bias(k, "W_k");
  return attention_probs(q, k, static_cast<std::size_t>(cfg.n_heads), head);
}

}  // namespace bigs
