// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
// if any fails. Optional arguments select criteria by number.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bigs/analysis.hpp"
#include "bigs/checkpoint.hpp"
#include "bigs/ops.hpp"
#include "bigs/pretrain.hpp"
#include "bigs/ssm.hpp"
#include "gradcheck.hpp"

namespace {

using namespace bigs;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

constexpr double kScanTol = 1e-8;
constexpr double kScanSeconds = 10.0;

SsmParams random_ssm(int n_state, Rng& rng) {
  SsmParams p;
  // one state is a single real mode; otherwise N/2 conjugate pairs
  const bool real = n_state == 1;
  p.conjugate_pairs = !real;
  const int modes = real ? 1 : n_state / 2;
  for (int n = 0; n < modes; ++n) {
    p.log_neg_re.push_back(std::log(rng.uniform(0.05, 1.0)));
    p.im.push_back(real ? 0.0 : rng.uniform(-5.0, 5.0));
    p.c_re.push_back(rng.normal());
    p.c_im.push_back(real ? 0.0 : rng.normal());
    p.b_re.push_back(rng.normal());
    p.b_im.push_back(real ? 0.0 : rng.normal());
  }
  p.d = rng.normal();
  p.log_dt = std::log(rng.uniform(0.001, 0.3));
  return p;
}

Outcome scan_convolution() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  std::size_t cases = 0;
  for (int N : {1, 8, 64})
    for (std::size_t L : {1u, 16u, 128u, 256u})
      for (int trial = 0; trial < 5; ++trial) {
        const DiscreteSsm d = discretize(random_ssm(N, rng));
        std::vector<double> u(L);
        for (double& v : u) v = rng.normal();
        const auto a = scan(d, u);
        const auto b = convolve(materialize_kernel(d, L), d.d, u);
        for (std::size_t i = 0; i < L; ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
        ++cases;
      }
  const double s = seconds_since(t0);
  return {worst < kScanTol && s < kScanSeconds,
          fmt("%zu systems, max |scan - convolve| = %.3g (< %.0e), %.2f s (< %.0f s)", cases, worst, kScanTol, s,
              kScanSeconds)};
}

// ---------------------------------------------------------------------------

constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr double kGradSeconds = 120.0;

Outcome gradient_check() {
  const auto t0 = Clock::now();
  ModelConfig c = ModelConfig::defaults(Arch::gated, Routing::ssm, 8);
  c.n_layers = 2;
  c.n_state = 4;
  c.max_len = 16;
  c.vocab_size = 24;
  c.dropout = 0.0;
  c.init_std = 0.3;  // gradients well above the relative-error floor
  Model m(c, 202);
  Rng rng(203);
  std::vector<std::int32_t> tokens(16), labels(16, -1);
  for (auto& t : tokens) t = Vocab::kNumSpecial + static_cast<std::int32_t>(rng.below(19));
  for (std::size_t k : {1u, 4u, 5u, 9u, 14u}) labels[k] = Vocab::kNumSpecial + static_cast<std::int32_t>(rng.below(19));
  const auto r = testing::gradcheck(
      m.parameters(), [&](Tape& t) { return masked_cross_entropy(m.forward(t, tokens, 16), labels); }, kGradStep);
  const double s = seconds_since(t0);
  return {r.max_rel_error < kGradTol && s < kGradSeconds && r.checked == m.num_parameters(),
          fmt("%zu scalars in %zu tensors, max rel error %.3g (< %.0e) at %s, %.1f s", r.checked,
              m.parameters().size(), r.max_rel_error, kGradTol, r.worst.c_str(), s)};
}

// ---------------------------------------------------------------------------

std::size_t enumerated_block_weights(const Model& m, const std::string& layer) {
  std::size_t n = 0;
  for (const Parameter* p : m.parameters()) {
    if (p->name.rfind(layer, 0) != 0 || p->value.rank() != 2) continue;
    if (p->value.rows() < 2 || p->value.cols() < 2) continue;  // SSM vectors, norms
    n += p->value.numel();
  }
  return n;
}

Outcome parameter_counts() {
  bool ok = true;
  std::ostringstream detail;
  for (int d : {4, 8, 16}) {
    ModelConfig g = ModelConfig::defaults(Arch::gated, Routing::ssm, d);
    ModelConfig s = ModelConfig::defaults(Arch::stacked, Routing::attention, d);
    for (ModelConfig* c : {&g, &s}) {
      c->n_layers = 1;
      c->vocab_size = 10;
      c->max_len = 8;
      c->n_heads = 2;
      c->n_state = 4;
    }
    const std::size_t dd = static_cast<std::size_t>(d) * d;
    const std::size_t ga = param_count(g).block_weights, sa = param_count(s).block_weights;
    const std::size_t ge = enumerated_block_weights(Model(g, 1), "layer0.");
    const std::size_t se = enumerated_block_weights(Model(s, 1), "layer0.");
    ok &= ga == 13 * dd && ge == 13 * dd && sa == 12 * dd && se == 12 * dd;
    if (d == 8) detail << fmt("d=8 gated %zu/%zu (13d^2=%zu), stacked %zu/%zu (12d^2=%zu); ", ga, ge, 13 * dd, sa, se, 12 * dd);
  }
  const double total = static_cast<double>(param_count(ModelConfig::bigs_large()).total);
  ok &= total >= 330e6 && total <= 370e6;
  detail << fmt("full gated/SSM total %.1fM in [330M, 370M]", total / 1e6);
  return {ok, detail.str()};
}

// ---------------------------------------------------------------------------

constexpr double kRatioTol = 0.10;
constexpr double kAbsFactor = 2.0;

Outcome flop_table() {
  const std::size_t lengths[] = {128, 512, 1024, 4096};
  const double ratios[] = {1.03, 0.94, 0.90, 0.63};
  const double bigs_table[] = {8.1e10, 3.2e11, 6.5e11, 2.6e12};
  const double bert_table[] = {7.9e10, 3.4e11, 7.2e11, 4.1e12};
  bool ok = true;
  std::ostringstream detail;
  for (int i = 0; i < 4; ++i) {
    const double b = flop_estimate(ModelConfig::bigs_large(), lengths[i]).total;
    const double t = flop_estimate(ModelConfig::bert_large(), lengths[i]).total;
    const double r = b / t;
    ok &= std::abs(r - ratios[i]) <= kRatioTol;
    ok &= b / bigs_table[i] <= kAbsFactor && bigs_table[i] / b <= kAbsFactor;
    ok &= t / bert_table[i] <= kAbsFactor && bert_table[i] / t <= kAbsFactor;
    if (lengths[i] >= 512) ok &= b < t;
    detail << fmt("L=%zu %.3f (%.2f) ", lengths[i], r, ratios[i]);
  }
  detail << "; totals within 2x, BiGS < BERT from 512";
  return {ok, detail.str()};
}

// ---------------------------------------------------------------------------

constexpr double kCausalTol = 1e-12;

Outcome causality() {
  Rng rng(501);
  const SsmParams f = init_s4d(16, 0.001, 0.1, rng), b = init_s4d(16, 0.001, 0.1, rng);
  const CausalityReport a = probe_causality(f, b, 64, 4, 20, 502, kCausalTol);
  ModelConfig c = ModelConfig::defaults(Arch::gated, Routing::ssm, 16);
  c.n_layers = 1;
  c.n_state = 16;
  c.max_len = 64;
  c.vocab_size = 40;
  const CausalityReport m = probe_causality(Model(c, 503), 64, 20, 504, kCausalTol);
  const std::size_t v = a.forward_violations + a.backward_violations + m.forward_violations + m.backward_violations;
  return {v == 0 && a.min_self_response > 0.0 && m.min_self_response > 0.0,
          fmt("SSM pair: %zu+%zu violations, max leak %.2g/%.2g; gated layer: %zu+%zu violations, max leak %.2g/%.2g "
              "(20 trials each, L=64, tol %.0e)",
              a.forward_violations, a.backward_violations, a.max_forward_leak, a.max_backward_leak,
              m.forward_violations, m.backward_violations, m.max_forward_leak, m.max_backward_leak, kCausalTol)};
}

// ---------------------------------------------------------------------------

constexpr double kKernelPrefixTol = 1e-12;
constexpr double kPrefixActivationTol = 1e-10;

Outcome length_extension() {
  const std::size_t L = 32;
  ModelConfig c = ModelConfig::defaults(Arch::gated, Routing::ssm, 64);
  c.n_layers = 2;
  c.n_state = 16;
  c.max_len = static_cast<int>(L);
  c.vocab_size = 64;
  c.init_std = 0.1;
  Model m(c, 601);

  double kernel_err = 0.0;
  for (std::size_t layer = 0; layer < 2; ++layer)
    for (Direction dir : {Direction::forward, Direction::backward}) {
      const DiscreteSsm d = discretize(m.ssm_params(layer, dir));
      const Kernel short_k = materialize_kernel(d, L), long_k = materialize_kernel(d, 4 * L);
      for (std::size_t l = 0; l < L; ++l) kernel_err = std::max(kernel_err, std::abs(short_k.taps[l] - long_k.taps[l]));
    }

  Rng rng(602);
  std::vector<std::int32_t> tokens(4 * L);
  for (auto& t : tokens) t = Vocab::kNumSpecial + static_cast<std::int32_t>(rng.below(59));
  ForwardTrace before, after;
  {
    Tape tape(false);
    m.forward(tape, std::span(tokens).first(L), L, {}, &before);
  }
  m.set_max_len(static_cast<int>(4 * L));
  {
    Tape tape(false);
    m.forward(tape, tokens, 4 * L, {}, &after);
  }
  double act_err = 0.0;
  for (std::size_t k = 0; k < L; ++k)
    for (std::size_t ch = 0; ch < before.forward_branch[0].cols(); ++ch)
      act_err = std::max(act_err, std::abs(before.forward_branch[0].at(k, ch) - after.forward_branch[0].at(k, ch)));
  return {kernel_err < kKernelPrefixTol && act_err < kPrefixActivationTol,
          fmt("L=%zu -> %zu: kernel prefix diff %.3g (< %.0e), forward-branch prefix diff %.3g (< %.0e)", L, 4 * L,
              kernel_err, kKernelPrefixTol, act_err, kPrefixActivationTol)};
}

// ---------------------------------------------------------------------------

constexpr std::int64_t kToySteps = 2000;
constexpr double kToySeconds = 15 * 60.0;

struct ToyData {
  Vocab vocab;
  Shard train, valid;
};

ToyData toy_data(std::size_t seq_len = 32) {
  const auto docs = synthetic_corpus(6000, 701);
  const std::vector<std::string> train(docs.begin(), docs.begin() + 5400), valid(docs.begin() + 5400, docs.end());
  ToyData d;
  d.vocab = build_vocab(train, 512);
  d.train = build_shard(segment_documents(train, d.vocab, seq_len), seq_len, 0.15, d.vocab.size(), 702, 4);
  d.valid = build_shard(segment_documents(valid, d.vocab, seq_len), seq_len, 0.15, d.vocab.size(), 703);
  return d;
}

ModelConfig toy_config(Arch arch, Routing routing, int vocab) {
  ModelConfig c = ModelConfig::defaults(arch, routing, 64);
  c.n_layers = 2;
  c.n_state = 16;
  c.max_len = 32;
  c.vocab_size = vocab;
  c.n_heads = 4;
  c.init_std = 0.1;
  return c;
}

TrainOptions toy_options() {
  TrainOptions o;
  o.total_steps = kToySteps;
  o.batch_size = 16;
  o.peak_lr = 3e-3;
  o.warmup_frac = 0.01;
  o.seed = 704;
  return o;
}

Outcome toy_training() {
  const auto t0 = Clock::now();
  const ToyData data = toy_data();
  bool ok = data.vocab.size() <= 512;
  std::ostringstream detail;
  detail << "vocab " << data.vocab.size() << "; ";
  for (auto [arch, routing] : {std::pair{Arch::gated, Routing::ssm}, std::pair{Arch::stacked, Routing::attention}}) {
    Model m(toy_config(arch, routing, data.vocab.size()), 705);
    AdamW opt;
    const double before = evaluate(m, data.valid).perplexity;
    train_mlm(m, opt, data.train, toy_options());
    const double after = evaluate(m, data.valid).perplexity;
    ok &= after <= 0.5 * before;
    detail << fmt("%s/%s ppl %.1f -> %.1f (%.2fx); ", to_string(arch).c_str(), to_string(routing).c_str(), before,
                  after, after / before);
  }
  const double s = seconds_since(t0);
  ok &= s < kToySeconds;
  detail << fmt("%lld steps each, %.0f s total (< %.0f s)", static_cast<long long>(kToySteps), s, kToySeconds);
  return {ok, detail.str()};
}

// ---------------------------------------------------------------------------

Outcome masking_statistics() {
  Rng rng(801);
  const std::int32_t V = 300;
  MaskStats st;
  while (st.positions < 120000) {
    std::vector<std::int32_t> ids(128);
    for (auto& t : ids) t = Vocab::kNumSpecial + static_cast<std::int32_t>(rng.below(V - Vocab::kNumSpecial));
    mask_tokens(ids, 0.15, V, rng, &st);
  }
  const double n = static_cast<double>(st.selected);
  const double frac = n / static_cast<double>(st.positions);
  auto within = [&](std::size_t count, double p) { return std::abs(count - p * n) <= 3.0 * std::sqrt(n * p * (1 - p)); };
  const bool ok = frac >= 0.14 && frac <= 0.16 && within(st.replaced_mask, 0.8) && within(st.replaced_random, 0.1) &&
                  within(st.kept, 0.1);
  return {ok, fmt("%zu positions, selected %.4f, split %.4f/%.4f/%.4f (3 sigma bounds on 80/10/10)", st.positions, frac,
                  st.replaced_mask / n, st.replaced_random / n, st.kept / n)};
}

// ---------------------------------------------------------------------------

Outcome reproducibility() {
  const fs::path root = fs::temp_directory_path() / "bigs_acceptance_repro";
  fs::remove_all(root);
  std::vector<std::string> shard_bytes, ckpt_bytes;
  std::vector<double> loss100;
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = root / std::to_string(run);
    fs::create_directories(dir);
    const auto docs = synthetic_corpus(600, 901);
    const Vocab v = build_vocab(docs, 512);
    write_shard(dir / "train.shard", build_shard(segment_documents(docs, v, 32), 32, 0.15, v.size(), 902, 2));
    const Shard data = read_shard(dir / "train.shard");
    Model m(toy_config(Arch::gated, Routing::ssm, v.size()), 903);
    AdamW opt;
    TrainOptions o = toy_options();
    o.total_steps = 100;
    const auto h = train_mlm(m, opt, data, o, dir / "model");
    shard_bytes.push_back(read_file(dir / "train.shard"));
    ckpt_bytes.push_back(read_file(dir / "model.bin") + read_file(dir / "model.json"));
    loss100.push_back(h.at(99).loss);
  }
  fs::remove_all(root);
  const std::hash<std::string> hash;
  const bool ok = shard_bytes[0] == shard_bytes[1] && ckpt_bytes[0] == ckpt_bytes[1] &&
                  std::bit_cast<std::uint64_t>(loss100[0]) == std::bit_cast<std::uint64_t>(loss100[1]);
  return {ok, fmt("shards %s, step-100 loss %.17g vs %.17g, checkpoint hash %016zx vs %016zx",
                  shard_bytes[0] == shard_bytes[1] ? "identical" : "differ", loss100[0], loss100[1],
                  hash(ckpt_bytes[0]), hash(ckpt_bytes[1]))};
}

// ---------------------------------------------------------------------------

Outcome kernel_dump() {
  bool ok = true;
  std::ostringstream detail;
  const fs::path root = fs::temp_directory_path() / "bigs_acceptance_kernels";
  for (Arch arch : {Arch::gated, Arch::stacked}) {
    ModelConfig c = toy_config(arch, Routing::ssm, 40);
    c.n_layers = 3;
    const Model m(c, 1001);
    const KernelDump dump = dump_kernels(m);
    ok &= dump.kernels.size() == 6;
    for (const auto& k : dump.kernels) {
      const auto [lo, hi] = std::minmax_element(k.normalized.begin(), k.normalized.end());
      ok &= *lo == 0.0 && *hi == 1.0;
    }
    fs::remove_all(root);
    write_kernel_dump(root, dump);
    std::istringstream csv(read_file(root / "kernels.csv"));
    std::string line;
    std::getline(csv, line);
    ok &= line == "layer,direction,relative_position,tap,normalized_tap";
    std::set<std::string> groups;
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
      ++rows;
      const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
      groups.insert(line.substr(0, c2));
      const double n = std::stod(line.substr(line.rfind(',') + 1));
      ok &= n >= 0.0 && n <= 1.0 && std::count(line.begin(), line.end(), ',') == 4;
    }
    ok &= groups.size() == 6 && rows == 6 * 21;
    const auto header = nlohmann::json::parse(read_file(root / "kernels_header.json"));
    ok &= header.contains("L") && header.contains("n_layers") && header.contains("convention");
    detail << fmt("%s 3 layers: %zu kernels, %zu groups, %zu rows; ", to_string(arch).c_str(), dump.kernels.size(),
                  groups.size(), rows);
  }
  fs::remove_all(root);
  detail << "normalized crops span exactly [0, 1]";
  return {ok, detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"scan/convolution equivalence", scan_convolution},
      {"gradient correctness", gradient_check},
      {"parameter-count identities", parameter_counts},
      {"FLOP table", flop_table},
      {"causality / anti-causality", causality},
      {"length extension", length_extension},
      {"toy MLM training", toy_training},
      {"masking statistics", masking_statistics},
      {"reproducibility", reproducibility},
      {"kernel dump", kernel_dump},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
