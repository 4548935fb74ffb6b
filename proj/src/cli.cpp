// SPDX-License-Identifier: Apache-2.0
#include "bigs/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "bigs/checkpoint.hpp"
#include "bigs/ssm.hpp"

namespace bigs::cli {

namespace fs = std::filesystem;

const std::vector<KeyInfo>& known_keys() {
  static const std::vector<KeyInfo> keys = {
      // model
      {"arch", "gated", "gated | stacked"},
      {"routing", "ssm", "ssm | attention"},
      {"n_layers", "2", ""},
      {"d_model", "64", ""},
      {"n_state", "16", "SSM state size N (N/2 conjugate pairs)"},
      {"max_len", "32", "sequence length; prepare cuts segments of this length"},
      {"n_heads", "4", ""},
      {"intermediate", "0", "0 picks 3*d_model (gated) or 4*d_model (stacked)"},
      {"dropout", "0.1", ""},
      {"position_embeddings", "auto", "auto | true | false; auto enables them for attention routing"},
      {"bias", "false", "add biases to projections"},
      {"train_ssm_imag", "true", ""},
      {"init_std", "0.1", ""},
      {"dt_min", "0.001", ""},
      {"dt_max", "0.1", ""},
      // data
      {"corpus", "", "text file, one document per line"},
      {"data", "", "directory written by prepare; defaults to --out"},
      {"synthetic_docs", "6000", "documents written by synth"},
      {"max_vocab", "512", "vocabulary size including the 5 special tokens"},
      {"valid_fraction", "0.1", "trailing share of documents held out"},
      {"mask_rate", "0.15", ""},
      {"mask_copies", "4", "masked copies of every training segment"},
      // training
      {"steps", "2000", ""},
      {"batch_size", "16", ""},
      {"lr", "0.003", "peak learning rate"},
      {"warmup_frac", "0.01", ""},
      {"schedule", "cosine", "cosine | linear | constant"},
      {"beta1", "0.9", ""},
      {"beta2", "0.98", ""},
      {"eps", "1e-6", ""},
      {"weight_decay", "0.01", ""},
      {"clip", "0", "global gradient-norm clip; 0 disables"},
      {"checkpoint_every", "0", "0 writes a checkpoint only at the end"},
      {"resume", "", "training checkpoint stem to continue from"},
      // extend / eval / dump-kernels
      {"checkpoint", "", "model checkpoint stem"},
      {"extend_steps", "500", ""},
      {"extend_lr", "0.0003", "constant learning rate for continued pretraining"},
      {"eval_split", "valid", "valid | train"},
      {"eval_rows", "0", "0 evaluates every row"},
      // flops
      {"lengths", "128,512,1024,4096", ""},
      {"mac_flops", "1", "flops per multiply-accumulate"},
      {"backward_multiplier", "1", "backward cost relative to the forward pass"},
      {"ssm_per_channel", "false", "count FFT work once per channel"},
  };
  return keys;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool is_known(const std::string& key) {
  const auto& keys = known_keys();
  return std::any_of(keys.begin(), keys.end(), [&](const KeyInfo& k) { return k.name == key; });
}

std::pair<std::string, std::string> split_assignment(std::string_view line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) throw std::invalid_argument(where + ": expected key=value, got '" + std::string(line) + "'");
  std::string key = trim(line.substr(0, eq));
  if (key.empty()) throw std::invalid_argument(where + ": empty key");
  if (!is_known(key)) throw std::invalid_argument(where + ": unknown key '" + key + "'");
  return {key, trim(line.substr(eq + 1))};
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw std::invalid_argument("key '" + key + "': not a number: '" + v + "'");
  return out;
}

std::vector<std::size_t> parse_lengths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<std::size_t>("lengths", item));
  }
  if (out.empty()) throw std::invalid_argument("key 'lengths': no lengths given");
  return out;
}

fs::path data_dir(const RunConfig& rc) {
  const std::string& d = rc.get("data");
  return d.empty() ? rc.out : fs::path(d);
}

fs::path require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw std::runtime_error(what + " not found: " + p.string());
  return p;
}

fs::path checkpoint_stem(const RunConfig& rc) {
  const std::string& s = rc.get("checkpoint");
  if (s.empty()) throw std::runtime_error("no checkpoint given (set checkpoint=<stem>)");
  require_file(manifest_path(s), "checkpoint");
  return s;
}

Shard load_split(const RunConfig& rc, const std::string& split) {
  if (split != "train" && split != "valid") throw std::invalid_argument("eval_split must be train or valid");
  return read_shard(require_file(data_dir(rc) / (split + ".shard"), split + " shard"));
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

void write_snapshot(const RunConfig& rc) {
  fs::create_directories(rc.out);
  write_json(rc.out / "run_config.json", rc.snapshot());
}

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t stream) { return Rng(seed, stream).next(); }

// seed streams for the independent consumers of one run seed
constexpr std::uint64_t kStreamTrainShard = 1;
constexpr std::uint64_t kStreamValidShard = 2;
constexpr std::uint64_t kStreamInit = 3;
constexpr std::uint64_t kStreamSteps = 4;
constexpr std::uint64_t kStreamSynth = 5;

}  // namespace

std::map<std::string, std::string> parse_config_text(std::string_view text) {
  std::map<std::string, std::string> out;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    auto [k, v] = split_assignment(line, "config line " + std::to_string(lineno));
    out[k] = v;
  }
  return out;
}

void RunConfig::resolve() {
  values.clear();
  for (const auto& k : known_keys()) values[k.name] = k.fallback;
  if (!config_file.empty()) {
    for (auto& [k, v] : parse_config_text(read_file(require_file(config_file, "config file")))) values[k] = v;
  }
  for (const auto& o : overrides) {
    auto [k, v] = split_assignment(o, "--set");
    values[k] = v;
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values.find(key);
  if (it == values.end()) throw std::logic_error("unresolved config key " + key);
  return it->second;
}

long long RunConfig::get_int(const std::string& key) const { return parse_number<long long>(key, get(key)); }
double RunConfig::get_double(const std::string& key) const { return parse_number<double>(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("key '" + key + "': expected true or false, got '" + v + "'");
}

nlohmann::json RunConfig::snapshot() const {
  return {{"subcommand", subcommand},
          {"config_file", config_file.string()},
          {"seed", seed},
          {"out", out.string()},
          {"overrides", overrides},
          {"values", values}};
}

ModelConfig model_config(const RunConfig& rc, int vocab_size) {
  const Arch arch = parse_arch(rc.get("arch"));
  const Routing routing = parse_routing(rc.get("routing"));
  ModelConfig c = ModelConfig::defaults(arch, routing, static_cast<int>(rc.get_int("d_model")));
  c.n_layers = static_cast<int>(rc.get_int("n_layers"));
  c.n_state = static_cast<int>(rc.get_int("n_state"));
  c.max_len = static_cast<int>(rc.get_int("max_len"));
  c.vocab_size = vocab_size;
  c.n_heads = static_cast<int>(rc.get_int("n_heads"));
  if (const auto inter = rc.get_int("intermediate"); inter > 0) c.intermediate = static_cast<int>(inter);
  c.dropout = rc.get_double("dropout");
  if (rc.get("position_embeddings") != "auto") c.use_position_embeddings = rc.get_bool("position_embeddings");
  c.use_bias = rc.get_bool("bias");
  c.train_ssm_imag = rc.get_bool("train_ssm_imag");
  c.init_std = rc.get_double("init_std");
  c.dt_min = rc.get_double("dt_min");
  c.dt_max = rc.get_double("dt_max");
  c.validate();
  return c;
}

TrainOptions train_options(const RunConfig& rc) {
  TrainOptions o;
  o.total_steps = rc.get_int("steps");
  if (o.total_steps < 0) throw std::invalid_argument("steps must be non-negative");
  const auto batch = rc.get_int("batch_size");
  if (batch <= 0) throw std::invalid_argument("batch_size must be positive");
  o.batch_size = static_cast<std::size_t>(batch);
  o.peak_lr = rc.get_double("lr");
  o.warmup_frac = rc.get_double("warmup_frac");
  o.schedule = parse_schedule(rc.get("schedule"));
  o.seed = derived_seed(rc.seed, kStreamSteps);
  o.checkpoint_every = rc.get_int("checkpoint_every");
  return o;
}

AdamWConfig adamw_config(const RunConfig& rc) {
  return {rc.get_double("beta1"), rc.get_double("beta2"), rc.get_double("eps"), rc.get_double("weight_decay"),
          rc.get_double("clip")};
}

FlopConvention flop_convention(const RunConfig& rc) {
  return {rc.get_double("mac_flops"), rc.get_double("backward_multiplier"), rc.get_bool("ssm_per_channel")};
}

// ----------------------------------------------------------------------------

int cmd_synth(const RunConfig& rc, std::ostream& log) {
  const auto n = rc.get_int("synthetic_docs");
  if (n <= 0) throw std::invalid_argument("synthetic_docs must be positive");
  std::string text;
  for (const auto& doc : synthetic_corpus(static_cast<std::size_t>(n), derived_seed(rc.seed, kStreamSynth)))
    text += doc + "\n";
  write_snapshot(rc);
  write_file_atomic(rc.out / "corpus.txt", text);
  log << "wrote " << n << " documents to " << (rc.out / "corpus.txt").string() << "\n";
  return 0;
}

int cmd_prepare(const RunConfig& rc, std::ostream& log) {
  const std::string& corpus = rc.get("corpus");
  if (corpus.empty()) throw std::runtime_error("no corpus given (set corpus=<file>)");
  std::vector<std::string> docs = read_lines(require_file(corpus, "corpus"));
  std::erase_if(docs, [](const std::string& d) { return split_whitespace(d).empty(); });
  if (docs.empty()) throw std::runtime_error("corpus is empty: " + corpus);

  const double frac = rc.get_double("valid_fraction");
  if (!(frac >= 0.0 && frac < 1.0)) throw std::invalid_argument("valid_fraction must be in [0, 1)");
  std::size_t n_valid = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(docs.size())));
  if (docs.size() > 1 && frac > 0.0) n_valid = std::clamp<std::size_t>(n_valid, 1, docs.size() - 1);
  else n_valid = 0;
  const std::vector<std::string> train(docs.begin(), docs.end() - static_cast<std::ptrdiff_t>(n_valid));
  const std::vector<std::string> valid(docs.end() - static_cast<std::ptrdiff_t>(n_valid), docs.end());

  const auto max_vocab = rc.get_int("max_vocab");
  if (max_vocab <= 0) throw std::invalid_argument("max_vocab must be positive");
  const Vocab vocab = build_vocab(train, static_cast<std::size_t>(max_vocab));
  const auto L = rc.get_int("max_len");
  if (L <= 0) throw std::invalid_argument("max_len must be positive");
  const auto copies = rc.get_int("mask_copies");
  if (copies <= 0) throw std::invalid_argument("mask_copies must be positive");
  const double rate = rc.get_double("mask_rate");

  MaskStats train_stats, valid_stats;
  const Shard ts = build_shard(segment_documents(train, vocab, L), L, rate, vocab.size(),
                               derived_seed(rc.seed, kStreamTrainShard), static_cast<std::size_t>(copies), &train_stats);
  const Shard vs = build_shard(segment_documents(valid, vocab, L), L, rate, vocab.size(),
                               derived_seed(rc.seed, kStreamValidShard), 1, &valid_stats);

  write_snapshot(rc);
  vocab.save(rc.out / "vocab.txt");
  write_shard(rc.out / "train.shard", ts);
  write_shard(rc.out / "valid.shard", vs);

  auto stats_json = [](const MaskStats& s, const Shard& sh) {
    const double sel = static_cast<double>(s.selected);
    return nlohmann::json{{"sequences", sh.count()},
                          {"positions", s.positions},
                          {"selected", s.selected},
                          {"masked_fraction", s.positions ? sel / static_cast<double>(s.positions) : 0.0},
                          {"replaced_mask", s.replaced_mask},
                          {"replaced_random", s.replaced_random},
                          {"kept", s.kept},
                          {"split",
                           {{"mask", s.selected ? static_cast<double>(s.replaced_mask) / sel : 0.0},
                            {"random", s.selected ? static_cast<double>(s.replaced_random) / sel : 0.0},
                            {"keep", s.selected ? static_cast<double>(s.kept) / sel : 0.0}}}};
  };
  const nlohmann::json stats = {{"documents", {{"train", train.size()}, {"valid", valid.size()}}},
                                {"vocab_size", vocab.size()},
                                {"seq_len", L},
                                {"mask_rate", rate},
                                {"train", stats_json(train_stats, ts)},
                                {"valid", stats_json(valid_stats, vs)}};
  write_json(rc.out / "stats.json", stats);
  log << "vocab " << vocab.size() << ", train " << ts.count() << " sequences, valid " << vs.count()
      << " sequences, masked fraction " << stats["train"]["masked_fraction"].get<double>() << "\n";
  return 0;
}

int cmd_train(const RunConfig& rc, std::ostream& log) {
  const fs::path dir = data_dir(rc);
  const Vocab vocab = Vocab::load(require_file(dir / "vocab.txt", "vocabulary"));
  const Shard train = load_split(rc, "train");
  const Shard valid = load_split(rc, "valid");
  const TrainOptions opts = train_options(rc);

  std::optional<TrainingState> state;
  if (const std::string& resume = rc.get("resume"); !resume.empty()) {
    require_file(manifest_path(resume), "resume checkpoint");
    state.emplace(load_training_checkpoint(resume));
    state->opt.config() = adamw_config(rc);
  } else {
    ModelConfig cfg = model_config(rc, vocab.size());
    if (static_cast<std::uint32_t>(cfg.max_len) != train.seq_len) {
      throw std::invalid_argument("max_len " + std::to_string(cfg.max_len) + " does not match the shard length " +
                                  std::to_string(train.seq_len));
    }
    state.emplace(TrainingState{Model(cfg, derived_seed(rc.seed, kStreamInit)), AdamW(adamw_config(rc)), {}});
  }
  Model& model = state->model;
  if (model.config().vocab_size != vocab.size()) throw std::invalid_argument("checkpoint vocabulary does not match data");

  write_snapshot(rc);
  const EvalResult before = evaluate(model, valid.count() ? valid : train);
  log << "params " << model.num_parameters() << ", initial perplexity " << before.perplexity << "\n";
  const auto history = train_mlm(model, state->opt, train, opts, rc.out / "model", [&](const HistoryEntry& h) {
    if (h.step % 100 == 0) log << "step " << h.step << " lr " << h.lr << " loss " << h.loss << "\n" << std::flush;
  });
  const EvalResult after = evaluate(model, valid.count() ? valid : train);
  write_history_csv(rc.out / "loss.csv", history);
  write_json(rc.out / "train.json", {{"steps", state->opt.steps()},
                                     {"parameters", model.num_parameters()},
                                     {"initial", {{"loss", before.loss}, {"perplexity", before.perplexity}}},
                                     {"final", {{"loss", after.loss}, {"perplexity", after.perplexity}}}});
  log << "final perplexity " << after.perplexity << "\n";
  return 0;
}

int cmd_extend(const RunConfig& rc, std::ostream& log) {
  const fs::path stem = checkpoint_stem(rc);
  Model model = restore_model(load_checkpoint(stem));
  const Shard train = load_split(rc, "train");
  const int old_len = model.config().max_len;
  const int new_len = static_cast<int>(train.seq_len);
  if (!model.has_ssm()) throw std::invalid_argument("extend needs an SSM-routed model");
  if (new_len <= old_len) {
    throw std::invalid_argument("shard length " + std::to_string(new_len) + " must exceed the model length " +
                                std::to_string(old_len));
  }

  // the new kernels keep the old taps, and the forward branch on a prefix is unchanged
  double kernel_err = 0.0;
  for (std::size_t layer = 0; layer < static_cast<std::size_t>(model.config().n_layers); ++layer)
    for (Direction dir : {Direction::forward, Direction::backward}) {
      const DiscreteSsm d = discretize(model.ssm_params(layer, dir));
      const Kernel a = materialize_kernel(d, static_cast<std::size_t>(old_len));
      const Kernel b = materialize_kernel(d, static_cast<std::size_t>(new_len));
      for (std::size_t l = 0; l < a.length(); ++l) kernel_err = std::max(kernel_err, std::abs(a.taps[l] - b.taps[l]));
    }
  const auto ids = train.ids_of(0);
  const std::vector<std::int32_t> prefix(ids.begin(), ids.begin() + old_len);
  ForwardTrace t0, t1;
  {
    Tape tape(false);
    model.forward(tape, prefix, static_cast<std::size_t>(old_len), {}, &t0);
  }
  model.set_max_len(new_len);
  {
    Tape tape(false);
    model.forward(tape, ids, static_cast<std::size_t>(new_len), {}, &t1);
  }
  double act_err = 0.0;
  for (std::size_t k = 0; k < static_cast<std::size_t>(old_len); ++k)
    for (std::size_t c = 0; c < t0.forward_branch[0].cols(); ++c)
      act_err = std::max(act_err, std::abs(t0.forward_branch[0].at(k, c) - t1.forward_branch[0].at(k, c)));
  model.set_max_len(old_len);

  write_snapshot(rc);
  const auto steps = rc.get_int("extend_steps");
  if (steps < 0) throw std::invalid_argument("extend_steps must be non-negative");
  const auto history = continue_pretrain(model, new_len, train, steps, rc.get_double("extend_lr"),
                                         derived_seed(rc.seed, kStreamSteps), adamw_config(rc), rc.out / "model");
  write_history_csv(rc.out / "loss.csv", history);
  write_json(rc.out / "extend.json", {{"from_length", old_len},
                                      {"to_length", new_len},
                                      {"steps", steps},
                                      {"kernel_prefix_max_abs_diff", kernel_err},
                                      {"prefix_activation_max_abs_diff", act_err}});
  log << "extended " << old_len << " -> " << new_len << ", kernel prefix diff " << kernel_err
      << ", prefix activation diff " << act_err << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc, std::ostream& log) {
  const Model model = restore_model(load_checkpoint(checkpoint_stem(rc)));
  const std::string& split = rc.get("eval_split");
  const Shard data = load_split(rc, split);
  const auto rows = rc.get_int("eval_rows");
  if (rows < 0) throw std::invalid_argument("eval_rows must be non-negative");
  write_snapshot(rc);
  const EvalResult r = evaluate(model, data, 32, static_cast<std::size_t>(rows));
  write_json(rc.out / "eval.json",
             {{"split", split}, {"cross_entropy", r.loss}, {"perplexity", r.perplexity}, {"labeled", r.labeled}});
  log << std::setprecision(6) << "cross_entropy " << r.loss << "\nperplexity " << r.perplexity << "\n";
  return 0;
}

int cmd_dump_kernels(const RunConfig& rc, std::ostream& log) {
  const Model model = restore_model(load_checkpoint(checkpoint_stem(rc)));
  const KernelDump dump = dump_kernels(model);
  write_snapshot(rc);
  write_kernel_dump(rc.out, dump);
  log << "wrote " << dump.kernels.size() << " kernels to " << (rc.out / "kernels.csv").string() << "\n";
  return 0;
}

int cmd_flops(const RunConfig& rc, std::ostream& log) {
  const FlopConvention conv = flop_convention(rc);
  const auto lengths = parse_lengths(rc.get("lengths"));
  std::vector<FlopReport> reports;
  std::string table = "model,length,flops\n", ratios = "length,ratio\n";
  std::ostringstream shown;
  shown << std::setw(8) << "length" << std::setw(14) << "BiGS" << std::setw(14) << "BERT" << std::setw(9) << "ratio\n";
  for (std::size_t L : lengths) {
    const FlopReport b = flop_estimate(ModelConfig::bigs_large(), L, conv, "bigs-large");
    const FlopReport t = flop_estimate(ModelConfig::bert_large(), L, conv, "bert-large");
    char row[160];
    std::snprintf(row, sizeof row, "bigs-large,%zu,%.17g\nbert-large,%zu,%.17g\n", L, b.total, L, t.total);
    table += row;
    std::snprintf(row, sizeof row, "%zu,%.17g\n", L, b.total / t.total);
    ratios += row;
    shown << std::setw(8) << L << std::setw(14) << std::setprecision(3) << std::scientific << b.total << std::setw(14)
          << t.total << std::fixed << std::setw(8) << b.total / t.total << "\n";
    reports.push_back(b);
    reports.push_back(t);
  }
  write_snapshot(rc);
  write_file_atomic(rc.out / "flops.csv", flop_csv(reports));
  write_file_atomic(rc.out / "flops_table.csv", table);
  write_file_atomic(rc.out / "flops_ratio.csv", ratios);
  log << shown.str();
  return 0;
}

// ----------------------------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"BiGS: bidirectional gated SSM pretraining and analysis"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  RunConfig rc;
  std::string config_file, out_dir = "out";
  std::uint64_t seed = 0;

  struct Entry {
    const char* name;
    const char* help;
    int (*fn)(const RunConfig&, std::ostream&);
  };
  const Entry entries[] = {
      {"synth", "Write a synthetic structured corpus (corpus.txt)", cmd_synth},
      {"prepare", "Build vocabulary and masked train/valid shards from a corpus", cmd_prepare},
      {"train", "Masked-LM pretraining; writes a checkpoint and loss.csv", cmd_train},
      {"extend", "Reload a checkpoint at a longer length and continue pretraining", cmd_extend},
      {"eval", "Masked cross-entropy and perplexity of a checkpoint", cmd_eval},
      {"dump-kernels", "Export every layer's SSM kernels", cmd_dump_kernels},
      {"flops", "FLOP estimates of the full-size BiGS and BERT configurations", cmd_flops},
  };
  std::string keys_help = "Keys:\n";
  for (const auto& k : known_keys()) {
    keys_help += "  " + k.name + " (default '" + k.fallback + "')" + (k.help.empty() ? "" : ": " + k.help) + "\n";
  }
  app.footer(keys_help);

  std::vector<CLI::App*> subs;
  for (const auto& e : entries) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    sub->add_option("--config", config_file, "Config file of key = value lines");
    sub->add_option("--seed", seed, "Seed for every random draw")->capture_default_str();
    sub->add_option("--out", out_dir, "Output directory")->capture_default_str();
    sub->add_option("--set", rc.overrides, "Override one key (key=value); repeatable")->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    rc.subcommand = entries[i].name;
    rc.config_file = config_file;
    rc.seed = seed;
    rc.out = out_dir;
    try {
      rc.resolve();
      return entries[i].fn(rc, out);
    } catch (const std::exception& e) {
      err << "bigs " << rc.subcommand << ": error: " << e.what() << "\n";
      return 1;
    }
  }
  return 1;
}

}  // namespace bigs::cli
