// SPDX-License-Identifier: Apache-2.0
#include "bigs/pretrain.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "bigs/ops.hpp"

namespace bigs {

namespace fs = std::filesystem;
using nlohmann::json;

// ----------------------------------------------------------------------------
// Vocab

namespace {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> s{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return s;
}

}  // namespace

Vocab::Vocab() : Vocab(special_tokens()) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& sp = special_tokens();
  if (tokens_.size() < sp.size() || !std::equal(sp.begin(), sp.end(), tokens_.begin())) {
    throw std::invalid_argument("vocab must start with " + sp[0] + " " + sp[1] + " " + sp[2] + " " + sp[3] + " " +
                                sp[4]);
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw std::invalid_argument("duplicate vocab token '" + tokens_[i] + "'");
    }
  }
}

std::int32_t Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::int32_t> Vocab::encode(std::string_view text) const {
  std::vector<std::int32_t> ids;
  for (const std::string& w : split_whitespace(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocab::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  for (std::int32_t i : ids) {
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

void Vocab::save(const fs::path& path) const {
  std::string text;
  for (const auto& t : tokens_) text += t + "\n";
  write_file_atomic(path, text);
}

Vocab Vocab::load(const fs::path& path) { return Vocab(read_lines(path)); }

Vocab build_vocab(const std::vector<std::string>& documents, std::size_t max_size) {
  if (max_size <= static_cast<std::size_t>(Vocab::kNumSpecial)) {
    throw std::invalid_argument("build_vocab: max_size must exceed the " + std::to_string(Vocab::kNumSpecial) +
                                " special tokens");
  }
  struct Entry {
    std::size_t count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Entry> freq;
  std::size_t seen = 0;
  for (const auto& doc : documents) {
    for (auto& w : split_whitespace(doc)) {
      auto [it, fresh] = freq.try_emplace(std::move(w), Entry{0, seen});
      ++it->second.count;
      ++seen;
    }
  }
  if (seen == 0) throw std::invalid_argument("build_vocab: corpus is empty");

  std::vector<std::pair<std::string, Entry>> words(freq.begin(), freq.end());
  std::sort(words.begin(), words.end(), [](const auto& a, const auto& b) {
    return a.second.count != b.second.count ? a.second.count > b.second.count : a.second.first < b.second.first;
  });
  std::vector<std::string> tokens = special_tokens();
  for (auto& [w, e] : words) {
    if (tokens.size() >= max_size) break;
    if (std::find(tokens.begin(), tokens.begin() + Vocab::kNumSpecial, w) != tokens.begin() + Vocab::kNumSpecial)
      continue;
    tokens.push_back(w);
  }
  return Vocab(std::move(tokens));
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// ----------------------------------------------------------------------------
// Masking

MaskStats& MaskStats::operator+=(const MaskStats& o) {
  positions += o.positions;
  selected += o.selected;
  replaced_mask += o.replaced_mask;
  replaced_random += o.replaced_random;
  kept += o.kept;
  return *this;
}

MaskedSequence mask_tokens(std::span<const std::int32_t> ids, double mask_rate, std::int32_t vocab_size, Rng& rng,
                           MaskStats* stats) {
  if (!(mask_rate >= 0.0 && mask_rate < 1.0)) throw std::invalid_argument("mask_tokens: mask_rate must be in [0, 1)");
  if (vocab_size <= Vocab::kNumSpecial) throw std::invalid_argument("mask_tokens: vocabulary has no regular tokens");
  MaskedSequence out{{ids.begin(), ids.end()}, std::vector<std::int32_t>(ids.size(), -1)};
  MaskStats local;
  const auto regular = static_cast<std::uint64_t>(vocab_size - Vocab::kNumSpecial);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < Vocab::kNumSpecial) continue;
    ++local.positions;
    if (!rng.bernoulli(mask_rate)) continue;
    ++local.selected;
    out.labels[i] = ids[i];
    const double r = rng.uniform();
    if (r < 0.8) {
      out.input_ids[i] = Vocab::kMask;
      ++local.replaced_mask;
    } else if (r < 0.9) {
      out.input_ids[i] = Vocab::kNumSpecial + static_cast<std::int32_t>(rng.below(regular));
      ++local.replaced_random;
    } else {
      ++local.kept;
    }
  }
  if (stats) *stats += local;
  return out;
}

// ----------------------------------------------------------------------------
// Shards

namespace {

constexpr char kShardMagic[4] = {'B', 'G', 'S', 'M'};
constexpr std::uint32_t kShardVersion = 1;

template <typename T>
void put_le(std::string& out, T v) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("shard file is truncated");
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(u);
}

}  // namespace

void write_shard(const fs::path& path, const Shard& s) {
  if (s.input_ids.size() != s.labels.size() || (s.seq_len && s.input_ids.size() % s.seq_len)) {
    throw std::invalid_argument("write_shard: ids and labels do not form whole sequences");
  }
  std::string out(kShardMagic, 4);
  put_le<std::uint32_t>(out, kShardVersion);
  put_le<std::uint32_t>(out, s.seq_len);
  put_le<std::uint64_t>(out, s.count());
  out.reserve(out.size() + 8 * s.input_ids.size());
  for (std::int32_t v : s.input_ids) put_le<std::int32_t>(out, v);
  for (std::int32_t v : s.labels) put_le<std::int32_t>(out, v);
  write_file_atomic(path, out);
}

Shard read_shard(const fs::path& path) {
  const std::string in = read_file(path);
  if (in.size() < 4 || std::memcmp(in.data(), kShardMagic, 4) != 0) {
    throw std::runtime_error(path.string() + " is not a shard file");
  }
  std::size_t pos = 4;
  if (get_le<std::uint32_t>(in, pos) != kShardVersion) throw std::runtime_error("unsupported shard version");
  Shard s;
  s.seq_len = get_le<std::uint32_t>(in, pos);
  const auto count = get_le<std::uint64_t>(in, pos);
  const std::size_t n = static_cast<std::size_t>(count) * s.seq_len;
  if (in.size() != pos + 8 * n) throw std::runtime_error("shard file " + path.string() + " has the wrong size");
  s.input_ids.resize(n);
  s.labels.resize(n);
  for (auto& v : s.input_ids) v = get_le<std::int32_t>(in, pos);
  for (auto& v : s.labels) v = get_le<std::int32_t>(in, pos);
  return s;
}

std::vector<std::vector<std::int32_t>> segment_documents(const std::vector<std::string>& documents, const Vocab& vocab,
                                                         std::size_t seq_len) {
  if (seq_len == 0) throw std::invalid_argument("segment_documents: seq_len must be positive");
  std::vector<std::vector<std::int32_t>> out;
  for (const auto& doc : documents) {
    const auto ids = vocab.encode(doc);
    for (std::size_t i = 0; i < ids.size(); i += seq_len) {
      std::vector<std::int32_t> seg(seq_len, Vocab::kPad);
      std::copy(ids.begin() + static_cast<std::ptrdiff_t>(i),
                ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), i + seq_len)), seg.begin());
      out.push_back(std::move(seg));
    }
  }
  return out;
}

Shard build_shard(const std::vector<std::vector<std::int32_t>>& segments, std::size_t seq_len, double mask_rate,
                  std::int32_t vocab_size, std::uint64_t seed, std::size_t copies, MaskStats* stats) {
  Shard s;
  s.seq_len = static_cast<std::uint32_t>(seq_len);
  for (std::size_t c = 0; c < copies; ++c) {
    for (std::size_t i = 0; i < segments.size(); ++i) {
      if (segments[i].size() != seq_len) throw ShapeError("build_shard: segment length differs from seq_len");
      Rng rng(seed, c * segments.size() + i);
      auto m = mask_tokens(segments[i], mask_rate, vocab_size, rng, stats);
      s.input_ids.insert(s.input_ids.end(), m.input_ids.begin(), m.input_ids.end());
      s.labels.insert(s.labels.end(), m.labels.begin(), m.labels.end());
    }
  }
  return s;
}

// ----------------------------------------------------------------------------
// Synthetic corpus

std::vector<std::string> synthetic_corpus(std::size_t n_documents, std::uint64_t seed) {
  constexpr int kClasses = 8;
  constexpr int kNounsPerClass = 16;
  constexpr int kVerbsPerClass = 8;
  constexpr int kAdjPerClass = 6;
  const char* dets[] = {"the", "a", "this", "every"};
  Rng rng(seed, 0x636f72707573ULL);

  // Zipf-like choice inside a class
  auto pick = [&](int n) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += 1.0 / (i + 1);
    double r = rng.uniform() * total;
    for (int i = 0; i < n; ++i) {
      r -= 1.0 / (i + 1);
      if (r <= 0.0) return i;
    }
    return n - 1;
  };
  auto noun_phrase = [&](int cls, std::string& out) {
    out += dets[rng.below(4)];
    if (rng.bernoulli(0.5)) out += " j" + std::to_string(cls * kAdjPerClass + pick(kAdjPerClass));
    out += " n" + std::to_string(cls * kNounsPerClass + pick(kNounsPerClass));
  };

  std::vector<std::string> docs;
  docs.reserve(n_documents);
  for (std::size_t d = 0; d < n_documents; ++d) {
    std::string doc;
    const std::uint64_t sentences = 2 + rng.below(5);
    for (std::uint64_t s = 0; s < sentences; ++s) {
      if (!doc.empty()) doc += ' ';
      const int subj = static_cast<int>(rng.below(kClasses));
      noun_phrase(subj, doc);
      const int verb = pick(kVerbsPerClass);
      doc += " v" + std::to_string(subj * kVerbsPerClass + verb) + " ";
      // the object class follows from the verb
      noun_phrase((subj * 3 + verb + 1) % kClasses, doc);
      if (rng.bernoulli(0.3)) {
        const int prep = static_cast<int>(rng.below(6));
        doc += " p" + std::to_string(prep) + " ";
        noun_phrase(prep % kClasses, doc);
      }
      doc += " .";
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

// ----------------------------------------------------------------------------
// Schedules

std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::cosine: return "cosine";
    case Schedule::linear: return "linear";
    case Schedule::constant: return "constant";
  }
  return "?";
}

Schedule parse_schedule(std::string_view s) {
  if (s == "cosine") return Schedule::cosine;
  if (s == "linear") return Schedule::linear;
  if (s == "constant") return Schedule::constant;
  throw std::invalid_argument("unknown schedule '" + std::string(s) + "' (expected cosine|linear|constant)");
}

namespace {

// Returns the post-warmup progress in [0, 1], or a negative value during warmup
// with the warmup fraction written to `warm`.
double progress(std::int64_t step, std::int64_t total, double warmup_frac, double& warm_ratio) {
  if (total <= 0) throw std::invalid_argument("schedule: total_steps must be positive");
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) throw std::invalid_argument("schedule: warmup_frac must be in (0, 1)");
  const double warm = warmup_frac * static_cast<double>(total);
  const double s = static_cast<double>(step);
  if (s < warm) {
    warm_ratio = s / warm;
    return -1.0;
  }
  return (s - warm) / (static_cast<double>(total) - warm);
}

}  // namespace

double cosine_warmup_lr(std::int64_t step, std::int64_t total, double warmup_frac, double peak) {
  if (step < 0 || step > total) return 0.0;
  double w = 0.0;
  const double p = progress(step, total, warmup_frac, w);
  if (p < 0.0) return peak * w;
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

double linear_warmup_lr(std::int64_t step, std::int64_t total, double warmup_frac, double peak) {
  if (step < 0 || step > total) return 0.0;
  double w = 0.0;
  const double p = progress(step, total, warmup_frac, w);
  if (p < 0.0) return peak * w;
  return peak * (1.0 - p);
}

double schedule_lr(Schedule s, std::int64_t step, std::int64_t total, double warmup_frac, double peak) {
  switch (s) {
    case Schedule::cosine: return cosine_warmup_lr(step, total, warmup_frac, peak);
    case Schedule::linear: return linear_warmup_lr(step, total, warmup_frac, peak);
    case Schedule::constant: return peak;
  }
  return 0.0;
}

// ----------------------------------------------------------------------------
// AdamW

void AdamW::step(const std::vector<Parameter*>& params, double lr) {
  for (const Parameter* p : params) {
    if (p->grad.empty()) continue;
    for (double g : p->grad.storage()) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in parameter " + p->name);
    }
  }
  double scale = 1.0;
  if (cfg_.clip > 0.0) {
    double sq = 0.0;
    for (const Parameter* p : params)
      for (double g : p->grad.storage()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip) scale = cfg_.clip / norm;
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Parameter* p : params) {
    auto [it, fresh] = moments_.try_emplace(p->name);
    Moments& mo = it->second;
    if (fresh) {
      mo.m = Tensor::zeros_like(p->value);
      mo.v = Tensor::zeros_like(p->value);
    }
    const bool has_grad = !p->grad.empty();
    const double wd = p->decay ? cfg_.weight_decay : 0.0;
    auto& w = p->value.storage();
    auto& m = mo.m.storage();
    auto& v = mo.v.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has_grad ? scale * p->grad[i] : 0.0;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * w[i]);
    }
  }
}

void AdamW::restore(std::int64_t t, std::map<std::string, Moments> moments) {
  t_ = t;
  moments_ = std::move(moments);
}

// ----------------------------------------------------------------------------
// Training

Var batch_loss(Tape& tape, const Model& model, const Shard& data, std::span<const std::size_t> rows,
               const ForwardOptions& fwd) {
  std::vector<std::int32_t> ids, labels;
  ids.reserve(rows.size() * data.seq_len);
  labels.reserve(rows.size() * data.seq_len);
  for (std::size_t r : rows) {
    const auto i = data.ids_of(r);
    const auto l = data.labels_of(r);
    ids.insert(ids.end(), i.begin(), i.end());
    labels.insert(labels.end(), l.begin(), l.end());
  }
  const Var logits = model.forward(tape, ids, data.seq_len, fwd);
  return masked_cross_entropy(logits, labels);
}

void save_training_checkpoint(const fs::path& stem, const Model& model, const AdamW& opt, json meta) {
  Checkpoint ck = snapshot(model);
  for (const auto& [name, mo] : opt.moments()) {
    ck.tensors.emplace_back("opt.m." + name, mo.m);
    ck.tensors.emplace_back("opt.v." + name, mo.v);
  }
  meta["step"] = opt.steps();
  const AdamWConfig& c = opt.config();
  meta["adamw"] = {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay},
                   {"clip", c.clip}};
  ck.meta = std::move(meta);
  save_checkpoint(stem, ck);
}

TrainingState load_training_checkpoint(const fs::path& stem) {
  const Checkpoint ck = load_checkpoint(stem);
  AdamWConfig c;
  if (ck.meta.contains("adamw")) {
    const json& a = ck.meta["adamw"];
    c.beta1 = a.at("beta1").get<double>();
    c.beta2 = a.at("beta2").get<double>();
    c.eps = a.at("eps").get<double>();
    c.weight_decay = a.at("weight_decay").get<double>();
    c.clip = a.at("clip").get<double>();
  }
  AdamW opt(c);
  std::map<std::string, AdamW::Moments> moments;
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("opt.m.", 0) == 0) moments[name.substr(6)].m = t;
    if (name.rfind("opt.v.", 0) == 0) moments[name.substr(6)].v = t;
  }
  opt.restore(ck.meta.value("step", std::int64_t{0}), std::move(moments));
  return {restore_model(ck), std::move(opt), ck.meta};
}

std::vector<HistoryEntry> train_mlm(Model& model, AdamW& opt, const Shard& data, const TrainOptions& o,
                                    const fs::path& checkpoint_stem,
                                    const std::function<void(const HistoryEntry&)>& on_step) {
  if (data.count() == 0) throw std::invalid_argument("train_mlm: training shard is empty");
  if (data.seq_len > static_cast<std::uint32_t>(model.config().max_len)) {
    throw std::invalid_argument("train_mlm: shard length " + std::to_string(data.seq_len) + " exceeds model max_len " +
                                std::to_string(model.config().max_len));
  }
  if (o.batch_size == 0) throw std::invalid_argument("train_mlm: batch_size must be positive");
  const std::int64_t stop = o.stop_at < 0 ? o.total_steps : std::min(o.stop_at, o.total_steps);
  const auto params = model.parameters();
  std::vector<HistoryEntry> history;
  std::vector<std::size_t> rows(o.batch_size);

  auto checkpoint = [&] {
    if (!checkpoint_stem.empty()) save_training_checkpoint(checkpoint_stem, model, opt, {{"seed", o.seed}});
  };

  while (opt.steps() < stop) {
    const std::int64_t step = opt.steps() + 1;
    Rng rng(o.seed, static_cast<std::uint64_t>(step));
    for (auto& r : rows) r = static_cast<std::size_t>(rng.below(data.count()));
    model.zero_grad();
    Tape tape;
    const Var loss = batch_loss(tape, model, data, rows, {true, &rng});
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw TrainingAborted("non-finite loss at step " + std::to_string(step) + "; last checkpoint kept");
    }
    tape.backward(loss);
    const double lr = schedule_lr(o.schedule, step, o.total_steps, o.warmup_frac, o.peak_lr);
    try {
      opt.step(params, lr);
    } catch (const NonFiniteError& e) {
      throw TrainingAborted(std::string(e.what()) + " at step " + std::to_string(step) + "; last checkpoint kept");
    }
    history.push_back({step, lr, value});
    if (on_step) on_step(history.back());
    if (o.checkpoint_every > 0 && step % o.checkpoint_every == 0) checkpoint();
  }
  checkpoint();
  return history;
}

std::vector<HistoryEntry> continue_pretrain(Model& model, int new_len, const Shard& data, std::int64_t steps,
                                            double lr, std::uint64_t seed, AdamWConfig opt_cfg,
                                            const fs::path& checkpoint_stem) {
  if (new_len <= model.config().max_len) {
    throw std::invalid_argument("continue_pretrain: new length " + std::to_string(new_len) +
                                " must exceed the current max_len " + std::to_string(model.config().max_len));
  }
  model.set_max_len(new_len);
  AdamW opt(opt_cfg);
  TrainOptions o;
  o.total_steps = steps;
  o.peak_lr = lr;
  o.schedule = Schedule::constant;
  o.seed = seed;
  o.batch_size = 16;
  return train_mlm(model, opt, data, o, checkpoint_stem);
}

EvalResult evaluate(const Model& model, const Shard& data, std::size_t batch_size, std::size_t max_rows) {
  const std::size_t n = max_rows ? std::min(max_rows, data.count()) : data.count();
  if (n == 0) throw std::invalid_argument("evaluate: shard is empty");
  double total = 0.0;
  std::size_t labeled = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < n; start += batch_size) {
    rows.clear();
    for (std::size_t r = start; r < std::min(n, start + batch_size); ++r) rows.push_back(r);
    std::size_t count = 0;
    for (std::size_t r : rows)
      for (std::int32_t y : data.labels_of(r)) count += y >= 0;
    if (count == 0) continue;
    Tape tape(false);
    total += batch_loss(tape, model, data, rows).value()[0] * static_cast<double>(count);
    labeled += count;
  }
  if (labeled == 0) throw std::invalid_argument("evaluate: shard has no labeled positions");
  EvalResult r;
  r.labeled = labeled;
  r.loss = total / static_cast<double>(labeled);
  r.perplexity = std::exp(r.loss);
  return r;
}

void write_history_csv(const fs::path& path, const std::vector<HistoryEntry>& history) {
  std::ostringstream out;
  out.precision(17);
  out << "step,lr,loss\n";
  for (const auto& h : history) out << h.step << ',' << h.lr << ',' << h.loss << '\n';
  write_file_atomic(path, out.str());
}

}  // namespace bigs
