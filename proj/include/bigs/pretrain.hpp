// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bigs/checkpoint.hpp"
#include "bigs/model.hpp"

namespace bigs {

// ----------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kMask = 4;
  static constexpr std::int32_t kNumSpecial = 5;

  Vocab();  // specials only
  explicit Vocab(std::vector<std::string> tokens);  // must start with the specials

  std::int32_t size() const { return static_cast<std::int32_t>(tokens_.size()); }
  std::int32_t id(std::string_view token) const;  // kUnk when unknown
  const std::string& token(std::int32_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::int32_t> ids) const;

  /// One token per line, in id order.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// Whitespace tokens ranked by frequency (ties by first occurrence), truncated
/// so that specials + words <= max_size.
Vocab build_vocab(const std::vector<std::string>& documents, std::size_t max_size);

std::vector<std::string> split_whitespace(std::string_view text);

// ----------------------------------------------------------------------------
// Masking and shards

struct MaskStats {
  std::size_t positions = 0;  // maskable (non-special) positions seen
  std::size_t selected = 0;
  std::size_t replaced_mask = 0;
  std::size_t replaced_random = 0;
  std::size_t kept = 0;

  MaskStats& operator+=(const MaskStats& o);
};

struct MaskedSequence {
  std::vector<std::int32_t> input_ids;
  std::vector<std::int32_t> labels;  // -1 where not predicted
};

/// Each non-special position is selected with probability mask_rate; selected
/// positions become MASK (80%), a random non-special id (10%) or stay (10%).
MaskedSequence mask_tokens(std::span<const std::int32_t> ids, double mask_rate, std::int32_t vocab_size, Rng& rng,
                           MaskStats* stats = nullptr);

/// Fixed-length masked sequences.
///
/// File layout, little-endian: "BGSM", u32 version (1), u32 seq_len,
/// u64 count, then count*seq_len int32 input ids, then as many int32 labels.
struct Shard {
  std::uint32_t seq_len = 0;
  std::vector<std::int32_t> input_ids;
  std::vector<std::int32_t> labels;

  std::size_t count() const { return seq_len == 0 ? 0 : input_ids.size() / seq_len; }
  std::span<const std::int32_t> ids_of(std::size_t i) const { return {input_ids.data() + i * seq_len, seq_len}; }
  std::span<const std::int32_t> labels_of(std::size_t i) const { return {labels.data() + i * seq_len, seq_len}; }
};

void write_shard(const std::filesystem::path& path, const Shard& shard);
Shard read_shard(const std::filesystem::path& path);

/// Documents are tokenized and cut into seq_len segments, the tail padded.
std::vector<std::vector<std::int32_t>> segment_documents(const std::vector<std::string>& documents, const Vocab& vocab,
                                                         std::size_t seq_len);

/// Masks every segment `copies` times with its own stream of `seed`.
Shard build_shard(const std::vector<std::vector<std::int32_t>>& segments, std::size_t seq_len, double mask_rate,
                  std::int32_t vocab_size, std::uint64_t seed, std::size_t copies = 1, MaskStats* stats = nullptr);

/// Structured toy text: sentences from a small template grammar in which the
/// noun class of a subject constrains its verb and the verb constrains its
/// object, so both left and right context carry information.
std::vector<std::string> synthetic_corpus(std::size_t n_documents, std::uint64_t seed);

std::vector<std::string> read_lines(const std::filesystem::path& path);

// ----------------------------------------------------------------------------
// Optimization

enum class Schedule { cosine, linear, constant };
std::string to_string(Schedule s);
Schedule parse_schedule(std::string_view s);

/// 0 -> peak linearly over the warmup, then cosine decay to 0 at total_steps.
double cosine_warmup_lr(std::int64_t step, std::int64_t total_steps, double warmup_frac, double peak_lr);
/// Same warmup, then linear decay to 0.
double linear_warmup_lr(std::int64_t step, std::int64_t total_steps, double warmup_frac, double peak_lr);
double schedule_lr(Schedule s, std::int64_t step, std::int64_t total_steps, double warmup_frac, double peak_lr);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double clip = 0.0;  // global-norm clip; 0 disables
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// One bias-corrected update. Weight decay is decoupled and only applies to
  /// parameters flagged `decay`.
  void step(const std::vector<Parameter*>& params, double lr);

  std::int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  AdamWConfig& config() { return cfg_; }

  struct Moments {
    Tensor m, v;
  };
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(std::int64_t t, std::map<std::string, Moments> moments);

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

// ----------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::int64_t total_steps = 2000;  // schedule length
  std::int64_t stop_at = -1;        // stop early at this step; -1 runs to total_steps
  std::size_t batch_size = 16;
  double peak_lr = 1e-3;
  double warmup_frac = 0.01;
  Schedule schedule = Schedule::cosine;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0: only at the end
};

struct HistoryEntry {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Masked-LM training from the optimizer's current step. Step s (1-based)
/// draws its batch and dropout masks from Rng(seed, s), so a resumed run
/// repeats an uninterrupted one exactly. A non-finite loss or gradient throws
/// TrainingAborted and leaves the last checkpoint untouched.
std::vector<HistoryEntry> train_mlm(Model& model, AdamW& opt, const Shard& data, const TrainOptions& opts,
                                    const std::filesystem::path& checkpoint_stem = {},
                                    const std::function<void(const HistoryEntry&)>& on_step = {});

/// Masked-LM loss of one batch of sequences from the shard.
Var batch_loss(Tape& tape, const Model& model, const Shard& data, std::span<const std::size_t> rows,
               const ForwardOptions& fwd = {});

/// Model, optimizer moments and step in one checkpoint.
void save_training_checkpoint(const std::filesystem::path& stem, const Model& model, const AdamW& opt,
                              nlohmann::json meta = nlohmann::json::object());
struct TrainingState {
  Model model;
  AdamW opt;
  nlohmann::json meta;
};
TrainingState load_training_checkpoint(const std::filesystem::path& stem);

/// Reloads the model at a longer length and trains at a constant learning
/// rate with fresh optimizer moments.
std::vector<HistoryEntry> continue_pretrain(Model& model, int new_len, const Shard& data, std::int64_t steps,
                                            double lr, std::uint64_t seed, AdamWConfig opt_cfg = {},
                                            const std::filesystem::path& checkpoint_stem = {});

struct EvalResult {
  double loss = 0.0;  // mean cross-entropy over labeled positions
  double perplexity = 0.0;
  std::size_t labeled = 0;
};

EvalResult evaluate(const Model& model, const Shard& data, std::size_t batch_size = 32, std::size_t max_rows = 0);

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryEntry>& history);

}  // namespace bigs
