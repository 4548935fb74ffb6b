// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "bigs/analysis.hpp"
#include "bigs/pretrain.hpp"

namespace bigs::cli {

struct KeyInfo {
  std::string name;
  std::string fallback;
  std::string help;
};

/// Every key accepted by a config file or --set, with its default.
const std::vector<KeyInfo>& known_keys();

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
std::map<std::string, std::string> parse_config_text(std::string_view text);

struct RunConfig {
  std::string subcommand;
  std::filesystem::path config_file;
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  std::vector<std::string> overrides;
  std::map<std::string, std::string> values;  // resolved, one entry per known key

  /// Defaults, then the config file, then each --set in order.
  void resolve();

  const std::string& get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  nlohmann::json snapshot() const;
};

ModelConfig model_config(const RunConfig& rc, int vocab_size);
TrainOptions train_options(const RunConfig& rc);
AdamWConfig adamw_config(const RunConfig& rc);
FlopConvention flop_convention(const RunConfig& rc);

int cmd_synth(const RunConfig& rc, std::ostream& log);
int cmd_prepare(const RunConfig& rc, std::ostream& log);
int cmd_train(const RunConfig& rc, std::ostream& log);
int cmd_extend(const RunConfig& rc, std::ostream& log);
int cmd_eval(const RunConfig& rc, std::ostream& log);
int cmd_dump_kernels(const RunConfig& rc, std::ostream& log);
int cmd_flops(const RunConfig& rc, std::ostream& log);

/// Parses argv and dispatches. Errors go to `err` with a nonzero return.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace bigs::cli
