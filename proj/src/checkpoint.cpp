// SPDX-License-Identifier: Apache-2.0
#include "bigs/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bigs {

namespace fs = std::filesystem;
using nlohmann::json;

json config_to_json(const ModelConfig& c) {
  return json{{"arch", to_string(c.arch)},
              {"routing", to_string(c.routing)},
              {"n_layers", c.n_layers},
              {"d_model", c.d_model},
              {"n_state", c.n_state},
              {"max_len", c.max_len},
              {"vocab_size", c.vocab_size},
              {"n_heads", c.n_heads},
              {"intermediate", c.intermediate},
              {"dropout", c.dropout},
              {"use_position_embeddings", c.use_position_embeddings},
              {"use_bias", c.use_bias},
              {"train_ssm_imag", c.train_ssm_imag},
              {"ln_eps", c.ln_eps},
              {"init_std", c.init_std},
              {"dt_min", c.dt_min},
              {"dt_max", c.dt_max}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.arch = parse_arch(j.at("arch").get<std::string>());
  c.routing = parse_routing(j.at("routing").get<std::string>());
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_state = j.at("n_state").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.intermediate = j.at("intermediate").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.use_position_embeddings = j.at("use_position_embeddings").get<bool>();
  c.use_bias = j.at("use_bias").get<bool>();
  c.train_ssm_imag = j.at("train_ssm_imag").get<bool>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.init_std = j.at("init_std").get<double>();
  c.dt_min = j.at("dt_min").get<double>();
  c.dt_max = j.at("dt_max").get<double>();
  c.validate();
  return c;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

fs::path manifest_path(const fs::path& stem) { return fs::path(stem.string() + ".json"); }

namespace {

fs::path buffer_path(const fs::path& stem) { return fs::path(stem.string() + ".bin"); }

void append_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  char buf[8];
  std::memcpy(buf, &bits, 8);
  out.append(buf, 8);
}

double read_le(const char* p) {
  std::uint64_t bits;
  std::memcpy(&bits, p, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void save_checkpoint(const fs::path& stem, const Checkpoint& ckpt) {
  std::string buffer;
  json tensors = json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", buffer.size()}, {"numel", t.numel()}});
    for (double v : t.data()) append_le(buffer, v);
  }
  json manifest{{"format", "bigs-checkpoint"},
                {"version", 1},
                {"buffer", buffer_path(stem).filename().string()},
                {"config", config_to_json(ckpt.config)},
                {"meta", ckpt.meta},
                {"tensors", std::move(tensors)}};
  write_file_atomic(buffer_path(stem), buffer);
  write_file_atomic(manifest_path(stem), manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& stem) {
  const fs::path mpath = manifest_path(stem);
  if (!fs::exists(mpath)) throw std::runtime_error("checkpoint manifest not found: " + mpath.string());
  const json manifest = json::parse(read_file(mpath));
  if (manifest.value("format", "") != "bigs-checkpoint") throw std::runtime_error("not a checkpoint: " + mpath.string());
  if (manifest.at("version").get<int>() != 1) throw std::runtime_error("unsupported checkpoint version");
  const fs::path bpath = mpath.parent_path() / manifest.at("buffer").get<std::string>();
  const std::string buffer = read_file(bpath);

  Checkpoint ckpt;
  ckpt.config = config_from_json(manifest.at("config"));
  ckpt.meta = manifest.value("meta", json::object());
  for (const json& e : manifest.at("tensors")) {
    const Shape shape = e.at("shape").get<Shape>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t numel = e.at("numel").get<std::size_t>();
    if (shape_numel(shape) != numel || offset + 8 * numel > buffer.size()) {
      throw std::runtime_error("corrupt checkpoint entry " + e.at("name").get<std::string>());
    }
    std::vector<double> data(numel);
    for (std::size_t i = 0; i < numel; ++i) data[i] = read_le(buffer.data() + offset + 8 * i);
    ckpt.tensors.emplace_back(e.at("name").get<std::string>(), Tensor(shape, std::move(data)));
  }
  return ckpt;
}

Checkpoint snapshot(const Model& model) {
  Checkpoint c;
  c.config = model.config();
  for (const Parameter* p : model.parameters()) c.tensors.emplace_back(p->name, p->value);
  return c;
}

Model restore_model(const Checkpoint& ckpt) {
  Model model(ckpt.config, 0);
  for (Parameter* p : model.parameters()) {
    const Tensor* t = ckpt.find(p->name);
    if (t == nullptr) throw std::runtime_error("checkpoint is missing parameter " + p->name);
    if (!t->same_shape(p->value)) {
      throw ShapeError("checkpoint parameter " + p->name + " has shape " + shape_str(t->shape()) + ", model expects " +
                       shape_str(p->value.shape()));
    }
    p->value = *t;
  }
  return model;
}

}  // namespace bigs
