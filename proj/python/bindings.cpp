// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "bigs/analysis.hpp"
#include "bigs/checkpoint.hpp"
#include "bigs/cli.hpp"
#include "bigs/pretrain.hpp"
#include "bigs/ssm.hpp"

namespace py = pybind11;
using namespace bigs;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IdArray = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

py::array_t<double> to_numpy(const std::vector<double>& v) {
  py::array_t<double> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::vector<double> to_vector(const Array& a) {
  if (a.ndim() != 1) throw py::value_error("expected a 1-d array");
  return {a.data(), a.data() + a.size()};
}

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-d array");
  Tensor t({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))});
  std::copy(a.data(), a.data() + a.size(), t.storage().begin());
  return t;
}

std::vector<std::int32_t> to_ids(const IdArray& a) { return {a.data(), a.data() + a.size()}; }

py::array_t<std::int32_t> ids_to_numpy(const std::vector<std::int32_t>& v, std::size_t rows, std::size_t cols) {
  py::array_t<std::int32_t> out({static_cast<py::ssize_t>(rows), static_cast<py::ssize_t>(cols)});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_bigs, m) {
  m.doc() = "Bidirectional gated SSM models: kernels, training and analysis";

  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_FloatingPointError);
  py::register_exception<TrainingAborted>(m, "TrainingAborted", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  py::enum_<Arch>(m, "Arch").value("stacked", Arch::stacked).value("gated", Arch::gated);
  py::enum_<Routing>(m, "Routing").value("ssm", Routing::ssm).value("attention", Routing::attention);
  py::enum_<Direction>(m, "Direction").value("forward", Direction::forward).value("backward", Direction::backward);
  py::enum_<Schedule>(m, "Schedule")
      .value("cosine", Schedule::cosine)
      .value("linear", Schedule::linear)
      .value("constant", Schedule::constant);

  // ---- SSM
  py::class_<SsmParams>(m, "SsmParams")
      .def(py::init<>())
      .def_readwrite("log_neg_re", &SsmParams::log_neg_re)
      .def_readwrite("im", &SsmParams::im)
      .def_readwrite("c_re", &SsmParams::c_re)
      .def_readwrite("c_im", &SsmParams::c_im)
      .def_readwrite("b_re", &SsmParams::b_re)
      .def_readwrite("b_im", &SsmParams::b_im)
      .def_readwrite("d", &SsmParams::d)
      .def_readwrite("log_dt", &SsmParams::log_dt)
      .def_readwrite("conjugate_pairs", &SsmParams::conjugate_pairs)
      .def_property_readonly("modes", &SsmParams::modes);

  m.def(
      "init_s4d",
      [](int n_state, double dt_min, double dt_max, std::uint64_t seed) {
        Rng rng(seed);
        return init_s4d(n_state, dt_min, dt_max, rng);
      },
      py::arg("n_state"), py::arg("dt_min") = 0.001, py::arg("dt_max") = 0.1, py::arg("seed") = 0);
  m.def(
      "kernel", [](const SsmParams& p, std::size_t length) { return to_numpy(materialize_kernel(discretize(p), length).taps); },
      py::arg("params"), py::arg("length"), "Convolution kernel of the discretized SSM.");
  m.def(
      "scan", [](const SsmParams& p, const Array& u) { return to_numpy(scan(discretize(p), to_vector(u))); },
      py::arg("params"), py::arg("u"), "Runs the recurrence over a 1-d input.");
  m.def(
      "convolve",
      [](const SsmParams& p, const Array& u) {
        const DiscreteSsm d = discretize(p);
        const auto x = to_vector(u);
        return to_numpy(convolve(materialize_kernel(d, x.size()), d.d, x));
      },
      py::arg("params"), py::arg("u"), "FFT convolution with the kernel plus the skip term.");
  m.def(
      "ssm_apply", [](const SsmParams& p, const Array& x) { return to_numpy(ssm_apply(p, to_tensor(x))); },
      py::arg("params"), py::arg("x"), "Applies the SSM to every column of an [L, channels] array.");

  // ---- model
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("defaults", &ModelConfig::defaults, py::arg("arch"), py::arg("routing"), py::arg("d_model") = 1024)
      .def_static("bigs_large", &ModelConfig::bigs_large)
      .def_static("bert_large", &ModelConfig::bert_large)
      .def_readwrite("arch", &ModelConfig::arch)
      .def_readwrite("routing", &ModelConfig::routing)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_state", &ModelConfig::n_state)
      .def_readwrite("max_len", &ModelConfig::max_len)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("intermediate", &ModelConfig::intermediate)
      .def_readwrite("dropout", &ModelConfig::dropout)
      .def_readwrite("use_position_embeddings", &ModelConfig::use_position_embeddings)
      .def_readwrite("use_bias", &ModelConfig::use_bias)
      .def_readwrite("train_ssm_imag", &ModelConfig::train_ssm_imag)
      .def_readwrite("init_std", &ModelConfig::init_std)
      .def_readwrite("dt_min", &ModelConfig::dt_min)
      .def_readwrite("dt_max", &ModelConfig::dt_max)
      .def("validate", &ModelConfig::validate)
      .def("to_dict", [](const ModelConfig& c) { return py::module_::import("json").attr("loads")(config_to_json(c).dump()); })
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; });

  py::class_<ParamCount>(m, "ParamCount")
      .def_readonly("block_weights", &ParamCount::block_weights)
      .def_readonly("block_biases", &ParamCount::block_biases)
      .def_readonly("block_layer_norms", &ParamCount::block_layer_norms)
      .def_readonly("block_ssm", &ParamCount::block_ssm)
      .def_readonly("per_layer", &ParamCount::per_layer)
      .def_readonly("embeddings", &ParamCount::embeddings)
      .def_readonly("head", &ParamCount::head)
      .def_readonly("total", &ParamCount::total);
  m.def("param_count", &param_count, py::arg("config"));

  py::class_<Model>(m, "Model")
      .def(py::init<ModelConfig, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_property_readonly("config", &Model::config)
      .def("num_parameters", &Model::num_parameters)
      .def("parameter_names",
           [](const Model& self) {
             std::vector<std::string> names;
             for (const Parameter* p : self.parameters()) names.push_back(p->name);
             return names;
           })
      .def("parameter", [](const Model& self, const std::string& name) { return to_numpy(self.param(name).value); })
      .def(
          "logits",
          [](const Model& self, const IdArray& tokens) {
            if (tokens.ndim() != 1 && tokens.ndim() != 2) throw py::value_error("tokens must be 1-d or 2-d");
            const std::size_t L = static_cast<std::size_t>(tokens.shape(tokens.ndim() - 1));
            return to_numpy(self.logits(to_ids(tokens), L));
          },
          py::arg("tokens"), "Eval-mode logits [(batch*L), vocab].")
      .def(
          "forward_branches",
          [](const Model& self, const IdArray& tokens) {
            ForwardTrace trace;
            Tape tape(false);
            self.forward(tape, to_ids(tokens), static_cast<std::size_t>(tokens.size()), {}, &trace);
            py::list fwd, bwd;
            for (const auto& t : trace.forward_branch) fwd.append(to_numpy(t));
            for (const auto& t : trace.backward_branch) bwd.append(to_numpy(t));
            return py::make_tuple(fwd, bwd);
          },
          py::arg("tokens"), "Per-layer SSM outputs (forward, backward) for one sequence.")
      .def("ssm_params", &Model::ssm_params, py::arg("layer"), py::arg("direction"))
      .def("set_max_len", &Model::set_max_len, py::arg("length"))
      .def(
          "save",
          [](const Model& self, const std::filesystem::path& stem) { save_checkpoint(stem, snapshot(self)); },
          py::arg("stem"))
      .def_static(
          "load", [](const std::filesystem::path& stem) { return restore_model(load_checkpoint(stem)); },
          py::arg("stem"));

  // ---- data
  py::class_<Vocab>(m, "Vocab")
      .def(py::init<>())
      .def_readonly_static("PAD", &Vocab::kPad)
      .def_readonly_static("UNK", &Vocab::kUnk)
      .def_readonly_static("CLS", &Vocab::kCls)
      .def_readonly_static("SEP", &Vocab::kSep)
      .def_readonly_static("MASK", &Vocab::kMask)
      .def("__len__", &Vocab::size)
      .def("id", &Vocab::id)
      .def("token", &Vocab::token)
      .def_property_readonly("tokens", &Vocab::tokens)
      .def("encode", &Vocab::encode)
      .def("decode", [](const Vocab& v, const std::vector<std::int32_t>& ids) { return v.decode(ids); })
      .def("save", &Vocab::save)
      .def_static("load", &Vocab::load);
  m.def("build_vocab", &build_vocab, py::arg("documents"), py::arg("max_size"));
  m.def("synthetic_corpus", &synthetic_corpus, py::arg("n_documents"), py::arg("seed") = 0);

  py::class_<MaskStats>(m, "MaskStats")
      .def(py::init<>())
      .def_readonly("positions", &MaskStats::positions)
      .def_readonly("selected", &MaskStats::selected)
      .def_readonly("replaced_mask", &MaskStats::replaced_mask)
      .def_readonly("replaced_random", &MaskStats::replaced_random)
      .def_readonly("kept", &MaskStats::kept);
  m.def(
      "mask_tokens",
      [](const std::vector<std::int32_t>& ids, double rate, std::int32_t vocab_size, std::uint64_t seed) {
        Rng rng(seed);
        MaskStats st;
        MaskedSequence s = mask_tokens(ids, rate, vocab_size, rng, &st);
        return py::make_tuple(s.input_ids, s.labels, st);
      },
      py::arg("ids"), py::arg("mask_rate"), py::arg("vocab_size"), py::arg("seed") = 0,
      "Returns (input_ids, labels, stats).");

  py::class_<Shard>(m, "Shard")
      .def(py::init<>())
      .def_readonly("seq_len", &Shard::seq_len)
      .def("__len__", &Shard::count)
      .def_property_readonly("input_ids",
                             [](const Shard& s) { return ids_to_numpy(s.input_ids, s.count(), s.seq_len); })
      .def_property_readonly("labels", [](const Shard& s) { return ids_to_numpy(s.labels, s.count(), s.seq_len); })
      .def("write", [](const Shard& s, const std::filesystem::path& p) { write_shard(p, s); })
      .def_static("read", &read_shard);
  m.def(
      "build_shard",
      [](const std::vector<std::string>& docs, const Vocab& vocab, std::size_t seq_len, double rate,
         std::uint64_t seed, std::size_t copies) {
        return build_shard(segment_documents(docs, vocab, seq_len), seq_len, rate, vocab.size(), seed, copies);
      },
      py::arg("documents"), py::arg("vocab"), py::arg("seq_len"), py::arg("mask_rate") = 0.15, py::arg("seed") = 0,
      py::arg("copies") = 1);

  // ---- training
  py::class_<AdamWConfig>(m, "AdamWConfig")
      .def(py::init<>())
      .def_readwrite("beta1", &AdamWConfig::beta1)
      .def_readwrite("beta2", &AdamWConfig::beta2)
      .def_readwrite("eps", &AdamWConfig::eps)
      .def_readwrite("weight_decay", &AdamWConfig::weight_decay)
      .def_readwrite("clip", &AdamWConfig::clip);
  m.def("schedule_lr", &schedule_lr, py::arg("schedule"), py::arg("step"), py::arg("total_steps"),
        py::arg("warmup_frac"), py::arg("peak_lr"));

  m.def(
      "train",
      [](Model& model, const Shard& data, std::int64_t steps, double lr, std::size_t batch_size, double warmup_frac,
         Schedule schedule, std::uint64_t seed, AdamWConfig opt_cfg) {
        AdamW opt(opt_cfg);
        TrainOptions o;
        o.total_steps = steps;
        o.peak_lr = lr;
        o.batch_size = batch_size;
        o.warmup_frac = warmup_frac;
        o.schedule = schedule;
        o.seed = seed;
        std::vector<HistoryEntry> h;
        {
          py::gil_scoped_release release;
          h = train_mlm(model, opt, data, o);
        }
        std::vector<double> loss, rate;
        for (const auto& e : h) {
          loss.push_back(e.loss);
          rate.push_back(e.lr);
        }
        py::dict out;
        out["loss"] = to_numpy(loss);
        out["lr"] = to_numpy(rate);
        return out;
      },
      py::arg("model"), py::arg("data"), py::arg("steps"), py::arg("lr") = 1e-3, py::arg("batch_size") = 16,
      py::arg("warmup_frac") = 0.01, py::arg("schedule") = Schedule::cosine, py::arg("seed") = 0,
      py::arg("adamw") = AdamWConfig{}, "Masked-LM training with fresh optimizer state; returns loss and lr per step.");
  m.def(
      "evaluate",
      [](const Model& model, const Shard& data, std::size_t max_rows) {
        const EvalResult r = evaluate(model, data, 32, max_rows);
        py::dict out;
        out["loss"] = r.loss;
        out["perplexity"] = r.perplexity;
        out["labeled"] = r.labeled;
        return out;
      },
      py::arg("model"), py::arg("data"), py::arg("max_rows") = 0);

  // ---- analysis
  py::class_<FlopConvention>(m, "FlopConvention")
      .def(py::init<>())
      .def_readwrite("mac_flops", &FlopConvention::mac_flops)
      .def_readwrite("backward_multiplier", &FlopConvention::backward_multiplier)
      .def_readwrite("ssm_per_channel", &FlopConvention::ssm_per_channel);
  m.def(
      "flop_estimate",
      [](const ModelConfig& cfg, std::size_t length, const FlopConvention& conv) {
        const FlopReport r = flop_estimate(cfg, length, conv);
        py::dict out;
        for (const auto& c : r.components) out[py::str(c.name)] = c.flops;
        out["total"] = r.total;
        return out;
      },
      py::arg("config"), py::arg("length"), py::arg("convention") = FlopConvention{},
      "Forward+backward FLOPs per component and in total.");
  m.def(
      "dump_kernels",
      [](const Model& model) {
        py::list out;
        for (const auto& k : dump_kernels(model).kernels) {
          py::dict d;
          d["layer"] = k.layer;
          d["direction"] = k.direction;
          d["taps"] = to_numpy(k.taps);
          d["crop"] = to_numpy(k.crop);
          d["normalized"] = to_numpy(k.normalized);
          out.append(d);
        }
        return out;
      },
      py::arg("model"));
  m.def(
      "write_kernel_dump", [](const Model& model, const std::filesystem::path& dir) { write_kernel_dump(dir, dump_kernels(model)); },
      py::arg("model"), py::arg("directory"));

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> all{"bigs"};
        all.insert(all.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : all) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a command-line invocation in-process; returns (exit_code, stdout, stderr).");
}
