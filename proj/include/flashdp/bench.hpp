#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flashdp/dpcore.hpp"
#include "flashdp/errors.hpp"
#include "flashdp/memmodel.hpp"
#include "flashdp/tensor.hpp"
#include "flashdp/tiling.hpp"
#include "flashdp/workflows.hpp"
#include "json.hpp"

namespace flashdp::bench {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One linear layer of a scenario; B comes from the batch-size grid.
struct LayerSpec {
  std::string label;
  std::size_t T = 1;
  std::size_t P = 1;
  std::size_t D = 1;
};

struct MicroBatch {
  std::size_t size = 1;
  std::size_t accumulation_steps = 1;
};

enum class Optimizer { sgd, adam };

struct TrainConfig {
  LayerDims dims{4, 4, 8, 8};
  std::size_t steps = 10;
  Optimizer optimizer = Optimizer::sgd;
  double eta = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
};

struct ScenarioConfig {
  std::vector<LayerSpec> layers;
  std::vector<std::size_t> batch_sizes;
  std::optional<MicroBatch> micro_batch;
  std::vector<WorkflowKind> workflows;
  MemSpec mem;
  DPConfig dp;
  std::size_t repetitions = 1;
  std::optional<TrainConfig> train;
};

/// Linear-layer shapes of one transformer block, scaled to desk size:
/// W_Q, W_K, W_V (P -> P), W_1 (P -> H), W_2 (H -> P).
inline std::optional<std::vector<LayerSpec>> model_preset(const std::string& name) {
  std::size_t P = 0;
  if (name == "gpt2-small-mini") P = 64;
  else if (name == "gpt2-medium-mini") P = 96;
  else if (name == "gpt2-large-mini") P = 128;
  else return std::nullopt;
  const std::size_t H = 4 * P;
  const std::size_t T = 32;
  return std::vector<LayerSpec>{{"W_Q", T, P, P}, {"W_K", T, P, P}, {"W_V", T, P, P},
                                {"W_1", T, P, H}, {"W_2", T, H, P}};
}

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& obj, const std::string& path,
                           std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* key : allowed) ok = ok || it.key() == key;
    if (!ok) {
      throw ConfigError((path.empty() ? "" : path + ".") + it.key() + ": unknown key");
    }
  }
}

inline const json& require(const json& obj, const char* key, const std::string& path) {
  if (!obj.contains(key)) throw ConfigError(path + (path.empty() ? "" : ".") + key + ": missing");
  return obj.at(key);
}

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline const json& require_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  return j;
}

inline std::uint64_t as_uint(const json& j, const std::string& path, std::uint64_t min_value = 0) {
  if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() && j.get<std::int64_t>() < 0)) {
    throw ConfigError(path + ": expected a non-negative integer");
  }
  const auto v = j.get<std::uint64_t>();
  if (v < min_value) throw ConfigError(path + ": must be >= " + std::to_string(min_value));
  return v;
}

inline double as_double(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path + ": expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ConfigError(path + ": must be finite");
  return v;
}

inline std::string as_string(const json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path + ": expected a string");
  return j.get<std::string>();
}

inline std::vector<LayerSpec> parse_layers(const json& j, const std::string& path) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    auto preset = model_preset(name);
    if (!preset) throw ConfigError(path + ": unknown model preset '" + name + "'");
    return *preset;
  }
  if (!j.is_array() || j.empty()) {
    throw ConfigError(path + ": expected a preset name or a non-empty list of layers");
  }
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string at = path + "[" + std::to_string(i) + "]";
    const json& l = require_object(j[i], at);
    reject_unknown(l, at, {"label", "T", "P", "D"});
    LayerSpec spec;
    spec.label = l.contains("label") ? as_string(l["label"], at + ".label") : "layer" + std::to_string(i);
    if (spec.label.empty() || spec.label.find_first_of(",\"\n\r") != std::string::npos) {
      throw ConfigError(at + ".label: must be non-empty without commas, quotes or newlines");
    }
    spec.T = as_uint(require(l, "T", at), at + ".T", 1);
    spec.P = as_uint(require(l, "P", at), at + ".P", 1);
    spec.D = as_uint(require(l, "D", at), at + ".D", 1);
    layers.push_back(spec);
  }
  return layers;
}

inline TrainConfig parse_train(const json& j, const std::string& path) {
  require_object(j, path);
  reject_unknown(j, path, {"B", "T", "P", "D", "steps", "optimizer", "eta", "beta1", "beta2", "eps_adam"});
  TrainConfig t;
  t.dims.B = as_uint(require(j, "B", path), join(path, "B"), 1);
  t.dims.T = as_uint(require(j, "T", path), join(path, "T"), 1);
  t.dims.P = as_uint(require(j, "P", path), join(path, "P"), 1);
  t.dims.D = as_uint(require(j, "D", path), join(path, "D"), 1);
  t.steps = as_uint(require(j, "steps", path), join(path, "steps"), 1);
  if (j.contains("optimizer")) {
    const auto opt = as_string(j["optimizer"], join(path, "optimizer"));
    if (opt == "sgd") t.optimizer = Optimizer::sgd;
    else if (opt == "adam") t.optimizer = Optimizer::adam;
    else throw ConfigError(join(path, "optimizer") + ": expected 'sgd' or 'adam'");
  }
  if (j.contains("eta")) t.eta = as_double(j["eta"], join(path, "eta"));
  if (j.contains("beta1")) t.beta1 = as_double(j["beta1"], join(path, "beta1"));
  if (j.contains("beta2")) t.beta2 = as_double(j["beta2"], join(path, "beta2"));
  if (j.contains("eps_adam")) t.eps_adam = as_double(j["eps_adam"], join(path, "eps_adam"));
  if (!(t.beta1 >= 0.0 && t.beta1 < 1.0)) throw ConfigError(join(path, "beta1") + ": must lie in [0, 1)");
  if (!(t.beta2 >= 0.0 && t.beta2 < 1.0)) throw ConfigError(join(path, "beta2") + ": must lie in [0, 1)");
  return t;
}

}  // namespace detail

/// Parses a scenario document. Unknown keys and malformed values raise
/// ConfigError naming the offending key path.
inline ScenarioConfig parse_config(const nlohmann::json& root) {
  using namespace detail;
  require_object(root, "<root>");
  reject_unknown(root, "", {"model_preset", "batch_sizes", "micro_batch", "workflows", "mem", "dp",
                            "repetitions", "train"});
  ScenarioConfig cfg;
  cfg.layers = parse_layers(require(root, "model_preset", ""), "model_preset");

  const json& bs = require(root, "batch_sizes", "");
  if (!bs.is_array() || bs.empty()) throw ConfigError("batch_sizes: expected a non-empty list");
  for (std::size_t i = 0; i < bs.size(); ++i) {
    cfg.batch_sizes.push_back(as_uint(bs[i], "batch_sizes[" + std::to_string(i) + "]", 1));
  }

  if (root.contains("micro_batch")) {
    const json& mb = require_object(root["micro_batch"], "micro_batch");
    reject_unknown(mb, "micro_batch", {"size", "accumulation_steps"});
    MicroBatch m;
    m.size = as_uint(require(mb, "size", "micro_batch"), "micro_batch.size", 1);
    m.accumulation_steps =
        as_uint(require(mb, "accumulation_steps", "micro_batch"), "micro_batch.accumulation_steps", 1);
    for (std::size_t i = 0; i < cfg.batch_sizes.size(); ++i) {
      if (cfg.batch_sizes[i] != m.size * m.accumulation_steps) {
        throw ConfigError("batch_sizes[" + std::to_string(i) +
                          "]: must equal micro_batch.size * micro_batch.accumulation_steps (" +
                          std::to_string(m.size * m.accumulation_steps) + ")");
      }
    }
    cfg.micro_batch = m;
  }

  const json& wf = require(root, "workflows", "");
  if (!wf.is_array() || wf.empty()) throw ConfigError("workflows: expected a non-empty list");
  for (std::size_t i = 0; i < wf.size(); ++i) {
    const std::string at = "workflows[" + std::to_string(i) + "]";
    const auto kind = parse_workflow(as_string(wf[i], at));
    if (!kind) throw ConfigError(at + ": unknown workflow '" + wf[i].get<std::string>() + "'");
    for (auto seen : cfg.workflows) {
      if (seen == *kind) throw ConfigError(at + ": duplicate workflow");
    }
    cfg.workflows.push_back(*kind);
  }

  const json& mem = require_object(require(root, "mem", ""), "mem");
  reject_unknown(mem, "mem", {"scratchpad_capacity_bytes", "dtype_width_bytes"});
  cfg.mem.scratchpad_capacity_bytes =
      as_uint(require(mem, "scratchpad_capacity_bytes", "mem"), "mem.scratchpad_capacity_bytes", 1);
  if (mem.contains("dtype_width_bytes")) {
    cfg.mem.dtype_width_bytes = as_uint(mem["dtype_width_bytes"], "mem.dtype_width_bytes");
  }
  try {
    cfg.mem.validate();
  } catch (const UsageError& e) {
    throw ConfigError(std::string("mem: ") + e.what());
  }

  const json& dp = require_object(require(root, "dp", ""), "dp");
  reject_unknown(dp, "dp", {"clip_c", "sigma", "reduction", "seed"});
  cfg.dp.clip_C = as_double(require(dp, "clip_c", "dp"), "dp.clip_c");
  if (!(cfg.dp.clip_C > 0.0)) throw ConfigError("dp.clip_c: must be > 0");
  cfg.dp.sigma = as_double(require(dp, "sigma", "dp"), "dp.sigma");
  if (!(cfg.dp.sigma >= 0.0)) throw ConfigError("dp.sigma: must be >= 0");
  if (dp.contains("reduction")) {
    const auto r = as_string(dp["reduction"], "dp.reduction");
    if (r == "sum") cfg.dp.reduction = Reduction::sum;
    else if (r == "mean") cfg.dp.reduction = Reduction::mean;
    else throw ConfigError("dp.reduction: expected 'sum' or 'mean'");
  }
  cfg.dp.seed = as_uint(require(dp, "seed", "dp"), "dp.seed");

  if (root.contains("repetitions")) cfg.repetitions = as_uint(root["repetitions"], "repetitions", 1);
  if (root.contains("train")) cfg.train = parse_train(root["train"], "train");
  return cfg;
}

inline ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("<root>: invalid JSON: ") + e.what());
  }
  return parse_config(root);
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// Uniform value in [lo, hi) from the top 53 bits of one engine draw; unlike
/// std::uniform_real_distribution this is identical across standard libraries.
inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  constexpr double kInv53 = 1.0 / 9007199254740992.0;
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * kInv53);
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

inline std::uint64_t cell_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  using flashdp::detail::mix64;
  return mix64(mix64(mix64(seed) ^ a) ^ b);
}

/// Copy of samples [first, first + count) of a BxTxF tensor.
inline Tensor batch_slice(const Tensor& t, std::size_t first, std::size_t count) {
  const std::size_t per_sample = t.extent(1) * t.extent(2);
  const auto begin = t.data().begin() + static_cast<std::ptrdiff_t>(first * per_sample);
  return Tensor({count, t.extent(1), t.extent(2)},
                std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(count * per_sample)));
}

// ---------------------------------------------------------------------------
// Scenario runs
// ---------------------------------------------------------------------------

struct ComparisonRow {
  std::string workflow;
  std::string layer;
  std::size_t B = 0;
  std::uint64_t bytes_loaded = 0;
  std::uint64_t bytes_stored = 0;
  std::uint64_t per_sample_grad_bytes_stored = 0;
  std::uint64_t flops = 0;
  std::uint64_t redundant_flops = 0;
  std::uint64_t kernel_launches = 0;
  std::uint64_t barriers = 0;
  std::uint64_t peak_scratch_bytes = 0;
  double relative_traffic = 0.0;
  double grad_checksum = 0.0;
  std::uint64_t input_bytes_loaded = 0;

  bool operator==(const ComparisonRow&) const = default;
};

inline constexpr const char* kRowFields[] = {
    "workflow",      "layer",           "B",          "bytes_loaded",
    "bytes_stored",  "per_sample_grad_bytes_stored", "flops", "redundant_flops",
    "kernel_launches", "barriers",      "peak_scratch_bytes", "relative_traffic",
    "grad_checksum", "input_bytes_loaded"};

/// Result of one (workflow, layer, B) cell: gradient plus summed counters.
struct CellResult {
  Tensor grad_w;
  TrafficReport report;
  std::uint64_t input_bytes_loaded = 0;
};

/// Runs one workflow on one cell, splitting into micro-batches when requested.
/// Micro-batches produce noise-free clipped sums; noise is added once for the
/// logical batch.
inline CellResult run_cell(WorkflowKind kind, const Tensor& x, const Tensor& dy, const DPConfig& dp,
                           const MemSpec& mem, const std::optional<MicroBatch>& micro) {
  if (!micro) {
    auto r = run_backward(kind, x, dy, dp, mem);
    return {std::move(r.grad_w), r.report, r.input_bytes_loaded};
  }
  DPConfig partial_cfg = dp;
  partial_cfg.sigma = 0.0;
  partial_cfg.reduction = Reduction::sum;
  CellResult cell;
  std::vector<Tensor> partials;
  const std::size_t batch = x.extent(0);
  for (std::size_t first = 0; first < batch; first += micro->size) {
    const std::size_t count = std::min(micro->size, batch - first);
    auto r = run_backward(kind, batch_slice(x, first, count), batch_slice(dy, first, count),
                          partial_cfg, mem);
    cell.report += r.report;
    cell.input_bytes_loaded += r.input_bytes_loaded;
    partials.push_back(std::move(r.grad_w));
  }
  if (is_private(kind)) {
    cell.grad_w = accumulate_micro_batches(partials, batch, dp);
  } else {
    DPConfig plain;
    plain.sigma = 0.0;
    plain.reduction = Reduction::sum;
    cell.grad_w = accumulate_micro_batches(partials, batch, plain);
  }
  return cell;
}

inline double checksum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s;
}

/// Runs every (layer, batch size) cell for each configured workflow.
///
/// Inputs are drawn from (dp.seed, layer index, batch index), so repetitions
/// reproduce identical rows. A non_dp baseline is always run for the
/// relative_traffic column even when non_dp is not reported. DP rows of one
/// cell must agree on grad_checksum within 1e-9, otherwise RunError.
inline std::vector<ComparisonRow> run_scenario(const ScenarioConfig& cfg) {
  if (cfg.workflows.empty() || cfg.batch_sizes.empty() || cfg.layers.empty()) {
    throw ConfigError("scenario needs at least one layer, batch size and workflow");
  }
  std::vector<ComparisonRow> rows;
  for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
    for (std::size_t li = 0; li < cfg.layers.size(); ++li) {
      const LayerSpec& layer = cfg.layers[li];
      for (std::size_t bi = 0; bi < cfg.batch_sizes.size(); ++bi) {
        const std::size_t B = cfg.batch_sizes[bi];
        std::mt19937_64 rng(cell_seed(cfg.dp.seed, li, bi));
        const Tensor x = random_tensor({B, layer.T, layer.P}, rng);
        const Tensor dy = random_tensor({B, layer.T, layer.D}, rng);
        DPConfig dp = cfg.dp;
        dp.layer_id = static_cast<std::int64_t>(li);
        dp.step = 0;

        try {
          const CellResult baseline = run_cell(WorkflowKind::non_dp, x, dy, dp, cfg.mem, cfg.micro_batch);
          const double base_traffic =
              static_cast<double>(baseline.report.bytes_loaded + baseline.report.bytes_stored);
          std::optional<double> dp_checksum;
          for (auto kind : cfg.workflows) {
            const CellResult r = kind == WorkflowKind::non_dp
                                     ? baseline
                                     : run_cell(kind, x, dy, dp, cfg.mem, cfg.micro_batch);
            ComparisonRow row;
            row.workflow = to_string(kind);
            row.layer = layer.label;
            row.B = B;
            row.bytes_loaded = r.report.bytes_loaded;
            row.bytes_stored = r.report.bytes_stored;
            row.per_sample_grad_bytes_stored = r.report.per_sample_grad_bytes_stored;
            row.flops = r.report.flops;
            row.redundant_flops = r.report.redundant_flops;
            row.kernel_launches = r.report.kernel_launches;
            row.barriers = r.report.barriers;
            row.peak_scratch_bytes = r.report.peak_scratch_bytes;
            row.relative_traffic =
                kind == WorkflowKind::non_dp
                    ? 1.0
                    : static_cast<double>(r.report.bytes_loaded + r.report.bytes_stored) / base_traffic;
            row.grad_checksum = checksum(r.grad_w);
            row.input_bytes_loaded = r.input_bytes_loaded;
            if (is_private(kind)) {
              if (dp_checksum && std::abs(*dp_checksum - row.grad_checksum) > 1e-9) {
                throw RunError("grad_checksum mismatch between DP workflows");
              }
              dp_checksum = row.grad_checksum;
            }
            rows.push_back(std::move(row));
          }
        } catch (const CapacityError& e) {
          throw RunError("layer " + layer.label + ", B=" + std::to_string(B) + ": " + e.what());
        } catch (const RunError& e) {
          throw RunError("layer " + layer.label + ", B=" + std::to_string(B) + ": " + e.what());
        }
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

enum class ReportFormat { csv, json };

/// Shortest decimal form that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return ec == std::errc{} ? std::string(buf, end) : std::string("nan");
}

inline nlohmann::ordered_json row_to_json(const ComparisonRow& r) {
  nlohmann::ordered_json j;
  j["workflow"] = r.workflow;
  j["layer"] = r.layer;
  j["B"] = r.B;
  j["bytes_loaded"] = r.bytes_loaded;
  j["bytes_stored"] = r.bytes_stored;
  j["per_sample_grad_bytes_stored"] = r.per_sample_grad_bytes_stored;
  j["flops"] = r.flops;
  j["redundant_flops"] = r.redundant_flops;
  j["kernel_launches"] = r.kernel_launches;
  j["barriers"] = r.barriers;
  j["peak_scratch_bytes"] = r.peak_scratch_bytes;
  j["relative_traffic"] = r.relative_traffic;
  j["grad_checksum"] = r.grad_checksum;
  j["input_bytes_loaded"] = r.input_bytes_loaded;
  return j;
}

inline ComparisonRow row_from_json(const nlohmann::json& j) {
  ComparisonRow r;
  r.workflow = j.at("workflow").get<std::string>();
  r.layer = j.at("layer").get<std::string>();
  r.B = j.at("B").get<std::size_t>();
  r.bytes_loaded = j.at("bytes_loaded").get<std::uint64_t>();
  r.bytes_stored = j.at("bytes_stored").get<std::uint64_t>();
  r.per_sample_grad_bytes_stored = j.at("per_sample_grad_bytes_stored").get<std::uint64_t>();
  r.flops = j.at("flops").get<std::uint64_t>();
  r.redundant_flops = j.at("redundant_flops").get<std::uint64_t>();
  r.kernel_launches = j.at("kernel_launches").get<std::uint64_t>();
  r.barriers = j.at("barriers").get<std::uint64_t>();
  r.peak_scratch_bytes = j.at("peak_scratch_bytes").get<std::uint64_t>();
  r.relative_traffic = j.at("relative_traffic").get<double>();
  r.grad_checksum = j.at("grad_checksum").get<double>();
  r.input_bytes_loaded = j.at("input_bytes_loaded").get<std::uint64_t>();
  return r;
}

inline std::vector<ComparisonRow> rows_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  std::vector<ComparisonRow> rows;
  for (const auto& item : j) rows.push_back(row_from_json(item));
  return rows;
}

inline std::string render_report(const std::vector<ComparisonRow>& rows, ReportFormat format) {
  if (rows.empty()) throw UsageError("emit_report: no rows");
  if (format == ReportFormat::json) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : rows) arr.push_back(row_to_json(r));
    return arr.dump(2) + "\n";
  }
  std::ostringstream os;
  for (std::size_t i = 0; i < std::size(kRowFields); ++i) os << (i ? "," : "") << kRowFields[i];
  os << '\n';
  for (const auto& r : rows) {
    os << r.workflow << ',' << r.layer << ',' << r.B << ',' << r.bytes_loaded << ','
       << r.bytes_stored << ',' << r.per_sample_grad_bytes_stored << ',' << r.flops << ','
       << r.redundant_flops << ',' << r.kernel_launches << ',' << r.barriers << ','
       << r.peak_scratch_bytes << ',' << format_double(r.relative_traffic) << ','
       << format_double(r.grad_checksum) << ',' << r.input_bytes_loaded << '\n';
  }
  return os.str();
}

inline void write_text(const std::string& text, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline void emit_report(const std::vector<ComparisonRow>& rows, ReportFormat format,
                        const std::string& path) {
  write_text(render_report(rows, format), path);
}

// ---------------------------------------------------------------------------
// Training parity demo
// ---------------------------------------------------------------------------

struct Trajectory {
  WorkflowKind workflow;
  std::vector<double> losses;
};

/// Trains one linear layer Y = X W^T towards a fixed random teacher with a
/// squared-error loss, once per configured workflow. Every workflow sees the
/// same batches and the same noise keys; losses are recorded before each
/// update.
inline std::vector<Trajectory> train_demo(const ScenarioConfig& cfg) {
  if (!cfg.train) throw ConfigError("train: missing (train-demo needs a train section)");
  std::size_t private_count = 0;
  for (auto k : cfg.workflows) private_count += is_private(k) ? 1 : 0;
  if (private_count < 2) throw ConfigError("workflows: train-demo needs at least two DP workflows");

  const TrainConfig& tc = *cfg.train;
  const LayerDims& dims = tc.dims;
  std::mt19937_64 teacher_rng(cell_seed(cfg.dp.seed, 0x7ea, 0));
  const Tensor teacher = random_tensor({dims.D, dims.P}, teacher_rng);
  const Tensor teacher_t = transpose(teacher);
  const BlockPlan plan = plan_blocks(dims, cfg.mem);

  std::vector<Trajectory> out;
  for (auto kind : cfg.workflows) {
    OptimizerState state = OptimizerState::zeros_like(Tensor({dims.D, dims.P}), tc.eta, tc.beta1,
                                                      tc.beta2, tc.eps_adam);
    Trajectory traj{kind, {}};
    for (std::size_t step = 0; step < tc.steps; ++step) {
      std::mt19937_64 rng(cell_seed(cfg.dp.seed, 0xda7a, step));
      const Tensor x = random_tensor({dims.B, dims.T, dims.P}, rng);

      const Tensor w_t = transpose(state.theta);
      Tensor dy({dims.B, dims.T, dims.D});
      double loss = 0.0;
      const double count = static_cast<double>(dims.B * dims.T * dims.D);
      for (std::size_t b = 0; b < dims.B; ++b) {
        const Tensor xb = sample_slice(x, b);
        const Tensor y = matmul(xb, w_t);
        const Tensor target = matmul(xb, teacher_t);
        for (std::size_t t = 0; t < dims.T; ++t) {
          for (std::size_t d = 0; d < dims.D; ++d) {
            const double r = y.at(t, d) - target.at(t, d);
            loss += r * r;
            dy.at(b, t, d) = 2.0 * r / count;
          }
        }
      }
      loss /= count;
      if (!std::isfinite(loss)) {
        throw RunError(std::string(to_string(kind)) + ": non-finite loss at step " +
                       std::to_string(step));
      }
      traj.losses.push_back(loss);

      DPConfig dp = cfg.dp;
      dp.layer_id = 0;
      dp.step = static_cast<std::int64_t>(step);
      const auto result = run_backward(kind, x, dy, dp, cfg.mem, plan);
      if (tc.optimizer == Optimizer::sgd) {
        state.theta = dp_sgd_step(state.theta, result.grad_w, tc.eta);
        ++state.step;
      } else {
        state = dp_adam_step(std::move(state), result.grad_w);
      }
    }
    out.push_back(std::move(traj));
  }
  return out;
}

inline std::string render_trajectories(const std::vector<Trajectory>& trajs, ReportFormat format) {
  if (format == ReportFormat::json) {
    nlohmann::ordered_json j;
    for (const auto& t : trajs) j[to_string(t.workflow)] = t.losses;
    return j.dump(2) + "\n";
  }
  std::ostringstream os;
  os << "workflow,step,loss\n";
  for (const auto& t : trajs)
    for (std::size_t s = 0; s < t.losses.size(); ++s)
      os << to_string(t.workflow) << ',' << s << ',' << format_double(t.losses[s]) << '\n';
  return os.str();
}

}  // namespace flashdp::bench
