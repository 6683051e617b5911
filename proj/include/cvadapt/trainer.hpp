#pragma once

// Self-supervised adapter training. Each iteration samples a query batch,
// adapts queries and all references with the current adapter, assigns
// pseudo-labels (E-step), and takes one Adam step on
//   L = w_em [L_EM(Zq, Zr, s) + L_EM(Zr, Zq, s^T)]
//   C = w_re [L_re(Xq, V Zq) + L_re(Xr, V Zr)]
// updating the reverter by dC/dV and the adapter by d(L + C)/dW.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cvadapt/adam.hpp"
#include "cvadapt/adapter.hpp"
#include "cvadapt/aic.hpp"
#include "cvadapt/detail/binary_io.hpp"
#include "cvadapt/detail/text.hpp"
#include "cvadapt/empl.hpp"
#include "cvadapt/error.hpp"
#include "cvadapt/featstore.hpp"

namespace cvadapt {

struct TrainConfig {
  std::uint64_t iterations = 60;     // T
  std::uint64_t sample_size = 700;   // M
  double temperature = kDefaultTemperature;
  double threshold = kDefaultThreshold;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  double w_em = 1.0;
  double w_re = 1.0;
  std::uint64_t seed = 0;
  Arch arch = Arch::Plain;
  std::optional<std::size_t> d;  // output dim; defaults to d0
  double init_noise = 0.0;  // identity start: L_re = 0 and frozen-model labels at step 0
  std::uint64_t collapse_patience = 5;

  void validate() const {
    if (sample_size < 1) throw Error("M must be >= 1");
    if (!(temperature > 0.0)) throw Error("tau must be positive");
    if (!(lr > 0.0)) throw Error("lr must be positive");
    if (!(w_em >= 0.0) || !(w_re >= 0.0)) throw Error("loss weights must be nonnegative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw Error("Adam betas must be in [0, 1)");
    if (!(eps_adam > 0.0)) throw Error("eps_adam must be positive");
    if (d && *d == 0) throw Error("d must be positive");
    if (collapse_patience < 1) throw Error("collapse_patience must be >= 1");
  }

  AdamOptions adam() const { return {lr, beta1, beta2, eps_adam}; }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["T"] = c.iterations;
  j["M"] = c.sample_size;
  j["tau"] = c.temperature;
  j["threshold"] = c.threshold;
  j["lr"] = c.lr;
  j["betas"] = {c.beta1, c.beta2};
  j["eps_adam"] = c.eps_adam;
  j["w_em"] = c.w_em;
  j["w_re"] = c.w_re;
  j["seed"] = c.seed;
  j["arch"] = to_string(c.arch);
  j["d"] = c.d ? nlohmann::json(*c.d) : nlohmann::json(nullptr);
  j["init_noise"] = c.init_noise;
  j["collapse_patience"] = c.collapse_patience;
  return j;
}

/// Reads a config document; keys are optional (defaults apply) but unknown
/// keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "T") c.iterations = value.get<std::uint64_t>();
      else if (key == "M") c.sample_size = value.get<std::uint64_t>();
      else if (key == "tau") c.temperature = value.get<double>();
      else if (key == "threshold") c.threshold = value.get<double>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "betas") {
        auto b = value.get<std::vector<double>>();
        if (b.size() != 2) throw Error("betas must have two entries");
        c.beta1 = b[0];
        c.beta2 = b[1];
      } else if (key == "eps_adam") c.eps_adam = value.get<double>();
      else if (key == "w_em") c.w_em = value.get<double>();
      else if (key == "w_re") c.w_re = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "arch") c.arch = parse_arch(value.get<std::string>());
      else if (key == "d") c.d = value.is_null() ? std::nullopt : std::optional<std::size_t>(value.get<std::size_t>());
      else if (key == "init_noise") c.init_noise = value.get<double>();
      else if (key == "collapse_patience") c.collapse_patience = value.get<std::uint64_t>();
      else throw Error("unknown train config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid train config: ") + e.what());
  }
  c.validate();
  return c;
}

struct TrainLogEntry {
  std::uint64_t iter = 0;
  double l_em_qr = 0.0;
  double l_em_rq = 0.0;
  double l_re_q = 0.0;
  double l_re_r = 0.0;
  std::uint64_t valid_rows = 0;
  double ms = 0.0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  std::vector<std::string> warnings;
};

/// CSV `iter,l_em_qr,l_em_rq,l_re_q,l_re_r,valid_rows,ms`. Loss columns are
/// unweighted.
inline void save_train_log(const TrainLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "iter,l_em_qr,l_em_rq,l_re_q,l_re_r,valid_rows,ms\n";
  for (const auto& e : log.entries) {
    out << e.iter << ',' << detail::format_double(e.l_em_qr) << ',' << detail::format_double(e.l_em_rq) << ','
        << detail::format_double(e.l_re_q) << ',' << detail::format_double(e.l_re_r) << ',' << e.valid_rows << ','
        << detail::format_double(e.ms) << '\n';
  }
  if (!out) throw Error("write failed for '" + path + "'");
}

/// Uniform sample of `m` distinct indices out of `n` (partial Fisher-Yates).
/// `m > n` clamps to a full permutation; `clamped` reports that.
struct QuerySample {
  std::vector<std::size_t> indices;
  bool clamped = false;
};

inline QuerySample sample_queries(std::size_t n, std::size_t m, std::mt19937_64& rng) {
  if (n == 0) throw Error("cannot sample from an empty query set");
  if (m == 0) throw Error("M must be >= 1");
  QuerySample s;
  s.clamped = m > n;
  m = std::min(m, n);
  s.indices.resize(n);
  for (std::size_t i = 0; i < n; ++i) s.indices[i] = i;
  for (std::size_t k = 0; k < m; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, n - 1);
    std::swap(s.indices[k], s.indices[pick(rng)]);
  }
  s.indices.resize(m);
  return s;
}

inline FeatureSet sample_queries(const FeatureSet& queries, std::size_t m, std::mt19937_64& rng) {
  return queries.subset(sample_queries(queries.count(), m, rng).indices);
}

/// Per-iteration sampling stream; depends only on (seed, iteration) so a
/// resumed run draws the same batches as an uninterrupted one.
inline std::mt19937_64 iteration_rng(std::uint64_t seed, std::uint64_t iteration) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iteration), static_cast<std::uint32_t>(iteration >> 32), 0x5eedu};
  return std::mt19937_64(seq);
}

/// Everything needed to continue training bit-identically.
struct TrainState {
  AdapterParams adapter;
  ReverterParams reverter;
  AdamState adam_adapter;
  AdamState adam_reverter;
  std::uint64_t iteration = 0;
  std::uint64_t masked_streak = 0;
  TrainLog log;
};

inline TrainState init_train_state(const TrainConfig& config, std::size_t d0) {
  config.validate();
  std::size_t d = config.d.value_or(d0);
  auto [adapter, reverter] = init_params(d0, d, config.arch, config.seed, config.init_noise);
  TrainState s;
  s.adam_adapter = AdamState(adapter.weight.rows(), adapter.weight.cols());
  s.adam_reverter = AdamState(reverter.weight.rows(), reverter.weight.cols());
  s.adapter = std::move(adapter);
  s.reverter = std::move(reverter);
  return s;
}

namespace detail {

inline void check_training_inputs(const FeatureSet& queries, const FeatureSet& refs) {
  if (queries.count() == 0) throw Error("no training queries");
  if (refs.count() == 0) throw Error("no references");
  if (!queries.normalized || !refs.normalized) throw Error("training inputs must be normalized");
  if (queries.dim() != refs.dim()) throw Error("query/reference dim mismatch");
}

}  // namespace detail

/// Gradients of the full objective at the current parameters for one batch.
struct StepGrads {
  Eigen::MatrixXd adapter;
  Eigen::MatrixXd reverter;
  TrainLogEntry losses;
};

/// Evaluates both losses and their gradients for the query rows `xq` against
/// all references `xr`. Exposed separately from the update so it can be
/// checked against finite differences.
inline StepGrads objective_grads(const AdapterParams& adapter, const ReverterParams& reverter,
                                 const Eigen::MatrixXd& xq, const Eigen::MatrixXd& xr, const TrainConfig& config) {
  auto fq = adapt_rows(adapter, xq);
  auto fr = adapt_rows(adapter, xr);
  auto labels = pseudo_label(fq.z, fr.z, config.threshold);

  auto qr = info_nce_loss(fq.z, fr.z, PositiveSets::from_labels(labels), config.temperature);
  auto rq = info_nce_loss(fr.z, fq.z, PositiveSets::transposed(labels), config.temperature);
  Eigen::MatrixXd gzq = config.w_em * (qr.grad_anchor + rq.grad_candidate);
  Eigen::MatrixXd gzr = config.w_em * (qr.grad_candidate + rq.grad_anchor);

  auto aq = aic_grads(xq, fq.z, reverter);
  auto ar = aic_grads(xr, fr.z, reverter);
  gzq += config.w_re * aq.grad_z;
  gzr += config.w_re * ar.grad_z;

  StepGrads g;
  g.reverter = config.w_re * (aq.grad_reverter + ar.grad_reverter);
  g.adapter = adapt_backward(xq, fq, gzq) + adapt_backward(xr, fr, gzr);
  g.losses.l_em_qr = qr.value;
  g.losses.l_em_rq = rq.value;
  g.losses.l_re_q = aq.value;
  g.losses.l_re_r = ar.value;
  g.losses.valid_rows = labels.valid_count();
  return g;
}

/// Weighted scalar objective w_em L + w_re C at fixed labels computed from
/// the given parameters. Test helper for gradient checks.
inline double objective_value(const AdapterParams& adapter, const ReverterParams& reverter, const Eigen::MatrixXd& xq,
                              const Eigen::MatrixXd& xr, const PseudoLabels& labels, const TrainConfig& config) {
  auto fq = adapt_rows(adapter, xq);
  auto fr = adapt_rows(adapter, xr);
  double l = info_nce_loss(fq.z, fr.z, PositiveSets::from_labels(labels), config.temperature).value +
             info_nce_loss(fr.z, fq.z, PositiveSets::transposed(labels), config.temperature).value;
  double c = aic_grads(xq, fq.z, reverter).value + aic_grads(xr, fr.z, reverter).value;
  return config.w_em * l + config.w_re * c;
}

/// Runs iterations until `state.iteration == until` (capped at config T).
/// Throws `CollapseError` when `collapse_patience` consecutive E-steps leave
/// every query unlabeled.
inline void train_until(TrainState& state, const TrainConfig& config, const FeatureSet& queries,
                        const FeatureSet& refs, std::uint64_t until) {
  config.validate();
  detail::check_training_inputs(queries, refs);
  if (queries.dim() != state.adapter.d0()) throw Error("adapter/input dim mismatch");
  until = std::min(until, config.iterations);
  if (config.sample_size > queries.count() && state.iteration < until) {
    state.log.warnings.push_back("M=" + std::to_string(config.sample_size) + " exceeds the " +
                                 std::to_string(queries.count()) + " available queries; using all of them");
  }
  const auto adam = config.adam();

  while (state.iteration < until) {
    auto start = std::chrono::steady_clock::now();
    auto rng = iteration_rng(config.seed, state.iteration);
    auto sample = sample_queries(queries.count(), config.sample_size, rng);
    Eigen::MatrixXd xq(static_cast<Eigen::Index>(sample.indices.size()), queries.data.cols());
    for (std::size_t k = 0; k < sample.indices.size(); ++k) {
      xq.row(static_cast<Eigen::Index>(k)) = queries.data.row(static_cast<Eigen::Index>(sample.indices[k]));
    }

    auto grads = objective_grads(state.adapter, state.reverter, xq, refs.data, config);
    adam_step(state.reverter.weight, grads.reverter, state.adam_reverter, adam, "reverter");
    adam_step(state.adapter.weight, grads.adapter, state.adam_adapter, adam, "adapter");

    auto entry = grads.losses;
    entry.iter = state.iteration;
    entry.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    state.log.entries.push_back(entry);
    ++state.iteration;

    state.masked_streak = entry.valid_rows == 0 ? state.masked_streak + 1 : 0;
    if (state.masked_streak >= config.collapse_patience) {
      throw CollapseError("pseudo-labeling collapsed: no valid pseudo-labels for " +
                          std::to_string(state.masked_streak) + " consecutive iterations");
    }
  }
}

struct TrainResult {
  AdapterParams adapter;
  ReverterParams reverter;
  TrainLog log;
};

inline TrainResult train_adapter(const TrainConfig& config, const FeatureSet& queries, const FeatureSet& refs) {
  detail::check_training_inputs(queries, refs);
  auto state = init_train_state(config, queries.dim());
  train_until(state, config, queries, refs, config.iterations);
  return {std::move(state.adapter), std::move(state.reverter), std::move(state.log)};
}

// ---------------------------------------------------------------------------
// Training-state file "CVTS v1" (full precision, for resume): magic, u32
// version, u32 arch, u32 d0, u32 d, u64 iteration, u64 masked streak, W and V
// as f64, then per Adam block (adapter, reverter) u64 step + m + v as f64,
// then u64 log length and per entry u64 iter, 4 x f64 losses, u64 valid rows,
// f64 ms.

inline constexpr std::string_view kTrainStateMagic = "CVTS";

namespace detail {

inline void put_matrix(ByteWriter& w, const Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
}

inline Eigen::MatrixXd get_matrix(ByteReader& r, Eigen::Index rows, Eigen::Index cols) {
  r.require_elements(static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols), 8);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = r.f64();
  return m;
}

}  // namespace detail

inline std::vector<char> encode_train_state(const TrainState& s) {
  detail::ByteWriter w;
  w.bytes(kTrainStateMagic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(s.adapter.arch));
  w.u32(static_cast<std::uint32_t>(s.adapter.d0()));
  w.u32(static_cast<std::uint32_t>(s.adapter.d()));
  w.u64(s.iteration);
  w.u64(s.masked_streak);
  detail::put_matrix(w, s.adapter.weight);
  detail::put_matrix(w, s.reverter.weight);
  for (const AdamState* a : {&s.adam_adapter, &s.adam_reverter}) {
    w.u64(a->step);
    detail::put_matrix(w, a->m);
    detail::put_matrix(w, a->v);
  }
  w.u64(s.log.entries.size());
  for (const auto& e : s.log.entries) {
    w.u64(e.iter);
    w.f64(e.l_em_qr);
    w.f64(e.l_em_rq);
    w.f64(e.l_re_q);
    w.f64(e.l_re_r);
    w.u64(e.valid_rows);
    w.f64(e.ms);
  }
  return w.buffer();
}

inline TrainState decode_train_state(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes), "corrupt checkpoint");
  if (r.remaining() < 8) throw Error("unrecognized format");
  if (r.bytes(4) != kTrainStateMagic) throw Error("unrecognized format");
  if (r.u32() != kFormatVersion) throw Error("unsupported checkpoint version");
  TrainState s;
  std::uint32_t arch = r.u32();
  if (arch > 1) throw Error("corrupt checkpoint");
  s.adapter.arch = static_cast<Arch>(arch);
  auto d0 = static_cast<Eigen::Index>(r.u32());
  auto d = static_cast<Eigen::Index>(r.u32());
  if (d0 == 0 || d == 0) throw Error("corrupt checkpoint");
  s.iteration = r.u64();
  s.masked_streak = r.u64();
  s.adapter.weight = detail::get_matrix(r, d, d0);
  s.reverter.weight = detail::get_matrix(r, d0, d);
  for (auto [a, rows, cols] : {std::tuple{&s.adam_adapter, d, d0}, std::tuple{&s.adam_reverter, d0, d}}) {
    a->step = r.u64();
    a->m = detail::get_matrix(r, rows, cols);
    a->v = detail::get_matrix(r, rows, cols);
  }
  std::uint64_t n = r.u64();
  r.require_elements(n, 56);
  s.log.entries.resize(n);
  for (auto& e : s.log.entries) {
    e.iter = r.u64();
    e.l_em_qr = r.f64();
    e.l_em_rq = r.f64();
    e.l_re_q = r.f64();
    e.l_re_r = r.f64();
    e.valid_rows = r.u64();
    e.ms = r.f64();
  }
  if (!r.at_end()) throw Error("corrupt checkpoint");
  s.adapter.validate();
  return s;
}

inline constexpr const char* kAdapterFile = "adapter.cvad";
inline constexpr const char* kTrainStateFile = "trainer.cvts";
inline constexpr const char* kTrainLogFile = "train_log.csv";

/// Writes `adapter.cvad` (float32 inference weights), `trainer.cvts`
/// (full-precision resume state) and `train_log.csv` into `dir`.
inline void save_checkpoint(const TrainState& s, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto base = std::filesystem::path(dir);
  save_adapter({s.adapter, s.reverter, s.iteration}, (base / kAdapterFile).string());
  detail::write_file((base / kTrainStateFile).string(), encode_train_state(s));
  save_train_log(s.log, (base / kTrainLogFile).string());
}

/// Loads the resume state from `dir` and checks it against `config` and the
/// input dimension; a shape disagreement is refused.
inline TrainState load_checkpoint(const std::string& dir, const TrainConfig& config, std::size_t d0) {
  auto s = decode_train_state(detail::ByteReader::slurp((std::filesystem::path(dir) / kTrainStateFile).string()));
  if (s.adapter.d0() != d0 || s.adapter.d() != config.d.value_or(d0) || s.adapter.arch != config.arch) {
    throw Error("checkpoint shape mismatch: checkpoint has d0=" + std::to_string(s.adapter.d0()) +
                " d=" + std::to_string(s.adapter.d()) + " arch=" + to_string(s.adapter.arch));
  }
  if (s.iteration > config.iterations) throw Error("checkpoint is past the configured iteration count");
  return s;
}

/// Resumes training from a checkpoint directory through config T.
inline TrainResult resume_adapter(const std::string& dir, const TrainConfig& config, const FeatureSet& queries,
                                  const FeatureSet& refs) {
  detail::check_training_inputs(queries, refs);
  auto state = load_checkpoint(dir, config, queries.dim());
  train_until(state, config, queries, refs, config.iterations);
  return {std::move(state.adapter), std::move(state.reverter), std::move(state.log)};
}

}  // namespace cvadapt
