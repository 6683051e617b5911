// cvadapt: command-line front end for feature pooling, adapter training,
// retrieval evaluation, localization and similarity diagnostics.
//
// Exit codes: 0 success, 2 usage or input error, 3 training collapse.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cvadapt/cvadapt.hpp"

namespace fs = std::filesystem;
using namespace cvadapt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitCollapse = 3;

bool g_quiet = false;

void info(const std::string& msg) {
  if (!g_quiet) std::cout << msg << '\n';
}

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("cannot parse '" + path + "': " + e.what());
  }
}

void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw Error("write failed for '" + path + "'");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory '" + dir + "'");
}

// --ckpt may name a checkpoint directory or an adapter file directly.
AdapterCheckpoint load_adapter_arg(const std::string& path) {
  fs::path p(path);
  if (fs::is_directory(p)) p /= kAdapterFile;
  return load_adapter(p.string());
}

FeatureSet maybe_adapt(const FeatureSet& set, const std::optional<AdapterCheckpoint>& ckpt) {
  return ckpt ? adapt(ckpt->adapter, set) : set;
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  for (auto part : detail::split(s, ',')) {
    auto k = detail::parse_uint(part, "--k");
    if (k == 0) throw Error("--k values must be >= 1");
    ks.push_back(k);
  }
  return ks;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  auto config = synth_config_from_json(read_json_file(a.config));
  ensure_dir(a.out);
  auto data = generate(config);
  fs::path dir(a.out);

  nlohmann::json files = nlohmann::json::object();
  save_feature_set(data.queries, (dir / "queries.cvft").string());
  save_feature_set(data.references, (dir / "refs.cvft").string());
  save_ground_truth(ground_truth_pairs(data.queries, data.references, data.gt), (dir / "gt.csv").string());
  files["queries"] = "queries.cvft";
  files["references"] = "refs.cvft";
  files["ground_truth"] = "gt.csv";
  if (data.eval_queries.count() > 0) {
    save_feature_set(data.eval_queries, (dir / "queries_eval.cvft").string());
    save_ground_truth(ground_truth_pairs(data.eval_queries, data.references, data.eval_gt),
                      (dir / "gt_eval.csv").string());
    files["eval_queries"] = "queries_eval.cvft";
    files["eval_ground_truth"] = "gt_eval.csv";
  }
  save_geo_tags(synthetic_geo_tags(data.references), (dir / "geo.csv").string());
  files["geo"] = "geo.csv";

  nlohmann::json manifest;
  manifest["config"] = to_json(config);
  manifest["files"] = files;
  manifest["counts"] = {{"queries", data.queries.count()},
                        {"eval_queries", data.eval_queries.count()},
                        {"references", data.references.count()}};
  write_json_file(manifest, (dir / "manifest.json").string());
  info("wrote " + std::to_string(data.queries.count()) + " queries, " + std::to_string(data.eval_queries.count()) +
       " held-out queries, " + std::to_string(data.references.count()) + " references to " + a.out);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct PoolArgs {
  std::string maps;
  double p = 3.0;
  std::string out;
  std::string view = "query";
};

int run_pool(const PoolArgs& a) {
  if (!fs::is_directory(a.maps)) throw Error("'" + a.maps + "' is not a directory");
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(a.maps)) {
    if (entry.is_regular_file() && entry.path().extension() == ".cvfm") paths.push_back(entry.path());
  }
  if (paths.empty()) throw Error("no input maps");
  std::sort(paths.begin(), paths.end());

  FeatureSet set;
  if (a.view == "query") set.view = View::Query;
  else if (a.view == "reference") set.view = View::Reference;
  else throw Error("--view must be query or reference");
  set.normalized = true;

  std::vector<std::vector<double>> rows;
  for (const auto& p : paths) {
    auto map = load_feature_map(p.string());
    if (!rows.empty() && map.dim != rows.front().size()) {
      throw Error("mixed feature dims: '" + p.filename().string() + "' has dim " + std::to_string(map.dim) +
                  ", expected " + std::to_string(rows.front().size()));
    }
    rows.push_back(l2_normalize(gem_pool(map, a.p)));
    set.ids.push_back(p.stem().string());
  }
  set.data.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < rows[i].size(); ++c) set.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
  save_feature_set(set, a.out);
  info("pooled " + std::to_string(rows.size()) + " maps into " + a.out);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string queries;
  std::string refs;
  std::string config;
  std::string out;
  bool resume = false;
};

int run_train(const TrainArgs& a) {
  auto config = train_config_from_json(read_json_file(a.config));
  auto queries = load_feature_set(a.queries);
  auto refs = load_feature_set(a.refs);
  if (queries.dim() != refs.dim()) {
    throw Error("query/reference dim mismatch: " + std::to_string(queries.dim()) + " vs " +
                std::to_string(refs.dim()));
  }
  ensure_dir(a.out);

  auto state = a.resume && fs::exists(fs::path(a.out) / kTrainStateFile)
                   ? load_checkpoint(a.out, config, queries.dim())
                   : init_train_state(config, queries.dim());
  try {
    train_until(state, config, queries, refs, config.iterations);
  } catch (const CollapseError& e) {
    save_checkpoint(state, a.out);
    std::cerr << "error: " << e.what() << '\n';
    return kExitCollapse;
  }
  for (const auto& w : state.log.warnings) warn(w);
  save_checkpoint(state, a.out);

  if (!state.log.entries.empty()) {
    const auto& e = state.log.entries.back();
    info("iter " + std::to_string(e.iter) + ": l_em_qr=" + detail::format_double(e.l_em_qr) +
         " l_em_rq=" + detail::format_double(e.l_em_rq) + " l_re_q=" + detail::format_double(e.l_re_q) +
         " l_re_r=" + detail::format_double(e.l_re_r) + " valid_rows=" + std::to_string(e.valid_rows));
  }
  info("checkpoint written to " + a.out);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string queries;
  std::string refs;
  std::string ckpt;
  std::string gt;
  std::string k = "1,5,10";
  std::string out;
};

int run_eval(const EvalArgs& a) {
  auto ks = parse_ks(a.k);
  auto queries = load_feature_set(a.queries);
  auto refs = load_feature_set(a.refs);
  std::vector<std::string> missing;
  auto gt = resolve_ground_truth(load_ground_truth_rows(a.gt), queries, refs, missing);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw Error("ground-truth ids not found: " + list);
  }
  std::optional<AdapterCheckpoint> ckpt;
  if (!a.ckpt.empty()) ckpt = load_adapter_arg(a.ckpt);

  auto report = evaluate(maybe_adapt(queries, ckpt), maybe_adapt(refs, ckpt), gt, ks);
  for (const auto& w : report.warnings) warn(w);
  save_report_json(report, a.out);
  save_report_csv(report, fs::path(a.out).replace_extension(".csv").string());

  std::string line;
  for (const auto& [k, v] : report.recall_at) line += "R@" + std::to_string(k) + "=" + detail::format_double(v) + " ";
  info(line + "mAP=" + detail::format_double(report.mean_ap));
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct InspectArgs {
  std::string report;
  std::string mode = "histogram";
  std::string out;
};

void write_delta_csv(const std::vector<DeltaRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "query_id,delta_sim\n";
  for (const auto& r : rows) out << r.query_id << ',' << detail::format_double(r.delta) << '\n';
}

int run_inspect(const InspectArgs& a) {
  auto report = read_json_file(a.report);
  if (a.mode == "histogram") {
    auto bins = similarity_histogram(report);
    std::ofstream out(a.out, std::ios::trunc);
    if (!out) throw Error("cannot open '" + a.out + "' for writing");
    out << "bin_lo,bin_hi,matched_count,unmatched_count\n";
    for (const auto& b : bins) {
      out << detail::format_double(b.lo) << ',' << detail::format_double(b.hi) << ',' << b.matched << ','
          << b.unmatched << '\n';
    }
    // The per-query margins accompany the histogram.
    auto delta_path = fs::path(a.out);
    delta_path.replace_filename(delta_path.stem().string() + "_delta.csv");
    write_delta_csv(delta_similarities(report), delta_path.string());
  } else if (a.mode == "delta") {
    write_delta_csv(delta_similarities(report), a.out);
  } else {
    throw Error("--mode must be histogram or delta");
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct LocalizeArgs {
  std::string queries;
  std::string refs;
  std::string geo;
  std::string ckpt;
  std::string out;
};

int run_localize(const LocalizeArgs& a) {
  auto queries = load_feature_set(a.queries);
  auto refs = load_feature_set(a.refs);
  auto geo = index_geo_tags(load_geo_tags(a.geo));
  std::optional<AdapterCheckpoint> ckpt;
  if (!a.ckpt.empty()) ckpt = load_adapter_arg(a.ckpt);
  auto zq = maybe_adapt(queries, ckpt);
  auto zr = maybe_adapt(refs, ckpt);
  if (zq.dim() != zr.dim()) throw Error("query/reference dim mismatch");

  std::ofstream out(a.out, std::ios::trunc);
  if (!out) throw Error("cannot open '" + a.out + "' for writing");
  out << "query_id,ref_id,lat,lon,similarity\n";
  for (std::size_t i = 0; i < zq.count(); ++i) {
    auto loc = localize(zq.data.row(static_cast<Eigen::Index>(i)), zr.data, zr.ids, geo);
    out << zq.ids[i] << ',' << zr.ids[loc.ref_index] << ',' << detail::format_double(loc.tag.lat) << ','
        << detail::format_double(loc.tag.lon) << ',' << detail::format_double(loc.similarity) << '\n';
  }
  if (!out) throw Error("write failed for '" + a.out + "'");
  info("localized " + std::to_string(zq.count()) + " queries");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised cross-view feature adaptation"};
  app.require_subcommand(1, 1);
  app.add_flag("-q,--quiet", g_quiet, "Suppress progress output");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic cross-view benchmark");
  synth_cmd->add_option("--config", synth.config, "Synth config JSON")->required();
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  PoolArgs pool;
  auto* pool_cmd = app.add_subcommand("pool", "GeM-pool a directory of CVFM maps into a CVFT file");
  pool_cmd->add_option("--maps", pool.maps, "Directory of .cvfm files")->required();
  pool_cmd->add_option("--p", pool.p, "GeM exponent")->capture_default_str();
  pool_cmd->add_option("--out", pool.out, "Output CVFT file")->required();
  pool_cmd->add_option("--view", pool.view, "View tag: query or reference")->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train the adapter without pair labels");
  train_cmd->add_option("--queries", train.queries, "Query CVFT")->required();
  train_cmd->add_option("--refs", train.refs, "Reference CVFT")->required();
  train_cmd->add_option("--config", train.config, "Train config JSON")->required();
  train_cmd->add_option("--out", train.out, "Checkpoint directory")->required();
  train_cmd->add_flag("--resume", train.resume, "Continue from the checkpoint in --out if present");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate retrieval (optionally through a trained adapter)");
  eval_cmd->add_option("--queries", eval.queries, "Query CVFT")->required();
  eval_cmd->add_option("--refs", eval.refs, "Reference CVFT")->required();
  eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint directory or .cvad file");
  eval_cmd->add_option("--gt", eval.gt, "Ground truth CSV query_id,ref_id")->required();
  eval_cmd->add_option("--k", eval.k, "Comma-separated recall cutoffs")->capture_default_str();
  eval_cmd->add_option("--out", eval.out, "Report JSON (a .csv is written alongside)")->required();

  InspectArgs inspect;
  auto* inspect_cmd = app.add_subcommand("inspect", "Export similarity diagnostics from a report");
  inspect_cmd->add_option("--report", inspect.report, "Report JSON from eval")->required();
  inspect_cmd->add_option("--mode", inspect.mode, "histogram or delta")->capture_default_str();
  inspect_cmd->add_option("--out", inspect.out, "Output CSV")->required();

  LocalizeArgs loc;
  auto* loc_cmd = app.add_subcommand("localize", "Assign each query the geo-tag of its top reference");
  loc_cmd->add_option("--queries", loc.queries, "Query CVFT")->required();
  loc_cmd->add_option("--refs", loc.refs, "Reference CVFT")->required();
  loc_cmd->add_option("--geo", loc.geo, "Geo-tag CSV id,lat,lon")->required();
  loc_cmd->add_option("--ckpt", loc.ckpt, "Checkpoint directory or .cvad file");
  loc_cmd->add_option("--out", loc.out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*pool_cmd) return run_pool(pool);
    if (*train_cmd) return run_train(train);
    if (*eval_cmd) return run_eval(eval);
    if (*inspect_cmd) return run_inspect(inspect);
    if (*loc_cmd) return run_localize(loc);
  } catch (const CollapseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitCollapse;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitInput;
}
