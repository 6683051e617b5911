#pragma once

// Exact dense retrieval: rank references by inner product, score Recall@K and
// average precision against a (one-to-many) ground truth, and assign each
// query the geo-tag of its top reference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cvadapt/detail/text.hpp"
#include "cvadapt/error.hpp"
#include "cvadapt/featstore.hpp"

namespace cvadapt {

/// Relevant reference indices per query (possibly several).
struct GroundTruth {
  std::vector<std::vector<std::size_t>> relevant;
};

/// Strict order used everywhere: higher similarity first, ties to the lower
/// reference index.
inline bool ranks_before(double sim_a, std::size_t a, double sim_b, std::size_t b) {
  return sim_a > sim_b || (sim_a == sim_b && a < b);
}

inline std::vector<std::size_t> rank_row(const Eigen::Ref<const Eigen::RowVectorXd>& sims) {
  std::vector<std::size_t> order(static_cast<std::size_t>(sims.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ranks_before(sims(static_cast<Eigen::Index>(a)), a, sims(static_cast<Eigen::Index>(b)), b);
  });
  return order;
}

/// Full descending ranking of every reference for every query.
inline std::vector<std::vector<std::size_t>> rank(const Eigen::MatrixXd& zq, const Eigen::MatrixXd& zr) {
  if (zr.rows() == 0) throw Error("no references");
  if (zq.cols() != zr.cols()) throw Error("query/reference dim mismatch");
  Eigen::MatrixXd sim = zq * zr.transpose();
  std::vector<std::vector<std::size_t>> out;
  out.reserve(static_cast<std::size_t>(sim.rows()));
  for (Eigen::Index i = 0; i < sim.rows(); ++i) out.push_back(rank_row(sim.row(i)));
  return out;
}

/// Fraction of queries with a relevant reference among the first k ranks.
/// Queries without relevant references count as misses.
inline double recall_at_k(const std::vector<std::vector<std::size_t>>& ranks, const GroundTruth& gt, std::size_t k) {
  if (k == 0) throw Error("k must be >= 1");
  if (ranks.size() != gt.relevant.size()) throw Error("ranking/ground-truth size mismatch");
  if (ranks.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < ranks.size(); ++q) {
    const auto& rel = gt.relevant[q];
    std::size_t window = std::min(k, ranks[q].size());
    for (std::size_t r = 0; r < window; ++r) {
      if (std::find(rel.begin(), rel.end(), ranks[q][r]) != rel.end()) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

/// Mean of precision@rank over the (0-based) positions of the relevant items.
inline double average_precision_from_positions(std::vector<std::size_t> positions) {
  if (positions.empty()) throw Error("average precision needs at least one relevant item");
  std::sort(positions.begin(), positions.end());
  double sum = 0.0;
  for (std::size_t h = 0; h < positions.size(); ++h) {
    sum += static_cast<double>(h + 1) / static_cast<double>(positions[h] + 1);
  }
  return sum / static_cast<double>(positions.size());
}

inline double average_precision(const std::vector<std::size_t>& ranked, const std::vector<std::size_t>& relevant) {
  std::vector<std::size_t> positions;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    if (std::find(relevant.begin(), relevant.end(), ranked[r]) != relevant.end()) positions.push_back(r);
  }
  if (positions.size() != relevant.size()) throw Error("relevant item missing from ranking");
  return average_precision_from_positions(std::move(positions));
}

struct QueryResult {
  std::string query_id;
  std::vector<std::size_t> top;       // best references, descending
  std::vector<double> top_similarity;
  std::optional<double> ap;           // absent when the query has no relevant reference
  bool correct = false;               // top-1 is relevant
  std::optional<double> sim_true;     // best similarity over relevant refs
  std::optional<double> sim_hard_negative;  // best similarity over non-relevant refs
};

struct RetrievalReport {
  std::map<std::size_t, double> recall_at;
  double mean_ap = 0.0;
  std::vector<QueryResult> per_query;
  std::vector<std::string> ref_ids;
  std::vector<std::string> warnings;
};

/// Scores every query. Rank positions of relevant items are counted directly
/// from the similarity row, so only the top `max(ks)` list is materialized.
inline RetrievalReport evaluate(const Eigen::MatrixXd& zq, const Eigen::MatrixXd& zr, const GroundTruth& gt,
                                std::vector<std::size_t> ks, const std::vector<std::string>& query_ids,
                                const std::vector<std::string>& ref_ids) {
  if (zr.rows() == 0) throw Error("no references");
  if (zq.cols() != zr.cols()) throw Error("query/reference dim mismatch");
  if (gt.relevant.size() != static_cast<std::size_t>(zq.rows())) throw Error("ground truth does not cover queries");
  if (ks.empty()) throw Error("at least one k is required");
  for (auto k : ks)
    if (k == 0) throw Error("k must be >= 1");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

  const auto n = static_cast<std::size_t>(zr.rows());
  const std::size_t keep = std::min(n, ks.back());
  RetrievalReport report;
  report.ref_ids = ref_ids;
  std::vector<std::size_t> hits(ks.size(), 0);
  double ap_sum = 0.0;
  std::size_t ap_count = 0;

  Eigen::MatrixXd sim = zq * zr.transpose();
  for (Eigen::Index qi = 0; qi < sim.rows(); ++qi) {
    const auto q = static_cast<std::size_t>(qi);
    auto row = sim.row(qi);
    QueryResult res;
    res.query_id = query_ids[q];

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto cmp = [&](std::size_t a, std::size_t b) {
      return ranks_before(row(static_cast<Eigen::Index>(a)), a, row(static_cast<Eigen::Index>(b)), b);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), cmp);
    order.resize(keep);
    res.top = order;
    for (auto j : order) res.top_similarity.push_back(row(static_cast<Eigen::Index>(j)));

    const auto& rel = gt.relevant[q];
    std::vector<char> is_rel(n, 0);
    for (auto j : rel) {
      if (j >= n) throw Error("ground-truth reference index out of range");
      is_rel[j] = 1;
    }
    if (rel.empty()) {
      report.warnings.push_back("query '" + res.query_id + "' has no relevant reference; excluded from mAP");
    } else {
      std::vector<std::size_t> positions;
      for (auto r : rel) {
        std::size_t pos = 0;
        double sr = row(static_cast<Eigen::Index>(r));
        for (std::size_t j = 0; j < n; ++j) pos += ranks_before(row(static_cast<Eigen::Index>(j)), j, sr, r);
        positions.push_back(pos);
      }
      std::sort(positions.begin(), positions.end());
      positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
      res.ap = average_precision_from_positions(positions);
      ap_sum += *res.ap;
      ++ap_count;
      for (std::size_t t = 0; t < ks.size(); ++t) hits[t] += positions.front() < ks[t];

      double best_true = -std::numeric_limits<double>::infinity();
      double best_neg = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        double s = row(static_cast<Eigen::Index>(j));
        if (is_rel[j]) best_true = std::max(best_true, s);
        else best_neg = std::max(best_neg, s);
      }
      res.sim_true = best_true;
      if (rel.size() < n) res.sim_hard_negative = best_neg;
    }
    res.correct = !order.empty() && is_rel[order.front()];
    report.per_query.push_back(std::move(res));
  }

  const double nq = static_cast<double>(report.per_query.size());
  for (std::size_t t = 0; t < ks.size(); ++t) report.recall_at[ks[t]] = nq > 0 ? static_cast<double>(hits[t]) / nq : 0.0;
  report.mean_ap = ap_count > 0 ? ap_sum / static_cast<double>(ap_count) : 0.0;
  return report;
}

inline RetrievalReport evaluate(const FeatureSet& zq, const FeatureSet& zr, const GroundTruth& gt,
                                std::vector<std::size_t> ks) {
  if (!zq.normalized || !zr.normalized) throw Error("retrieval requires normalized features");
  return evaluate(zq.data, zr.data, gt, std::move(ks), zq.ids, zr.ids);
}

// ---------------------------------------------------------------------------
// Ground truth CSV `query_id,ref_id`; a query may appear on several rows.

struct GroundTruthRows {
  std::vector<std::pair<std::string, std::string>> pairs;
};

inline GroundTruthRows load_ground_truth_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "query_id,ref_id") {
    throw Error("ground-truth file '" + path + "' must start with header query_id,ref_id");
  }
  GroundTruthRows rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split(line, ',');
    if (f.size() != 2) throw Error("ground-truth line " + std::to_string(lineno) + ": expected 2 fields");
    rows.pairs.emplace_back(std::string(f[0]), std::string(f[1]));
  }
  return rows;
}

/// Resolves id pairs against the query/reference files. Every id that does
/// not exist is collected into `missing` rather than failing on the first.
inline GroundTruth resolve_ground_truth(const GroundTruthRows& rows, const FeatureSet& queries,
                                        const FeatureSet& refs, std::vector<std::string>& missing) {
  auto qidx = queries.index();
  auto ridx = refs.index();
  GroundTruth gt;
  gt.relevant.resize(queries.count());
  for (const auto& [q, r] : rows.pairs) {
    auto qi = qidx.find(q);
    auto ri = ridx.find(r);
    if (qi == qidx.end()) missing.push_back(q);
    if (ri == ridx.end()) missing.push_back(r);
    if (qi == qidx.end() || ri == ridx.end()) continue;
    auto& rel = gt.relevant[qi->second];
    if (std::find(rel.begin(), rel.end(), ri->second) == rel.end()) rel.push_back(ri->second);
  }
  std::sort(missing.begin(), missing.end());
  missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
  return gt;
}

inline void save_ground_truth(const std::vector<std::pair<std::string, std::string>>& pairs,
                              const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "query_id,ref_id\n";
  for (const auto& [q, r] : pairs) out << q << ',' << r << '\n';
  if (!out) throw Error("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Report JSON: {"recall": {"1": .., ...}, "mean_ap": .., "per_query": [...]}

inline nlohmann::json to_json(const RetrievalReport& report) {
  nlohmann::json j;
  j["recall"] = nlohmann::json::object();
  for (const auto& [k, v] : report.recall_at) j["recall"][std::to_string(k)] = v;
  j["mean_ap"] = report.mean_ap;
  j["num_queries"] = report.per_query.size();
  auto& pq = j["per_query"] = nlohmann::json::array();
  for (const auto& r : report.per_query) {
    nlohmann::json e;
    e["query_id"] = r.query_id;
    auto& top = e["top"] = nlohmann::json::array();
    for (auto t : r.top) top.push_back(report.ref_ids.empty() ? nlohmann::json(t) : nlohmann::json(report.ref_ids[t]));
    e["top_similarity"] = r.top_similarity;
    e["ap"] = r.ap ? nlohmann::json(*r.ap) : nlohmann::json(nullptr);
    e["correct"] = r.correct;
    e["sim_true"] = r.sim_true ? nlohmann::json(*r.sim_true) : nlohmann::json(nullptr);
    e["sim_hard_negative"] = r.sim_hard_negative ? nlohmann::json(*r.sim_hard_negative) : nlohmann::json(nullptr);
    pq.push_back(std::move(e));
  }
  return j;
}

inline void save_report_json(const RetrievalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << to_json(report).dump(2) << '\n';
  if (!out) throw Error("write failed for '" + path + "'");
}

/// CSV `query_id,top1_ref_id,top1_similarity,correct,ap`.
inline void save_report_csv(const RetrievalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "query_id,top1_ref_id,top1_similarity,correct,ap\n";
  for (const auto& r : report.per_query) {
    out << r.query_id << ',' << (r.top.empty() ? std::string() : report.ref_ids[r.top.front()]) << ','
        << (r.top_similarity.empty() ? std::string() : detail::format_double(r.top_similarity.front())) << ','
        << (r.correct ? 1 : 0) << ',' << (r.ap ? detail::format_double(*r.ap) : std::string()) << '\n';
  }
  if (!out) throw Error("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Localization: the query inherits the geo-tag of its top-ranked reference.

struct Localization {
  std::size_t ref_index = 0;
  double similarity = 0.0;
  GeoTag tag;
};

inline Localization localize(const Eigen::Ref<const Eigen::RowVectorXd>& query, const Eigen::MatrixXd& zr,
                             const std::vector<std::string>& ref_ids,
                             const std::unordered_map<std::string, GeoTag>& geo) {
  if (zr.rows() == 0) throw Error("no references");
  if (query.size() != zr.cols()) throw Error("query/reference dim mismatch");
  Eigen::RowVectorXd sims = query * zr.transpose();
  std::size_t best = 0;
  for (std::size_t j = 1; j < static_cast<std::size_t>(sims.size()); ++j) {
    if (ranks_before(sims(static_cast<Eigen::Index>(j)), j, sims(static_cast<Eigen::Index>(best)), best)) best = j;
  }
  auto it = geo.find(ref_ids[best]);
  if (it == geo.end()) throw Error("missing geo-tag for reference '" + ref_ids[best] + "'");
  return {best, sims(static_cast<Eigen::Index>(best)), it->second};
}

inline std::unordered_map<std::string, GeoTag> index_geo_tags(const std::vector<GeoTag>& tags) {
  std::unordered_map<std::string, GeoTag> out;
  for (const auto& t : tags) out.emplace(t.id, t);
  return out;
}

// ---------------------------------------------------------------------------
// Similarity diagnostics over a report: top-1 similarity histograms split by
// whether the top-1 pair is a true match, and per-query margin between the
// true match and the hardest negative.

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t matched = 0;
  std::size_t unmatched = 0;
};

struct DeltaRow {
  std::string query_id;
  double delta = 0.0;
};

/// `bins` equal-width bins over [-1, 1]; values outside are clamped into the
/// end bins, and 1.0 falls into the last bin.
inline std::vector<HistogramBin> similarity_histogram(const nlohmann::json& report, std::size_t bins = 20) {
  if (!report.contains("per_query") || !report["per_query"].is_array()) {
    throw Error("report is missing per-query data");
  }
  std::vector<HistogramBin> out(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(bins);
    out[b].hi = -1.0 + 2.0 * static_cast<double>(b + 1) / static_cast<double>(bins);
  }
  for (const auto& q : report["per_query"]) {
    if (!q.contains("top_similarity") || !q["top_similarity"].is_array() || q["top_similarity"].empty() ||
        !q.contains("correct")) {
      throw Error("report is missing per-query data");
    }
    double s = q["top_similarity"][0].get<double>();
    auto b = static_cast<std::ptrdiff_t>(std::floor((s + 1.0) / 2.0 * static_cast<double>(bins)));
    b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
    auto& bin = out[static_cast<std::size_t>(b)];
    (q["correct"].get<bool>() ? bin.matched : bin.unmatched) += 1;
  }
  return out;
}

/// delta = sim_true - sim_hard_negative for every query that has both.
inline std::vector<DeltaRow> delta_similarities(const nlohmann::json& report) {
  if (!report.contains("per_query") || !report["per_query"].is_array()) {
    throw Error("report is missing per-query data");
  }
  std::vector<DeltaRow> out;
  for (const auto& q : report["per_query"]) {
    if (!q.contains("query_id") || !q.contains("sim_true") || !q.contains("sim_hard_negative")) {
      throw Error("report is missing per-query data");
    }
    if (q["sim_true"].is_null() || q["sim_hard_negative"].is_null()) continue;
    out.push_back({q["query_id"].get<std::string>(), q["sim_true"].get<double>() - q["sim_hard_negative"].get<double>()});
  }
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of empty sequence");
  std::sort(v.begin(), v.end());
  auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace cvadapt
