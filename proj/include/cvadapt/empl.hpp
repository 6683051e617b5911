#pragma once

// EM pseudo-labeling: the E-step assigns each query its most similar
// reference (if the similarity clears a threshold); the M-step minimizes an
// InfoNCE objective against those labels.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cvadapt/detail/text.hpp"
#include "cvadapt/error.hpp"
#include "cvadapt/featstore.hpp"

namespace cvadapt {

inline constexpr double kDefaultTemperature = 0.1;
inline constexpr double kDefaultThreshold = 0.1;

/// One-hot rows of the M x N label matrix s. A query without a positive
/// (below threshold) is an all-zero row.
struct PseudoLabels {
  std::size_t num_refs = 0;
  std::vector<std::optional<std::size_t>> positive;
  std::vector<std::size_t> best_ref;  // argmax reference, even below threshold
  std::vector<double> similarity;     // similarity to best_ref

  std::size_t num_queries() const { return positive.size(); }
  bool valid(std::size_t i) const { return positive[i].has_value(); }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (const auto& p : positive) n += p.has_value();
    return n;
  }
};

/// Sparse label matrix with any number of positives per row. Used for the
/// transposed (reference -> query) direction, where a row can collect
/// several queries or none.
struct PositiveSets {
  std::size_t num_cols = 0;
  std::vector<std::vector<std::size_t>> rows;

  static PositiveSets from_labels(const PseudoLabels& labels) {
    PositiveSets s;
    s.num_cols = labels.num_refs;
    s.rows.resize(labels.num_queries());
    for (std::size_t i = 0; i < labels.num_queries(); ++i) {
      if (labels.positive[i]) s.rows[i].push_back(*labels.positive[i]);
    }
    return s;
  }

  /// s^T: row j lists the queries labeled with reference j, ascending.
  static PositiveSets transposed(const PseudoLabels& labels) {
    PositiveSets s;
    s.num_cols = labels.num_queries();
    s.rows.resize(labels.num_refs);
    for (std::size_t i = 0; i < labels.num_queries(); ++i) {
      if (labels.positive[i]) s.rows[*labels.positive[i]].push_back(i);
    }
    return s;
  }
};

/// E-step. For each query row the argmax over references (ties to the lowest
/// index); the label is kept only when that similarity exceeds `threshold`.
inline PseudoLabels pseudo_label(const Eigen::MatrixXd& zq, const Eigen::MatrixXd& zr, double threshold) {
  if (zr.rows() == 0) throw Error("no references");
  if (zq.cols() != zr.cols()) throw Error("query/reference dim mismatch");
  PseudoLabels labels;
  labels.num_refs = static_cast<std::size_t>(zr.rows());
  labels.positive.resize(static_cast<std::size_t>(zq.rows()));
  labels.similarity.resize(static_cast<std::size_t>(zq.rows()));
  labels.best_ref.resize(static_cast<std::size_t>(zq.rows()));
  Eigen::MatrixXd sim = zq * zr.transpose();
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    Eigen::Index best = 0;
    double best_sim = sim(i, 0);
    for (Eigen::Index j = 1; j < sim.cols(); ++j) {
      if (sim(i, j) > best_sim) {
        best_sim = sim(i, j);
        best = j;
      }
    }
    auto row = static_cast<std::size_t>(i);
    labels.similarity[row] = best_sim;
    labels.best_ref[row] = static_cast<std::size_t>(best);
    if (best_sim > threshold) labels.positive[row] = static_cast<std::size_t>(best);
  }
  return labels;
}

inline PseudoLabels pseudo_label(const FeatureSet& zq, const FeatureSet& zr, double threshold) {
  if (!zq.normalized || !zr.normalized) throw Error("pseudo-labeling requires normalized features");
  return pseudo_label(zq.data, zr.data, threshold);
}

struct InfoNceResult {
  double value = 0.0;
  Eigen::MatrixXd grad_anchor;     // dL/dA, same shape as the anchor rows
  Eigen::MatrixXd grad_candidate;  // dL/dB
  std::size_t valid_rows = 0;
  bool no_valid_rows = false;  // loss forced to 0, gradients zero
};

/// InfoNCE over anchors A (M x d) and candidates B (N x d):
///   L = -(1/M') sum_{valid i} log( sum_{j in pos(i)} e^{a_i.b_j/tau} / sum_j e^{a_i.b_j/tau} )
/// where M' counts rows with at least one positive; rows without positives
/// contribute nothing.
inline InfoNceResult info_nce_loss(const Eigen::MatrixXd& anchors, const Eigen::MatrixXd& candidates,
                                   const PositiveSets& positives, double temperature) {
  if (!(temperature > 0.0)) throw Error("temperature must be positive");
  if (anchors.cols() != candidates.cols()) throw Error("anchor/candidate dim mismatch");
  if (positives.rows.size() != static_cast<std::size_t>(anchors.rows()) ||
      positives.num_cols != static_cast<std::size_t>(candidates.rows())) {
    throw Error("label shape does not match feature sets");
  }

  InfoNceResult out;
  out.grad_anchor = Eigen::MatrixXd::Zero(anchors.rows(), anchors.cols());
  out.grad_candidate = Eigen::MatrixXd::Zero(candidates.rows(), candidates.cols());
  for (const auto& row : positives.rows) out.valid_rows += !row.empty();
  if (out.valid_rows == 0) {
    out.no_valid_rows = true;
    return out;
  }

  const Eigen::Index n = candidates.rows();
  Eigen::MatrixXd logits = (anchors * candidates.transpose()) / temperature;
  Eigen::MatrixXd coef = Eigen::MatrixXd::Zero(anchors.rows(), n);  // dL/dlogits
  const double scale = 1.0 / static_cast<double>(out.valid_rows);
  double total = 0.0;

  for (Eigen::Index i = 0; i < anchors.rows(); ++i) {
    const auto& pos = positives.rows[static_cast<std::size_t>(i)];
    if (pos.empty()) continue;
    for (auto j : pos) {
      if (j >= static_cast<std::size_t>(n)) throw Error("positive index out of range");
    }
    // Every candidate positive: numerator equals denominator.
    if (pos.size() == static_cast<std::size_t>(n)) continue;
    double row_max = logits.row(i).maxCoeff();
    double sum_all = (logits.row(i).array() - row_max).exp().sum();
    double lse_all = row_max + std::log(sum_all);

    double pos_max = -std::numeric_limits<double>::infinity();
    for (auto j : pos) pos_max = std::max(pos_max, logits(i, static_cast<Eigen::Index>(j)));
    double sum_pos = 0.0;
    for (auto j : pos) sum_pos += std::exp(logits(i, static_cast<Eigen::Index>(j)) - pos_max);
    double lse_pos = pos_max + std::log(sum_pos);

    total += lse_all - lse_pos;
    coef.row(i) = (logits.row(i).array() - lse_all).exp() * scale;
    for (auto j : pos) {
      auto jj = static_cast<Eigen::Index>(j);
      coef(i, jj) -= std::exp(logits(i, jj) - lse_pos) * scale;
    }
  }

  out.value = total * scale;
  out.grad_anchor = coef * candidates / temperature;
  out.grad_candidate = coef.transpose() * anchors / temperature;
  return out;
}

inline InfoNceResult info_nce_loss(const Eigen::MatrixXd& zq, const Eigen::MatrixXd& zr, const PseudoLabels& labels,
                                   double temperature) {
  return info_nce_loss(zq, zr, PositiveSets::from_labels(labels), temperature);
}

/// CSV dump `query_id,ref_id,similarity,valid`; ref_id is the argmax reference
/// even for rows that fell below the threshold.
inline void save_pseudo_labels(const PseudoLabels& labels, const std::vector<std::string>& query_ids,
                               const std::vector<std::string>& ref_ids, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "query_id,ref_id,similarity,valid\n";
  for (std::size_t i = 0; i < labels.num_queries(); ++i) {
    out << query_ids[i] << ',' << ref_ids[labels.best_ref[i]] << ',' << detail::format_double(labels.similarity[i]) << ','
        << (labels.valid(i) ? 1 : 0) << '\n';
  }
}

}  // namespace cvadapt
