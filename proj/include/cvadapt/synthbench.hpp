#pragma once

// Seeded generator of cross-view feature sets with known correspondences.
//
// Each scene has a latent unit vector l. Its reference is normalize(l + e)
// and each of its queries is normalize(A l + b + e), with e ~ N(0, sigma^2 I),
// a shared style offset b, and a view transform A:
//   none           A = I
//   rotation       A = exp(K), K a random skew-symmetric matrix scaled so the
//                  largest rotation angle equals `rotation_angle`
//   general_linear A = U diag(s) V^T with s in [kappa^-1/2, kappa^1/2]
// A is always invertible, so a linear correction exists.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <unsupported/Eigen/MatrixFunctions>

#include "cvadapt/error.hpp"
#include "cvadapt/featstore.hpp"
#include "cvadapt/retrieval.hpp"

namespace cvadapt {

enum class ViewGap { None, Rotation, GeneralLinear };

inline std::string to_string(ViewGap g) {
  switch (g) {
    case ViewGap::None: return "none";
    case ViewGap::Rotation: return "rotation";
    case ViewGap::GeneralLinear: return "general_linear";
  }
  return "none";
}

inline ViewGap parse_view_gap(std::string_view s) {
  if (s == "none") return ViewGap::None;
  if (s == "rotation") return ViewGap::Rotation;
  if (s == "general_linear") return ViewGap::GeneralLinear;
  throw Error("unknown view_gap '" + std::string(s) + "' (expected none, rotation or general_linear)");
}

struct SynthConfig {
  std::size_t num_scenes = 500;
  std::size_t queries_per_scene = 4;
  std::size_t eval_queries_per_scene = 2;
  std::size_t d0 = 64;
  double noise_sigma = 0.05;
  ViewGap view_gap = ViewGap::Rotation;
  double rotation_angle = 2.4;  // radians, largest plane angle of A
  double kappa_max = 10.0;
  double style_offset = 0.3;
  std::uint64_t seed = 42;

  void validate() const {
    if (num_scenes == 0) throw Error("num_scenes must be positive");
    if (d0 == 0) throw Error("d0 must be positive");
    if (!(noise_sigma >= 0.0)) throw Error("noise_sigma must be nonnegative");
    if (!(kappa_max >= 1.0)) throw Error("kappa_max must be >= 1");
    if (!(rotation_angle >= 0.0 && rotation_angle <= 3.14159265358979323846)) {
      throw Error("rotation_angle must be in [0, pi]");
    }
    if (!(style_offset >= 0.0)) throw Error("style_offset must be nonnegative");
  }
};

/// Benchmark preset: 500 scenes, 4 training and 2 held-out queries per
/// scene, d0 = 64, rotation gap, sigma = 0.05, style offset 0.3.
inline SynthConfig preset_g1(std::uint64_t seed = 42) {
  SynthConfig c;
  c.seed = seed;
  return c;
}

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"num_scenes", c.num_scenes},
          {"queries_per_scene", c.queries_per_scene},
          {"eval_queries_per_scene", c.eval_queries_per_scene},
          {"d0", c.d0},
          {"noise_sigma", c.noise_sigma},
          {"view_gap", to_string(c.view_gap)},
          {"rotation_angle", c.rotation_angle},
          {"kappa_max", c.kappa_max},
          {"style_offset", c.style_offset},
          {"seed", c.seed}};
}

/// `{"preset": "G1"}` selects the preset; any other keys override fields.
inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("synth config must be a JSON object");
  SynthConfig c;
  try {
    if (j.contains("preset")) {
      auto p = j["preset"].get<std::string>();
      if (p != "G1" && p != "g1") throw Error("unknown preset '" + p + "'");
      c = preset_g1();
    }
    for (const auto& [key, value] : j.items()) {
      if (key == "preset") continue;
      else if (key == "num_scenes") c.num_scenes = value.get<std::size_t>();
      else if (key == "queries_per_scene") c.queries_per_scene = value.get<std::size_t>();
      else if (key == "eval_queries_per_scene") c.eval_queries_per_scene = value.get<std::size_t>();
      else if (key == "d0") c.d0 = value.get<std::size_t>();
      else if (key == "noise_sigma") c.noise_sigma = value.get<double>();
      else if (key == "view_gap") c.view_gap = parse_view_gap(value.get<std::string>());
      else if (key == "rotation_angle") c.rotation_angle = value.get<double>();
      else if (key == "kappa_max") c.kappa_max = value.get<double>();
      else if (key == "style_offset") c.style_offset = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw Error("unknown synth config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid synth config: ") + e.what());
  }
  c.validate();
  return c;
}

struct SynthData {
  FeatureSet queries;       // training split
  FeatureSet eval_queries;  // held-out split (may be empty)
  FeatureSet references;
  GroundTruth gt;
  GroundTruth eval_gt;
  Eigen::MatrixXd view_transform;  // A
  Eigen::VectorXd style;           // b
};

namespace detail {

class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : rng_(seed) {}
  double operator()() { return normal_(rng_); }
  Eigen::MatrixXd matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = (*this)();
    return m;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// Orthogonal factor of a Gaussian matrix, with column signs fixed so the
// result is Haar distributed.
inline Eigen::MatrixXd random_orthogonal(GaussianStream& g, Eigen::Index d) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g.matrix(d, d));
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < d; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

inline std::string scene_id(char prefix, std::size_t scene, std::optional<std::size_t> k = std::nullopt) {
  char buf[48];
  if (k) std::snprintf(buf, sizeof(buf), "%c%05zu_%zu", prefix, scene, *k);
  else std::snprintf(buf, sizeof(buf), "%c%05zu", prefix, scene);
  return buf;
}

}  // namespace detail

/// Draw order (fixed so runs sharing a seed share random numbers): latent
/// scenes, view transform, style direction, reference noise, training query
/// noise, held-out query noise. Noise is drawn as N(0, 1) and scaled by sigma.
inline SynthData generate(const SynthConfig& config) {
  config.validate();
  detail::GaussianStream g(config.seed);
  const auto s = static_cast<Eigen::Index>(config.num_scenes);
  const auto d = static_cast<Eigen::Index>(config.d0);

  Eigen::MatrixXd latent = g.matrix(s, d);
  l2_normalize_rows(latent);

  SynthData out;
  switch (config.view_gap) {
    case ViewGap::None:
      out.view_transform = Eigen::MatrixXd::Identity(d, d);
      break;
    case ViewGap::Rotation: {
      Eigen::MatrixXd k = g.matrix(d, d);
      k = 0.5 * (k - k.transpose()).eval();
      // Singular values of a real skew-symmetric matrix are its plane angles.
      double top = d > 1 ? Eigen::JacobiSVD<Eigen::MatrixXd>(k).singularValues()(0) : 0.0;
      if (top > 0.0) k *= config.rotation_angle / top;
      out.view_transform = k.exp();
      break;
    }
    case ViewGap::GeneralLinear: {
      Eigen::MatrixXd u = detail::random_orthogonal(g, d);
      Eigen::MatrixXd v = detail::random_orthogonal(g, d);
      Eigen::VectorXd sv(d);
      std::mt19937_64 spread(config.seed ^ 0x9e3779b97f4a7c15ull);
      std::uniform_real_distribution<double> unit(-1.0, 1.0);
      for (Eigen::Index i = 0; i < d; ++i) sv(i) = std::pow(config.kappa_max, 0.5 * unit(spread));
      out.view_transform = u * sv.asDiagonal() * v.transpose();
      break;
    }
  }

  Eigen::VectorXd style_dir(d);
  for (Eigen::Index i = 0; i < d; ++i) style_dir(i) = g();
  out.style = style_dir.norm() > 0 ? Eigen::VectorXd(style_dir.normalized() * config.style_offset)
                                   : Eigen::VectorXd::Zero(d);

  out.references.view = View::Reference;
  out.references.data = latent + config.noise_sigma * g.matrix(s, d);
  l2_normalize_rows(out.references.data);
  out.references.normalized = true;
  for (std::size_t i = 0; i < config.num_scenes; ++i) out.references.ids.push_back(detail::scene_id('r', i));

  Eigen::MatrixXd transformed = latent * out.view_transform.transpose();
  transformed.rowwise() += out.style.transpose();

  auto make_queries = [&](std::size_t per_scene, char prefix, FeatureSet& set, GroundTruth& gt) {
    set.view = View::Query;
    set.normalized = true;
    const auto n = static_cast<Eigen::Index>(config.num_scenes * per_scene);
    set.data = g.matrix(n, d) * config.noise_sigma;
    for (std::size_t sc = 0; sc < config.num_scenes; ++sc) {
      for (std::size_t k = 0; k < per_scene; ++k) {
        auto row = static_cast<Eigen::Index>(sc * per_scene + k);
        set.data.row(row) += transformed.row(static_cast<Eigen::Index>(sc));
        set.ids.push_back(detail::scene_id(prefix, sc, k));
        gt.relevant.push_back({sc});
      }
    }
    l2_normalize_rows(set.data);
  };
  make_queries(config.queries_per_scene, 'q', out.queries, out.gt);
  make_queries(config.eval_queries_per_scene, 'e', out.eval_queries, out.eval_gt);
  return out;
}

/// Ground-truth id pairs for a split.
inline std::vector<std::pair<std::string, std::string>> ground_truth_pairs(const FeatureSet& queries,
                                                                          const FeatureSet& refs,
                                                                          const GroundTruth& gt) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::size_t q = 0; q < gt.relevant.size(); ++q)
    for (auto r : gt.relevant[q]) pairs.emplace_back(queries.ids[q], refs.ids[r]);
  return pairs;
}

/// Deterministic synthetic geo-tags: scenes laid out on a lat/lon grid.
inline std::vector<GeoTag> synthetic_geo_tags(const FeatureSet& refs) {
  std::vector<GeoTag> tags;
  const std::size_t side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(refs.count()))));
  for (std::size_t i = 0; i < refs.count(); ++i) {
    double lat = 30.0 + 0.001 * static_cast<double>(i / std::max<std::size_t>(side, 1));
    double lon = 120.0 + 0.001 * static_cast<double>(i % std::max<std::size_t>(side, 1));
    tags.push_back({refs.ids[i], lat, lon});
  }
  return tags;
}

}  // namespace cvadapt
