#include <gtest/gtest.h>

#include <set>

#include "cvadapt/synthbench.hpp"
#include "test_support.hpp"

namespace cvadapt {
namespace {

double baseline_r1(const SynthData& d) { return evaluate(d.eval_queries, d.references, d.eval_gt, {1}).recall_at.at(1); }

SynthConfig small(ViewGap gap) {
  SynthConfig c;
  c.num_scenes = 80;
  c.d0 = 16;
  c.view_gap = gap;
  c.seed = 5;
  return c;
}

TEST(Synth, PresetCountsAndIds) {
  auto d = generate(preset_g1(42));
  EXPECT_EQ(d.references.count(), 500u);
  EXPECT_EQ(d.queries.count(), 2000u);
  EXPECT_EQ(d.eval_queries.count(), 1000u);
  EXPECT_EQ(d.references.dim(), 64u);
  EXPECT_EQ(d.references.ids[7], "r00007");
  EXPECT_EQ(d.queries.ids[5], "q00001_1");
  EXPECT_EQ(d.eval_queries.ids[3], "e00001_1");
  EXPECT_EQ(d.gt.relevant[5], (std::vector<std::size_t>{1}));
  EXPECT_EQ(d.references.view, View::Reference);
  EXPECT_EQ(d.queries.view, View::Query);
}

TEST(Synth, RowsAreUnitNorm) {
  for (auto gap : {ViewGap::None, ViewGap::Rotation, ViewGap::GeneralLinear}) {
    auto d = generate(small(gap));
    for (const auto* set : {&d.queries, &d.eval_queries, &d.references}) {
      EXPECT_TRUE(set->normalized);
      EXPECT_LE((set->data.rowwise().norm().array() - 1.0).abs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Synth, SameSeedSameBytes) {
  auto c = small(ViewGap::GeneralLinear);
  auto a = generate(c), b = generate(c);
  EXPECT_EQ(encode_feature_set(a.queries), encode_feature_set(b.queries));
  EXPECT_EQ(encode_feature_set(a.references), encode_feature_set(b.references));
  c.seed = 6;
  EXPECT_NE(encode_feature_set(generate(c).queries), encode_feature_set(a.queries));
}

TEST(Synth, NoiseFreeIdentityIsPerfect) {
  auto c = small(ViewGap::None);
  c.noise_sigma = 0.0;
  c.style_offset = 0.0;
  auto d = generate(c);
  EXPECT_EQ(baseline_r1(d), 1.0);
  EXPECT_LE((d.eval_queries.data.row(0) - d.references.data.row(0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Synth, RotationIsOrthogonalWithBoundedAngle) {
  auto d = generate(small(ViewGap::Rotation));
  const auto& a = d.view_transform;
  EXPECT_TRUE((a.transpose() * a).isIdentity(1e-10));
  EXPECT_NEAR(a.determinant(), 1.0, 1e-10);
  // Eigenvalues e^{+-i theta}; the widest plane angle is the configured one.
  Eigen::EigenSolver<Eigen::MatrixXd> es(a);
  double widest = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) widest = std::max(widest, std::abs(std::arg(es.eigenvalues()(i))));
  EXPECT_NEAR(widest, 2.4, 1e-8);
}

TEST(Synth, GeneralLinearConditionBounded) {
  auto d = generate(small(ViewGap::GeneralLinear));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(d.view_transform);
  auto s = svd.singularValues();
  EXPECT_LE(s(0) / s(s.size() - 1), 10.0 + 1e-9);
  EXPECT_GT(s(s.size() - 1), 0.0);
}

TEST(Synth, UndoingTheTransformRestoresRetrieval) {
  for (auto gap : {ViewGap::Rotation, ViewGap::GeneralLinear}) {
    auto c = small(gap);
    c.noise_sigma = 0.0;
    c.style_offset = 0.0;
    auto d = generate(c);
    EXPECT_LT(baseline_r1(d), 1.0);
    auto fixed = d.eval_queries;
    fixed.data = fixed.data * d.view_transform.inverse().transpose();
    l2_normalize_rows(fixed.data);
    EXPECT_EQ(evaluate(fixed, d.references, d.eval_gt, {1}).recall_at.at(1), 1.0);
  }
}

TEST(Synth, BaselineDegradesWithNoise) {
  double prev = 1.1;
  for (double sigma : {0.0, 0.05, 0.1, 0.2, 0.4}) {
    auto c = preset_g1(7);
    c.noise_sigma = sigma;
    double r1 = baseline_r1(generate(c));
    EXPECT_LE(r1, prev) << sigma;
    prev = r1;
  }
}

// Pinned held-out baseline and oracle-corrected R@1 of the benchmark preset.
TEST(Synth, PresetBaselineAndCeiling) {
  const double expected[5] = {0.444, 0.290, 0.226, 0.299, 0.361};
  for (int seed = 1; seed <= 5; ++seed) {
    auto d = generate(preset_g1(static_cast<std::uint64_t>(seed)));
    double base = baseline_r1(d);
    EXPECT_NEAR(base, expected[seed - 1], 1e-12) << seed;
    EXPECT_LT(base, 0.5);
    auto fixed = d.eval_queries;
    fixed.data = fixed.data * d.view_transform;  // A^T q for each row
    l2_normalize_rows(fixed.data);
    EXPECT_GE(evaluate(fixed, d.references, d.eval_gt, {1}).recall_at.at(1), 0.95) << seed;
  }
}

TEST(SynthConfigJson, PresetOverridesAndUnknownKeys) {
  auto c = synth_config_from_json(nlohmann::json{{"preset", "G1"}, {"seed", 3}, {"noise_sigma", 0.1}});
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.noise_sigma, 0.1);
  EXPECT_EQ(c.num_scenes, 500u);
  EXPECT_EQ(to_json(synth_config_from_json(to_json(c))), to_json(c));
  EXPECT_THROW(synth_config_from_json(nlohmann::json{{"preset", "G9"}}), Error);
  EXPECT_THROW(synth_config_from_json(nlohmann::json{{"scenes", 3}}), Error);
  EXPECT_THROW(synth_config_from_json(nlohmann::json{{"view_gap", "shear"}}), Error);
  EXPECT_THROW(synth_config_from_json(nlohmann::json{{"d0", 0}}), Error);
}

TEST(Synth, GeoTagsAreDistinctAndValid) {
  auto d = generate(small(ViewGap::None));
  auto tags = synthetic_geo_tags(d.references);
  ASSERT_EQ(tags.size(), d.references.count());
  std::set<std::pair<double, double>> coords;
  for (const auto& t : tags) coords.emplace(t.lat, t.lon);
  EXPECT_EQ(coords.size(), tags.size());
  EXPECT_EQ(tags[0].id, "r00000");
  auto pairs = ground_truth_pairs(d.queries, d.references, d.gt);
  EXPECT_EQ(pairs.size(), d.queries.count());
  EXPECT_EQ(pairs[0], (std::pair<std::string, std::string>{"q00000_0", "r00000"}));
}

}  // namespace
}  // namespace cvadapt
