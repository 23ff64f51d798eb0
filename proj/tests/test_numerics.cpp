#include "helpers.hpp"

using namespace steerfair;
using namespace steerfair::numerics;
using th::to_matrix;

TEST(Pca, AxisAlignedRowsTieBreakToPositiveFirstComponent) {
  auto r = pca_first_component(to_matrix({{1, 0}, {-1, 0}, {2, 0}, {-2, 0}}));
  EXPECT_NEAR(r.direction[0], 1.0, 1e-12);
  EXPECT_NEAR(r.direction[1], 0.0, 1e-12);
  EXPECT_NEAR(r.explained_variance_ratio, 1.0, 1e-12);
}

TEST(Pca, IdenticalRowsAreDegenerate) {
  EXPECT_ERRC(pca_first_component(to_matrix({{3, 3, 3}, {3, 3, 3}, {3, 3, 3}})), errc::degenerate_data);
}

TEST(Pca, SingleRowIsDimensionError) { EXPECT_ERRC(pca_first_component(to_matrix({{1, 2}})), errc::dimension_error); }

TEST(Pca, SeededSixByThreeMatchesCovarianceOracle) {
  std::mt19937_64 gen(11);
  auto m = oracle::random_matrix(6, 3, gen);
  auto r = pca_first_component(to_matrix(m));
  auto o = oracle::covariance_top_eigenvector(m);
  EXPECT_GE(th::abs_cosine(r.direction.components(), o.direction), 1 - 1e-8);
  EXPECT_NEAR(r.explained_variance_ratio, o.evr, 1e-9);
}

TEST(Pca, SignMakesUncenteredMeanProjectionNonNegative) {
  std::mt19937_64 gen(12);
  for (int t = 0; t < 20; ++t) {
    auto m = oracle::random_matrix(8, 5, gen);
    for (auto& row : m) row[t % 5] += (t % 2 ? -3.0 : 3.0);
    auto r = pca_first_component(to_matrix(m));
    double mean_proj = 0;
    for (const auto& row : m) mean_proj += oracle::dot(row, r.direction.components()) / 8.0;
    EXPECT_GE(mean_proj, -1e-12);
  }
}

TEST(Pca, DirectionIsUnitAndMeanIsColumnMean) {
  std::mt19937_64 gen(13);
  auto m = oracle::random_matrix(10, 4, gen);
  auto r = pca_first_component(to_matrix(m));
  EXPECT_NEAR(oracle::norm(r.direction.components()), 1.0, 1e-9);
  ASSERT_EQ(r.mean.size(), 4u);
  for (std::size_t j = 0; j < 4; ++j) {
    double s = 0;
    for (const auto& row : m) s += row[j] / 10.0;
    EXPECT_NEAR(r.mean[j], s, 1e-12);
  }
  EXPECT_GE(r.explained_variance_ratio, 0.0);
  EXPECT_LE(r.explained_variance_ratio, 1.0);
}

TEST(Pca, VarianceAlongDirectionBeatsRandomProbes) {
  std::mt19937_64 gen(14);
  for (int t = 0; t < 10; ++t) {
    auto m = oracle::random_matrix(20, 6, gen);
    auto r = pca_first_component(to_matrix(m));
    auto var_along = [&](const std::vector<double>& u) {
      double s = 0;
      for (const auto& row : m) {
        double p = 0;
        for (std::size_t j = 0; j < 6; ++j) p += (row[j] - r.mean[j]) * u[j];
        s += p * p;
      }
      return s;
    };
    double best = var_along(r.direction.components());
    for (int k = 0; k < 100; ++k) {
      auto probe = oracle::random_matrix(1, 6, gen)[0];
      double n = oracle::norm(probe);
      for (double& x : probe) x /= n;
      EXPECT_GE(best, var_along(probe) - 1e-9);
    }
  }
}

TEST(Pca, DuplicatingRowsKeepsDirection) {
  std::mt19937_64 gen(15);
  auto m = oracle::random_matrix(7, 5, gen);
  auto doubled = m;
  doubled.insert(doubled.end(), m.begin(), m.end());
  auto a = pca_first_component(to_matrix(m)), b = pca_first_component(to_matrix(doubled));
  EXPECT_GE(oracle::dot(a.direction.components(), b.direction.components()), 1 - 1e-8);
}

TEST(Pca, RejectsNonFiniteEntries) {
  EXPECT_ERRC(pca_first_component(to_matrix({{1, NAN}, {2, 3}})), errc::dimension_error);
}

TEST(Qr, SingleVectorIsNormalized) {
  auto b = qr_orthonormal_basis(to_matrix({{3, 4}}));
  ASSERT_EQ(b.vectors.size(), 1u);
  EXPECT_NEAR(b.vectors[0][0], 0.6, 1e-15);
  EXPECT_NEAR(b.vectors[0][1], 0.8, 1e-15);
}

TEST(Qr, DuplicateRowsCollapseToRankOne) {
  auto b = qr_orthonormal_basis(to_matrix({{1, 0, 0}, {1, 0, 0}}));
  ASSERT_EQ(b.vectors.size(), 1u);
  EXPECT_EQ(b.vectors[0].components(), (std::vector<double>{1, 0, 0}));
  EXPECT_EQ(b.dropped_rows, (std::vector<std::size_t>{1}));
}

TEST(Qr, ZeroRowIsRejected) { EXPECT_ERRC(qr_orthonormal_basis(to_matrix({{1, 0}, {0, 0}})), errc::zero_vector); }

TEST(Qr, SeededRowsMatchGramSchmidtOracle) {
  std::mt19937_64 gen(21);
  auto m = oracle::random_matrix(3, 5, gen);
  auto b = qr_orthonormal_basis(to_matrix(m));
  auto o = oracle::modified_gram_schmidt(m);
  ASSERT_EQ(b.vectors.size(), o.size());
  for (std::size_t i = 0; i < o.size(); ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(b.vectors[i][j], o[i][j], 1e-8);
}

TEST(Qr, OrthonormalityAndSpan) {
  std::mt19937_64 gen(22);
  for (int t = 0; t < 20; ++t) {
    std::size_t m = 1 + t % 6, d = 6 + t % 3;
    auto rows = oracle::random_matrix(m, d, gen);
    if (m > 2) rows[m - 1] = rows[0];  // force a dependent row now and then
    auto b = qr_orthonormal_basis(to_matrix(rows));
    for (std::size_t i = 0; i < b.vectors.size(); ++i) {
      EXPECT_NEAR(oracle::norm(b.vectors[i].components()), 1.0, 1e-9);
      for (std::size_t j = i + 1; j < b.vectors.size(); ++j)
        EXPECT_LT(std::abs(oracle::dot(b.vectors[i].components(), b.vectors[j].components())), 1e-8);
    }
    for (const auto& r : rows) {
      auto res = r;
      for (const auto& u : b.vectors) {
        double c = oracle::dot(u.components(), r);
        for (std::size_t i = 0; i < d; ++i) res[i] -= c * u[i];
      }
      EXPECT_LT(oracle::norm(res), 1e-6 * oracle::norm(r));
    }
  }
}

TEST(Combine, SingleRuleIsIdentity) {
  auto v = combine_directions(to_matrix({{0, 1}}));
  EXPECT_EQ(v, (std::vector<double>{0, 1}));
}

TEST(Combine, OrthonormalPairAverages) {
  auto v = combine_directions(to_matrix({{1, 0}, {0, 1}}));
  EXPECT_NEAR(v[0], 0.5, 1e-15);
  EXPECT_NEAR(v[1], 0.5, 1e-15);
}

TEST(Combine, CorrelatedPairMatchesOracle) {
  std::mt19937_64 gen(31);
  auto m = oracle::random_matrix(2, 4, gen);
  for (std::size_t i = 0; i < 4; ++i) m[1][i] = 0.8 * m[0][i] + 0.3 * m[1][i];
  auto v = combine_directions(to_matrix(m));
  auto q = oracle::modified_gram_schmidt(m);
  ASSERT_EQ(q.size(), 2u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(v[i], (q[0][i] + q[1][i]) / 2, 1e-8);
}

TEST(Combine, DuplicateDirectionsStillDivideByRuleCount) {
  auto v = combine_directions(to_matrix({{0, 2}, {0, 2}}));
  EXPECT_NEAR(v[1], 0.5, 1e-15);
}

TEST(Combine, InvariantToPositiveRowScaling) {
  std::mt19937_64 gen(32);
  for (int t = 0; t < 10; ++t) {
    auto m = oracle::random_matrix(3, 7, gen);
    auto scaled = m;
    for (double& x : scaled[t % 3]) x *= 0.1 + t;
    auto a = combine_directions(to_matrix(m)), b = combine_directions(to_matrix(scaled));
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Renormalize, ScalesToTarget) {
  std::vector<double> v{3, 4};
  auto o = l2_renormalize(v, 10);
  EXPECT_NEAR(o[0], 6, 1e-14);
  EXPECT_NEAR(o[1], 8, 1e-14);
}

TEST(Renormalize, MatchingTargetIsIdentityAndIdempotent) {
  std::mt19937_64 gen(41);
  auto v = oracle::random_matrix(1, 9, gen)[0];
  auto once = l2_renormalize(v, oracle::norm(v));
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(once[i], v[i], 1e-14);
  auto twice = l2_renormalize(once, oracle::norm(v));
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(twice[i], once[i], 1e-15);
}

TEST(Renormalize, SeededNormCheck) {
  std::mt19937_64 gen(42);
  auto v = oracle::random_matrix(1, 16, gen)[0];
  EXPECT_LT(std::abs(oracle::norm(l2_renormalize(v, 2.5)) - 2.5), 1e-9);
}

TEST(Renormalize, ZeroInputWithPositiveTargetFails) {
  std::vector<double> z{0, 0, 0};
  EXPECT_ERRC(l2_renormalize(z, 1.0), errc::zero_vector);
}

TEST(UnitVectorType, NormalizedHasUnitNorm) {
  std::vector<double> v{1, 2, 2};
  auto u = UnitVector::normalized(v);
  EXPECT_NEAR(oracle::norm(u.components()), 1.0, 1e-12);
  EXPECT_ERRC(UnitVector::from_unit({1, 1}), errc::invalid_argument);
}
