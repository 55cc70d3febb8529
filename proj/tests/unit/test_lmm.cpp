#include <doctest.h>

#include <cmath>

#include "ipwsae/lmm.hpp"
#include "support/dense_lmm.hpp"
#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace ipwsae;

namespace {

std::shared_ptr<const LmmData> data_of(const PopulationFrame& pop) {
  return std::make_shared<const LmmData>(LmmData::from_sample(SampleView(pop)));
}

VarianceComponents th3(double g, double u, double e) { return {g, u, e}; }

}  // namespace

TEST_CASE("restricted likelihood matches the dense oracle") {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto pop = toy::lmm_population({4, 4, 4}, 1.0, 2.0, 1.5, seed);
    const auto d = data_of(pop);
    for (const auto& th : {th3(1.0, 2.0, 1.5), th3(0.3, 0.0, 0.7), th3(0.0, 4.0, 2.0)}) {
      CHECK(restricted_loglik(th, *d) == doctest::Approx(dense::reml(th, *d)).epsilon(1e-10));
      CHECK(std::abs(restricted_loglik(th, *d) - dense::reml(th, *d)) < 1e-8);
    }
  }
}

TEST_CASE("variance collapse gives the OLS restricted likelihood") {
  const auto pop = toy::lmm_population({5, 6, 4}, 1.0, 1.0, 1.0, 4);
  const auto d = data_of(pop);
  const double s2 = 1.7;
  const Matrix& x = d->design;
  const Index n = x.rows();
  const Vector b = (x.transpose() * x).ldlt().solve(x.transpose() * d->y);
  const double rss = (d->y - x * b).squaredNorm();
  const double ols = -0.5 * (n * std::log(s2) + std::log((x.transpose() * x / s2).determinant()) +
                             rss / s2);
  CHECK(restricted_loglik(th3(0, 0, s2), *d) == doctest::Approx(ols).epsilon(1e-12));
}

TEST_CASE("translation invariance") {
  const auto pop = toy::lmm_population({4, 5, 6}, 0.5, 1.0, 1.0, 5);
  LmmData d = LmmData::from_sample(SampleView(pop));
  const auto th = th3(0.4, 0.9, 1.1);
  const double a = restricted_loglik(th, d);
  d.y.array() += 123.0;
  CHECK(restricted_loglik(th, d) == doctest::Approx(a).epsilon(1e-10));
}

TEST_CASE("rank deficient design") {
  // Everyone treated: the treatment column duplicates the intercept.
  Matrix x(4, 1);
  x << 1, 2, 3, 4;
  const auto pop = PopulationFrame::create({"a", "a", "b", "b"}, x, {1, 1, 1, 1},
                                           {1.0, 2.0, 3.0, 5.0}, std::vector<bool>(4, true));
  const auto d = data_of(pop);
  try {
    restricted_loglik(th3(0, 1, 1), *d);
    FAIL("expected rank error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kRank);
  }
}

TEST_CASE("GLS coefficients and normal equations") {
  const auto pop = toy::lmm_population({5, 7, 6, 4}, 1.0, 2.0, 1.0, 6);
  const auto d = data_of(pop);
  const auto th = th3(0.8, 1.6, 0.9);
  const Vector beta = gls_at(th, *d).beta;
  const Vector oracle = dense::gls_beta(th, *d);
  CHECK((beta - oracle).norm() / oracle.norm() < 1e-8);

  const auto fit = fit_reml(d);
  const auto p = dense::build(fit.theta, *d);
  const Vector ne = d->design.transpose() * p.v.inverse() * (d->y - d->design * fit.beta);
  CHECK(ne.cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("REML optimum agrees with a log-scale grid search") {
  const auto pop = toy::lmm_population({4, 4, 4, 4, 4}, 2.0, 3.0, 1.0, 21);
  const auto d = data_of(pop);
  const auto fit = fit_reml(d);
  REQUIRE(fit.converged);
  REQUIRE_FALSE(fit.boundary);

  const auto grid = oracle::reml_grid(*d);
  const Eigen::Vector3d zfit = fit.theta.as_vector().array().log();
  CHECK(fit.reml_value >= grid.value - 1e-9);
  CHECK((zfit - grid.log_theta).cwiseAbs().maxCoeff() <= 0.01);
}

TEST_CASE("balanced one-way layout against the closed-form REML") {
  // No treatment effect, treatment balanced within every area, sigma2_gamma = 0.
  const int m = 50;
  const int nj = 20;
  const int reps = 12;
  std::vector<double> du;
  std::vector<double> de;
  double mean_u = 0.0;
  double mean_e = 0.0;
  for (int r = 0; r < reps; ++r) {
    Rng rng(1000 + r);
    std::vector<std::string> labels;
    Matrix x(m * nj, 1);
    std::vector<int> w;
    std::vector<std::optional<double>> y;
    for (int j = 0; j < m; ++j) {
      const double u = rng.normal(0, std::sqrt(3.0));
      for (int i = 0; i < nj; ++i) {
        labels.push_back(std::to_string(j));
        x(j * nj + i, 0) = 0.0;
        w.push_back(i % 2);
        y.push_back(5.0 + u + rng.normal(0, std::sqrt(6.0)));
      }
    }
    // x carries no information; drop it by building a frame with zero
    // covariates so that the design is (1, w).
    const auto pop = PopulationFrame::create(labels, Matrix(m * nj, 0), w, y,
                                             std::vector<bool>(m * nj, true));
    const auto fit = fit_reml(SampleView(pop));

    // Closed form: within-area SS after the pooled w slope, and between-area MS.
    double ssw = 0.0;
    double ssb = 0.0;
    double grand = 0.0;
    std::vector<double> ybar(m);
    double sxy = 0.0;
    double sxx = 0.0;
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int i = 0; i < nj; ++i) s += *y[j * nj + i];
      ybar[j] = s / nj;
      grand += s;
      for (int i = 0; i < nj; ++i) {
        const double dw = w[j * nj + i] - 0.5;
        sxy += dw * (*y[j * nj + i] - ybar[j]);
        sxx += dw * dw;
      }
    }
    grand /= m * nj;
    const double slope = sxy / sxx;
    for (int j = 0; j < m; ++j) {
      ssb += nj * (ybar[j] - grand) * (ybar[j] - grand);
      for (int i = 0; i < nj; ++i) {
        const double e = *y[j * nj + i] - ybar[j] - slope * (w[j * nj + i] - 0.5);
        ssw += e * e;
      }
    }
    const double s2e = ssw / (m * (nj - 1) - 1);
    const double s2u = std::max(0.0, (ssb / (m - 1) - s2e) / nj);
    if (fit.theta.sigma2_gamma == 0.0) {
      CHECK(fit.theta.sigma2_eps == doctest::Approx(s2e).epsilon(1e-6));
      CHECK(fit.theta.sigma2_u == doctest::Approx(s2u).epsilon(1e-6));
    }
    du.push_back(fit.theta.sigma2_u - s2u);
    de.push_back(fit.theta.sigma2_eps - s2e);
    mean_u += fit.theta.sigma2_u / reps;
    mean_e += fit.theta.sigma2_eps / reps;
  }
  auto mc_check = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double a : v) mean += a / v.size();
    double var = 0.0;
    for (double a : v) var += (a - mean) * (a - mean) / (v.size() - 1);
    CHECK(std::abs(mean) <= 3.0 * std::sqrt(var / v.size()) + 1e-8);
  };
  mc_check(du);
  mc_check(de);
  // Sampling sd of the closed-form estimators is about 0.7 and 0.27.
  CHECK(std::abs(mean_u - 3.0) < 3.0 * 0.7 / std::sqrt(reps));
  CHECK(std::abs(mean_e - 6.0) < 3.0 * 0.27 / std::sqrt(reps));
}

TEST_CASE("exact linear outcome sits on the boundary") {
  auto pop = toy::lmm_population({5, 5, 5}, 0.0, 0.0, 1.0, 8);
  std::vector<std::optional<double>> y;
  for (Index i = 0; i < pop.size(); ++i) y.push_back(2.0 - pop.x()(i, 0) + 3.0 * pop.w(i));
  pop = pop.with_outcomes(y);
  const auto fit = fit_reml(SampleView(pop));
  CHECK(fit.boundary);
  CHECK(fit.theta.sigma2_gamma == 0.0);
  CHECK(fit.theta.sigma2_u == 0.0);
  CHECK(fit.theta.sigma2_eps == 0.0);
  CHECK(fit.beta[2] == doctest::Approx(3.0));
}

TEST_CASE("scale equivariance") {
  const auto pop = toy::lmm_population({6, 6, 6, 6, 6, 6}, 1.5, 2.0, 1.0, 31);
  const auto fit = fit_reml(SampleView(pop));
  const double c = 3.0;
  std::vector<std::optional<double>> y;
  for (Index i = 0; i < pop.size(); ++i) y.push_back(c * *pop.y(i));
  const auto fit2 = fit_reml(SampleView(pop.with_outcomes(y)));
  CHECK((fit2.beta - c * fit.beta).norm() < 1e-5 * fit2.beta.norm());
  CHECK((fit2.theta.as_vector() - c * c * fit.theta.as_vector()).norm() <
        1e-5 * fit2.theta.as_vector().norm());
  CHECK((fit2.gamma_hat - c * fit.gamma_hat).norm() < 1e-4 * (1.0 + fit2.gamma_hat.norm()));
  CHECK((fit2.u_hat - c * fit.u_hat).norm() < 1e-4 * (1.0 + fit2.u_hat.norm()));
}

TEST_CASE("slope predictions shrink with sigma2_gamma") {
  const auto pop = toy::lmm_population({6, 6, 6, 6}, 2.0, 1.0, 1.0, 12);
  LmmFit fit = fit_reml(SampleView(pop));
  double prev = 1e300;
  for (double s2g : {1.0, 0.1, 0.01, 1e-3, 1e-5}) {
    fit.theta.sigma2_gamma = s2g;
    fit.beta = gls_at(fit.theta, *fit.data).beta;
    predict_random_effects(fit);
    const double sup = fit.gamma_hat.cwiseAbs().maxCoeff();
    CHECK(sup < prev);
    prev = sup;
  }
  CHECK(prev < 1e-3);
}

TEST_CASE("random effect predictions follow the BLUP display") {
  const auto pop = toy::lmm_population({5, 4, 6}, 1.0, 1.0, 1.0, 14);
  const auto fit = fit_reml(SampleView(pop));
  const auto p = dense::build(fit.theta, *fit.data);
  const Vector r = p.v.inverse() * (p.y - p.x * fit.beta);
  const Vector g = fit.theta.sigma2_gamma * p.zg.transpose() * r;
  const Vector u = fit.theta.sigma2_u * p.zu.transpose() * r;
  CHECK((g - fit.gamma_hat).norm() < 1e-10);
  CHECK((u - fit.u_hat).norm() < 1e-10);
}

TEST_CASE("predict_outcomes plug-in") {
  Matrix x(3, 1);
  x << 3, 1, 2;
  const auto pop = PopulationFrame::create({"a", "a", "b"}, x, {1, 0, 0},
                                           {std::nullopt, std::nullopt, std::nullopt},
                                           {false, false, false});
  LmmFit fit;
  fit.beta = Vector(3);
  fit.beta << 1.0, 2.0, 0.75;
  fit.gamma_hat = Vector(2);
  fit.gamma_hat << 0.5, 0.0;
  fit.u_hat = Vector(2);
  fit.u_hat << -1.0, 0.0;
  const auto pred = predict_outcomes(fit, pop);
  // 1 + 2*3 + 0.75 + 0.5 - 1
  CHECK(pred.yhat[0] == doctest::Approx(7.25).epsilon(1e-15));
  CHECK(pred.yhat[1] == doctest::Approx(1.0 + 2.0 - 1.0));
  // Zero random effects and w = 0: the fixed part exactly.
  CHECK(pred.yhat[2] == 1.0 + 2.0 * 2.0);
}

TEST_CASE("area without sampled units predicts synthetically") {
  auto pop = toy::lmm_population({5, 5, 5}, 0.5, 1.0, 1.0, 15);
  std::vector<bool> mask(pop.size(), true);
  for (Index i : pop.units_in_area(2)) mask[i] = false;
  const auto s = pop.with_sample(mask);
  const auto fit = fit_reml(SampleView(s));
  CHECK(fit.empty_areas == std::vector<int>{2});
  CHECK(fit.gamma_hat[2] == 0.0);
  CHECK(fit.u_hat[2] == 0.0);
  const auto pred = predict_outcomes(fit, s);
  CHECK(pred.warnings.size() == 1);
  const Index i = s.units_in_area(2)[0];
  CHECK(pred.yhat[i] == doctest::Approx(outcome_design(s).row(i).dot(fit.beta)));
}

TEST_CASE("Fisher information against finite differences") {
  const auto pop = toy::lmm_population({4, 5, 3, 6}, 1.0, 2.0, 1.0, 16);
  const auto d = data_of(pop);
  const auto th = th3(0.7, 1.3, 0.9);
  const auto fi = fisher_information(th, *d);
  const double h = 1e-5;
  for (int s = 0; s < 3; ++s) {
    for (int t = 0; t < 3; ++t) {
      Eigen::Vector3d up = th.as_vector();
      Eigen::Vector3d dn = th.as_vector();
      up[t] += h;
      dn[t] -= h;
      const double fd = (dense::score_trace(VarianceComponents::from_vector(up), *d, s) -
                         dense::score_trace(VarianceComponents::from_vector(dn), *d, s)) /
                        (2 * h);
      CHECK(std::abs(fd - fi.matrix(s, t)) < 1e-4);
      CHECK(std::abs(fi.matrix(s, t) - fi.matrix(t, s)) < 1e-12);
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(fi.matrix);
  CHECK(es.eigenvalues().minCoeff() > 0.0);
  CHECK_FALSE(fi.singular);

  // The analytic score against differences of the criterion itself.
  const Eigen::Vector3d g = restricted_score(th, *d);
  for (int s = 0; s < 3; ++s) {
    Eigen::Vector3d up = th.as_vector();
    Eigen::Vector3d dn = th.as_vector();
    up[s] += h;
    dn[s] -= h;
    const double fd = (restricted_loglik(VarianceComponents::from_vector(up), *d) -
                       restricted_loglik(VarianceComponents::from_vector(dn), *d)) /
                      (2 * h);
    CHECK(std::abs(fd - g[s]) < 1e-5);
  }
}

TEST_CASE("no treated units leaves the slope direction unidentified") {
  Matrix x(8, 1);
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  std::vector<int> w = {0, 0, 0, 0, 0, 0, 0, 1};
  std::vector<std::optional<double>> y = {1.0, 2.5, 2.0, 4.0, 4.5, 7.0, 6.5, 9.0};
  // Only the unsampled last unit is treated.
  std::vector<bool> s = {true, true, true, true, true, true, true, false};
  const auto pop = PopulationFrame::create({"a", "a", "a", "a", "b", "b", "b", "b"}, x, w, y, s);
  LmmData d = LmmData::from_sample(SampleView(pop));
  // The w column is identically zero; drop it to keep the GLS solve full rank.
  d.design.conservativeResize(Eigen::NoChange, 2);
  const auto fi = fisher_information(th3(0.5, 1.0, 1.0), d);
  CHECK(fi.singular);
  CHECK(fi.matrix.row(0).cwiseAbs().maxCoeff() < 1e-14);
}
