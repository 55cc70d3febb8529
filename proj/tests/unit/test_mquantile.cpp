#include <doctest.h>

#include <cmath>

#include "ipwsae/mquantile.hpp"
#include "ipwsae/optim.hpp"
#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace ipwsae;

using oracle::Xy;

namespace {

Xy dataset(int n, std::uint64_t seed, bool symmetric = true) { return oracle::mq_dataset(n, seed, symmetric); }

}  // namespace

TEST_CASE("influence function shape") {
  CHECK(psi_q(0.5, 0.7, 1.345) == doctest::Approx(2 * 0.5 * 0.7));
  CHECK(psi_q(-0.5, 0.7, 1.345) == doctest::Approx(2 * -0.5 * 0.3));
  CHECK(psi_q(5.0, 0.5, 1.345) == doctest::Approx(1.345));
  CHECK(psi_q_prime(5.0, 0.5, 1.345) == 0.0);
  CHECK(psi_q_prime(-1.0, 0.2, 1.345) == doctest::Approx(1.6));
  // rho' = psi away from the kinks.
  for (double u : {-3.0, -0.7, 0.4, 2.2}) {
    const double h = 1e-6;
    CHECK((rho_q(u + h, 0.3, 1.345) - rho_q(u - h, 0.3, 1.345)) / (2 * h) ==
          doctest::Approx(psi_q(u, 0.3, 1.345)).epsilon(1e-6));
  }
}

TEST_CASE("large tuning constant gives least squares") {
  const auto d = dataset(40, 1);
  MqOptions o;
  o.c = 1e6;
  const auto fit = fit_mq_linear(d.x, d.y, 0.5, o);
  const Vector ols = (d.x.transpose() * d.x).ldlt().solve(d.x.transpose() * d.y);
  CHECK((fit.beta - ols).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("q = 0.75 against direct loss minimisation") {
  const auto d = dataset(30, 2, false);
  const auto fit = fit_mq_linear(d.x, d.y, 0.75);
  REQUIRE(fit.converged);
  const double s = fit.scale;
  const Vector direct = oracle::mq_direct(d, 0.75, s);
  CHECK((direct - fit.beta).cwiseAbs().maxCoeff() < 1e-5);
  // The fit's own estimating equation is solved as well.
  Vector ee = Vector::Zero(3);
  const Vector r = d.y - d.x * fit.beta;
  for (Index i = 0; i < r.size(); ++i) ee += psi_q(r[i] / s, 0.75, 1.345) * d.x.row(i).transpose();
  CHECK(ee.norm() < 1e-6);
}

TEST_CASE("duplicating every observation leaves the fit unchanged") {
  const auto d = dataset(25, 3);
  Matrix x2(50, 3);
  Vector y2(50);
  x2 << d.x, d.x;
  y2 << d.y, d.y;
  const auto a = fit_mq_linear(d.x, d.y, 0.3);
  const auto b = fit_mq_linear(x2, y2, 0.3);
  CHECK((a.beta - b.beta).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(a.scale == doctest::Approx(b.scale));
}

TEST_CASE("exact fit floors the scale") {
  auto d = dataset(20, 4);
  d.y = d.x * Vector::LinSpaced(3, 1.0, 3.0);
  const auto fit = fit_mq_linear(d.x, d.y, 0.4);
  CHECK(fit.scale_floored);
  CHECK(fit.scale == 1e-12);
  CHECK((fit.beta - Vector::LinSpaced(3, 1.0, 3.0)).norm() < 1e-8);
}

TEST_CASE("invalid q is a contract error") {
  const auto d = dataset(20, 4);
  CHECK_THROWS_AS(fit_mq_linear(d.x, d.y, 1.0), Error);
}

TEST_CASE("unit coefficients by inversion") {
  const std::vector<double> grid = {0.25, 0.5, 0.75};
  Matrix f(5, 3);
  f << 1.0, 2.0, 3.0,   //
      0.0, 1.0, 4.0,    //
      -1.0, 0.0, 1.0,   //
      10.0, 11.0, 12.0, //
      5.0, 5.5, 6.5;
  Vector y(5);
  y << 2.0, 2.5, -3.0, 11.5, 6.0;
  const Vector q = unit_q_coefficients(f, y, grid);
  CHECK(q[0] == doctest::Approx(0.5));                          // on the median plane
  CHECK(q[1] == doctest::Approx(0.5 + 1.5 / 3.0 * 0.25));       // between 1 and 4
  CHECK(q[2] == doctest::Approx(0.25));                         // clamped below
  CHECK(q[3] == doctest::Approx(0.5 + 0.5 * 0.25));             // 11.5 halfway to 12
  CHECK(q[4] == doctest::Approx(0.5 + (0.5 / 1.0) * 0.25));     // 6 between 5.5 and 6.5
  Vector above(5);
  above << 9, 9, 9, 99, 9;
  CHECK(unit_q_coefficients(f, above, grid)[3] == doctest::Approx(0.75));
}

TEST_CASE("crossing fitted values are repaired") {
  const std::vector<double> grid = {0.25, 0.5, 0.75};
  Matrix f(1, 3);
  f << 1.0, 3.0, 2.0;  // isotonic repair gives 1, 2.5, 2.5
  Vector y(1);
  y << 1.75;
  std::vector<Index> repaired;
  const Vector q = unit_q_coefficients(f, y, grid, &repaired);
  CHECK(repaired == std::vector<Index>{0});
  CHECK(q[0] == doctest::Approx(0.25 + 0.75 / 1.5 * 0.25));
}

TEST_CASE("area averages") {
  Vector q(5);
  q << 0.5, 0.5, 0.2, 0.8, 0.3;
  auto a = area_q(q, 0, 2);
  CHECK(a.q_bar == 0.5);
  CHECK(a.v2 == 0.0);
  a = area_q(q, 2, 4);
  CHECK(a.q_bar == doctest::Approx(0.5));
  CHECK(a.v2 == doctest::Approx(0.09));
  a = area_q(q, 4, 4);
  CHECK(a.synthetic);
  CHECK(a.q_bar == 0.5);
}

TEST_CASE("ensemble invariants and predictions") {
  const auto pop = toy::lmm_population({20, 20, 20, 20, 20, 20}, 0.0, 2.0, 1.0, 41);
  std::vector<bool> mask(pop.size(), false);
  for (int j = 0; j < pop.num_areas(); ++j) {
    for (int k = 0; k < 10; ++k) mask[pop.units_in_area(j)[k]] = true;
  }
  const auto s = pop.with_sample(mask);
  const auto ens = MqEnsemble::fit(SampleView(s));
  CHECK(ens.grid().size() == 49);
  CHECK(ens.q_unit().minCoeff() >= 0.02);
  CHECK(ens.q_unit().maxCoeff() <= 0.98);
  CHECK(std::abs(ens.q_unit().mean() - 0.5) < 0.05);

  // Monotone in q for every population unit.
  const Matrix x = outcome_design(s);
  for (std::size_t g = 1; g < ens.grid().size(); ++g) {
    const Vector diff = x * (ens.grid_fits()[g].beta - ens.grid_fits()[g - 1].beta);
    if (ens.repaired_units().empty()) CHECK(diff.minCoeff() > -1e-9);
  }

  const auto pred = mq_predict_outcomes(ens, s);
  for (int j = 0; j < s.num_areas(); ++j) {
    const Vector& b = ens.area_fit(j).beta;
    const Index i = s.units_in_area(j).back();
    CHECK(pred.yhat[i] == doctest::Approx(x.row(i).dot(b)).epsilon(1e-14));
    const auto& aq = ens.q_area()[j];
    double mean = 0.0;
    for (Index r = ens.data().start[j]; r < ens.data().start[j + 1]; ++r) mean += ens.q_unit()[r];
    CHECK(aq.q_bar == doctest::Approx(mean / 10));
  }
  // Grid orders return the grid fit; 0.5 is the median fit.
  CHECK(&ens.fit_at(0.5) == &ens.median_fit());
  CHECK((ens.fit_at(ens.grid()[10]).beta - ens.grid_fits()[10].beta).norm() == 0.0);
  const auto& between = ens.fit_at(0.511);
  CHECK(between.beta[0] >= std::min(ens.grid_fits()[24].beta[0], ens.grid_fits()[25].beta[0]) - 1e-6);
}

TEST_CASE("median fit is symmetric under reflection") {
  const auto d = dataset(40, 6);
  const Vector det = d.x * Vector::LinSpaced(3, 2.0, 3.0);
  const Vector reflected = 2.0 * det - d.y;
  const auto a = fit_mq_linear(d.x, d.y, 0.5);
  const auto b = fit_mq_linear(d.x, reflected, 0.5);
  CHECK((a.beta + b.beta - 2.0 * Vector::LinSpaced(3, 2.0, 3.0)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("median fit resists a gross outlier better than OLS") {
  auto d = dataset(40, 7);
  auto ols = [](const Xy& v) { return Vector((v.x.transpose() * v.x).ldlt().solve(v.x.transpose() * v.y)); };
  const Vector b0 = fit_mq_linear(d.x, d.y, 0.5).beta;
  const Vector o0 = ols(d);
  d.y[5] = 1e6;
  const Vector b1 = fit_mq_linear(d.x, d.y, 0.5).beta;
  const Vector o1 = ols(d);
  CHECK((b1 - b0).norm() < (o1 - o0).norm());
}

TEST_CASE("binary fit reduces to logistic ML without robustness") {
  Rng rng(9);
  const int n = 200;
  Matrix x(n, 2);
  Vector w(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = rng.uniform();
    w[i] = rng.bernoulli(logistic(-1 + 0.8 * x(i, 1)));
  }
  MqOptions o;
  o.c = 1e6;
  const auto fit = fit_mq_binary(x, w, 0.5, o);
  Vector b = Vector::Zero(2);
  for (int it = 0; it < 50; ++it) {
    const Vector p = (x * b).unaryExpr([](double e) { return 1 / (1 + std::exp(-e)); });
    const Matrix h = x.transpose() * (p.array() * (1 - p.array())).matrix().asDiagonal() * x;
    b += h.inverse() * x.transpose() * (w - p);
  }
  CHECK((fit.alpha - b).cwiseAbs().maxCoeff() < 1e-4);

  const auto f6 = fit_mq_binary(x, w, 0.6);
  CHECK(mq_binary_equation(x, w, f6.alpha, 0.6, 1.345).norm() < 1e-8);
  const Vector p = (x * f6.alpha).unaryExpr([](double e) { return logistic(e); });
  CHECK(p.minCoeff() > 0.0);
  CHECK(p.maxCoeff() < 1.0);
  // A higher order shifts probabilities up.
  const auto f4 = fit_mq_binary(x, w, 0.4);
  CHECK((x * f6.alpha).mean() > (x * f4.alpha).mean());
}

TEST_CASE("binary ensemble and propensity predictions") {
  Rng rng(10);
  std::vector<std::string> labels;
  Matrix x(120, 1);
  std::vector<int> w;
  for (int i = 0; i < 120; ++i) {
    labels.push_back("a" + std::to_string(i / 30));
    x(i, 0) = rng.uniform();
    w.push_back(rng.bernoulli(logistic(-0.5 + x(i, 0))) ? 1 : 0);
  }
  const auto pop = PopulationFrame::create(labels, x, w, std::vector<std::optional<double>>(120, 0.0),
                                           std::vector<bool>(120, true));
  auto ens = MqBinEnsemble::fit(SampleView(pop));
  for (Index r = 0; r < ens.q_unit().size(); ++r) {
    CHECK(std::find(ens.grid().begin(), ens.grid().end(), ens.q_unit()[r]) != ens.grid().end());
  }
  // Hand coefficients at q = 0.5 for every area.
  ens.set_area_q(std::vector<AreaQ>(4, AreaQ{0.5, 0.0, false}));
  const Vector e = mq_predict_propensity(ens, pop);
  const Vector& a = ens.fit_at(0.5).alpha;
  for (Index i : {0, 45, 119}) {
    CHECK(e[i] == doctest::Approx(1.0 / (1.0 + std::exp(-(a[0] + a[1] * x(i, 0))))).epsilon(1e-14));
  }
}
