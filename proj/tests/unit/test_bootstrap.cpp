#include <cmath>
#include <sstream>

#include "doctest.h"
#include "ipwsae/bootstrap.hpp"
#include "ipwsae/mse.hpp"
#include "ipwsae/simgen.hpp"

using namespace ipwsae;

namespace {

PopulationFrame sampled_population(std::uint64_t seed, int m = 6, Index N = 40, Index n = 8) {
  auto spec = ScenarioSpec::parse("1a");
  spec.m = m;
  spec.N = N;
  spec.n = n;
  Rng rng(seed);
  const auto sp = generate_population(spec, rng);
  return draw_sample(sp.pop, std::vector<Index>(static_cast<std::size_t>(m), n), rng.substream(7));
}

// Area "b" has no treated units in its sample.
PopulationFrame zero_treated_population() {
  auto pop = sampled_population(51, 4, 30, 6);
  std::vector<bool> s = pop.sample_mask();
  const auto& units = pop.units_in_area(1);
  for (Index i : units) s[static_cast<std::size_t>(i)] = false;
  int taken = 0;
  for (Index i : units) {
    if (pop.w(i) == 0 && taken < 6) {
      s[static_cast<std::size_t>(i)] = true;
      ++taken;
    }
  }
  return pop.with_sample(s);
}

}  // namespace

TEST_CASE("parametric bootstrap of a degenerate model has zero error") {
  // y depends on w only and every variance component is 0, so each
  // replication reproduces y exactly and the weights cancel.
  const auto pop = sampled_population(3);
  LmmFit lmm;
  lmm.beta = Vector::Zero(4);
  lmm.beta << 5.0, 0.0, 0.0, 2.0;
  lmm.theta = {0.0, 0.0, 0.0};
  GlmmFit glmm;
  glmm.alpha = Vector::Zero(3);
  glmm.sigma2_nu = 0.0;
  BootstrapConfig cfg;
  cfg.B = 4;
  cfg.seed = 9;
  const auto v = parametric_bootstrap_eblup(lmm, glmm, pop, cfg);
  CHECK(v.failed == 0);
  for (Index j = 0; j < v.var.size(); ++j) {
    if (v.used[static_cast<std::size_t>(j)] > 0) CHECK(v.var[j] < 1e-16);
  }
}

TEST_CASE("parametric bootstrap is deterministic across worker counts") {
  const auto pop = sampled_population(4);
  const auto est = estimate_ipw_eblup(pop);
  BootstrapConfig cfg;
  cfg.B = 6;
  cfg.seed = 77;
  const auto a = parametric_bootstrap_eblup(est.lmm, est.glmm, pop, cfg);
  const auto b = parametric_bootstrap_eblup(est.lmm, est.glmm, pop, cfg);
  cfg.workers = 3;
  const auto c = parametric_bootstrap_eblup(est.lmm, est.glmm, pop, cfg);
  std::ostringstream sa, sb, sc;
  write_bootstrap_log_csv(sa, a);
  write_bootstrap_log_csv(sb, b);
  write_bootstrap_log_csv(sc, c);
  CHECK(sa.str() == sb.str());
  CHECK(sa.str() == sc.str());
  for (Index j = 0; j < a.var.size(); ++j) {
    CHECK(a.var[j] >= 0.0);
    CHECK(a.var[j] == c.var[j]);
  }
  CHECK(a.log.size() == 6u * 6u);
  CHECK(sa.str().rfind("rep,area,tau_star,tau_hat_star,status\n1,area1,", 0) == 0);
}

TEST_CASE("bootstrap failure threshold") {
  const auto pop = sampled_population(5);
  const auto est = estimate_ipw_eblup(pop);
  BootstrapConfig cfg;
  cfg.B = 3;
  cfg.estimation.clip = 0.7;  // every refit rejects this
  try {
    parametric_bootstrap_eblup(est.lmm, est.glmm, pop, cfg);
    FAIL("expected a bootstrap error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kBootstrap);
    CHECK(std::string(e.what()).find("3 of 3") == 0);
  }
  cfg.B = 0;
  CHECK_THROWS_AS(parametric_bootstrap_eblup(est.lmm, est.glmm, pop, cfg), Error);
}

TEST_CASE("block residuals restrict the slope of a zero-treated area") {
  const auto pop = zero_treated_population();
  const auto ens = MqEnsemble::fit(SampleView(pop));
  const auto br = block_residuals(ens);
  const auto& d = ens.data();
  CHECK(br.slope_restricted[1]);
  CHECK(br.gamma[1] == 0.0);
  CHECK(br.u[1] == doctest::Approx(br.r.segment(d.start[1], d.rows(1)).mean()).epsilon(1e-14));
  CHECK_FALSE(br.slope_restricted[0]);
  // The decomposition reproduces the marginal residuals.
  for (int j = 0; j < d.num_areas(); ++j) {
    for (Index k = d.start[j]; k < d.start[j + 1]; ++k) {
      CHECK(br.r[k] == doctest::Approx(br.u[j] + d.treatment[k] * br.gamma[j] + br.eps[k]).epsilon(1e-12));
    }
    // Within-area least squares leaves residuals summing to zero.
    CHECK(std::abs(br.eps.segment(d.start[j], d.rows(j)).sum()) < 1e-9);
  }
  CHECK(br.sigma2_eps > 0.0);
  CHECK(br.sigma2_u >= 0.0);
  CHECK(br.sigma2_gamma >= 0.0);
}

TEST_CASE("centered and rescaled residuals match the moment estimates") {
  Vector v(5);
  v << 1.0, 4.0, -2.0, 7.0, 0.5;
  std::vector<bool> all(5, true);
  const Vector c = center_rescale(v, all, 2.5);
  CHECK(std::abs(c.sum()) < 1e-12);
  CHECK(std::abs(c.squaredNorm() / 5.0 - 2.5) < 1e-10);
  std::vector<bool> some = {true, false, true, true, false};
  const Vector s = center_rescale(v, some, 1.0);
  CHECK(s[1] == 0.0);
  CHECK(s[4] == 0.0);
  CHECK(std::abs(s.sum()) < 1e-12);
  CHECK(std::abs(s.squaredNorm() / 3.0 - 1.0) < 1e-10);
  CHECK(center_rescale(Vector::Constant(3, 2.0), std::vector<bool>(3, true), 1.0).isZero());

  const auto pop = zero_treated_population();
  const auto ens = MqEnsemble::fit(SampleView(pop));
  const auto br = block_residuals(ens);
  const Vector e = center_rescale(br.eps, std::vector<bool>(static_cast<std::size_t>(br.eps.size()), true),
                                  br.sigma2_eps);
  CHECK(std::abs(e.squaredNorm() / static_cast<double>(e.size()) - br.sigma2_eps) < 1e-10);
  const Vector u = center_rescale(br.u, br.has_sample, br.sigma2_u);
  if (br.sigma2_u > 0.0) CHECK(std::abs(u.squaredNorm() / static_cast<double>(u.size()) - br.sigma2_u) < 1e-10);
}

TEST_CASE("block bootstrap runs with a zero-treated area") {
  const auto pop = zero_treated_population();
  const auto est = estimate_ipw_mq(pop);
  BootstrapConfig cfg;
  cfg.B = 5;
  cfg.seed = 8;
  cfg.method = BootstrapMethod::kBlock;
  const auto v = block_bootstrap_mq(pop, est.outcome, est.propensity, cfg);
  CHECK(v.failed == 0);
  CHECK(v.var.size() == 4);
  for (Index j = 0; j < v.var.size(); ++j) {
    if (v.used[static_cast<std::size_t>(j)] > 0) {
      CHECK(std::isfinite(v.var[j]));
      CHECK(v.var[j] >= 0.0);
    }
  }
  const auto again = block_bootstrap_mq(pop, est.outcome, est.propensity, cfg);
  CHECK(again.var.cwiseEqual(v.var).count() + (again.var.array().isNaN() && v.var.array().isNaN()).count() == 4);
  cfg.workers = 2;
  const auto par = block_bootstrap_mq(pop, est.outcome, est.propensity, cfg);
  std::ostringstream a, b;
  write_bootstrap_log_csv(a, v);
  write_bootstrap_log_csv(b, par);
  CHECK(a.str() == b.str());
}

TEST_CASE("bootstrap variance adds to the analytic mse") {
  AreaEffectTable t;
  t.rows.resize(3);
  t.rows[0].estimate = 1.0;
  t.rows[0].mse = 4.0;
  t.rows[1].estimate = std::numeric_limits<double>::quiet_NaN();
  t.rows[1].mse = 1.0;
  t.rows[2].estimate = 2.0;
  BootstrapVariance v;
  v.var = Vector(3);
  v.var << 5.0, 1.0, 3.0;
  add_bootstrap_variance(t, v);
  CHECK(*t.rows[0].mse == 9.0);
  CHECK(t.rows[0].interval->first == doctest::Approx(-5.0));
  CHECK(t.rows[0].interval->second == doctest::Approx(7.0));
  CHECK(*t.rows[1].mse == 2.0);
  CHECK_FALSE(t.rows[1].interval);
  CHECK_FALSE(t.rows[2].mse);
  v.var = Vector::Zero(2);
  CHECK_THROWS_AS(add_bootstrap_variance(t, v), Error);
}
