#include "ipwsae/bootstrap.hpp"

#include <cmath>
#include <limits>

#include "ipwsae/mse.hpp"
#include "parallel.hpp"
#include "text.hpp"

namespace ipwsae {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct RepOutcome {
  Vector tau_star;
  Vector tau_hat;
  std::string failure;
};

std::vector<std::string> unit_labels(const PopulationFrame& pop) {
  std::vector<std::string> lab(static_cast<std::size_t>(pop.size()));
  for (Index i = 0; i < pop.size(); ++i) lab[static_cast<std::size_t>(i)] = pop.area_labels()[pop.area(i)];
  return lab;
}

void check_population(const PopulationFrame& pop, const BootstrapConfig& cfg) {
  if (cfg.B < 1) throw Error(ErrorKind::kContract, "bootstrap needs B >= 1");
  for (int j = 0; j < pop.num_areas(); ++j) {
    if (pop.population_count(j) == 0) {
      throw Error(ErrorKind::kValidation, "area " + pop.area_labels()[j] + " has no population units");
    }
  }
}

std::vector<Index> sample_sizes(const PopulationFrame& pop) {
  std::vector<Index> n;
  for (int j = 0; j < pop.num_areas(); ++j) n.push_back(pop.sample_count(j));
  return n;
}

// Builds the bootstrap population, redraws the sample and scores the
// refitted estimator against the same estimator with the true propensity.
template <class Estimate>
RepOutcome score(const PopulationFrame& pop, const std::vector<std::string>& labels, std::vector<int> w,
                 std::vector<std::optional<double>> y, const Vector& p_star, const Rng& sampler,
                 Estimate&& estimate) {
  RepOutcome out;
  auto star = PopulationFrame::create(labels, pop.x(), std::move(w), std::move(y),
                                      std::vector<bool>(static_cast<std::size_t>(pop.size()), false),
                                      pop.covariate_names());
  star = draw_sample(star, sample_sizes(pop), sampler);
  try {
    const auto [table, yhat] = estimate(star);
    const auto truth = ipw_pate(star, yhat, d_weights(star, clip_propensity(p_star, 1e-12)));
    const int m = pop.num_areas();
    out.tau_star.resize(m);
    out.tau_hat.resize(m);
    for (int j = 0; j < m; ++j) {
      out.tau_star[j] = truth.rows[j].estimate;
      out.tau_hat[j] = table.rows[j].estimate;
    }
  } catch (const Error& e) {
    out.failure = e.what();
  }
  return out;
}

BootstrapVariance reduce(const PopulationFrame& pop, const BootstrapConfig& cfg, const std::vector<RepOutcome>& reps,
                         std::vector<std::string> warnings) {
  const int m = pop.num_areas();
  BootstrapVariance v;
  v.area_labels = pop.area_labels();
  v.B = cfg.B;
  v.used.assign(static_cast<std::size_t>(m), 0);
  v.warnings = std::move(warnings);
  Vector sum = Vector::Zero(m);
  for (int b = 0; b < cfg.B; ++b) {
    const auto& r = reps[static_cast<std::size_t>(b)];
    if (!r.failure.empty()) {
      ++v.failed;
      for (int j = 0; j < m; ++j) v.log.push_back({b, j, kNaN, kNaN, "failed: " + r.failure});
      continue;
    }
    for (int j = 0; j < m; ++j) {
      const double t = r.tau_star[j], h = r.tau_hat[j];
      const bool ok = std::isfinite(t) && std::isfinite(h);
      if (ok) {
        sum[j] += (h - t) * (h - t);
        ++v.used[static_cast<std::size_t>(j)];
      }
      v.log.push_back({b, j, t, h, ok ? "ok" : "undefined"});
    }
  }
  if (static_cast<double>(v.failed) > cfg.max_failure_rate * cfg.B) {
    std::string first;
    for (const auto& r : reps) {
      if (!r.failure.empty()) {
        first = r.failure;
        break;
      }
    }
    throw Error(ErrorKind::kBootstrap, std::to_string(v.failed) + " of " + std::to_string(cfg.B) +
                                           " bootstrap replications failed; first: " + first);
  }
  if (v.failed > 0) v.warnings.push_back(std::to_string(v.failed) + " bootstrap replications failed and were dropped");
  v.var.resize(m);
  for (int j = 0; j < m; ++j) {
    const int u = v.used[static_cast<std::size_t>(j)];
    v.var[j] = u > 0 ? sum[j] / u : kNaN;
    if (u == 0) v.warnings.push_back("area " + v.area_labels[j] + ": no usable bootstrap replication");
  }
  return v;
}

double mean_of(const Vector& v, const std::vector<bool>& use) {
  double s = 0.0;
  int n = 0;
  for (Index i = 0; i < v.size(); ++i) {
    if (use[static_cast<std::size_t>(i)]) {
      s += v[i];
      ++n;
    }
  }
  return n > 0 ? s / n : 0.0;
}

}  // namespace

BootstrapVariance parametric_bootstrap_eblup(const LmmFit& lmm, const GlmmFit& glmm, const PopulationFrame& pop,
                                             const BootstrapConfig& cfg) {
  check_population(pop, cfg);
  const int p = pop.num_covariates();
  if (lmm.beta.size() != p + 2 || glmm.alpha.size() != p + 1) {
    throw Error(ErrorKind::kContract, "fits do not match the population covariates");
  }
  const int m = pop.num_areas();
  const Matrix X = propensity_design(pop);
  const Vector beta_x = lmm.beta.head(p + 1);
  const double beta_w = lmm.beta[p + 1];
  const double sd_eps = std::sqrt(std::max(0.0, lmm.theta.sigma2_eps));
  const double sd_u = std::sqrt(std::max(0.0, lmm.theta.sigma2_u));
  const double sd_gamma = std::sqrt(std::max(0.0, lmm.theta.sigma2_gamma));
  const double sd_nu = std::sqrt(std::max(0.0, glmm.sigma2_nu));
  const auto labels = unit_labels(pop);
  const Rng master(cfg.seed);
  std::vector<RepOutcome> reps(static_cast<std::size_t>(cfg.B));

  detail::parallel_for(cfg.B, cfg.workers, [&](int b) {
    const Rng rep = master.substream(static_cast<std::uint64_t>(b));
    Rng g = rep.substream(0);
    std::vector<int> w(static_cast<std::size_t>(pop.size()));
    std::vector<std::optional<double>> y(static_cast<std::size_t>(pop.size()));
    Vector p_star(pop.size());
    for (int j = 0; j < m; ++j) {
      const double nu = g.normal(0.0, sd_nu);
      const double u = g.normal(0.0, sd_u);
      const double gamma = g.normal(0.0, sd_gamma);
      for (Index i : pop.units_in_area(j)) {
        p_star[i] = logistic(X.row(i).dot(glmm.alpha) + nu);
        const int wi = g.bernoulli(p_star[i]) ? 1 : 0;
        w[static_cast<std::size_t>(i)] = wi;
        y[static_cast<std::size_t>(i)] = X.row(i).dot(beta_x) + wi * (beta_w + gamma) + u + g.normal(0.0, sd_eps);
      }
    }
    reps[static_cast<std::size_t>(b)] =
        score(pop, labels, std::move(w), std::move(y), p_star, rep.substream(1), [&](const PopulationFrame& s) {
          auto est = estimate_ipw_eblup(s, cfg.estimation);
          return std::make_pair(std::move(est.table), std::move(est.yhat));
        });
  });
  return reduce(pop, cfg, reps, {});
}

BlockResiduals block_residuals(const MqEnsemble& ens) {
  const LmmData& d = ens.data();
  const int m = d.num_areas();
  BlockResiduals br;
  br.r = d.y - d.design * ens.median_fit().beta;
  br.gamma = Vector::Zero(m);
  br.u = Vector::Zero(m);
  br.eps = Vector::Zero(d.y.size());
  br.slope_restricted.assign(static_cast<std::size_t>(m), false);
  br.has_sample.assign(static_cast<std::size_t>(m), false);
  std::vector<double> inv_sww, c;
  Index params = 0;
  for (int j = 0; j < m; ++j) {
    const Index s = d.start[j], n = d.rows(j);
    if (n == 0) continue;
    br.has_sample[static_cast<std::size_t>(j)] = true;
    const double wbar = d.treatment.segment(s, n).mean();
    const double rbar = br.r.segment(s, n).mean();
    double sww = 0.0, swr = 0.0;
    for (Index k = s; k < s + n; ++k) {
      sww += (d.treatment[k] - wbar) * (d.treatment[k] - wbar);
      swr += (d.treatment[k] - wbar) * (br.r[k] - rbar);
    }
    if (sww == 0.0) {
      // No treated (or no control) sampled units: the slope is not identified.
      br.slope_restricted[static_cast<std::size_t>(j)] = true;
      br.u[j] = rbar;
      c.push_back(1.0 / static_cast<double>(n));
      params += 1;
    } else {
      br.gamma[j] = swr / sww;
      br.u[j] = rbar - br.gamma[j] * wbar;
      inv_sww.push_back(1.0 / sww);
      c.push_back(1.0 / static_cast<double>(n) + wbar * wbar / sww);
      params += 2;
    }
    for (Index k = s; k < s + n; ++k) br.eps[k] = br.r[k] - br.u[j] - d.treatment[k] * br.gamma[j];
  }

  // Method of moments: within-area residual variance, then between-area
  // variances net of their sampling noise.
  const Index dof = d.y.size() - params;
  if (dof > 0) {
    br.sigma2_eps = br.eps.squaredNorm() / static_cast<double>(dof);
  } else {
    br.warnings.push_back("no residual degrees of freedom for the unit error variance; set to 0");
  }
  auto between = [&](const Vector& v, const std::vector<bool>& use, const std::vector<double>& noise,
                     const char* name) {
    const double mean = mean_of(v, use);
    double ss = 0.0;
    int k = 0;
    for (Index j = 0; j < v.size(); ++j) {
      if (!use[static_cast<std::size_t>(j)]) continue;
      ss += (v[j] - mean) * (v[j] - mean);
      ++k;
    }
    if (k < 2) {
      br.warnings.push_back(std::string("fewer than two areas identify ") + name + "; variance set to 0");
      return 0.0;
    }
    double avg_noise = 0.0;
    for (double x : noise) avg_noise += x;
    avg_noise /= static_cast<double>(noise.size());
    const double s2 = ss / (k - 1) - br.sigma2_eps * avg_noise;
    if (s2 < 0.0) {
      br.warnings.push_back(std::string("moment estimate of the ") + name + " variance is negative; truncated at 0");
      return 0.0;
    }
    return s2;
  };
  std::vector<bool> slope_use(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    slope_use[static_cast<std::size_t>(j)] =
        br.has_sample[static_cast<std::size_t>(j)] && !br.slope_restricted[static_cast<std::size_t>(j)];
  }
  br.sigma2_gamma = between(br.gamma, slope_use, inv_sww, "random slope");
  br.sigma2_u = between(br.u, br.has_sample, c, "random intercept");
  return br;
}

Vector center_rescale(const Vector& v, const std::vector<bool>& use, double sigma2) {
  if (static_cast<Index>(use.size()) != v.size()) throw Error(ErrorKind::kContract, "mask length mismatch");
  const double mean = mean_of(v, use);
  Vector c = Vector::Zero(v.size());
  double ms = 0.0;
  int n = 0;
  for (Index i = 0; i < v.size(); ++i) {
    if (!use[static_cast<std::size_t>(i)]) continue;
    c[i] = v[i] - mean;
    ms += c[i] * c[i];
    ++n;
  }
  if (n == 0 || ms == 0.0) return Vector::Zero(v.size());
  ms /= n;
  return c * std::sqrt(std::max(0.0, sigma2) / ms);
}

BootstrapVariance block_bootstrap_mq(const PopulationFrame& pop, const MqEnsemble& outcome,
                                     const MqBinEnsemble& propensity, const BootstrapConfig& cfg) {
  check_population(pop, cfg);
  const int m = pop.num_areas();
  const int p = pop.num_covariates();
  const LmmData& d = outcome.data();
  if (d.num_areas() != m || static_cast<int>(propensity.q_area().size()) != m) {
    throw Error(ErrorKind::kContract, "ensembles and population disagree on the number of areas");
  }
  const Vector beta = outcome.median_fit().beta;
  if (beta.size() != p + 2) throw Error(ErrorKind::kContract, "outcome fit does not match the population covariates");

  auto br = block_residuals(outcome);
  std::vector<std::string> warnings = br.warnings;
  const Vector gamma_cs = center_rescale(br.gamma, br.has_sample, br.sigma2_gamma);
  const Vector u_cs = center_rescale(br.u, br.has_sample, br.sigma2_u);
  const Vector eps_cs =
      center_rescale(br.eps, std::vector<bool>(static_cast<std::size_t>(br.eps.size()), true), br.sigma2_eps);

  // Pseudo-random propensity effects from the area M-quantile orders.
  const Matrix X = propensity_design(pop);
  const Vector& alpha_med = propensity.fit_at(0.5).alpha;
  Vector g(m);
  for (int j = 0; j < m; ++j) {
    Vector xbar = Vector::Zero(p + 1);
    for (Index i : pop.units_in_area(j)) xbar += X.row(i).transpose();
    xbar /= static_cast<double>(pop.population_count(j));
    g[j] = xbar.dot(propensity.area_fit(j).alpha - alpha_med);
  }
  const Vector g_c = g.array() - g.mean();

  std::vector<int> pool, donors;
  for (int j = 0; j < m; ++j) {
    if (br.has_sample[static_cast<std::size_t>(j)]) pool.push_back(j);
    if (d.rows(j) > 0) donors.push_back(j);
  }
  if (pool.empty()) throw Error(ErrorKind::kValidation, "block bootstrap needs sampled units");

  const Vector beta_x = beta.head(p + 1);
  const double gamma_med = beta[p + 1];
  const auto labels = unit_labels(pop);
  const Rng master(cfg.seed);
  std::vector<RepOutcome> reps(static_cast<std::size_t>(cfg.B));

  detail::parallel_for(cfg.B, cfg.workers, [&](int b) {
    const Rng rep = master.substream(static_cast<std::uint64_t>(b));
    Rng r = rep.substream(0);
    std::vector<int> w(static_cast<std::size_t>(pop.size()));
    std::vector<std::optional<double>> y(static_cast<std::size_t>(pop.size()));
    Vector p_star(pop.size());
    for (int j = 0; j < m; ++j) {
      const double gamma = gamma_cs[pool[r.index(pool.size())]];
      const double u = u_cs[pool[r.index(pool.size())]];
      const int h = donors[r.index(donors.size())];
      const double gj = g_c[static_cast<Index>(r.index(static_cast<std::size_t>(m)))];
      for (Index i : pop.units_in_area(j)) {
        p_star[i] = logistic(X.row(i).dot(alpha_med) + gj);
        const int wi = r.bernoulli(p_star[i]) ? 1 : 0;
        const double e = eps_cs[d.start[h] + static_cast<Index>(r.index(static_cast<std::size_t>(d.rows(h))))];
        w[static_cast<std::size_t>(i)] = wi;
        y[static_cast<std::size_t>(i)] = X.row(i).dot(beta_x) + wi * (gamma_med + gamma) + u + e;
      }
    }
    reps[static_cast<std::size_t>(b)] =
        score(pop, labels, std::move(w), std::move(y), p_star, rep.substream(1), [&](const PopulationFrame& s) {
          auto est = estimate_ipw_mq(s, cfg.estimation);
          return std::make_pair(std::move(est.table), std::move(est.yhat));
        });
  });
  return reduce(pop, cfg, reps, std::move(warnings));
}

void write_bootstrap_log_csv(std::ostream& out, const BootstrapVariance& v) {
  out << "rep,area,tau_star,tau_hat_star,status\n";
  for (const auto& e : v.log) {
    out << e.rep + 1 << ',' << detail::csv_field(v.area_labels[static_cast<std::size_t>(e.area)]) << ','
        << detail::fmt(e.tau_star, 12) << ',' << detail::fmt(e.tau_hat_star, 12) << ',' << detail::csv_field(e.status)
        << '\n';
  }
}

void add_bootstrap_variance(AreaEffectTable& table, const BootstrapVariance& v) {
  if (static_cast<Index>(table.rows.size()) != v.var.size()) {
    throw Error(ErrorKind::kContract, "bootstrap variance and table disagree on the number of areas");
  }
  for (std::size_t j = 0; j < table.rows.size(); ++j) {
    auto& row = table.rows[j];
    const double add = v.var[static_cast<Index>(j)];
    if (!row.mse || !std::isfinite(add)) continue;
    row.mse = *row.mse + add;
    if (std::isfinite(row.estimate) && std::isfinite(*row.mse)) {
      row.interval = confidence_interval(row.estimate, *row.rmse());
    }
  }
}

}  // namespace ipwsae
