#include "ipwsae/glmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ipwsae/optim.hpp"

namespace ipwsae {

namespace {

constexpr double kSeparationEta = 30.0;

// log(1 + exp(eta)) without overflow.
double log1pexp(double eta) { return eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

struct AreaMode {
  double nu = 0.0;
  double value = 0.0;  // conditional loglik minus the penalty at the mode
  double h = 0.0;      // sum p(1-p) at the mode
};

// Posterior mode of nu_j for offsets eta0 = x'alpha by safeguarded Newton.
AreaMode area_mode(const Vector& eta0, const Vector& w, double sigma2, double nu0) {
  AreaMode am;
  auto objective = [&](double nu) {
    double f = 0.0;
    for (Index i = 0; i < eta0.size(); ++i) {
      const double eta = eta0[i] + nu;
      f += w[i] * eta - log1pexp(eta);
    }
    return sigma2 > 0 ? f - 0.5 * nu * nu / sigma2 : f;
  };
  double nu = sigma2 > 0 ? nu0 : 0.0;
  double f = objective(nu);
  if (sigma2 > 0) {
    for (int it = 0; it < 100; ++it) {
      double g = -nu / sigma2;
      double h = 1.0 / sigma2;
      for (Index i = 0; i < eta0.size(); ++i) {
        const double p = logistic(eta0[i] + nu);
        g += w[i] - p;
        h += p * (1.0 - p);
      }
      double step = g / h;
      double t = 1.0;
      double fn = f;
      double cand = nu;
      for (int k = 0; k < 50; ++k) {
        cand = nu + t * step;
        fn = objective(cand);
        if (fn >= f) break;
        t *= 0.5;
      }
      const bool done = std::abs(cand - nu) < 1e-12 * (1.0 + std::abs(nu));
      nu = cand;
      f = fn;
      if (done) break;
    }
  }
  am.nu = nu;
  am.value = f;
  for (Index i = 0; i < eta0.size(); ++i) {
    const double p = logistic(eta0[i] + nu);
    am.h += p * (1.0 - p);
  }
  return am;
}

std::vector<int> separated_areas(const GlmmData& d) {
  std::vector<int> out;
  for (int j = 0; j < d.num_areas(); ++j) {
    if (d.rows(j) == 0) continue;
    const auto wj = d.w.segment(d.start[j], d.rows(j));
    if (wj.minCoeff() == wj.maxCoeff()) out.push_back(j);
  }
  return out;
}

}  // namespace

GlmmData GlmmData::from_sample(const SampleView& sample) {
  GlmmData d;
  d.design = propensity_design(sample.frame(), sample.units());
  d.w = sample.w();
  d.start.resize(sample.num_areas() + 1);
  for (int j = 0; j < sample.num_areas(); ++j) d.start[j] = sample.area_start(j);
  d.start[sample.num_areas()] = sample.size();
  d.area_labels = sample.frame().area_labels();
  return d;
}

Vector fit_logistic(const Matrix& x, const Vector& w, int max_iter, double tol) {
  if (w.size() == 0 || w.minCoeff() == w.maxCoeff()) {
    throw Error(ErrorKind::kSeparation, "treatment is constant across the sample");
  }
  const Index k = x.cols();
  Vector beta = Vector::Zero(k);
  beta[0] = logit(std::clamp(w.mean(), 1e-6, 1 - 1e-6));
  auto loglik = [&](const Vector& b) {
    const Vector eta = x * b;
    double l = 0.0;
    for (Index i = 0; i < eta.size(); ++i) l += w[i] * eta[i] - log1pexp(eta[i]);
    return l;
  };
  double ll = loglik(beta);
  for (int it = 0; it < max_iter; ++it) {
    const Vector eta = x * beta;
    Vector p(eta.size());
    for (Index i = 0; i < eta.size(); ++i) p[i] = logistic(eta[i]);
    const Vector g = x.transpose() * (w - p);
    const Matrix h = x.transpose() * (p.array() * (1.0 - p.array())).matrix().asDiagonal() * x;
    Eigen::LDLT<Matrix> ldlt(h);
    if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-14) {
      throw Error(ErrorKind::kSeparation,
                  "logistic information matrix is singular; covariates separate the treatment");
    }
    const Vector step = ldlt.solve(g);
    double t = 1.0;
    Vector cand = beta;
    double lc = ll;
    for (int s = 0; s < 40; ++s) {
      cand = beta + t * step;
      lc = loglik(cand);
      if (lc >= ll - 1e-12) break;
      t *= 0.5;
    }
    const double change = (cand - beta).cwiseAbs().maxCoeff();
    beta = cand;
    ll = lc;
    if (change < tol * (1.0 + beta.cwiseAbs().maxCoeff())) break;
  }
  const Vector eta = x * beta;
  const Index far = (eta.cwiseAbs().array() > kSeparationEta).count();
  if (far > 0) {
    Index worst = 0;
    beta.tail(k - 1).cwiseAbs().maxCoeff(&worst);
    throw Error(ErrorKind::kSeparation,
                "logistic fit diverges (|eta| > 30 for " + std::to_string(far) +
                    " units); largest coefficient is covariate " + std::to_string(worst + 1));
  }
  return beta;
}

double laplace_loglik(const Vector& alpha, double sigma2, const GlmmData& d, Vector* modes) {
  const Vector eta0 = d.design * alpha;
  double total = 0.0;
  if (modes) modes->setZero(d.num_areas());
  for (int j = 0; j < d.num_areas(); ++j) {
    const Index nj = d.rows(j);
    if (nj == 0) continue;
    const double start = modes && modes->size() == d.num_areas() ? (*modes)[j] : 0.0;
    const AreaMode am = area_mode(eta0.segment(d.start[j], nj), d.w.segment(d.start[j], nj),
                                  sigma2, start);
    // -1/2 log(sigma2) - 1/2 log(h + 1/sigma2) = -1/2 log(1 + sigma2 h)
    total += am.value - 0.5 * std::log1p(sigma2 * am.h);
    if (modes) (*modes)[j] = am.nu;
  }
  return total;
}

GlmmFit fit_logit_laplace(const SampleView& sample, const GlmmOptions& opts) {
  return fit_logit_laplace(GlmmData::from_sample(sample), opts);
}

GlmmFit fit_logit_laplace(const GlmmData& d, const GlmmOptions& opts) {
  const Index k = d.design.cols();
  GlmmFit fit;
  for (int j = 0; j < d.num_areas(); ++j) {
    if (d.rows(j) == 0) fit.empty_areas.push_back(j);
  }

  // Boundary candidate: the plain logistic fit.
  const Vector a0 = fit_logistic(d.design, d.w);
  const double l0 = laplace_loglik(a0, 0.0, d);
  // Directional derivative in sigma2 at 0: 1/2 sum_j (s_j^2 - h_j).
  double slope0 = 0.0;
  {
    const Vector eta = d.design * a0;
    for (int j = 0; j < d.num_areas(); ++j) {
      double s = 0.0;
      double h = 0.0;
      for (Index r = d.start[j]; r < d.start[j + 1]; ++r) {
        const double p = logistic(eta[r]);
        s += d.w[r] - p;
        h += p * (1.0 - p);
      }
      slope0 += 0.5 * (s * s - h);
    }
  }

  const double log_max = std::log(opts.max_sigma2);
  auto objective = [&](const Vector& z) {
    const double ls = std::min(z[k], log_max);
    const double v = laplace_loglik(z.head(k), std::exp(ls), d);
    return std::isfinite(v) ? -v : std::numeric_limits<double>::infinity();
  };
  Vector z0(k + 1);
  z0.head(k) = a0;
  z0[k] = std::log(0.25);
  NelderMeadOptions nmo;
  nmo.max_iter = opts.max_iter;
  nmo.f_rel_tol = opts.tol;
  nmo.x_tol = 1e-7;
  nmo.initial_step = 0.5;
  NelderMeadResult nm = nelder_mead(objective, z0, nmo);
  nm = nelder_mead(objective, nm.x, nmo);
  // Polish only away from the boundary, where the log scale is well behaved.
  if (nm.x[k] > std::log(1e-6) && nm.x[k] < log_max - 1e-3) {
    const NelderMeadResult pol = newton_polish(objective, nm.x);
    if (pol.value <= nm.value) {
      nm.x = pol.x;
      nm.value = pol.value;
    }
  }
  const double l_int = -nm.value;

  // A positive slope at 0 means the boundary is not a local optimum, but a
  // simplex that never left the boundary region can still do worse than it.
  const bool boundary_best = slope0 <= 0.0 ? l0 >= l_int - 1e-9 * (1.0 + std::abs(l0)) : l0 > l_int;
  if (boundary_best) {
    fit.alpha = a0;
    fit.sigma2_nu = 0.0;
    fit.boundary = true;
    fit.laplace_value = l0;
    fit.nu_hat = Vector::Zero(d.num_areas());
    fit.converged = true;
    return fit;
  }
  if (nm.x[k] >= log_max - 1e-3) {
    const auto sep = separated_areas(d);
    std::string names;
    for (int j : sep) names += (names.empty() ? "" : ", ") + d.area_labels[j];
    throw Error(ErrorKind::kSeparation,
                "random intercept variance diverges; areas with constant treatment: " +
                    (names.empty() ? std::string("none") : names));
  }
  if (!nm.converged) {
    throw ConvergenceError("Laplace GLMM optimization did not converge", nm.x);
  }
  fit.alpha = nm.x.head(k);
  fit.sigma2_nu = std::exp(nm.x[k]);
  if (fit.sigma2_nu < 1e-10) {
    fit.sigma2_nu = 0.0;
    fit.boundary = true;
  }
  fit.laplace_value = laplace_loglik(fit.alpha, fit.sigma2_nu, d, &fit.nu_hat);
  fit.converged = true;

  const Vector eta = d.design * fit.alpha;
  for (int j = 0; j < d.num_areas(); ++j) {
    for (Index r = d.start[j]; r < d.start[j + 1]; ++r) {
      if (std::abs(eta[r] + fit.nu_hat[j]) > kSeparationEta) {
        throw Error(ErrorKind::kSeparation,
                    "fitted propensity is numerically 0 or 1 in area '" + d.area_labels[j] + "'");
      }
    }
  }
  return fit;
}

GlmmFit with_fixed_sigma2(const GlmmFit& fit, double sigma2, const GlmmData& d) {
  GlmmFit out = fit;
  out.sigma2_nu = sigma2;
  out.boundary = sigma2 == 0.0;
  out.laplace_value = laplace_loglik(fit.alpha, sigma2, d, &out.nu_hat);
  return out;
}

Vector predict_propensity(const GlmmFit& fit, const PopulationFrame& pop) {
  if (fit.nu_hat.size() != pop.num_areas()) {
    throw Error(ErrorKind::kContract, "fit and population disagree on the number of areas");
  }
  const Vector eta = propensity_design(pop) * fit.alpha;
  Vector e(pop.size());
  for (Index i = 0; i < pop.size(); ++i) e[i] = logistic(eta[i] + fit.nu_hat[pop.area(i)]);
  return e;
}

}  // namespace ipwsae
