#pragma once

// Independent reference computations shared by the unit and acceptance
// suites, with the small fixtures they are checked on.

#include <cmath>

#include "ipwsae/estimators.hpp"
#include "ipwsae/glmm.hpp"
#include "ipwsae/lmm.hpp"
#include "ipwsae/mquantile.hpp"
#include "ipwsae/optim.hpp"
#include "support/dense_lmm.hpp"
#include "support/quadrature.hpp"

namespace oracle {

using ipwsae::Index;
using ipwsae::Matrix;
using ipwsae::Vector;

// REML maximum over a log-scale grid: a 0.1 pass, then a 0.01 pass around
// the coarse optimum.
struct GridOptimum {
  double value = -1e300;
  Eigen::Vector3d log_theta;
};

inline GridOptimum reml_grid(const ipwsae::LmmData& d) {
  auto ll = [&](const Eigen::Vector3d& z) {
    return ipwsae::restricted_loglik({std::exp(z[0]), std::exp(z[1]), std::exp(z[2])}, d);
  };
  GridOptimum g;
  for (double a = -7; a <= 4; a += 0.1) {
    for (double b = -7; b <= 4; b += 0.1) {
      for (double c = -5; c <= 4; c += 0.1) {
        const Eigen::Vector3d z(a, b, c);
        const double v = ll(z);
        if (v > g.value) g = {v, z};
      }
    }
  }
  const Eigen::Vector3d coarse = g.log_theta;
  for (int i = -12; i <= 12; ++i) {
    for (int k = -12; k <= 12; ++k) {
      for (int l = -12; l <= 12; ++l) {
        const Eigen::Vector3d z = coarse + 0.01 * Eigen::Vector3d(i, k, l);
        const double v = ll(z);
        if (v > g.value) g = {v, z};
      }
    }
  }
  return g;
}

// Every other unit sampled; outcomes of non-sampled units hidden.
inline ipwsae::PopulationFrame half_sampled(const ipwsae::PopulationFrame& full) {
  std::vector<bool> s(full.size());
  std::vector<std::optional<double>> y(full.size());
  for (Index i = 0; i < full.size(); ++i) {
    s[i] = i % 2 == 0;
    if (s[i]) y[i] = full.y(i);
  }
  return full.with_sample(s).with_outcomes(y);
}

inline Vector toy_propensity(const ipwsae::PopulationFrame& pop) {
  Vector e(pop.size());
  for (Index i = 0; i < pop.size(); ++i) e[i] = ipwsae::logistic(-0.3 + 0.25 * pop.x()(i, 0));
  return e;
}

struct DenseTerms {
  double g1, g2, g3;
};

// Forms every matrix of the EBLUP MSE explicitly.
inline DenseTerms dense_eblup_mse(const ipwsae::LmmFit& fit, const ipwsae::IpwWeights& wt,
                                  const ipwsae::PopulationFrame& pop, int j) {
  const ipwsae::LmmData& d = *fit.data;
  const auto& th = fit.theta;
  const dense::Pieces pc = dense::build(th, d);
  const Index n = d.y.size();
  const int m = d.num_areas();
  Matrix zt(n, 2 * m);
  zt << pc.zg, pc.zu;
  Vector sd(2 * m);
  sd << Vector::Constant(m, th.sigma2_gamma), Vector::Constant(m, th.sigma2_u);
  const Matrix sig = sd.asDiagonal();
  const Matrix vi = pc.v.inverse();

  const auto& units = pop.units_in_area(j);
  const Index nj = static_cast<Index>(units.size());
  const Matrix xall = ipwsae::outcome_design(pop);
  Vector dj(nj);
  Matrix zj = Matrix::Zero(nj, 2 * m);
  Matrix xj(nj, xall.cols());
  for (Index k = 0; k < nj; ++k) {
    dj[k] = wt.D[units[k]];
    zj(k, j) = pop.w(units[k]);
    zj(k, m + j) = 1.0;
    xj.row(k) = xall.row(units[k]);
  }
  DenseTerms t{};
  const Matrix inner = Matrix::Identity(2 * m, 2 * m) - zt.transpose() * vi * zt * sig;
  t.g1 = dj.dot(zj * sig * inner * zj.transpose() * dj);
  const Matrix c = xj - zj * sig * zt.transpose() * vi * pc.x;
  const Matrix gram = pc.x.transpose() * vi * pc.x;
  t.g2 = dj.dot(c * gram.inverse() * c.transpose() * dj);

  const Vector r = d.y - d.design * fit.beta;
  const Matrix proj = dense::projection(pc);
  Eigen::Vector3d v;
  Eigen::Matrix3d info;
  for (int a = 0; a < 3; ++a) {
    Vector dsd = Vector::Zero(2 * m);
    if (a == 0) dsd.head(m).setOnes();
    if (a == 1) dsd.tail(m).setOnes();
    const Matrix dvi = -vi * dense::vdot(pc, a) * vi;
    const Matrix s_t = dj.transpose() * zj *
                       (Matrix(dsd.asDiagonal()) * zt.transpose() * vi + sig * zt.transpose() * dvi);
    v[a] = (s_t * r)(0, 0);
    for (int b = 0; b < 3; ++b) {
      info(a, b) = 0.5 * (proj * dense::vdot(pc, a) * proj * dense::vdot(pc, b)).trace();
    }
  }
  t.g3 = 2.0 * v.dot(info.inverse() * v);
  return t;
}

struct Xy {
  Matrix x;
  Vector y;
};

// n points, design (1, x, w), normal noise when `symmetric`, else lognormal.
inline Xy mq_dataset(int n, std::uint64_t seed, bool symmetric = true) {
  ipwsae::Rng rng(seed);
  Xy d{Matrix(n, 3), Vector(n)};
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform() * 5;
    const int w = i % 3 == 0;
    d.x.row(i) << 1.0, x, static_cast<double>(w);
    const double e = symmetric ? rng.normal(0, 1.5) : std::exp(rng.normal(0, 1));
    d.y[i] = 2.0 + 1.5 * x + 3.0 * w + e;
  }
  return d;
}

// Minimizes the asymmetric Huber loss at a fixed scale by restarted
// Nelder-Mead from least squares.
inline Vector mq_direct(const Xy& d, double q, double scale, double c = 1.345) {
  auto loss = [&](const Vector& b) {
    double l = 0.0;
    const Vector r = d.y - d.x * b;
    for (Index i = 0; i < r.size(); ++i) l += ipwsae::rho_q(r[i] / scale, q, c);
    return l;
  };
  ipwsae::NelderMeadOptions nmo;
  nmo.max_iter = 20000;
  nmo.f_rel_tol = 1e-15;
  nmo.x_tol = 1e-10;
  const Vector b0 = (d.x.transpose() * d.x).ldlt().solve(d.x.transpose() * d.y);
  auto nm = ipwsae::nelder_mead(loss, b0, nmo);
  for (int k = 0; k < 5; ++k) nm = ipwsae::nelder_mead(loss, nm.x, nmo);
  return nm.x;
}

// m areas of n units, x2 ~ U(0,1), logit propensity -1 + 0.5 x2 + nu_j;
// everyone sampled.
inline ipwsae::PopulationFrame propensity_population(int m, int n, double s2nu, std::uint64_t seed) {
  ipwsae::Rng rng(seed);
  std::vector<std::string> labels;
  Matrix x(m * n, 1);
  std::vector<int> w;
  for (int j = 0; j < m; ++j) {
    const double nu = rng.normal(0, std::sqrt(s2nu));
    for (int i = 0; i < n; ++i) {
      const double x2 = rng.uniform();
      labels.push_back("area" + std::to_string(j));
      x(j * n + i, 0) = x2;
      w.push_back(rng.bernoulli(ipwsae::logistic(-1 + 0.5 * x2 + nu)) ? 1 : 0);
    }
  }
  return ipwsae::PopulationFrame::create(labels, x, w, std::vector<std::optional<double>>(m * n, 0.0),
                                         std::vector<bool>(m * n, true));
}

// Newton-Raphson logistic regression.
inline Vector newton_logit(const Matrix& x, const Vector& w) {
  Vector b = Vector::Zero(x.cols());
  for (int it = 0; it < 50; ++it) {
    Vector p = (x * b).unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
    Matrix h = x.transpose() * (p.array() * (1 - p.array())).matrix().asDiagonal() * x;
    b += h.inverse() * (x.transpose() * (w - p));
  }
  return b;
}

// Adaptive Gauss-Hermite marginal log-likelihood with 20 nodes per area,
// centred at the conditional mode found by bisection on the score.
inline double quadrature_loglik(const Vector& alpha, double s2, const ipwsae::GlmmData& d) {
  const auto [t, wt] = quad::gauss_hermite(20);
  double total = 0.0;
  for (int j = 0; j < d.num_areas(); ++j) {
    const Vector eta0 = d.design.middleRows(d.start[j], d.rows(j)) * alpha;
    const Vector wj = d.w.segment(d.start[j], d.rows(j));
    auto logf = [&](double nu) {
      double l = -0.5 * nu * nu / s2 - 0.5 * std::log(2 * M_PI * s2);
      for (Index i = 0; i < eta0.size(); ++i) {
        const double e = eta0[i] + nu;
        l += wj[i] * e - std::log1p(std::exp(e));
      }
      return l;
    };
    auto score = [&](double nu) {
      double g = -nu / s2;
      for (Index i = 0; i < eta0.size(); ++i) g += wj[i] - 1.0 / (1.0 + std::exp(-(eta0[i] + nu)));
      return g;
    };
    double lo = -50;
    double hi = 50;
    for (int k = 0; k < 200; ++k) {
      const double mid = 0.5 * (lo + hi);
      (score(mid) > 0 ? lo : hi) = mid;
    }
    const double mode = 0.5 * (lo + hi);
    double h = 1.0 / s2;
    for (Index i = 0; i < eta0.size(); ++i) {
      const double p = 1.0 / (1.0 + std::exp(-(eta0[i] + mode)));
      h += p * (1 - p);
    }
    const double sd = 1.0 / std::sqrt(h);
    const double lmode = logf(mode);
    double acc = 0.0;
    for (int k = 0; k < t.size(); ++k) {
      const double nu = mode + std::sqrt(2.0) * sd * t[k];
      acc += wt[k] * std::exp(t[k] * t[k]) * std::exp(logf(nu) - lmode);
    }
    total += lmode + std::log(std::sqrt(2.0) * sd * acc);
  }
  return total;
}

}  // namespace oracle
