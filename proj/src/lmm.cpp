#include "ipwsae/lmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ipwsae/optim.hpp"

namespace ipwsae {

namespace {

Matrix area_covariance(const VarianceComponents& th, const LmmData& d, int j) {
  const Index nj = d.rows(j);
  const auto w = d.treatment.segment(d.start[j], nj);
  Matrix v = th.sigma2_gamma * (w * w.transpose());
  v.array() += th.sigma2_u;
  v.diagonal().array() += th.sigma2_eps;
  return v;
}

struct BlockSolves {
  std::vector<Eigen::LLT<Matrix>> llt;
  double logdet = 0.0;
};

BlockSolves factor_blocks(const VarianceComponents& th, const LmmData& d) {
  BlockSolves bs;
  bs.llt.reserve(d.num_areas());
  for (int j = 0; j < d.num_areas(); ++j) {
    if (d.rows(j) == 0) {
      bs.llt.emplace_back();
      continue;
    }
    bs.llt.emplace_back(area_covariance(th, d, j));
    if (bs.llt.back().info() != Eigen::Success) {
      throw Error(ErrorKind::kRank, "area covariance block is not positive definite");
    }
    bs.logdet += 2.0 * bs.llt.back().matrixLLT().diagonal().array().log().sum();
  }
  return bs;
}

double log_det_spd(const Matrix& a) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorKind::kRank, "X'V^{-1}X is not positive definite");
  }
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

void check_rank(const Matrix& gram) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(gram, Eigen::EigenvaluesOnly);
  const Vector& ev = es.eigenvalues();
  if (ev.minCoeff() <= 1e-12 * std::max(ev.maxCoeff(), 1e-300)) {
    throw Error(ErrorKind::kRank, "fixed-effect design is rank deficient on the sample");
  }
}

// Everything the score and information need at a given theta.
struct Projection {
  Matrix p;       // REML projection (or V^{-1} for ML)
  Vector py;      // V^{-1}(y - X beta)
  Matrix p_zg;    // P Z_gamma
  Matrix p_zu;    // P Z_u
};

Matrix block_to_full_inverse(const BlockSolves& bs, const LmmData& d) {
  const Index n = d.y.size();
  Matrix vinv = Matrix::Zero(n, n);
  for (int j = 0; j < d.num_areas(); ++j) {
    const Index nj = d.rows(j);
    if (nj == 0) continue;
    vinv.block(d.start[j], d.start[j], nj, nj) = bs.llt[j].solve(Matrix::Identity(nj, nj));
  }
  return vinv;
}

// Columns j of Z_gamma / Z_u restricted to area j: M Z = sum over area rows.
Matrix right_times_z(const Matrix& m, const LmmData& d, bool slope) {
  Matrix out = Matrix::Zero(m.rows(), d.num_areas());
  for (int j = 0; j < d.num_areas(); ++j) {
    for (Index r = d.start[j]; r < d.start[j + 1]; ++r) {
      const double z = slope ? d.treatment[r] : 1.0;
      if (z != 0.0) out.col(j) += z * m.col(r);
    }
  }
  return out;
}

// Z' M for a sample-by-anything matrix M.
Matrix z_transpose_times(const Matrix& m, const LmmData& d, bool slope) {
  Matrix out = Matrix::Zero(d.num_areas(), m.cols());
  for (int j = 0; j < d.num_areas(); ++j) {
    for (Index r = d.start[j]; r < d.start[j + 1]; ++r) {
      const double z = slope ? d.treatment[r] : 1.0;
      if (z != 0.0) out.row(j) += z * m.row(r);
    }
  }
  return out;
}

Projection projection(const VarianceComponents& th, const LmmData& d, bool reml) {
  const BlockSolves bs = factor_blocks(th, d);
  const Matrix vinv = block_to_full_inverse(bs, d);
  const Matrix q = vinv * d.design;  // block-sparse product is cheap at these sizes
  const Matrix gram = d.design.transpose() * q;
  check_rank(gram);
  const Eigen::LLT<Matrix> gl(gram);
  const Vector beta = gl.solve(q.transpose() * d.y);
  Projection pr;
  pr.py = vinv * (d.y - d.design * beta);
  pr.p = reml ? Matrix(vinv - q * gl.solve(q.transpose())) : vinv;
  pr.p_zg = right_times_z(pr.p, d, true);
  pr.p_zu = right_times_z(pr.p, d, false);
  return pr;
}

}  // namespace

LmmData LmmData::from_sample(const SampleView& sample) {
  LmmData d;
  d.design = outcome_design(sample.frame(), sample.units());
  d.y = sample.y();
  d.treatment = d.design.col(d.design.cols() - 1);
  d.start.resize(sample.num_areas() + 1);
  for (int j = 0; j <= sample.num_areas(); ++j) {
    d.start[j] = j < sample.num_areas() ? sample.area_start(j) : sample.size();
  }
  return d;
}

GlsSolution gls_at(const VarianceComponents& theta, const LmmData& d, bool reml) {
  const BlockSolves bs = factor_blocks(theta, d);
  const Index k = d.design.cols();
  Matrix gram = Matrix::Zero(k, k);
  Vector xvy = Vector::Zero(k);
  double yvy = 0.0;
  for (int j = 0; j < d.num_areas(); ++j) {
    const Index nj = d.rows(j);
    if (nj == 0) continue;
    const auto xj = d.design.middleRows(d.start[j], nj);
    const auto yj = d.y.segment(d.start[j], nj);
    const Matrix vx = bs.llt[j].solve(xj);
    const Vector vy = bs.llt[j].solve(yj);
    gram.noalias() += xj.transpose() * vx;
    xvy.noalias() += xj.transpose() * vy;
    yvy += yj.dot(vy);
  }
  check_rank(gram);
  GlsSolution s;
  const Eigen::LLT<Matrix> gl(gram);
  s.beta = gl.solve(xvy);
  const double quad = yvy - xvy.dot(s.beta);
  s.loglik = -0.5 * (bs.logdet + (reml ? log_det_spd(gram) : 0.0) + quad);
  s.gram = std::move(gram);
  return s;
}

double restricted_loglik(const VarianceComponents& theta, const LmmData& data, bool reml) {
  if (theta.sigma2_gamma < 0 || theta.sigma2_u < 0 || theta.sigma2_eps < 0) {
    throw Error(ErrorKind::kContract, "variance components must be nonnegative");
  }
  return gls_at(theta, data, reml).loglik;
}

Eigen::Vector3d restricted_score(const VarianceComponents& theta, const LmmData& d, bool reml) {
  const Projection pr = projection(theta, d, reml);
  const Vector zg_py = z_transpose_times(pr.py, d, true);
  const Vector zu_py = z_transpose_times(pr.py, d, false);
  // tr(P Z Z') = sum over columns of Z'(PZ)
  double tr_g = 0.0;
  double tr_u = 0.0;
  for (int j = 0; j < d.num_areas(); ++j) {
    for (Index r = d.start[j]; r < d.start[j + 1]; ++r) {
      tr_g += d.treatment[r] * pr.p_zg(r, j);
      tr_u += pr.p_zu(r, j);
    }
  }
  Eigen::Vector3d g;
  g[0] = -0.5 * tr_g + 0.5 * zg_py.squaredNorm();
  g[1] = -0.5 * tr_u + 0.5 * zu_py.squaredNorm();
  g[2] = -0.5 * pr.p.trace() + 0.5 * pr.py.squaredNorm();
  return g;
}

FisherInformation fisher_information(const VarianceComponents& theta, const LmmData& d,
                                     bool reml) {
  const Projection pr = projection(theta, d, reml);
  const Matrix gg = z_transpose_times(pr.p_zg, d, true);
  const Matrix gu = z_transpose_times(pr.p_zu, d, true);
  const Matrix uu = z_transpose_times(pr.p_zu, d, false);
  FisherInformation fi;
  auto& f = fi.matrix;
  f(0, 0) = 0.5 * gg.squaredNorm();
  f(0, 1) = f(1, 0) = 0.5 * gu.squaredNorm();
  f(1, 1) = 0.5 * uu.squaredNorm();
  f(0, 2) = f(2, 0) = 0.5 * pr.p_zg.squaredNorm();
  f(1, 2) = f(2, 1) = 0.5 * pr.p_zu.squaredNorm();
  f(2, 2) = 0.5 * pr.p.squaredNorm();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(f, Eigen::EigenvaluesOnly);
  fi.singular = es.eigenvalues().minCoeff() <= 1e-10 * std::max(es.eigenvalues().maxCoeff(), 1e-300);
  return fi;
}

FisherInformation fisher_information(const LmmFit& fit) {
  if (!fit.data) throw Error(ErrorKind::kContract, "fit carries no sample data");
  return fisher_information(fit.theta, *fit.data, fit.reml);
}

void predict_random_effects(LmmFit& fit) {
  const LmmData& d = *fit.data;
  const int m = d.num_areas();
  fit.gamma_hat = Vector::Zero(m);
  fit.u_hat = Vector::Zero(m);
  fit.empty_areas.clear();
  for (int j = 0; j < m; ++j) {
    const Index nj = d.rows(j);
    if (nj == 0) {
      fit.empty_areas.push_back(j);
      continue;
    }
    if (fit.theta.sigma2_eps <= 0.0) continue;
    const Matrix v = area_covariance(fit.theta, d, j);
    const Vector r = d.y.segment(d.start[j], nj) - d.design.middleRows(d.start[j], nj) * fit.beta;
    const Vector vr = v.llt().solve(r);
    fit.gamma_hat[j] = fit.theta.sigma2_gamma * d.treatment.segment(d.start[j], nj).dot(vr);
    fit.u_hat[j] = fit.theta.sigma2_u * vr.sum();
  }
}

LmmFit fit_reml(const SampleView& sample, const LmmOptions& opts) {
  return fit_reml(std::make_shared<const LmmData>(LmmData::from_sample(sample)), opts);
}

LmmFit fit_reml(std::shared_ptr<const LmmData> data, const LmmOptions& opts) {
  const LmmData& d = *data;
  const Index n = d.y.size();
  const Index k = d.design.cols();
  if (n <= k) throw Error(ErrorKind::kRank, "sample too small for the fixed-effect design");
  LmmFit fit;
  fit.data = data;
  fit.reml = opts.reml;

  // OLS pre-fit for starting values and the degenerate case.
  const Matrix xtx = d.design.transpose() * d.design;
  check_rank(xtx);
  const Vector b_ols = xtx.ldlt().solve(d.design.transpose() * d.y);
  const double rss = (d.y - d.design * b_ols).squaredNorm();
  const double s2 = rss / static_cast<double>(n - k);
  const double scale = 1.0 + d.y.squaredNorm() / static_cast<double>(n);
  if (s2 <= 1e-24 * scale) {
    fit.beta = b_ols;
    fit.theta = {0.0, 0.0, 0.0};
    fit.converged = true;
    fit.boundary = true;
    fit.reml_value = std::numeric_limits<double>::infinity();
    fit.fisher.singular = true;
    fit.gamma_hat = Vector::Zero(d.num_areas());
    fit.u_hat = Vector::Zero(d.num_areas());
    for (int j = 0; j < d.num_areas(); ++j) {
      if (d.rows(j) == 0) fit.empty_areas.push_back(j);
    }
    return fit;
  }

  const double floor_log = std::log(1e-12 * s2);
  auto to_theta = [&](const Vector& z) {
    return VarianceComponents{std::exp(std::max(z[0], floor_log)),
                              std::exp(std::max(z[1], floor_log)),
                              std::exp(std::max(z[2], floor_log))};
  };
  // The criterion is invariant to a shift of y; optimizing on centred
  // outcomes keeps its rounding error independent of the outcome level.
  LmmData centred = d;
  centred.y.array() -= d.y.mean();
  auto objective = [&](const Vector& z) {
    try {
      return -gls_at(to_theta(z), centred, opts.reml).loglik;
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  Vector z0(3);
  z0 << std::log(0.1 * s2), std::log(0.1 * s2), std::log(s2);
  NelderMeadOptions nmo;
  nmo.max_iter = opts.max_iter;
  nmo.f_rel_tol = opts.f_rel_tol;
  nmo.x_tol = opts.x_tol;
  nmo.initial_step = 1.0;
  NelderMeadResult nm = nelder_mead(objective, z0, nmo);
  if (nm.converged) {
    // A restart from the optimum guards against premature simplex collapse.
    nm = nelder_mead(objective, nm.x, nmo);
  }

  Eigen::Vector3d th = to_theta(nm.x).as_vector();
  for (int s = 0; s < 2; ++s) {
    if (th[s] < 1e-8 * s2) th[s] = 0.0;
  }
  double ll = gls_at(VarianceComponents::from_vector(th), centred, opts.reml).loglik;

  // Projected Fisher scoring on the natural scale.
  bool polished = false;
  for (int it = 0; it < 100; ++it) {
    const auto cur = VarianceComponents::from_vector(th);
    const Eigen::Vector3d g = restricted_score(cur, centred, opts.reml);
    const Eigen::Matrix3d info = fisher_information(cur, centred, opts.reml).matrix;
    std::vector<int> free;
    for (int s = 0; s < 3; ++s) {
      if (th[s] > 0.0 || g[s] > 0.0) free.push_back(s);
    }
    Eigen::Vector3d step = Eigen::Vector3d::Zero();
    if (!free.empty()) {
      const Index fsz = static_cast<Index>(free.size());
      Matrix sub(fsz, fsz);
      Vector gs(fsz);
      for (Index a = 0; a < fsz; ++a) {
        gs[a] = g[free[a]];
        for (Index b = 0; b < fsz; ++b) sub(a, b) = info(free[a], free[b]);
      }
      const Vector ds = pinv_symmetric(sub) * gs;
      for (Index a = 0; a < fsz; ++a) step[free[a]] = ds[a];
    }
    double t = 1.0;
    bool improved = false;
    Eigen::Vector3d cand;
    double ll_new = ll;
    for (int h = 0; h < 30; ++h) {
      cand = (th + t * step).cwiseMax(0.0);
      cand[2] = std::max(cand[2], 1e-12 * s2);
      try {
        ll_new = gls_at(VarianceComponents::from_vector(cand), centred, opts.reml).loglik;
      } catch (const Error&) {
        ll_new = -std::numeric_limits<double>::infinity();
      }
      if (ll_new >= ll - 1e-12 * std::abs(ll)) {
        improved = true;
        break;
      }
      t *= 0.5;
    }
    if (!improved) {
      polished = true;
      break;
    }
    const double dll = std::abs(ll_new - ll);
    const double dth = (cand - th).cwiseAbs().maxCoeff();
    th = cand;
    ll = ll_new;
    if (dll <= opts.f_rel_tol * (std::abs(ll) + 1.0) && dth <= opts.x_tol * (1.0 + th.maxCoeff())) {
      polished = true;
      break;
    }
  }

  // Near the optimum the line search sees only rounding noise in the
  // criterion; finish with plain scoring steps on the free components.
  if (polished) {
    for (int it = 0; it < 20; ++it) {
      const auto cur = VarianceComponents::from_vector(th);
      const Eigen::Vector3d g = restricted_score(cur, centred, opts.reml);
      const Eigen::Matrix3d info = fisher_information(cur, centred, opts.reml).matrix;
      std::vector<int> free;
      for (int s = 0; s < 3; ++s) {
        if (th[s] > 0.0) free.push_back(s);
      }
      if (free.empty()) break;
      const Index fsz = static_cast<Index>(free.size());
      Matrix sub(fsz, fsz);
      Vector gs(fsz);
      for (Index a = 0; a < fsz; ++a) {
        gs[a] = g[free[a]];
        for (Index b = 0; b < fsz; ++b) sub(a, b) = info(free[a], free[b]);
      }
      const Vector ds = pinv_symmetric(sub) * gs;
      Eigen::Vector3d cand = th;
      for (Index a = 0; a < fsz; ++a) cand[free[a]] += ds[a];
      const double size = ds.cwiseAbs().maxCoeff() / (1.0 + th.maxCoeff());
      if (size > 1e-4 || (cand.array() <= 0.0).any()) break;
      double ll_new;
      try {
        ll_new = gls_at(VarianceComponents::from_vector(cand), centred, opts.reml).loglik;
      } catch (const Error&) {
        break;
      }
      if (ll_new < ll - 1e-9 * (std::abs(ll) + 1.0)) break;
      th = cand;
      ll = ll_new;
      if (size <= 1e-13) break;
    }
  }

  const double nm_ll = -nm.value;
  if (nm_ll > ll + 1e-9 * (std::abs(ll) + 1.0)) {
    th = to_theta(nm.x).as_vector();
    ll = nm_ll;
  }
  if (!nm.converged && !polished) {
    Vector best(3);
    best << th[0], th[1], th[2];
    throw ConvergenceError("REML optimization did not converge", best);
  }
  for (int s = 0; s < 2; ++s) {
    if (th[s] < opts.boundary * s2) {
      th[s] = 0.0;
      fit.boundary = true;
    }
  }
  fit.theta = VarianceComponents::from_vector(th);
  const GlsSolution sol = gls_at(fit.theta, d, opts.reml);
  fit.beta = sol.beta;
  fit.reml_value = sol.loglik;
  fit.converged = true;
  fit.fisher = fisher_information(fit.theta, d, opts.reml);
  predict_random_effects(fit);
  return fit;
}

OutcomePrediction predict_outcomes(const LmmFit& fit, const PopulationFrame& pop) {
  if (fit.gamma_hat.size() != pop.num_areas()) {
    throw Error(ErrorKind::kContract, "fit and population disagree on the number of areas");
  }
  OutcomePrediction out;
  const Matrix x = outcome_design(pop);
  out.yhat = x * fit.beta;
  for (Index i = 0; i < pop.size(); ++i) {
    const int j = pop.area(i);
    out.yhat[i] += pop.w(i) * fit.gamma_hat[j] + fit.u_hat[j];
  }
  for (int j : fit.empty_areas) {
    out.warnings.push_back("area '" + pop.area_labels()[j] +
                           "' has no sampled units; synthetic prediction");
  }
  return out;
}

}  // namespace ipwsae
