#include "ipwsae/mse.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ipwsae/optim.hpp"

namespace ipwsae {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_inputs(const IpwWeights& wt, const PopulationFrame& pop, int data_areas) {
  if (wt.D.size() != pop.size()) throw Error(ErrorKind::kContract, "weights do not cover the population");
  if (data_areas != pop.num_areas()) {
    throw Error(ErrorKind::kContract, "fit and population disagree on the number of areas");
  }
}

void clip_negative(double& v, const char* name, AreaMse& a) {
  if (v < 0.0) {
    a.warnings.push_back(std::string(name) + " negative (" + std::to_string(v) + "), clipped to 0");
    v = 0.0;
  }
}

Vector irls_weights(const Vector& resid, double scale, double q, double c) {
  Vector w(resid.size());
  for (Index i = 0; i < resid.size(); ++i) {
    const double u = resid[i] / scale;
    w[i] = u != 0.0 ? psi_q(u, q, c) / u : 2.0 * (1.0 - q);
  }
  return w;
}

}  // namespace

MseBreakdown mse_eblup_analytic(const LmmFit& fit, const IpwWeights& wt, const PopulationFrame& pop,
                                const MseOptions& opts) {
  if (!fit.data) throw Error(ErrorKind::kContract, "fit carries no data");
  const LmmData& d = *fit.data;
  check_inputs(wt, pop, d.num_areas());
  const VarianceComponents& th = fit.theta;
  const Eigen::Matrix2d G = Eigen::Vector2d(th.sigma2_gamma, th.sigma2_u).asDiagonal();
  const Matrix xpop = outcome_design(pop);
  const Index p = d.design.cols();

  MseBreakdown out;
  out.method = Method::kEblup;
  const Matrix gram = gls_at(th, d, fit.reml).gram;
  const Matrix a_inv = pinv_symmetric(gram);
  // Components estimated on the boundary carry no first-order sampling
  // variability and are left out of the g3 quadratic form.
  const Eigen::Vector3d theta_v = th.as_vector();
  Eigen::Matrix3d i_inv = Eigen::Matrix3d::Zero();
  bool singular = false;
  {
    std::vector<int> active;
    for (int t = 0; t < 3; ++t) {
      if (theta_v[t] > 0.0) active.push_back(t);
    }
    const Index na = static_cast<Index>(active.size());
    Matrix sub(na, na);
    for (Index r = 0; r < na; ++r)
      for (Index q = 0; q < na; ++q) sub(r, q) = fit.fisher.matrix(active[r], active[q]);
    const Matrix sub_inv = na > 0 ? pinv_symmetric(sub, 1e-10, &singular) : Matrix();
    for (Index r = 0; r < na; ++r)
      for (Index q = 0; q < na; ++q) i_inv(active[r], active[q]) = sub_inv(r, q);
  }
  out.fisher_pinv = singular;
  if (singular) out.warnings.push_back("Fisher information singular; pseudo-inverse used");
  const Vector resid = d.y - d.design * fit.beta;

  for (int j = 0; j < pop.num_areas(); ++j) {
    AreaMse a;
    Eigen::Vector2d s = Eigen::Vector2d::Zero();
    Vector dx = Vector::Zero(p);
    for (Index i : pop.units_in_area(j)) {
      s[0] += wt.D[i] * pop.w(i);
      s[1] += wt.D[i];
      dx += wt.D[i] * xpop.row(i).transpose();
      if (!pop.in_sample(i)) a.g_eps += wt.D[i] * wt.D[i];
    }
    a.g_eps *= th.sigma2_eps;
    const Eigen::Vector2d gs = G * s;
    a.g1 = s.dot(gs);
    Vector h = dx;
    Eigen::Vector3d v = Eigen::Vector3d::Zero();
    const Index b = d.start[j];
    const Index nj = d.rows(j);
    if (nj > 0) {
      Matrix z(nj, 2);
      z.col(0) = d.treatment.segment(b, nj);
      z.col(1).setOnes();
      Matrix vj = th.sigma2_eps * Matrix::Identity(nj, nj);
      vj += th.sigma2_gamma * z.col(0) * z.col(0).transpose();
      vj.array() += th.sigma2_u;
      const Eigen::LDLT<Matrix> llt(vj);
      const Matrix vz = llt.solve(z);
      const Vector va = llt.solve(resid.segment(b, nj));
      a.g1 -= gs.dot((z.transpose() * vz) * gs);
      h -= d.design.middleRows(b, nj).transpose() * (vz * gs);
      // v_t = s' [dSigma_t Z'V^-1 r - Sigma Z'V^-1 dV_t V^-1 r]
      const Vector zgs = vz * gs;  // V^-1 Z G s
      const Vector zva = z.transpose() * va;
      v[0] = s[0] * zva[0] - zgs.dot(z.col(0)) * z.col(0).dot(va);
      v[1] = s[1] * zva[1] - zgs.sum() * va.sum();
      v[2] = -zgs.dot(va);
    }
    clip_negative(a.g1, "g1", a);
    a.g2 = std::max(0.0, h.dot(a_inv * h));
    a.g3 = 2.0 * v.dot(i_inv * v);
    clip_negative(a.g3, "g3", a);
    a.total = a.g1 + a.g2 + a.g3 + (opts.include_unit_error ? a.g_eps : 0.0);
    if (wt.inestimable[j]) {
      a.estimable = false;
      a.total = kNaN;
    }
    out.areas.push_back(std::move(a));
  }
  return out;
}

Vector mq_area_scales(const MqFit& fit, const LmmData& d) {
  const Vector resid = d.y - d.design * fit.beta;
  Vector omega(resid.size());
  for (int j = 0; j < d.num_areas(); ++j) {
    const Index b = d.start[j];
    const Index nj = d.rows(j);
    if (nj == 0) continue;
    std::vector<double> r(resid.data() + b, resid.data() + b + nj);
    const double med = median(r);
    for (double& x : r) x = std::abs(x - med);
    double s = median(r) / 0.6745;
    if (!(s > 1e-12 * std::max(1.0, fit.scale))) s = fit.scale;
    omega.segment(b, nj).setConstant(s);
  }
  return omega;
}

Matrix mq_sandwich(const MqFit& fit, const LmmData& d, const Vector& omega) {
  const Vector resid = d.y - d.design * fit.beta;
  const Index n = resid.size();
  const Index k = d.design.cols();
  if (n <= k) throw Error(ErrorKind::kDegenerate, "sandwich needs more observations than coefficients");
  double num = 0.0, den = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double u = resid[i] / omega[i];
    const double ps = omega[i] * psi_q(u, fit.q, fit.c);
    num += ps * ps;
    den += psi_q_prime(u, fit.q, fit.c);
  }
  if (den == 0.0) {
    throw Error(ErrorKind::kDegenerate, "all residuals lie in the rejection region; sandwich undefined");
  }
  const double nn = static_cast<double>(n);
  const double factor = nn * nn / (nn - static_cast<double>(k)) * num / (den * den);
  return factor * pinv_symmetric(d.design.transpose() * d.design);
}

MseBreakdown mse_mq_analytic(const MqEnsemble& ens, const IpwWeights& wt, const PopulationFrame& pop) {
  const LmmData& d = ens.data();
  check_inputs(wt, pop, d.num_areas());
  const Matrix xpop = outcome_design(pop);
  const Index n = d.y.size();
  const Index p = d.design.cols();
  const double c = ens.options().c;
  MseBreakdown out;
  out.method = Method::kMq;

  // Sample-level fitted values under each area's own order, for the bias sums.
  Vector own_fit(n);
  for (int k = 0; k < d.num_areas(); ++k) {
    const Index b = d.start[k];
    if (d.rows(k) == 0) continue;
    own_fit.segment(b, d.rows(k)) = d.design.middleRows(b, d.rows(k)) * ens.area_fit(k).beta;
  }

  for (int j = 0; j < pop.num_areas(); ++j) {
    AreaMse a;
    const MqFit& f = ens.area_fit(j);
    const Vector resid = d.y - d.design * f.beta;

    Vector a_r = Vector::Zero(p);  // sum_{r_j} D x~
    double d2_r = 0.0;
    double pop_fit = 0.0;  // sum_{U_j} D x~'beta_j
    Matrix xr;
    std::vector<Index> rest;
    for (Index i : pop.units_in_area(j)) {
      pop_fit += wt.D[i] * xpop.row(i).dot(f.beta);
      if (pop.in_sample(i)) continue;
      a_r += wt.D[i] * xpop.row(i).transpose();
      d2_r += wt.D[i] * wt.D[i];
      rest.push_back(i);
    }

    // Variance.
    if (!rest.empty()) {
      const Matrix cov = mq_sandwich(f, d, mq_area_scales(f, d));
      const double var_y = resid.squaredNorm() / static_cast<double>(n - 1);
      for (Index i : rest) {
        const Vector xi = xpop.row(i).transpose();
        a.var += wt.D[i] * wt.D[i] * xi.dot(cov * xi);
      }
      a.var += var_y * d2_r;
    }

    // Bias. b = a_r' (X'WX)^{-1} X'W over the whole sample.
    const Vector w = irls_weights(resid, f.scale, f.q, c);
    const Matrix h = d.design.transpose() * w.asDiagonal() * d.design;
    const Matrix h_inv = pinv_symmetric(h);
    const Vector bvec = (w.asDiagonal() * (d.design * (h_inv * a_r)));
    double bias = bvec.dot(own_fit);
    const Index bj = d.start[j];
    for (Index r = 0; r < d.rows(j); ++r) {
      const Index unit = pop.sampled_in_area(j)[r];
      bias += wt.D[unit] * own_fit[bj + r];
    }
    a.bias = bias - pop_fit;
    a.bias2 = a.bias * a.bias;

    // Order-estimation variance: (a_r' dbeta/dq)^2 v2_j with the derivative
    // from the pooled weighted normal equations.
    const double v2 = ens.q_area()[j].v2;
    if (v2 > 0.0 && !rest.empty()) {
      Vector dw(n);
      for (Index i = 0; i < n; ++i) {
        const double u = resid[i] / f.scale;
        const double sg = u > 0.0 ? 1.0 : (u < 0.0 ? -1.0 : 0.0);
        dw[i] = 2.0 * std::min(1.0, c / std::max(std::abs(u), 1e-300)) * sg;
      }
      const Vector l = d.design.transpose() * w.cwiseProduct(d.y);
      const Vector dl = d.design.transpose() * dw.cwiseProduct(d.y);
      const Matrix dh = d.design.transpose() * dw.asDiagonal() * d.design;
      const Vector g = h_inv * (dl - dh * (h_inv * l));
      const double t = a_r.dot(g);
      a.qvar = t * t * v2;
    }

    a.total = a.var + a.bias2 + a.qvar;
    if (wt.inestimable[j]) {
      a.estimable = false;
      a.total = kNaN;
    }
    out.areas.push_back(std::move(a));
  }
  return out;
}

std::pair<double, double> confidence_interval(double estimate, double rmse) {
  if (!(rmse >= 0.0)) throw Error(ErrorKind::kContract, "rmse must be nonnegative");
  return {estimate - 2.0 * rmse, estimate + 2.0 * rmse};
}

void attach_mse(AreaEffectTable& table, const MseBreakdown& mse) {
  if (table.rows.size() != mse.areas.size()) {
    throw Error(ErrorKind::kContract, "MSE breakdown does not match the area table");
  }
  for (std::size_t j = 0; j < table.rows.size(); ++j) {
    auto& row = table.rows[j];
    const auto& a = mse.areas[j];
    for (const auto& w : a.warnings) row.warnings.push_back(w);
    if (!a.estimable || !std::isfinite(a.total) || !std::isfinite(row.estimate)) continue;
    row.mse = a.total;
    row.interval = confidence_interval(row.estimate, std::sqrt(a.total));
  }
}

}  // namespace ipwsae
