#include "ipwsae/mquantile.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ipwsae/optim.hpp"

namespace ipwsae {

namespace {

constexpr double kMadConstant = 0.6745;
constexpr double kScaleFloor = 1e-12;

double tilt(double u, double q) { return u > 0 ? q : 1.0 - q; }

void check_q(double q, double c) {
  if (!(q > 0.0 && q < 1.0)) throw Error(ErrorKind::kContract, "quantile order must lie in (0,1)");
  if (!(c > 0.0)) throw Error(ErrorKind::kContract, "Huber constant must be positive");
}

double mad_scale(const Vector& r, bool* floored) {
  std::vector<double> a(r.size());
  for (Index i = 0; i < r.size(); ++i) a[i] = std::abs(r[i]);
  double s = median(std::move(a)) / kMadConstant;
  *floored = !(s > kScaleFloor);
  return *floored ? kScaleFloor : s;
}

// Pool-adjacent-violators for a non-decreasing fit with unit weights.
Vector isotonic(const Vector& v) {
  std::vector<double> level;
  std::vector<int> count;
  for (Index i = 0; i < v.size(); ++i) {
    level.push_back(v[i]);
    count.push_back(1);
    while (level.size() > 1 && level[level.size() - 2] > level.back()) {
      const int c2 = count.back();
      const double l2 = level.back();
      level.pop_back();
      count.pop_back();
      level.back() = (level.back() * count.back() + l2 * c2) / (count.back() + c2);
      count.back() += c2;
    }
  }
  Vector out(v.size());
  Index k = 0;
  for (std::size_t b = 0; b < level.size(); ++b) {
    for (int c = 0; c < count[b]; ++c) out[k++] = level[b];
  }
  return out;
}

std::vector<std::size_t> outward_order(const std::vector<double>& grid) {
  // Grid indices sorted by distance from 0.5 so each fit warm-starts from a
  // neighbour closer to the centre.
  std::vector<std::size_t> idx(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) idx[g] = g;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(grid[a] - 0.5) < std::abs(grid[b] - 0.5);
  });
  return idx;
}

std::size_t nearest(const std::vector<double>& grid, double q) {
  std::size_t best = 0;
  for (std::size_t g = 1; g < grid.size(); ++g) {
    if (std::abs(grid[g] - q) < std::abs(grid[best] - q)) best = g;
  }
  return best;
}

void check_grid(const std::vector<double>& grid) {
  if (grid.empty()) throw Error(ErrorKind::kContract, "quantile grid is empty");
  for (std::size_t g = 0; g < grid.size(); ++g) {
    if (!(grid[g] > 0.0 && grid[g] < 1.0) || (g > 0 && grid[g] <= grid[g - 1])) {
      throw Error(ErrorKind::kContract, "quantile grid must be strictly increasing within (0,1)");
    }
  }
}

}  // namespace

std::vector<double> default_grid() {
  std::vector<double> g;
  for (int k = 1; k <= 49; ++k) g.push_back(k / 50.0);
  return g;
}

double psi_q(double u, double q, double c) {
  return 2.0 * std::clamp(u, -c, c) * tilt(u, q);
}

double psi_q_prime(double u, double q, double c) {
  return std::abs(u) <= c ? 2.0 * tilt(u, q) : 0.0;
}

double rho_q(double u, double q, double c) {
  const double a = std::abs(u);
  const double rho = a <= c ? 0.5 * u * u : c * a - 0.5 * c * c;
  return 2.0 * rho * tilt(u, q);
}

MqFit fit_mq_linear(const Matrix& x, const Vector& y, double q, const MqOptions& opts,
                    const Vector& start) {
  check_q(q, opts.c);
  if (x.rows() <= x.cols()) throw Error(ErrorKind::kRank, "too few units for the M-quantile design");
  MqFit fit;
  fit.q = q;
  fit.c = opts.c;
  Vector beta = start.size() == x.cols() ? start : Vector(x.colPivHouseholderQr().solve(y));
  Vector wts(y.size());
  for (int it = 1; it <= opts.max_iter; ++it) {
    const Vector r = y - x * beta;
    bool floored = false;
    const double s = mad_scale(r, &floored);
    for (Index i = 0; i < r.size(); ++i) {
      const double u = r[i] / s;
      wts[i] = u != 0.0 ? psi_q(u, q, opts.c) / u : 2.0 * (1.0 - q);
    }
    const Matrix xtw = x.transpose() * wts.asDiagonal();
    Eigen::LDLT<Matrix> ldlt(xtw * x);
    if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-14) {
      throw Error(ErrorKind::kRank, "weighted M-quantile design is singular");
    }
    const Vector next = ldlt.solve(xtw * y);
    // Fitted-value change on the residual scale, so shifts of y do not move
    // the stopping point; the second term allows for rounding at exact fits.
    const double change = (x * (next - beta)).cwiseAbs().maxCoeff();
    beta = next;
    fit.iterations = it;
    if (change <= opts.tol * s + 1e-14 * y.cwiseAbs().maxCoeff()) {
      fit.converged = true;
      break;
    }
  }
  if (!fit.converged) {
    throw ConvergenceError("M-quantile IRLS did not converge at q = " + std::to_string(q) + " in " +
                               std::to_string(opts.max_iter) + " iterations",
                           beta);
  }
  fit.beta = beta;
  fit.scale = mad_scale(y - x * beta, &fit.scale_floored);
  return fit;
}

MqFit fit_mq_linear(const SampleView& sample, double q, const MqOptions& opts) {
  const LmmData d = LmmData::from_sample(sample);
  return fit_mq_linear(d.design, d.y, q, opts);
}

Vector unit_q_coefficients(const Matrix& fitted, const Vector& y, const std::vector<double>& grid,
                           std::vector<Index>* repaired) {
  check_grid(grid);
  const Index gsz = static_cast<Index>(grid.size());
  if (fitted.cols() != gsz || fitted.rows() != y.size()) {
    throw Error(ErrorKind::kContract, "fitted-value matrix does not match grid and sample");
  }
  Vector out(y.size());
  for (Index r = 0; r < y.size(); ++r) {
    Vector f = fitted.row(r).transpose();
    bool monotone = true;
    for (Index g = 1; g < gsz; ++g) monotone = monotone && f[g] >= f[g - 1];
    if (!monotone) {
      f = isotonic(f);
      if (repaired) repaired->push_back(r);
    }
    const double v = y[r];
    if (v <= f[0]) {
      out[r] = grid.front();
      if (v == f[0]) {
        // Flat start: every grid point on the plateau matches.
        Index e = 0;
        while (e + 1 < gsz && f[e + 1] == v) ++e;
        out[r] = 0.5 * (grid[0] + grid[e]);
      }
      continue;
    }
    if (v >= f[gsz - 1]) {
      out[r] = grid.back();
      if (v == f[gsz - 1]) {
        Index b = gsz - 1;
        while (b > 0 && f[b - 1] == v) --b;
        out[r] = 0.5 * (grid[b] + grid.back());
      }
      continue;
    }
    Index k = 0;
    while (f[k] < v) ++k;  // f[k-1] < v <= f[k]
    if (f[k] == v) {
      Index e = k;
      while (e + 1 < gsz && f[e + 1] == v) ++e;
      out[r] = 0.5 * (grid[k] + grid[e]);
    } else {
      const double t = (v - f[k - 1]) / (f[k] - f[k - 1]);
      out[r] = grid[k - 1] + t * (grid[k] - grid[k - 1]);
    }
  }
  return out;
}

AreaQ area_q(const Vector& q_unit, Index begin, Index end) {
  AreaQ a;
  const Index n = end - begin;
  if (n <= 0) {
    a.synthetic = true;
    return a;
  }
  const auto seg = q_unit.segment(begin, n);
  a.q_bar = seg.mean();
  a.v2 = (seg.array() - a.q_bar).square().mean();
  return a;
}

Vector mq_binary_equation(const Matrix& x, const Vector& w, const Vector& alpha, double q,
                          double c) {
  const Vector eta = x * alpha;
  Vector score = Vector::Zero(x.cols());
  for (Index i = 0; i < eta.size(); ++i) {
    const double mu = logistic(eta[i]);
    const double v = mu * (1.0 - mu);
    const double r1 = std::sqrt((1.0 - mu) / mu);
    const double r0 = -std::sqrt(mu / (1.0 - mu));
    // Correction with the untilted influence: makes q = 0.5 Fisher consistent
    // and leaves the tilt to move the fit for other orders.
    const double expected = mu * psi_q(r1, 0.5, c) + (1.0 - mu) * psi_q(r0, 0.5, c);
    score += (psi_q(w[i] != 0.0 ? r1 : r0, q, c) - expected) * std::sqrt(v) * x.row(i).transpose();
  }
  return score;
}

MqBinFit fit_mq_binary(const Matrix& x, const Vector& w, double q, const MqOptions& opts,
                       const Vector& start) {
  check_q(q, opts.c);
  if (w.size() == 0 || w.minCoeff() == w.maxCoeff()) {
    throw Error(ErrorKind::kSeparation, "treatment is constant across the sample");
  }
  MqBinFit fit;
  fit.q = q;
  fit.c = opts.c;
  Vector alpha = start.size() == x.cols() ? start : Vector::Zero(x.cols());
  if (start.size() != x.cols()) alpha[0] = logit(std::clamp(w.mean(), 1e-6, 1 - 1e-6));
  Vector u = mq_binary_equation(x, w, alpha, q, opts.c);
  for (int it = 1; it <= opts.max_iter; ++it) {
    // Central-difference Jacobian of the estimating function.
    Matrix jac(x.cols(), x.cols());
    for (Index k = 0; k < x.cols(); ++k) {
      const double h = 1e-6 * (1.0 + std::abs(alpha[k]));
      Vector up = alpha;
      Vector dn = alpha;
      up[k] += h;
      dn[k] -= h;
      jac.col(k) = (mq_binary_equation(x, w, up, q, opts.c) - mq_binary_equation(x, w, dn, q, opts.c)) /
                   (2.0 * h);
    }
    Eigen::FullPivLU<Matrix> lu(-jac);
    if (!lu.isInvertible() || lu.rcond() < 1e-14) {
      throw Error(ErrorKind::kSeparation, "robust logistic information is singular at q = " +
                                              std::to_string(q));
    }
    const Vector step = lu.solve(u);
    double t = 1.0;
    Vector cand = alpha;
    Vector ucand = u;
    for (int h = 0; h < 40; ++h) {
      cand = alpha + t * step;
      ucand = mq_binary_equation(x, w, cand, q, opts.c);
      if (ucand.norm() < u.norm() || h == 39) break;
      t *= 0.5;
    }
    const double change = (cand - alpha).cwiseAbs().maxCoeff();
    alpha = cand;
    u = ucand;
    fit.iterations = it;
    if ((x * alpha).cwiseAbs().maxCoeff() > 30.0) {
      throw Error(ErrorKind::kSeparation,
                  "robust logistic fit diverges at q = " + std::to_string(q));
    }
    if (change <= opts.tol * (1.0 + alpha.cwiseAbs().maxCoeff()) || u.norm() < 1e-13) {
      fit.converged = true;
      break;
    }
  }
  if (!fit.converged) {
    throw ConvergenceError("robust logistic fit did not converge at q = " + std::to_string(q),
                           alpha);
  }
  fit.alpha = alpha;
  return fit;
}

MqEnsemble MqEnsemble::fit(const SampleView& sample, const MqOptions& opts) {
  return fit(std::make_shared<const LmmData>(LmmData::from_sample(sample)), opts);
}

MqEnsemble MqEnsemble::fit(std::shared_ptr<const LmmData> data, const MqOptions& opts) {
  MqEnsemble e;
  e.opts_ = opts;
  if (e.opts_.grid.empty()) e.opts_.grid = default_grid();
  check_grid(e.opts_.grid);
  e.data_ = std::move(data);
  const LmmData& d = *e.data_;
  const auto& grid = e.opts_.grid;
  e.fits_.resize(grid.size());
  e.cache_ = std::make_shared<std::map<double, MqFit>>();
  e.cache_mutex_ = std::make_shared<std::mutex>();

  const MqFit centre = fit_mq_linear(d.design, d.y, 0.5, e.opts_);
  (*e.cache_)[0.5] = centre;
  for (std::size_t g : outward_order(grid)) {
    // Warm start from the neighbour toward the centre, which is already fitted.
    const Vector* start = &centre.beta;
    if (grid[g] < 0.5 && g + 1 < grid.size() && grid[g + 1] <= 0.5) start = &e.fits_[g + 1].beta;
    if (grid[g] > 0.5 && g > 0 && grid[g - 1] >= 0.5) start = &e.fits_[g - 1].beta;
    if (start->size() == 0) start = &centre.beta;
    e.fits_[g] = grid[g] == 0.5 ? centre : fit_mq_linear(d.design, d.y, grid[g], e.opts_, *start);
    (*e.cache_)[grid[g]] = e.fits_[g];
  }

  Matrix fitted(d.y.size(), static_cast<Index>(grid.size()));
  for (std::size_t g = 0; g < grid.size(); ++g) fitted.col(g) = d.design * e.fits_[g].beta;
  e.q_unit_ = unit_q_coefficients(fitted, d.y, grid, &e.repaired_);
  e.q_area_.resize(d.num_areas());
  for (int j = 0; j < d.num_areas(); ++j) e.q_area_[j] = area_q(e.q_unit_, d.start[j], d.start[j + 1]);
  return e;
}

const MqFit& MqEnsemble::fit_at(double q) const {
  std::lock_guard<std::mutex> lock(*cache_mutex_);
  auto it = cache_->find(q);
  if (it != cache_->end()) return it->second;
  const MqFit& near = fits_[nearest(opts_.grid, q)];
  MqFit f = fit_mq_linear(data_->design, data_->y, q, opts_, near.beta);
  return cache_->emplace(q, std::move(f)).first->second;
}

MqPrediction mq_predict_outcomes(const MqEnsemble& ens, const PopulationFrame& pop) {
  if (ens.num_areas() != pop.num_areas()) {
    throw Error(ErrorKind::kContract, "ensemble and population disagree on the number of areas");
  }
  MqPrediction out;
  const Matrix x = outcome_design(pop);
  out.yhat.resize(pop.size());
  for (int j = 0; j < pop.num_areas(); ++j) {
    const MqFit& f = ens.area_fit(j);
    for (Index i : pop.units_in_area(j)) out.yhat[i] = x.row(i).dot(f.beta);
    if (ens.q_area()[j].synthetic) {
      out.warnings.push_back("area '" + pop.area_labels()[j] +
                             "' has no sampled units; median M-quantile prediction");
    }
  }
  return out;
}

MqBinEnsemble MqBinEnsemble::fit(const SampleView& sample, const MqOptions& opts) {
  MqBinEnsemble e;
  e.opts_ = opts;
  if (e.opts_.grid.empty()) e.opts_.grid = default_grid();
  check_grid(e.opts_.grid);
  e.design_ = propensity_design(sample.frame(), sample.units());
  e.w_ = sample.w();
  e.cache_ = std::make_shared<std::map<double, MqBinFit>>();
  e.cache_mutex_ = std::make_shared<std::mutex>();
  const auto& grid = e.opts_.grid;
  e.fits_.resize(grid.size());

  const MqBinFit centre = fit_mq_binary(e.design_, e.w_, 0.5, e.opts_);
  (*e.cache_)[0.5] = centre;
  // Extreme orders may have no finite solution for a binary outcome. The
  // grid is truncated at the first failure on each side of the centre.
  double lo_cut = 0.0, hi_cut = 1.0;
  std::vector<bool> ok(grid.size(), false);
  for (std::size_t g : outward_order(grid)) {
    if (grid[g] <= lo_cut || grid[g] >= hi_cut) continue;
    const Vector* start = &centre.alpha;
    if (grid[g] < 0.5 && g + 1 < grid.size() && grid[g + 1] <= 0.5) start = &e.fits_[g + 1].alpha;
    if (grid[g] > 0.5 && g > 0 && grid[g - 1] >= 0.5) start = &e.fits_[g - 1].alpha;
    if (start->size() == 0) start = &centre.alpha;
    try {
      e.fits_[g] = grid[g] == 0.5 ? centre : fit_mq_binary(e.design_, e.w_, grid[g], e.opts_, *start);
    } catch (const Error& err) {
      if (!err.numerical()) throw;
      (grid[g] < 0.5 ? lo_cut : hi_cut) = grid[g];
      e.warnings_.push_back("binary M-quantile grid truncated at q = " + std::to_string(grid[g]) + ": " +
                            err.what());
      continue;
    }
    ok[g] = true;
    (*e.cache_)[grid[g]] = e.fits_[g];
  }
  {
    std::vector<double> kept_grid;
    std::vector<MqBinFit> kept_fits;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      if (!ok[g] || grid[g] <= lo_cut || grid[g] >= hi_cut) continue;
      kept_grid.push_back(grid[g]);
      kept_fits.push_back(e.fits_[g]);
    }
    e.opts_.grid = std::move(kept_grid);
    e.fits_ = std::move(kept_fits);
  }

  // q_ij: the grid order whose fitted probability is closest to w_ij, ties
  // toward the centre of the grid.
  const Index n = e.w_.size();
  e.q_unit_.resize(n);
  Matrix p(n, static_cast<Index>(grid.size()));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    p.col(g) = (e.design_ * e.fits_[g].alpha).unaryExpr([](double v) { return logistic(v); });
  }
  for (Index r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t g = 1; g < grid.size(); ++g) {
      const double db = std::abs(p(r, best) - e.w_[r]);
      const double dg = std::abs(p(r, g) - e.w_[r]);
      if (dg < db || (dg == db && std::abs(grid[g] - 0.5) < std::abs(grid[best] - 0.5))) best = g;
    }
    e.q_unit_[r] = grid[best];
  }
  const int m = sample.num_areas();
  e.q_area_.resize(m);
  for (int j = 0; j < m; ++j) {
    e.q_area_[j] = area_q(e.q_unit_, sample.area_start(j), sample.area_start(j) + sample.area_size(j));
  }
  return e;
}

const MqBinFit& MqBinEnsemble::fit_at(double q) const {
  std::lock_guard<std::mutex> lock(*cache_mutex_);
  auto it = cache_->find(q);
  if (it != cache_->end()) return it->second;
  const MqBinFit& near = fits_[nearest(opts_.grid, q)];
  MqBinFit f;
  try {
    f = fit_mq_binary(design_, w_, q, opts_, near.alpha);
  } catch (const Error& err) {
    if (!err.numerical()) throw;
    // Fall back to linear interpolation between the bracketing grid fits.
    const auto& grid = opts_.grid;
    std::size_t hi = 0;
    while (hi < grid.size() && grid[hi] < q) ++hi;
    f = fits_[std::min(hi, grid.size() - 1)];
    if (hi > 0 && hi < grid.size()) {
      const double t = (q - grid[hi - 1]) / (grid[hi] - grid[hi - 1]);
      f.alpha = (1.0 - t) * fits_[hi - 1].alpha + t * fits_[hi].alpha;
    }
    f.q = q;
    f.interpolated = true;
  }
  return cache_->emplace(q, std::move(f)).first->second;
}

Vector mq_predict_propensity(const MqBinEnsemble& ens, const PopulationFrame& pop) {
  if (static_cast<int>(ens.q_area().size()) != pop.num_areas()) {
    throw Error(ErrorKind::kContract, "ensemble and population disagree on the number of areas");
  }
  const Matrix x = propensity_design(pop);
  Vector e(pop.size());
  for (int j = 0; j < pop.num_areas(); ++j) {
    const Vector& a = ens.area_fit(j).alpha;
    for (Index i : pop.units_in_area(j)) e[i] = logistic(x.row(i).dot(a));
  }
  return e;
}

}  // namespace ipwsae
