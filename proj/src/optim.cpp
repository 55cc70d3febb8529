#include "ipwsae/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ipwsae {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kSchema: return "schema";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kBounds: return "bounds";
    case ErrorKind::kRank: return "rank";
    case ErrorKind::kConvergence: return "convergence";
    case ErrorKind::kSeparation: return "separation";
    case ErrorKind::kDegenerate: return "degenerate";
    case ErrorKind::kBootstrap: return "bootstrap";
    case ErrorKind::kContract: return "contract";
  }
  return "unknown";
}

NelderMeadResult nelder_mead(const std::function<double(const Vector&)>& f, const Vector& x0,
                             const NelderMeadOptions& opts) {
  const Index d = x0.size();
  std::vector<Vector> simplex(d + 1, x0);
  std::vector<double> fv(d + 1);
  for (Index i = 0; i < d; ++i) {
    const double step = x0[i] != 0.0 ? opts.initial_step * std::max(1.0, std::abs(x0[i]) * 0.1)
                                     : opts.initial_step;
    simplex[i + 1][i] += step;
  }
  for (Index i = 0; i <= d; ++i) fv[i] = f(simplex[i]);

  std::vector<Index> order(d + 1);
  NelderMeadResult res;
  int iter = 0;
  for (; iter < opts.max_iter; ++iter) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](Index a, Index b) { return fv[a] < fv[b]; });
    const double fbest = fv[order.front()];
    const double fworst = fv[order.back()];
    double spread = 0.0;
    for (Index i = 1; i <= d; ++i) {
      spread = std::max(spread, (simplex[order[i]] - simplex[order[0]]).cwiseAbs().maxCoeff());
    }
    if (std::abs(fworst - fbest) <= opts.f_rel_tol * (std::abs(fbest) + 1e-30) &&
        spread <= opts.x_tol) {
      res.converged = true;
      break;
    }

    Vector centroid = Vector::Zero(d);
    for (Index i = 0; i < d; ++i) centroid += simplex[order[i]];
    centroid /= static_cast<double>(d);
    const Index worst = order.back();
    const Index second = order[d - 1];

    const Vector xr = centroid + (centroid - simplex[worst]);
    const double fr = f(xr);
    if (fr < fbest) {
      const Vector xe = centroid + 2.0 * (centroid - simplex[worst]);
      const double fe = f(xe);
      if (fe < fr) {
        simplex[worst] = xe;
        fv[worst] = fe;
      } else {
        simplex[worst] = xr;
        fv[worst] = fr;
      }
      continue;
    }
    if (fr < fv[second]) {
      simplex[worst] = xr;
      fv[worst] = fr;
      continue;
    }
    const bool outside = fr < fv[worst];
    const Vector xc = outside ? Vector(centroid + 0.5 * (xr - centroid))
                              : Vector(centroid + 0.5 * (simplex[worst] - centroid));
    const double fc = f(xc);
    if (fc < std::min(fr, fv[worst])) {
      simplex[worst] = xc;
      fv[worst] = fc;
      continue;
    }
    const Vector& best = simplex[order.front()];
    for (Index i = 1; i <= d; ++i) {
      const Index k = order[i];
      simplex[k] = best + 0.5 * (simplex[k] - best);
      fv[k] = f(simplex[k]);
    }
  }
  const Index ib = std::min_element(fv.begin(), fv.end()) - fv.begin();
  res.x = simplex[ib];
  res.value = fv[ib];
  res.iterations = iter;
  return res;
}

NelderMeadResult newton_polish(const std::function<double(const Vector&)>& f, const Vector& x0,
                               int max_iter, double h) {
  const Index d = x0.size();
  Vector x = x0;
  double fx = f(x);
  NelderMeadResult res;
  int iter = 0;
  for (; iter < max_iter; ++iter) {
    Vector g(d);
    Matrix hess(d, d);
    for (Index a = 0; a < d; ++a) {
      Vector xp = x;
      Vector xm = x;
      xp[a] += h;
      xm[a] -= h;
      const double fp = f(xp);
      const double fm = f(xm);
      g[a] = (fp - fm) / (2 * h);
      hess(a, a) = (fp - 2 * fx + fm) / (h * h);
      for (Index b = 0; b < a; ++b) {
        Vector pp = x, pm = x, mp = x, mm = x;
        pp[a] += h; pp[b] += h;
        pm[a] += h; pm[b] -= h;
        mp[a] -= h; mp[b] += h;
        mm[a] -= h; mm[b] -= h;
        hess(a, b) = hess(b, a) = (f(pp) - f(pm) - f(mp) + f(mm)) / (4 * h * h);
      }
    }
    if (!g.allFinite() || !hess.allFinite()) break;
    Eigen::SelfAdjointEigenSolver<Matrix> es(hess);
    // Newton on a locally convex model only; otherwise stop.
    if (es.eigenvalues().minCoeff() <= 0.0) break;
    const Vector step = -es.eigenvectors() *
                        (es.eigenvectors().transpose() * g).cwiseQuotient(es.eigenvalues());
    double t = 1.0;
    bool moved = false;
    for (int k = 0; k < 20; ++k) {
      const Vector xn = x + t * step;
      const double fn = f(xn);
      if (fn < fx) {
        x = xn;
        const double df = fx - fn;
        fx = fn;
        moved = true;
        if (df <= 1e-14 * (std::abs(fx) + 1.0)) iter = max_iter;
        break;
      }
      t *= 0.5;
    }
    if (!moved) {
      res.converged = true;
      break;
    }
  }
  if (iter >= max_iter) res.converged = true;
  res.x = x;
  res.value = fx;
  res.iterations = iter;
  return res;
}

Matrix pinv_symmetric(const Matrix& a, double rel_tol, bool* singular) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  const Vector& ev = es.eigenvalues();
  const double cutoff = rel_tol * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
  Vector inv = Vector::Zero(ev.size());
  bool sing = false;
  for (Index i = 0; i < ev.size(); ++i) {
    if (std::abs(ev[i]) > cutoff) {
      inv[i] = 1.0 / ev[i];
    } else {
      sing = true;
    }
  }
  if (singular) *singular = sing;
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

double median(std::vector<double> values) {
  if (values.empty()) return std::nan("");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  double m = values[mid];
  if (values.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(values.begin(), values.begin() + mid));
  }
  return m;
}

}  // namespace ipwsae
