#include "ipwsae/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/distributions/students_t.hpp>

#include "text.hpp"

namespace ipwsae {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void mean_var(const std::vector<double>& v, double& mean, double& var) {
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size() - 1);
}

void check_e(const Vector& e, const PopulationFrame& pop) {
  if (e.size() != pop.size()) throw Error(ErrorKind::kContract, "one propensity per population unit is required");
}

// Linear-interpolation quantile (type 7).
double quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = p * static_cast<double>(v.size() - 1);
  const auto k = static_cast<std::size_t>(std::floor(h));
  if (k + 1 >= v.size()) return v.back();
  return v[k] + (h - static_cast<double>(k)) * (v[k + 1] - v[k]);
}

}  // namespace

Vector linearized_propensity(const Vector& e) {
  Vector l(e.size());
  for (Index i = 0; i < e.size(); ++i) {
    if (!(e[i] > 0.0 && e[i] < 1.0)) {
      throw Error(ErrorKind::kBounds, "linearized propensity needs e in (0,1); got " + detail::fmt(e[i]) +
                                          " at unit " + std::to_string(i + 1));
    }
    l[i] = std::log(e[i] / (1.0 - e[i]));
  }
  return l;
}

double t_two_sided_p(double t, double df) {
  if (std::isnan(t) || !(df > 0.0)) return kNaN;
  if (std::isinf(t)) return 0.0;
  const boost::math::students_t dist(df);
  return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

WelchResult welch_balance(const std::vector<double>& treated, const std::vector<double>& control,
                          BalanceStatistic stat) {
  if (treated.size() < 2 || control.size() < 2) {
    throw Error(ErrorKind::kContract, "balance test needs at least two units per group");
  }
  double mt, vt, mc, vc;
  mean_var(treated, mt, vt);
  mean_var(control, mc, vc);
  const double nt = static_cast<double>(treated.size());
  const double nc = static_cast<double>(control.size());
  WelchResult r;
  const double at = vt / nt, ac = vc / nc;
  r.df = (ac + at) * (ac + at) / (ac * ac / (nc - 1.0) + at * at / (nt - 1.0));
  const double denom = stat == BalanceStatistic::kStandardized ? std::sqrt((vc + vt) / 2.0) : std::sqrt(ac + at);
  const double diff = mt - mc;
  if (denom == 0.0) {
    r.delta = diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff);
    r.df = kNaN;
    r.p_value = diff == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.delta = diff / denom;
  r.p_value = t_two_sided_p(r.delta, r.df);
  return r;
}

BalanceReport balance_test(const PopulationFrame& pop, const Vector& e, const BalanceOptions& opts) {
  check_e(e, pop);
  BalanceReport rep;
  for (int j = 0; j < pop.num_areas(); ++j) {
    AreaBalance row;
    row.area = pop.area_labels()[j];
    std::vector<double> lt, lc;
    const auto& units = opts.sample_only ? pop.sampled_in_area(j) : pop.units_in_area(j);
    for (Index i : units) {
      const double l = linearized_propensity(e.segment(i, 1))[0];
      (pop.w(i) == 1 ? lt : lc).push_back(l);
    }
    row.n_treated = static_cast<Index>(lt.size());
    row.n_control = static_cast<Index>(lc.size());
    if (lt.size() < 2 || lc.size() < 2) {
      row.skipped = true;
      row.delta = row.df = row.p_value = kNaN;
    } else {
      const auto r = welch_balance(lt, lc, opts.statistic);
      row.delta = r.delta;
      row.df = r.df;
      row.p_value = r.p_value;
      row.zero_variance = std::isnan(r.df);
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

void write_balance_csv(std::ostream& out, const BalanceReport& report) {
  out << "area,delta,df,p_value,n_treated,n_control,flags\n";
  for (const auto& r : report.rows) {
    std::string flags = r.skipped ? "skipped_small_group" : (r.zero_variance ? "zero_variance" : "");
    out << detail::csv_field(r.area) << ',' << detail::fmt(r.delta, 12) << ',' << detail::fmt(r.df, 12) << ','
        << detail::fmt(r.p_value, 12) << ',' << r.n_treated << ',' << r.n_control << ',' << flags << '\n';
  }
}

Index SupportReport::dropped() const {
  Index n = 0;
  for (const auto& r : rows) n += r.dropped_treated + r.dropped_control;
  return n;
}

SupportResult common_support_filter(const PopulationFrame& pop, const Vector& e, const SupportOptions& opts) {
  check_e(e, pop);
  if (opts.mode == SupportMode::kQuantile && !(opts.lower >= 0.0 && opts.lower < opts.upper && opts.upper <= 1.0)) {
    throw Error(ErrorKind::kContract, "support quantiles must satisfy 0 <= lower < upper <= 1");
  }
  for (Index i = 0; i < e.size(); ++i) {
    if (!std::isfinite(e[i])) throw Error(ErrorKind::kContract, "propensities must be finite");
  }
  SupportReport rep;
  std::vector<bool> keep(static_cast<std::size_t>(pop.size()), true);
  for (int j = 0; j < pop.num_areas(); ++j) {
    AreaSupport row;
    row.area = pop.area_labels()[j];
    const auto& units = pop.units_in_area(j);
    row.n_before = static_cast<Index>(units.size());
    std::vector<Index> live = units;
    while (true) {
      std::vector<double> et, ec;
      for (Index i : live) (pop.w(i) == 1 ? et : ec).push_back(e[i]);
      if (et.empty() || ec.empty()) {
        row.single_group = true;
        break;
      }
      double lo, hi;
      if (opts.mode == SupportMode::kQuantile) {
        lo = std::max(quantile(et, opts.lower), quantile(ec, opts.lower));
        hi = std::min(quantile(et, opts.upper), quantile(ec, opts.upper));
      } else {
        lo = std::max(*std::min_element(et.begin(), et.end()), *std::min_element(ec.begin(), ec.end()));
        hi = std::min(*std::max_element(et.begin(), et.end()), *std::max_element(ec.begin(), ec.end()));
      }
      row.lo = lo;
      row.hi = hi;
      if (lo > hi) {
        row.disjoint = true;
        break;
      }
      std::vector<Index> next;
      for (Index i : live) {
        if (e[i] >= lo && e[i] <= hi) next.push_back(i);
      }
      const bool changed = next.size() != live.size();
      live = std::move(next);
      if (!opts.iterate || opts.mode == SupportMode::kQuantile || !changed) break;
    }
    if (row.disjoint || row.single_group) {
      // Leave the area untouched, but flag it.
      rep.warnings.push_back("area " + row.area +
                             (row.disjoint ? ": treated and control propensity ranges do not overlap; units retained"
                                           : ": only one treatment group present; units retained"));
      row.lo = row.hi = kNaN;
    } else {
      std::vector<bool> in(static_cast<std::size_t>(pop.size()), false);
      for (Index i : live) in[static_cast<std::size_t>(i)] = true;
      for (Index i : units) {
        if (in[static_cast<std::size_t>(i)]) continue;
        keep[static_cast<std::size_t>(i)] = false;
        (pop.w(i) == 1 ? row.dropped_treated : row.dropped_control)++;
      }
    }
    rep.rows.push_back(std::move(row));
  }
  std::vector<Index> kept;
  for (Index i = 0; i < pop.size(); ++i) {
    if (keep[static_cast<std::size_t>(i)]) kept.push_back(i);
  }
  return {pop.subset(kept), kept, std::move(rep)};
}

void write_support_csv(std::ostream& out, const SupportReport& report) {
  out << "area,lo,hi,n_before,dropped_treated,dropped_control,flags\n";
  for (const auto& r : report.rows) {
    std::string flags = r.disjoint ? "disjoint" : (r.single_group ? "single_group" : "");
    out << detail::csv_field(r.area) << ',' << detail::fmt(r.lo, 12) << ',' << detail::fmt(r.hi, 12) << ','
        << r.n_before << ',' << r.dropped_treated << ',' << r.dropped_control << ',' << flags << '\n';
  }
}

}  // namespace ipwsae
