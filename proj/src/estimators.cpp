#include "ipwsae/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "text.hpp"

namespace ipwsae {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Re-raises a fit failure with the pipeline stage prefixed.
template <class F>
auto staged(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConvergenceError& e) {
    throw ConvergenceError(std::string(stage) + ": " + e.what(), e.best());
  } catch (const Error& e) {
    throw Error(e.kind(), std::string(stage) + ": " + e.what());
  }
}

void check_propensity(const Vector& e, Index n) {
  if (e.size() != n) throw Error(ErrorKind::kContract, "one propensity per population unit is required");
  for (Index i = 0; i < n; ++i) {
    if (!(e[i] > 0.0 && e[i] < 1.0)) {
      throw Error(ErrorKind::kContract, "propensities must lie strictly inside (0,1)");
    }
  }
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::kDirect: return "direct";
    case Method::kEblup: return "eblup";
    case Method::kMq: return "mq";
  }
  return "unknown";
}

Method parse_method(const std::string& s) {
  if (s == "direct") return Method::kDirect;
  if (s == "eblup") return Method::kEblup;
  if (s == "mq") return Method::kMq;
  throw Error(ErrorKind::kValidation, "unknown method '" + s + "'");
}

Vector clip_propensity(const Vector& e, double eps) {
  if (!(eps >= 0.0 && eps < 0.5)) throw Error(ErrorKind::kContract, "clip must lie in [0, 0.5)");
  return e.cwiseMax(eps).cwiseMin(1.0 - eps);
}

std::optional<double> AreaEffect::rmse() const {
  if (!mse) return std::nullopt;
  return std::sqrt(std::max(*mse, 0.0));
}

std::string AreaEffect::flag_string() const {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ';';
    s += name;
  };
  add(undefined, "undefined");
  add(inestimable, "inestimable");
  add(zero_treated_sample, "zero_treated_sample");
  add(zero_control_sample, "zero_control_sample");
  add(synthetic, "synthetic");
  return s;
}

void write_area_table_csv(std::ostream& out, const std::vector<AreaEffectTable>& tables) {
  auto num = [&](double v) {
    if (std::isfinite(v)) {
      out << v;
    } else {
      out << "NA";
    }
  };
  out.precision(12);
  out << "area,method,estimate,rmse,ci_lo,ci_hi,flags\n";
  for (const auto& t : tables) {
    for (const auto& a : t.rows) {
      out << detail::csv_field(a.area) << ',' << to_string(t.method) << ',';
      num(a.estimate);
      out << ',';
      num(a.rmse().value_or(kNaN));
      out << ',';
      num(a.interval ? a.interval->first : kNaN);
      out << ',';
      num(a.interval ? a.interval->second : kNaN);
      out << ',' << a.flag_string() << '\n';
    }
  }
}

IpwWeights d_weights(const PopulationFrame& pop, const Vector& ehat) {
  check_propensity(ehat, pop.size());
  IpwWeights wt;
  const int m = pop.num_areas();
  wt.ehat = ehat;
  wt.K = Vector::Zero(m);
  wt.T = Vector::Zero(m);
  wt.D = Vector::Zero(pop.size());
  wt.inestimable.assign(m, false);
  for (int j = 0; j < m; ++j) {
    for (Index i : pop.units_in_area(j)) {
      if (pop.w(i)) {
        wt.K[j] += 1.0 / ehat[i];
      } else {
        wt.T[j] += 1.0 / (1.0 - ehat[i]);
      }
    }
    wt.inestimable[j] = wt.K[j] == 0.0 || wt.T[j] == 0.0;
    for (Index i : pop.units_in_area(j)) {
      if (pop.w(i)) {
        wt.D[i] = 1.0 / (wt.K[j] * ehat[i]);
      } else {
        wt.D[i] = -1.0 / (wt.T[j] * (1.0 - ehat[i]));
      }
    }
  }
  return wt;
}

AreaEffectTable ipw_direct(const PopulationFrame& pop, const Vector& ehat) {
  check_propensity(ehat, pop.size());
  AreaEffectTable t;
  t.method = Method::kDirect;
  for (int j = 0; j < pop.num_areas(); ++j) {
    AreaEffect a;
    a.area = pop.area_labels()[j];
    double st = 0.0, sc = 0.0, yt = 0.0, yc = 0.0;
    for (Index i : pop.sampled_in_area(j)) {
      const double y = *pop.y(i);
      if (pop.w(i)) {
        st += 1.0 / ehat[i];
        yt += y / ehat[i];
      } else {
        sc += 1.0 / (1.0 - ehat[i]);
        yc += y / (1.0 - ehat[i]);
      }
    }
    a.synthetic = pop.sample_count(j) == 0;
    a.zero_treated_sample = st == 0.0;
    a.zero_control_sample = sc == 0.0;
    if (a.zero_treated_sample || a.zero_control_sample) {
      a.undefined = true;
      a.estimate = a.treated_term = a.control_term = kNaN;
    } else {
      a.treated_term = yt / st;
      a.control_term = yc / sc;
      a.estimate = a.treated_term - a.control_term;
    }
    t.rows.push_back(std::move(a));
  }
  return t;
}

AreaEffectTable ipw_pate(const PopulationFrame& pop, const Vector& yhat, const IpwWeights& wt) {
  if (yhat.size() != pop.size() || wt.D.size() != pop.size()) {
    throw Error(ErrorKind::kContract, "predictions and weights must cover the population");
  }
  AreaEffectTable t;
  t.method = Method::kEblup;
  for (int j = 0; j < pop.num_areas(); ++j) {
    AreaEffect a;
    a.area = pop.area_labels()[j];
    a.synthetic = pop.sample_count(j) == 0;
    int nt = 0;
    for (Index i : pop.sampled_in_area(j)) nt += pop.w(i);
    a.zero_treated_sample = nt == 0;
    a.zero_control_sample = nt == static_cast<int>(pop.sample_count(j));
    if (wt.inestimable[j]) {
      a.inestimable = a.undefined = true;
      a.estimate = a.treated_term = a.control_term = kNaN;
      a.warnings.push_back("population has no treated or no control units");
      t.rows.push_back(std::move(a));
      continue;
    }
    for (Index i : pop.units_in_area(j)) {
      const double y = pop.in_sample(i) ? *pop.y(i) : yhat[i];
      if (pop.w(i)) {
        a.treated_term += wt.D[i] * y;
      } else {
        a.control_term -= wt.D[i] * y;
      }
    }
    a.estimate = a.treated_term - a.control_term;
    t.rows.push_back(std::move(a));
  }
  return t;
}

EblupEstimate estimate_ipw_eblup(const PopulationFrame& pop, const EstimationOptions& opts) {
  EblupEstimate r;
  const SampleView sample(pop);
  r.glmm = staged("propensity GLMM", [&] { return fit_logit_laplace(sample, opts.glmm); });
  const Vector e = clip_propensity(predict_propensity(r.glmm, pop), opts.clip);
  r.weights = d_weights(pop, e);
  r.lmm = staged("outcome LMM", [&] { return fit_reml(sample, opts.lmm); });
  const auto pred = predict_outcomes(r.lmm, pop);
  r.yhat = pred.yhat;
  r.table = ipw_pate(pop, r.yhat, r.weights);
  r.table.method = Method::kEblup;
  return r;
}

MqEstimate estimate_ipw_mq(const PopulationFrame& pop, const EstimationOptions& opts) {
  const SampleView sample(pop);
  MqBinEnsemble bin = staged("propensity M-quantile", [&] { return MqBinEnsemble::fit(sample, opts.mq); });
  MqEnsemble ens = staged("outcome M-quantile", [&] { return MqEnsemble::fit(sample, opts.mq); });
  MqEstimate r{{}, std::move(ens), std::move(bin), {}, {}};
  const Vector e = clip_propensity(
      staged("propensity M-quantile", [&] { return mq_predict_propensity(r.propensity, pop); }),
      opts.clip);
  r.weights = d_weights(pop, e);
  const auto pred = staged("outcome M-quantile", [&] { return mq_predict_outcomes(r.outcome, pop); });
  r.yhat = pred.yhat;
  r.table = ipw_pate(pop, r.yhat, r.weights);
  r.table.method = Method::kMq;
  return r;
}

BenchmarkWeights benchmark_weights(const IpwWeights& wt) {
  BenchmarkWeights b;
  b.K_total = wt.K.sum();
  b.T_total = wt.T.sum();
  if (b.K_total <= 0.0 || b.T_total <= 0.0) {
    throw Error(ErrorKind::kValidation, "population has no treated or no control units");
  }
  b.B = wt.K / b.K_total;
  b.C = wt.T / b.T_total;
  const Index m = wt.K.size();
  b.A = Vector::Constant(m, kNaN);
  b.A_available.assign(m, false);
  for (Index j = 0; j < m; ++j) {
    if (std::abs(b.B[j] - b.C[j]) < 1e-9) {
      b.A[j] = b.B[j];
      b.A_available[j] = true;
    }
  }
  return b;
}

double national_effect(const AreaEffectTable& table, const BenchmarkWeights& bench) {
  if (static_cast<Index>(table.rows.size()) != bench.B.size()) {
    throw Error(ErrorKind::kContract, "benchmark weights do not match the area table");
  }
  double treated = 0.0;
  double control = 0.0;
  for (std::size_t j = 0; j < table.rows.size(); ++j) {
    const auto& a = table.rows[j];
    if (bench.B[j] != 0.0) {
      if (!std::isfinite(a.treated_term)) {
        throw Error(ErrorKind::kValidation, "area '" + a.area + "' lacks a treated term");
      }
      treated += bench.B[j] * a.treated_term;
    }
    if (bench.C[j] != 0.0) {
      if (!std::isfinite(a.control_term)) {
        throw Error(ErrorKind::kValidation, "area '" + a.area + "' lacks a control term");
      }
      control += bench.C[j] * a.control_term;
    }
  }
  return treated - control;
}

double national_effect_direct(const PopulationFrame& pop, const Vector& yhat, const Vector& ehat) {
  check_propensity(ehat, pop.size());
  double kt = 0.0, tt = 0.0, yt = 0.0, yc = 0.0;
  for (Index i = 0; i < pop.size(); ++i) {
    const double y = pop.in_sample(i) ? *pop.y(i) : yhat[i];
    if (pop.w(i)) {
      kt += 1.0 / ehat[i];
      yt += y / ehat[i];
    } else {
      tt += 1.0 / (1.0 - ehat[i]);
      yc += y / (1.0 - ehat[i]);
    }
  }
  return yt / kt - yc / tt;
}

}  // namespace ipwsae
