#include "ipwsae/simgen.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include "ipwsae/optim.hpp"
#include "parallel.hpp"
#include "text.hpp"

namespace ipwsae {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double spread_sd(double v, SpreadConvention c) { return c == SpreadConvention::kVariance ? std::sqrt(v) : v; }

std::string area_label(int j, int m) {
  const int width = static_cast<int>(std::to_string(m).size());
  std::string s = std::to_string(j + 1);
  return "area" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

double median_finite(const std::vector<double>& v) {
  std::vector<double> f;
  for (double x : v)
    if (std::isfinite(x)) f.push_back(x);
  return f.empty() ? kNaN : median(std::move(f));
}

using detail::fmt;

struct MethodRow {
  Vector est, mse, lo, hi, target;
  std::string failure;
};

struct ReplicationOutput {
  Vector truth;
  std::vector<MethodRow> rows;
  Index contaminated = 0;
  Index flipped = 0;
};

MethodRow empty_row(int m) {
  const Vector nan = Vector::Constant(m, kNaN);
  return {nan, nan, nan, nan, nan, {}};
}

void fill_row(MethodRow& row, const AreaEffectTable& t) {
  for (std::size_t j = 0; j < t.rows.size(); ++j) {
    const auto& a = t.rows[j];
    row.est[j] = a.estimate;
    if (a.mse) row.mse[j] = *a.mse;
    if (a.interval) {
      row.lo[j] = a.interval->first;
      row.hi[j] = a.interval->second;
    }
  }
}

// Census contrast with the estimator's own weights; needs every outcome.
Vector conditional_target(const PopulationFrame& pop, const IpwWeights& wt) {
  Vector t = Vector::Zero(pop.num_areas());
  for (Index i = 0; i < pop.size(); ++i) {
    if (!pop.y(i)) return Vector::Constant(pop.num_areas(), kNaN);
    t[pop.area(i)] += wt.D[i] * *pop.y(i);
  }
  return t;
}

// Runs every requested method on one sampled population.
std::vector<MethodRow> evaluate(const PopulationFrame& pop, const StudyConfig& cfg) {
  const int m = pop.num_areas();
  std::vector<MethodRow> rows;
  Vector direct_e;
  std::string direct_failure;
  bool need_direct_e = false;
  for (Method meth : cfg.methods) need_direct_e |= meth == Method::kDirect;
  for (Method meth : cfg.methods) {
    MethodRow row = empty_row(m);
    try {
      if (meth == Method::kEblup) {
        auto r = estimate_ipw_eblup(pop, cfg.estimation);
        if (cfg.mse) attach_mse(r.table, mse_eblup_analytic(r.lmm, r.weights, pop, cfg.mse_options));
        fill_row(row, r.table);
        row.target = conditional_target(pop, r.weights);
        direct_e = r.weights.ehat;
      } else if (meth == Method::kMq) {
        auto r = estimate_ipw_mq(pop, cfg.estimation);
        if (cfg.mse) attach_mse(r.table, mse_mq_analytic(r.outcome, r.weights, pop));
        fill_row(row, r.table);
        row.target = conditional_target(pop, r.weights);
      }
    } catch (const Error& e) {
      row.failure = e.what();
    }
    rows.push_back(std::move(row));
  }
  if (need_direct_e) {
    for (std::size_t k = 0; k < cfg.methods.size(); ++k) {
      if (cfg.methods[k] != Method::kDirect) continue;
      MethodRow& row = rows[k];
      try {
        if (direct_e.size() == 0) {
          const auto g = fit_logit_laplace(SampleView(pop), cfg.estimation.glmm);
          direct_e = clip_propensity(predict_propensity(g, pop), cfg.estimation.clip);
        }
        fill_row(row, ipw_direct(pop, direct_e));
      } catch (const Error& e) {
        row.failure = std::string("propensity GLMM: ") + e.what();
      }
    }
  }
  return rows;
}

StudyResult collect(const ScenarioSpec& spec, const StudyConfig& cfg, std::vector<std::string> labels,
                    std::vector<ReplicationOutput>& outs) {
  const int reps = static_cast<int>(outs.size());
  const int m = static_cast<int>(labels.size());
  StudyResult res;
  res.spec = spec;
  res.config = cfg;
  res.area_labels = std::move(labels);
  res.truth.resize(reps, m);
  for (Method meth : cfg.methods) {
    MethodSeries s;
    s.method = meth;
    s.est.resize(reps, m);
    s.mse.resize(reps, m);
    s.lo.resize(reps, m);
    s.hi.resize(reps, m);
    s.target.resize(reps, m);
    res.series.push_back(std::move(s));
  }
  double contaminated = 0.0, flipped = 0.0, units = 0.0;
  for (int s = 0; s < reps; ++s) {
    const auto& o = outs[s];
    res.truth.row(s) = o.truth.transpose();
    contaminated += static_cast<double>(o.contaminated);
    flipped += static_cast<double>(o.flipped);
    units += static_cast<double>(spec.m) * spec.N;
    for (std::size_t k = 0; k < cfg.methods.size(); ++k) {
      auto& ser = res.series[k];
      const auto& row = o.rows[k];
      ser.est.row(s) = row.est.transpose();
      ser.mse.row(s) = row.mse.transpose();
      ser.lo.row(s) = row.lo.transpose();
      ser.hi.row(s) = row.hi.transpose();
      ser.target.row(s) = row.target.transpose();
      if (!row.failure.empty()) ser.failures.push_back("rep " + std::to_string(s) + ": " + row.failure);
    }
  }
  res.contamination_rate = units > 0 ? contaminated / units : 0.0;
  res.flip_rate = units > 0 ? flipped / units : 0.0;
  for (const auto& ser : res.series) res.summary.push_back(summarize(ser.method, ser, res.truth, cfg.mse_target));
  return res;
}

}  // namespace

ScenarioSpec ScenarioSpec::parse(const std::string& id) {
  if (id.size() != 2 || id[0] < '1' || id[0] > '4' || (id[1] != 'a' && id[1] != 'b')) {
    throw Error(ErrorKind::kValidation, "unknown scenario '" + id + "' (expected 1a..4b)");
  }
  ScenarioSpec s;
  s.scenario = id[0] - '0';
  s.variant = id[1];
  s.tau_spread = s.variant == 'a' ? 1.0 : 3.0;
  s.outliers = s.scenario == 2 || s.scenario == 4;
  s.contamination = s.outliers ? 0.03 : 0.0;
  s.misclassification = s.scenario >= 3 ? 0.02 : 0.0;
  return s;
}

std::string ScenarioSpec::id() const { return std::to_string(scenario) + variant; }

SimPopulation generate_population(const ScenarioSpec& spec, Rng& rng) {
  if (spec.m < 1 || spec.N < 1 || spec.n < 0 || spec.n > spec.N) {
    throw Error(ErrorKind::kValidation, "scenario sizes must satisfy m >= 1 and 0 <= n <= N");
  }
  const auto sd = [&](double v) { return spread_sd(v, spec.convention); };
  const Index total = static_cast<Index>(spec.m) * spec.N;
  SimPopulation sp{PopulationFrame::create({}, Matrix(0, 2), {}, {}, {}), Vector(spec.m), Vector(total),
                   Vector(total), 0, 0};
  std::vector<std::string> labels(total);
  Matrix x(total, 2);
  std::vector<int> w(total);
  std::vector<std::optional<double>> y(total);
  const double p = spec.misclassification;
  for (int j = 0; j < spec.m; ++j) {
    const std::string label = area_label(j, spec.m);
    sp.tau[j] = rng.normal(spec.tau_mean, sd(spec.tau_spread));
    const bool outlier_area = spec.outliers && j >= spec.m - spec.outlier_areas;
    const double u = outlier_area ? rng.normal(spec.u_out_mean, sd(spec.u_out_spread)) : rng.normal(0.0, sd(spec.u_spread));
    const double nu = rng.normal(0.0, sd(spec.nu_spread));
    for (int i = 0; i < spec.N; ++i) {
      const Index k = static_cast<Index>(j) * spec.N + i;
      labels[k] = label;
      x(k, 0) = std::exp(rng.normal(spec.x1_meanlog, sd(spec.x1_spread)));
      x(k, 1) = rng.uniform();
      const double e = logistic(-1.0 + 0.5 * x(k, 1) + nu);
      sp.true_e[k] = e;
      sp.effective_e[k] = (1.0 - p) * e + p * (1.0 - e);
      int wi = rng.bernoulli(e) ? 1 : 0;
      if (p > 0.0 && rng.bernoulli(p)) {
        wi = 1 - wi;
        ++sp.flipped;
      }
      w[k] = wi;
      double eps;
      if (spec.contamination > 0.0 && rng.bernoulli(spec.contamination)) {
        eps = rng.normal(spec.eps_out_mean, sd(spec.eps_out_spread));
        ++sp.contaminated;
      } else {
        eps = rng.normal(0.0, sd(spec.eps_spread));
      }
      y[k] = 100.0 + 2.0 * x(k, 0) + x(k, 1) + sp.tau[j] * wi + u + eps;
    }
  }
  sp.pop = PopulationFrame::create(labels, std::move(x), std::move(w), std::move(y),
                                   std::vector<bool>(static_cast<std::size_t>(total), false), {"x1", "x2"});
  return sp;
}

Vector population_ipw_truth(const PopulationFrame& pop, const Vector& e) {
  const auto census = pop.with_sample(std::vector<bool>(static_cast<std::size_t>(pop.size()), true));
  const auto t = ipw_direct(census, e);
  Vector out(pop.num_areas());
  for (int j = 0; j < pop.num_areas(); ++j) out[j] = t.rows[j].estimate;
  return out;
}

std::vector<AreaAccuracy> rb_rrmse(const Matrix& est, const Matrix& truth,
                                   const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>* mask) {
  if (est.rows() != truth.rows() || est.cols() != truth.cols()) {
    throw Error(ErrorKind::kContract, "estimate and truth series differ in shape");
  }
  std::vector<AreaAccuracy> out(static_cast<std::size_t>(est.cols()));
  for (Index j = 0; j < est.cols(); ++j) {
    double sum_err = 0.0, sum_sq = 0.0, sum_truth = 0.0;
    int used = 0;
    for (Index s = 0; s < est.rows(); ++s) {
      if (mask && !(*mask)(s, j)) continue;
      if (!std::isfinite(est(s, j)) || !std::isfinite(truth(s, j))) continue;
      const double d = est(s, j) - truth(s, j);
      sum_err += d;
      sum_sq += d * d;
      sum_truth += truth(s, j);
      ++used;
    }
    auto& a = out[static_cast<std::size_t>(j)];
    a.used = used;
    const double tbar = used > 0 ? sum_truth / used : 0.0;
    if (used == 0 || tbar == 0.0) {
      a.rb = a.rrmse = kNaN;
      continue;
    }
    a.defined = true;
    a.rb = sum_err / used / tbar * 100.0;
    a.rrmse = std::sqrt(sum_sq / used) / tbar * 100.0;
  }
  return out;
}

Vector coverage_rate(const Matrix& lo, const Matrix& hi, const Matrix& truth) {
  Vector cr(truth.cols());
  for (Index j = 0; j < truth.cols(); ++j) {
    int used = 0, hit = 0;
    for (Index s = 0; s < truth.rows(); ++s) {
      if (!std::isfinite(lo(s, j)) || !std::isfinite(hi(s, j)) || !std::isfinite(truth(s, j))) continue;
      ++used;
      hit += lo(s, j) <= truth(s, j) && truth(s, j) <= hi(s, j);
    }
    cr[j] = used > 0 ? static_cast<double>(hit) / used : kNaN;
  }
  return cr;
}

Vector rmse_relative_bias(const Matrix& mse, const Matrix& est, const Matrix& truth) {
  Vector rb(truth.cols());
  for (Index j = 0; j < truth.cols(); ++j) {
    double root = 0.0, sq = 0.0;
    int used = 0;
    for (Index s = 0; s < truth.rows(); ++s) {
      if (!std::isfinite(mse(s, j)) || !std::isfinite(est(s, j)) || !std::isfinite(truth(s, j))) continue;
      root += std::sqrt(std::max(mse(s, j), 0.0));
      const double d = est(s, j) - truth(s, j);
      sq += d * d;
      ++used;
    }
    const double emp = used > 0 ? std::sqrt(sq / used) : 0.0;
    rb[j] = used > 0 && emp > 0.0 ? (root / used - emp) / emp * 100.0 : kNaN;
  }
  return rb;
}

MethodSummary summarize(Method method, const MethodSeries& ser, const Matrix& truth, MseTarget target) {
  MethodSummary s;
  s.method = method;
  s.accuracy = rb_rrmse(ser.est, truth);
  const Matrix& ref = target == MseTarget::kConditional ? ser.target : truth;
  s.cr = coverage_rate(ser.lo, ser.hi, ref);
  s.rmse_rb = rmse_relative_bias(ser.mse, ser.est, ref);
  std::vector<double> rb, abs_rb, rrmse;
  for (const auto& a : s.accuracy) {
    rb.push_back(a.rb);
    abs_rb.push_back(std::abs(a.rb));
    rrmse.push_back(a.rrmse);
  }
  s.median_rb = median_finite(rb);
  s.median_abs_rb = median_finite(abs_rb);
  s.median_rrmse = median_finite(rrmse);
  s.median_cr = median_finite(std::vector<double>(s.cr.data(), s.cr.data() + s.cr.size()));
  s.median_rmse_rb = median_finite(std::vector<double>(s.rmse_rb.data(), s.rmse_rb.data() + s.rmse_rb.size()));
  s.failed_reps = static_cast<int>(ser.failures.size());
  return s;
}

const MethodSeries& StudyResult::series_for(Method m) const {
  for (const auto& s : series)
    if (s.method == m) return s;
  throw Error(ErrorKind::kContract, "method not part of the study");
}

const MethodSummary& StudyResult::summary_for(Method m) const {
  for (const auto& s : summary)
    if (s.method == m) return s;
  throw Error(ErrorKind::kContract, "method not part of the study");
}

StudyResult run_study(const ScenarioSpec& spec, const StudyConfig& cfg) {
  if (cfg.reps < 1) throw Error(ErrorKind::kValidation, "at least one replication is required");
  if (cfg.methods.empty()) throw Error(ErrorKind::kValidation, "no methods requested");
  std::vector<ReplicationOutput> outs(static_cast<std::size_t>(cfg.reps));
  const Rng master(spec.seed);
  detail::parallel_for(cfg.reps, cfg.workers, [&](int s) {
    const Rng rep = master.substream(static_cast<std::uint64_t>(s));
    Rng gen = rep.substream(0);
    SimPopulation sp = generate_population(spec, gen);
    const auto pop = draw_sample(sp.pop, std::vector<Index>(static_cast<std::size_t>(spec.m), spec.n),
                                 rep.substream(1));
    ReplicationOutput& o = outs[static_cast<std::size_t>(s)];
    o.truth = cfg.truth == TruthMode::kAreaEffect ? sp.tau : population_ipw_truth(sp.pop, sp.effective_e);
    o.contaminated = sp.contaminated;
    o.flipped = sp.flipped;
    o.rows = evaluate(pop, cfg);
  });
  std::vector<std::string> labels;
  for (int j = 0; j < spec.m; ++j) labels.push_back(area_label(j, spec.m));
  return collect(spec, cfg, std::move(labels), outs);
}

DesignStudyResult run_design_study(const PopulationFrame& pseudo, const DesignConfig& cfg) {
  if (!(cfg.fraction > 0.0 && cfg.fraction <= 1.0)) {
    throw Error(ErrorKind::kValidation, "sampling fraction must lie in (0, 1]");
  }
  if (cfg.study.reps < 1) throw Error(ErrorKind::kValidation, "at least one replication is required");
  for (Index i = 0; i < pseudo.size(); ++i) {
    if (!pseudo.y(i)) {
      throw Error(ErrorKind::kValidation, "pseudo-population needs every outcome (row " +
                                              std::to_string(pseudo.source_row(i)) + ")");
    }
  }
  DesignStudyResult out;
  const auto census = pseudo.with_sample(std::vector<bool>(static_cast<std::size_t>(pseudo.size()), true));
  const auto g = fit_logit_laplace(SampleView(census), cfg.study.estimation.glmm);
  const Vector e = clip_propensity(predict_propensity(g, census), cfg.study.estimation.clip);
  out.true_effect = population_ipw_truth(pseudo, e);

  const int m = pseudo.num_areas();
  std::vector<Index> sizes(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    const double nj = std::round(cfg.fraction * static_cast<double>(pseudo.population_count(j)));
    sizes[static_cast<std::size_t>(j)] = std::max<Index>(1, static_cast<Index>(nj));
  }
  std::vector<ReplicationOutput> outs(static_cast<std::size_t>(cfg.study.reps));
  const Rng master(cfg.seed);
  detail::parallel_for(cfg.study.reps, cfg.study.workers, [&](int s) {
    const auto pop = draw_sample(pseudo, sizes, master.substream(static_cast<std::uint64_t>(s)));
    auto& o = outs[static_cast<std::size_t>(s)];
    o.truth = out.true_effect;
    o.rows = evaluate(pop, cfg.study);
  });
  ScenarioSpec spec;
  spec.m = m;
  spec.N = 0;
  spec.seed = cfg.seed;
  out.study = collect(spec, cfg.study, pseudo.area_labels(), outs);

  const MethodSeries* direct = nullptr;
  for (const auto& s : out.study.series)
    if (s.method == Method::kDirect) direct = &s;
  if (direct) {
    auto mean_mse = [&](const MethodSeries& ser, Index j) {
      double sum = 0.0;
      int used = 0;
      for (Index s = 0; s < ser.est.rows(); ++s) {
        if (!std::isfinite(ser.est(s, j))) continue;
        const double d = ser.est(s, j) - out.true_effect[j];
        sum += d * d;
        ++used;
      }
      return used > 0 ? sum / used : kNaN;
    };
    for (const auto& ser : out.study.series) {
      if (ser.method == Method::kDirect) continue;
      Vector eff(m);
      for (int j = 0; j < m; ++j) {
        const double dm = mean_mse(*direct, j);
        eff[j] = std::isfinite(dm) && dm > 0.0 ? 100.0 * mean_mse(ser, j) / dm : kNaN;
      }
      out.efficiency.emplace_back(ser.method, eff);
    }
  }
  return out;
}

void write_study_csv(std::ostream& out, const StudyResult& r) {
  out << "area,method,rb,rrmse,cr,rmse_rb,reps_used\n";
  for (const auto& s : r.summary) {
    for (std::size_t j = 0; j < s.accuracy.size(); ++j) {
      const auto& a = s.accuracy[j];
      out << detail::csv_field(r.area_labels[j]) << ',' << to_string(s.method) << ',' << fmt(a.rb) << ',' << fmt(a.rrmse) << ','
          << fmt(s.cr[static_cast<Index>(j)] * 100.0) << ',' << fmt(s.rmse_rb[static_cast<Index>(j)]) << ','
          << a.used << '\n';
    }
  }
}

void write_summary_csv(std::ostream& out, const StudyResult& r) {
  out << "method,median_rb,median_abs_rb,median_rrmse,median_cr,median_rmse_rb,failed_reps\n";
  for (const auto& s : r.summary) {
    out << to_string(s.method) << ',' << fmt(s.median_rb) << ',' << fmt(s.median_abs_rb) << ','
        << fmt(s.median_rrmse) << ',' << fmt(s.median_cr * 100.0) << ',' << fmt(s.median_rmse_rb) << ','
        << s.failed_reps << '\n';
  }
}

}  // namespace ipwsae
