#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "ipwsae/estimators.hpp"
#include "ipwsae/mse.hpp"
#include "ipwsae/rng.hpp"

namespace ipwsae {

// How the second argument of N(., .) and LogNormal(., .) is read.
enum class SpreadConvention { kVariance, kSd };

// What an area's "true" effect is in a replication.
enum class TruthMode {
  kAreaEffect,     // the drawn tau_j
  kPopulationIpw,  // census Hajek IPW contrast with the true propensity
};

// Reference value for judging MSE estimates (coverage and root-MSE bias).
enum class MseTarget {
  kTruth,        // the same truth as the accuracy metrics
  kConditional,  // census IPW contrast with the method's own estimated weights
};

struct ScenarioSpec {
  int scenario = 1;   // 1..4
  char variant = 'a';  // a: tau ~ N(10, 1), b: tau ~ N(10, 3)
  int m = 50;
  int N = 100;
  int n = 5;
  double tau_mean = 10.0;
  double tau_spread = 1.0;
  double u_spread = 3.0;
  double eps_spread = 6.0;
  double nu_spread = 0.25;
  double x1_meanlog = 1.0;
  double x1_spread = 0.5;
  bool outliers = false;
  int outlier_areas = 11;  // the last areas by index
  double u_out_mean = 9.0;
  double u_out_spread = 20.0;
  double contamination = 0.0;  // 1 - Pr(delta_1)
  double eps_out_mean = 20.0;
  double eps_out_spread = 150.0;
  double misclassification = 0.0;  // 1 - Pr(delta_2)
  SpreadConvention convention = SpreadConvention::kVariance;
  std::uint64_t seed = 1;

  // "1a" .. "4b" with the simulation defaults for that scenario.
  static ScenarioSpec parse(const std::string& id);
  std::string id() const;
};

struct SimPopulation {
  PopulationFrame pop;  // outcomes known for every unit, nothing sampled
  Vector tau;           // per area
  Vector true_e;        // per unit, before misclassification
  Vector effective_e;   // Pr(w = 1 | x), accounting for misclassification
  Index contaminated = 0;
  Index flipped = 0;
};

SimPopulation generate_population(const ScenarioSpec& spec, Rng& rng);

// Census Hajek IPW contrast per area with the given propensity.
Vector population_ipw_truth(const PopulationFrame& pop, const Vector& e);

struct AreaAccuracy {
  double rb = 0.0;     // percent
  double rrmse = 0.0;  // percent
  int used = 0;
  bool defined = false;
};

// Rows are replications, columns areas. NaN entries and rows with
// mask(s, j) == false are skipped for that area.
std::vector<AreaAccuracy> rb_rrmse(const Matrix& estimates, const Matrix& truths,
                                   const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>* mask = nullptr);

// Fraction of replications with lo <= truth <= hi, per area. NaN bounds skip
// the replication.
Vector coverage_rate(const Matrix& lo, const Matrix& hi, const Matrix& truths);

// Percent relative bias of the mean estimated root MSE against the empirical
// root MSE, per area.
Vector rmse_relative_bias(const Matrix& mse, const Matrix& estimates, const Matrix& truths);

struct StudyConfig {
  std::vector<Method> methods{Method::kDirect, Method::kEblup, Method::kMq};
  int reps = 100;
  int workers = 1;
  bool mse = true;
  TruthMode truth = TruthMode::kAreaEffect;
  MseTarget mse_target = MseTarget::kConditional;
  EstimationOptions estimation;
  MseOptions mse_options{true};
};

struct MethodSeries {
  Method method = Method::kDirect;
  Matrix est;  // reps x m, NaN when undefined or failed
  Matrix mse;
  Matrix lo;
  Matrix hi;
  Matrix target;  // sum_{U_j} D_ij y_ij with the method's weights; NaN for direct
  std::vector<std::string> failures;  // "rep <s>: <message>"
};

struct MethodSummary {
  Method method = Method::kDirect;
  std::vector<AreaAccuracy> accuracy;
  Vector cr;       // per area, NaN without MSE
  Vector rmse_rb;  // per area, NaN without MSE
  double median_rb = 0.0;
  double median_abs_rb = 0.0;
  double median_rrmse = 0.0;
  double median_cr = 0.0;
  double median_rmse_rb = 0.0;
  int failed_reps = 0;
};

struct StudyResult {
  ScenarioSpec spec;
  StudyConfig config;
  std::vector<std::string> area_labels;
  Matrix truth;  // reps x m
  std::vector<MethodSeries> series;
  std::vector<MethodSummary> summary;
  double contamination_rate = 0.0;
  double flip_rate = 0.0;

  const MethodSeries& series_for(Method m) const;
  const MethodSummary& summary_for(Method m) const;
};

StudyResult run_study(const ScenarioSpec& spec, const StudyConfig& cfg);

// Design-based protocol: repeated stratified SRSWOR from a fixed
// pseudo-population with every outcome known.
struct DesignConfig {
  StudyConfig study;
  double fraction = 0.1;
  std::uint64_t seed = 1;
};

struct DesignStudyResult {
  StudyResult study;
  Vector true_effect;  // per area
  // 100 * mean MSE(method) / mean MSE(direct), per area; NaN when undefined.
  std::vector<std::pair<Method, Vector>> efficiency;
};

// The truth is the census Hajek IPW contrast under a logistic GLMM fitted to
// the whole pseudo-population.
DesignStudyResult run_design_study(const PopulationFrame& pseudo, const DesignConfig& cfg);

MethodSummary summarize(Method method, const MethodSeries& series, const Matrix& truth, MseTarget target);

// area, method, rb, rrmse, cr, rmse_rb, reps_used
void write_study_csv(std::ostream& out, const StudyResult& r);
// method, median_rb, median_abs_rb, median_rrmse, median_cr, median_rmse_rb, failed_reps
void write_summary_csv(std::ostream& out, const StudyResult& r);

}  // namespace ipwsae
