#pragma once

#include <optional>
#include <ostream>
#include <utility>
#include <string>
#include <vector>

#include "ipwsae/core.hpp"
#include "ipwsae/frames.hpp"
#include "ipwsae/glmm.hpp"
#include "ipwsae/lmm.hpp"
#include "ipwsae/mquantile.hpp"

namespace ipwsae {

enum class Method { kDirect, kEblup, kMq };
std::string_view to_string(Method m);
Method parse_method(const std::string& s);

// Clamps propensities into [eps, 1 - eps].
Vector clip_propensity(const Vector& e, double eps);

struct IpwWeights {
  Vector D;     // per population unit
  Vector ehat;  // propensity used
  Vector K;     // per area, sum w / e
  Vector T;     // per area, sum (1 - w) / (1 - e)
  std::vector<bool> inestimable;  // K_j = 0 or T_j = 0
};

IpwWeights d_weights(const PopulationFrame& pop, const Vector& ehat);

struct AreaEffect {
  std::string area;
  double estimate = 0.0;  // NaN when undefined
  // Treated and control parts of the estimate; estimate = treated - control.
  double treated_term = 0.0;
  double control_term = 0.0;
  std::optional<double> mse;
  std::optional<std::pair<double, double>> interval;
  bool undefined = false;
  bool zero_treated_sample = false;
  bool zero_control_sample = false;
  bool synthetic = false;    // no sampled units at all
  bool inestimable = false;  // no treated or no control units in the population
  std::vector<std::string> warnings;

  std::optional<double> rmse() const;
  // Semicolon-joined flag names, empty when none apply.
  std::string flag_string() const;
};

struct AreaEffectTable {
  Method method = Method::kDirect;
  std::vector<AreaEffect> rows;
};

// Columns: area, method, estimate, rmse, ci_lo, ci_hi, flags. Missing values
// are written as NA.
void write_area_table_csv(std::ostream& out, const std::vector<AreaEffectTable>& tables);

// Hajek IPW contrast on the sample of each area. Areas without sampled
// treated or control units are flagged undefined.
AreaEffectTable ipw_direct(const PopulationFrame& pop, const Vector& ehat);

// Observed outcomes on the sample, predictions elsewhere, weighted by D.
AreaEffectTable ipw_pate(const PopulationFrame& pop, const Vector& yhat, const IpwWeights& weights);

struct EstimationOptions {
  double clip = 0.005;
  LmmOptions lmm;
  GlmmOptions glmm;
  MqOptions mq;
};

struct EblupEstimate {
  AreaEffectTable table;
  LmmFit lmm;
  GlmmFit glmm;
  IpwWeights weights;
  Vector yhat;
};

struct MqEstimate {
  AreaEffectTable table;
  MqEnsemble outcome;
  MqBinEnsemble propensity;
  IpwWeights weights;
  Vector yhat;
};

EblupEstimate estimate_ipw_eblup(const PopulationFrame& pop, const EstimationOptions& opts = {});
MqEstimate estimate_ipw_mq(const PopulationFrame& pop, const EstimationOptions& opts = {});

struct BenchmarkWeights {
  Vector A;  // NaN where unavailable
  std::vector<bool> A_available;
  Vector B;
  Vector C;
  double K_total = 0.0;
  double T_total = 0.0;
};

BenchmarkWeights benchmark_weights(const IpwWeights& weights);

// sum_j B_j treated_j - sum_j C_j control_j.
double national_effect(const AreaEffectTable& table, const BenchmarkWeights& bench);
// Direct evaluation of the population-level IPW estimate with global
// normalizers.
double national_effect_direct(const PopulationFrame& pop, const Vector& yhat, const Vector& ehat);

}  // namespace ipwsae
