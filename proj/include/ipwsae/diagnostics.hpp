#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "ipwsae/core.hpp"
#include "ipwsae/frames.hpp"

namespace ipwsae {

// ln(e / (1 - e)). Throws kBounds outside (0, 1).
Vector linearized_propensity(const Vector& e);

// Two-sided Student-t tail probability 2 P(T_df > |t|).
double t_two_sided_p(double t, double df);

enum class BalanceStatistic {
  kStandardized,  // (mean_t - mean_c) / sqrt((s2_c + s2_t) / 2)
  kWelch,         // (mean_t - mean_c) / sqrt(s2_c / n_c + s2_t / n_t)
};

struct WelchResult {
  double delta = 0.0;
  double df = 0.0;
  double p_value = 1.0;
};

// Statistic, Welch df and p-value for two groups of at least two values.
WelchResult welch_balance(const std::vector<double>& treated, const std::vector<double>& control,
                          BalanceStatistic stat = BalanceStatistic::kStandardized);

struct AreaBalance {
  std::string area;
  double delta = 0.0;  // NaN when skipped
  double df = 0.0;
  double p_value = 1.0;
  Index n_treated = 0;
  Index n_control = 0;
  bool skipped = false;       // a group has fewer than 2 units
  bool zero_variance = false;  // both groups constant
};

struct BalanceOptions {
  BalanceStatistic statistic = BalanceStatistic::kStandardized;
  bool sample_only = false;  // test sampled units instead of the population
};

struct BalanceReport {
  std::vector<AreaBalance> rows;
};

BalanceReport balance_test(const PopulationFrame& pop, const Vector& e,
                           const BalanceOptions& opts = {});

// area,delta,df,p_value,n_treated,n_control,flags
void write_balance_csv(std::ostream& out, const BalanceReport& report);

enum class SupportMode {
  kRange,     // [max(min_t, min_c), min(max_t, max_c)]
  kQuantile,  // same with per-group lower/upper quantiles
};

struct SupportOptions {
  SupportMode mode = SupportMode::kRange;
  double lower = 0.01;
  double upper = 0.99;
  // Reapply the range rule until nothing changes. The result is idempotent
  // but can shrink to nothing when one group's propensities sit above the
  // other's; such areas are then flagged disjoint and retained.
  bool iterate = false;
};

struct AreaSupport {
  std::string area;
  double lo = 0.0;
  double hi = 0.0;
  Index n_before = 0;
  Index dropped_treated = 0;
  Index dropped_control = 0;
  bool disjoint = false;      // empty intersection; units retained
  bool single_group = false;  // no treated or no control units; units retained
};

struct SupportReport {
  std::vector<AreaSupport> rows;
  std::vector<std::string> warnings;
  Index dropped() const;
};

struct SupportResult {
  PopulationFrame frame;
  std::vector<Index> kept;  // indices into the input frame
  SupportReport report;
};

SupportResult common_support_filter(const PopulationFrame& pop, const Vector& e,
                                    const SupportOptions& opts = {});

// area,lo,hi,n_before,dropped_treated,dropped_control,flags
void write_support_csv(std::ostream& out, const SupportReport& report);

}  // namespace ipwsae
