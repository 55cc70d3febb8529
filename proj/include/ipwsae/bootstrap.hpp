#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "ipwsae/estimators.hpp"

namespace ipwsae {

enum class BootstrapMethod { kParametric, kBlock };

struct BootstrapConfig {
  int B = 200;
  std::uint64_t seed = 0;
  BootstrapMethod method = BootstrapMethod::kParametric;
  int workers = 1;
  // More failed replications than this fraction of B aborts the bootstrap.
  double max_failure_rate = 0.10;
  EstimationOptions estimation;
};

struct BootstrapLogEntry {
  int rep = 0;
  int area = 0;
  double tau_star = 0.0;
  double tau_hat_star = 0.0;
  std::string status;  // ok, undefined, or failed: <reason>
};

struct BootstrapVariance {
  std::vector<std::string> area_labels;
  Vector var;            // B_j^{-1} sum_b (tau_hat* - tau*)^2, NaN when no replication is usable
  std::vector<int> used;  // usable replications per area
  int B = 0;
  int failed = 0;
  std::vector<BootstrapLogEntry> log;
  std::vector<std::string> warnings;
};

BootstrapVariance parametric_bootstrap_eblup(const LmmFit& lmm, const GlmmFit& glmm, const PopulationFrame& pop,
                                             const BootstrapConfig& cfg);

// Steps 1-3 of the block bootstrap: marginal residuals of the median fit,
// their per-area decomposition and moment variance estimates.
struct BlockResiduals {
  Vector r;            // per sample row
  Vector gamma;        // per area, 0 where the slope is not identified
  Vector u;            // per area
  Vector eps;          // per sample row
  std::vector<bool> slope_restricted;  // no treated or no control sampled units
  std::vector<bool> has_sample;
  double sigma2_gamma = 0.0;
  double sigma2_u = 0.0;
  double sigma2_eps = 0.0;
  std::vector<std::string> warnings;
};
BlockResiduals block_residuals(const MqEnsemble& ens);

// Centers v over the entries flagged in `use` and rescales them so that
// their mean square equals sigma2. Other entries are left at 0.
Vector center_rescale(const Vector& v, const std::vector<bool>& use, double sigma2);

BootstrapVariance block_bootstrap_mq(const PopulationFrame& pop, const MqEnsemble& outcome,
                                     const MqBinEnsemble& propensity, const BootstrapConfig& cfg);

// rep,area,tau_star,tau_hat_star,status
void write_bootstrap_log_csv(std::ostream& out, const BootstrapVariance& v);

// Adds the bootstrap variance to each row's analytic MSE and rebuilds the
// intervals. Rows without an MSE are left alone.
void add_bootstrap_variance(AreaEffectTable& table, const BootstrapVariance& v);

}  // namespace ipwsae
