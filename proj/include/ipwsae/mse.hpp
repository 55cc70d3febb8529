#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ipwsae/estimators.hpp"

namespace ipwsae {

struct AreaMse {
  // EBLUP terms.
  double g1 = 0.0;
  double g2 = 0.0;
  double g3 = 0.0;
  // Unit-error variance of the predicted part, sigma2_eps * sum_{r_j} D^2.
  // Always reported; part of the total only when requested.
  double g_eps = 0.0;
  // MQ terms.
  double var = 0.0;
  double bias = 0.0;
  double bias2 = 0.0;
  double qvar = 0.0;
  double total = 0.0;
  bool estimable = true;
  std::vector<std::string> warnings;
};

struct MseBreakdown {
  Method method = Method::kEblup;
  std::vector<AreaMse> areas;
  bool fisher_pinv = false;
  std::vector<std::string> warnings;
};

struct MseOptions {
  bool include_unit_error = false;
};

MseBreakdown mse_eblup_analytic(const LmmFit& fit, const IpwWeights& weights, const PopulationFrame& pop,
                                const MseOptions& opts = {});
MseBreakdown mse_mq_analytic(const MqEnsemble& ensemble, const IpwWeights& weights, const PopulationFrame& pop);

// Robust sandwich covariance of an M-quantile fit, with per-area residual
// scales `omega` (one per sample row).
Matrix mq_sandwich(const MqFit& fit, const LmmData& data, const Vector& omega);
// Per-area MAD / 0.6745 of the residuals of `fit`, expanded to sample rows.
// Areas whose MAD vanishes use the fit's global scale.
Vector mq_area_scales(const MqFit& fit, const LmmData& data);

std::pair<double, double> confidence_interval(double estimate, double rmse);

// Copies totals into the table and sets +-2 rmse intervals.
void attach_mse(AreaEffectTable& table, const MseBreakdown& mse);

}  // namespace ipwsae
