#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ipwsae/core.hpp"
#include "ipwsae/frames.hpp"

namespace ipwsae {

// Variance components of the outcome model: random treatment slope,
// random intercept and unit error.
struct VarianceComponents {
  double sigma2_gamma = 0.0;
  double sigma2_u = 0.0;
  double sigma2_eps = 1.0;

  Eigen::Vector3d as_vector() const { return {sigma2_gamma, sigma2_u, sigma2_eps}; }
  static VarianceComponents from_vector(const Eigen::Vector3d& v) { return {v[0], v[1], v[2]}; }
};

// Sample data of the outcome model, laid out in area blocks. Row r of
// `design` is (1, x, w) for sample unit r; `treatment` repeats the last
// column so that the random slope design is explicit.
struct LmmData {
  Matrix design;
  Vector y;
  Vector treatment;
  std::vector<Index> start;  // area j occupies rows [start[j], start[j+1])
  int num_areas() const { return static_cast<int>(start.size()) - 1; }
  Index rows(int j) const { return start[j + 1] - start[j]; }

  static LmmData from_sample(const SampleView& sample);
};

struct LmmOptions {
  bool reml = true;
  int max_iter = 500;
  double f_rel_tol = 1e-10;
  double x_tol = 1e-8;
  double boundary = 1e-10;
};

struct FisherInformation {
  Eigen::Matrix3d matrix = Eigen::Matrix3d::Zero();
  bool singular = false;
};

struct LmmFit {
  Vector beta;  // (intercept, x..., w)
  VarianceComponents theta;
  Vector gamma_hat;  // per area
  Vector u_hat;      // per area
  FisherInformation fisher;
  double reml_value = 0.0;
  bool converged = false;
  bool boundary = false;
  bool reml = true;
  // Areas without sampled units; their random effects are predicted as 0.
  std::vector<int> empty_areas;
  std::shared_ptr<const LmmData> data;
};

// Restricted (or, with reml=false, full) log-likelihood up to an additive
// constant. Throws kRank when the GLS Gram matrix is singular.
double restricted_loglik(const VarianceComponents& theta, const LmmData& data, bool reml = true);

// Quantities of the GLS solve at fixed variance components.
struct GlsSolution {
  Vector beta;
  Matrix gram;  // X'V^{-1}X
  double loglik = 0.0;
};
GlsSolution gls_at(const VarianceComponents& theta, const LmmData& data, bool reml = true);

LmmFit fit_reml(const SampleView& sample, const LmmOptions& opts = {});
LmmFit fit_reml(std::shared_ptr<const LmmData> data, const LmmOptions& opts = {});

// Random-effect predictions at given (beta, theta). Used by fit_reml and
// exposed for fixed-theta analyses.
void predict_random_effects(LmmFit& fit);

struct OutcomePrediction {
  Vector yhat;  // one per population unit
  std::vector<std::string> warnings;
};

// x~'beta + w*gamma_j + u_j for every population unit.
OutcomePrediction predict_outcomes(const LmmFit& fit, const PopulationFrame& pop);

FisherInformation fisher_information(const LmmFit& fit);
FisherInformation fisher_information(const VarianceComponents& theta, const LmmData& data,
                                     bool reml = true);

// Gradient of the (restricted) log-likelihood with respect to theta.
Eigen::Vector3d restricted_score(const VarianceComponents& theta, const LmmData& data,
                                 bool reml = true);

}  // namespace ipwsae
