#pragma once

#include <vector>

#include "ipwsae/core.hpp"
#include "ipwsae/frames.hpp"

namespace ipwsae {

// Sampled units in area blocks with the propensity design (1, x).
struct GlmmData {
  Matrix design;
  Vector w;
  std::vector<Index> start;
  std::vector<std::string> area_labels;
  int num_areas() const { return static_cast<int>(start.size()) - 1; }
  Index rows(int j) const { return start[j + 1] - start[j]; }

  static GlmmData from_sample(const SampleView& sample);
};

struct GlmmOptions {
  int max_iter = 2000;
  double tol = 1e-10;
  // Upper bound on sigma2_nu; an optimum pinned here means the areas are
  // separated.
  double max_sigma2 = 1e3;
};

struct GlmmFit {
  Vector alpha;   // (intercept, x...)
  Vector nu_hat;  // per area; 0 for areas without sampled units
  double sigma2_nu = 0.0;
  double laplace_value = 0.0;
  bool converged = false;
  bool boundary = false;
  std::vector<int> empty_areas;
};

// Plain logistic regression by IRLS. Throws kSeparation when the fit runs
// off to infinity.
Vector fit_logistic(const Matrix& design, const Vector& w, int max_iter = 100, double tol = 1e-12);

// Laplace approximation to the marginal log-likelihood of the random
// intercept logit model, dropping no constants except those common to all
// (alpha, sigma2). Writes the per-area posterior modes to *modes when given.
double laplace_loglik(const Vector& alpha, double sigma2, const GlmmData& data,
                      Vector* modes = nullptr);

GlmmFit fit_logit_laplace(const SampleView& sample, const GlmmOptions& opts = {});
GlmmFit fit_logit_laplace(const GlmmData& data, const GlmmOptions& opts = {});

// Refits the modes at a fixed sigma2 with alpha held at the fitted value.
GlmmFit with_fixed_sigma2(const GlmmFit& fit, double sigma2, const GlmmData& data);

// Lambda^{-1}(x'alpha + nu_j) for every population unit.
Vector predict_propensity(const GlmmFit& fit, const PopulationFrame& pop);

}  // namespace ipwsae
