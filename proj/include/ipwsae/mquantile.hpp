#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "ipwsae/core.hpp"
#include "ipwsae/frames.hpp"
#include "ipwsae/lmm.hpp"

namespace ipwsae {

struct MqOptions {
  double c = 1.345;  // Huber tuning constant
  int max_iter = 200;
  double tol = 1e-10;
  std::vector<double> grid;  // empty means default_grid()
};

// {0.02, 0.04, ..., 0.98}
std::vector<double> default_grid();

// Asymmetric Huber influence 2 psi_c(u) [q 1(u>0) + (1-q) 1(u<=0)] and its
// derivative (0 in the clipped region).
double psi_q(double u, double q, double c);
double psi_q_prime(double u, double q, double c);
// The loss whose derivative is psi_q.
double rho_q(double u, double q, double c);

struct MqFit {
  double q = 0.5;
  Vector beta;  // (intercept, x..., w)
  double scale = 1.0;
  double c = 1.345;
  bool converged = false;
  bool scale_floored = false;
  int iterations = 0;
};

// Linear M-quantile regression by IRLS with the MAD scale refreshed each
// iteration. `start` seeds the iterations (OLS when empty).
MqFit fit_mq_linear(const Matrix& design, const Vector& y, double q, const MqOptions& opts = {},
                    const Vector& start = Vector());
MqFit fit_mq_linear(const SampleView& sample, double q, const MqOptions& opts = {});

// Inverts fitted values over the grid: fitted(r, g) is unit r's fitted value
// at grid[g]. Rows that are not monotone are repaired by isotonic regression
// and the unit index is appended to *repaired.
Vector unit_q_coefficients(const Matrix& fitted, const Vector& y, const std::vector<double>& grid,
                           std::vector<Index>* repaired = nullptr);

struct AreaQ {
  double q_bar = 0.5;
  double v2 = 0.0;
  bool synthetic = false;
};
AreaQ area_q(const Vector& q_unit, Index begin, Index end);

struct MqBinFit {
  double q = 0.5;
  Vector alpha;  // (intercept, x...)
  double c = 1.345;
  bool converged = false;
  bool interpolated = false;  // refit failed; alpha interpolated from the grid
  int iterations = 0;
};

// Robust logistic estimating equation of Cantoni-Ronchetti type with an
// asymmetric tilt; see mq_binary_equation.
MqBinFit fit_mq_binary(const Matrix& design, const Vector& w, double q, const MqOptions& opts = {},
                       const Vector& start = Vector());
// sum_i (psi_q(r_i) - E psi(r_i)) sqrt(V_i) x_i with Pearson residuals r_i;
// the correction uses the untilted Huber influence.
Vector mq_binary_equation(const Matrix& design, const Vector& w, const Vector& alpha, double q,
                          double c);

// Continuous M-quantile ensemble on a sample: grid fits, unit and area
// coefficients, and cached refits at the area coefficients.
class MqEnsemble {
 public:
  static MqEnsemble fit(const SampleView& sample, const MqOptions& opts = {});
  static MqEnsemble fit(std::shared_ptr<const LmmData> data, const MqOptions& opts = {});

  const MqOptions& options() const { return opts_; }
  const std::vector<double>& grid() const { return opts_.grid; }
  const std::vector<MqFit>& grid_fits() const { return fits_; }
  const Vector& q_unit() const { return q_unit_; }
  const std::vector<AreaQ>& q_area() const { return q_area_; }
  const std::vector<Index>& repaired_units() const { return repaired_; }
  const LmmData& data() const { return *data_; }
  std::shared_ptr<const LmmData> data_ptr() const { return data_; }
  int num_areas() const { return data_->num_areas(); }

  // Exact refit at order q (grid values return the grid fit).
  const MqFit& fit_at(double q) const;
  const MqFit& area_fit(int j) const { return fit_at(q_area_[j].q_bar); }
  const MqFit& median_fit() const { return fit_at(0.5); }

 private:
  MqOptions opts_;
  std::shared_ptr<const LmmData> data_;
  std::vector<MqFit> fits_;
  Vector q_unit_;
  std::vector<AreaQ> q_area_;
  std::vector<Index> repaired_;
  mutable std::shared_ptr<std::map<double, MqFit>> cache_;
  mutable std::shared_ptr<std::mutex> cache_mutex_;
};

struct MqPrediction {
  Vector yhat;
  std::vector<std::string> warnings;
};
// x'beta_{q_j} + w gamma_{q_j} for every population unit.
MqPrediction mq_predict_outcomes(const MqEnsemble& ens, const PopulationFrame& pop);

class MqBinEnsemble {
 public:
  static MqBinEnsemble fit(const SampleView& sample, const MqOptions& opts = {});

  const std::vector<double>& grid() const { return opts_.grid; }
  const std::vector<MqBinFit>& grid_fits() const { return fits_; }
  const Vector& q_unit() const { return q_unit_; }
  const std::vector<AreaQ>& q_area() const { return q_area_; }
  const MqBinFit& fit_at(double q) const;
  const MqBinFit& area_fit(int j) const { return fit_at(q_area_[j].q_bar); }
  // Grid points dropped because their fit has no finite solution.
  const std::vector<std::string>& warnings() const { return warnings_; }

  // Overrides the area coefficients, e.g. for hand-set predictions.
  void set_area_q(std::vector<AreaQ> q) { q_area_ = std::move(q); }

 private:
  MqOptions opts_;
  Matrix design_;
  Vector w_;
  std::vector<MqBinFit> fits_;
  Vector q_unit_;
  std::vector<AreaQ> q_area_;
  std::vector<std::string> warnings_;
  mutable std::shared_ptr<std::map<double, MqBinFit>> cache_;
  mutable std::shared_ptr<std::mutex> cache_mutex_;
};

// Lambda^{-1}(x' alpha_{q_j}) for every population unit.
Vector mq_predict_propensity(const MqBinEnsemble& ens, const PopulationFrame& pop);

}  // namespace ipwsae
