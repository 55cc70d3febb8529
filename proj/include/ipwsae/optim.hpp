#pragma once

#include <functional>

#include "ipwsae/core.hpp"

namespace ipwsae {

struct NelderMeadOptions {
  int max_iter = 500;
  double f_rel_tol = 1e-10;
  double x_tol = 1e-8;
  double initial_step = 0.5;
};

struct NelderMeadResult {
  Vector x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Minimizes f starting from x0. Derivative-free.
NelderMeadResult nelder_mead(const std::function<double(const Vector&)>& f, const Vector& x0,
                             const NelderMeadOptions& opts = {});

// Newton iterations on f with central-difference gradient and Hessian and
// step halving. Used to sharpen a simplex optimum; returns the best point.
NelderMeadResult newton_polish(const std::function<double(const Vector&)>& f, const Vector& x0,
                               int max_iter = 20, double h = 1e-4);

// Moore-Penrose inverse of a symmetric matrix; eigenvalues below
// rel_tol * max|eigenvalue| are treated as zero.
Matrix pinv_symmetric(const Matrix& a, double rel_tol = 1e-10, bool* singular = nullptr);

// Median of a copy of the values.
double median(std::vector<double> values);

}  // namespace ipwsae
