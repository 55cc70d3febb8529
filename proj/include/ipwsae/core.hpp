#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ipwsae {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

inline constexpr std::string_view kVersion = "0.3.1";

enum class ErrorKind {
  kSchema,
  kParse,
  kValidation,
  kBounds,
  kRank,
  kConvergence,
  kSeparation,
  kDegenerate,
  kBootstrap,
  kContract,
};

std::string_view to_string(ErrorKind kind);

// Every library failure is reported through this type. The CLI maps the
// kind onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

  // True for failures of the numerical machinery rather than of the input.
  bool numerical() const noexcept {
    return kind_ == ErrorKind::kRank || kind_ == ErrorKind::kConvergence ||
           kind_ == ErrorKind::kSeparation || kind_ == ErrorKind::kDegenerate ||
           kind_ == ErrorKind::kBootstrap;
  }

 private:
  ErrorKind kind_;
};

// Convergence failures carry the best iterate found.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& message, Vector best)
      : Error(ErrorKind::kConvergence, message), best_(std::move(best)) {}
  const Vector& best() const noexcept { return best_; }

 private:
  Vector best_;
};

inline double logistic(double eta) {
  if (eta >= 0.0) {
    const double z = std::exp(-eta);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(eta);
  return z / (1.0 + z);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace ipwsae
