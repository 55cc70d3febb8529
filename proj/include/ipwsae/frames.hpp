#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ipwsae/core.hpp"
#include "ipwsae/rng.hpp"

namespace ipwsae {

// Maps the roles a population file needs onto column names.
struct Schema {
  std::string area = "area";
  // Empty means "every column named x<digits>, in file order".
  std::vector<std::string> x;
  std::string w = "w";
  std::string y = "y";
  std::string in_sample = "in_sample";
  // Columns not explicitly requested by the user may be absent from the file.
  bool y_required = false;
  bool in_sample_required = false;

  // Parses "area=region,x=age;income,w=treat,y=out,in_sample=s". Unnamed
  // roles keep their canonical defaults; roles named here become required.
  static Schema parse(const std::string& spec);
};

// A finite population partitioned into areas. Immutable once built; all
// "modifying" operations return a new frame.
class PopulationFrame {
 public:
  // Area labels are mapped to dense indices in order of first appearance.
  static PopulationFrame create(const std::vector<std::string>& unit_area_labels, Matrix x,
                                std::vector<int> w, std::vector<std::optional<double>> y,
                                std::vector<bool> in_sample,
                                std::vector<std::string> covariate_names = {});

  Index size() const { return static_cast<Index>(area_.size()); }
  int num_areas() const { return static_cast<int>(labels_.size()); }
  int num_covariates() const { return static_cast<int>(x_.cols()); }

  const std::vector<std::string>& area_labels() const { return labels_; }
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }
  int area(Index i) const { return area_[i]; }
  const std::vector<int>& areas() const { return area_; }
  const Matrix& x() const { return x_; }
  int w(Index i) const { return w_[i]; }
  const std::vector<int>& treatment() const { return w_; }
  const std::optional<double>& y(Index i) const { return y_[i]; }
  const std::vector<std::optional<double>>& outcomes() const { return y_; }
  bool in_sample(Index i) const { return in_sample_[i]; }
  const std::vector<bool>& sample_mask() const { return in_sample_; }
  // 1-based data row in the originating file (or construction order).
  Index source_row(Index i) const { return source_row_[i]; }

  const std::vector<Index>& units_in_area(int j) const { return units_[j]; }
  const std::vector<Index>& sampled_in_area(int j) const { return sampled_[j]; }
  Index population_count(int j) const { return static_cast<Index>(units_[j].size()); }
  Index sample_count(int j) const { return static_cast<Index>(sampled_[j].size()); }
  Index total_sample() const;

  PopulationFrame with_sample(std::vector<bool> in_sample) const;
  PopulationFrame with_outcomes(std::vector<std::optional<double>> y) const;
  // Keeps the listed units (in the given order). Area labels are preserved,
  // even for areas that end up empty.
  PopulationFrame subset(const std::vector<Index>& keep) const;

 private:
  PopulationFrame() = default;
  void index_units();

  std::vector<std::string> labels_;
  std::vector<std::string> covariate_names_;
  std::vector<int> area_;
  Matrix x_;
  std::vector<int> w_;
  std::vector<std::optional<double>> y_;
  std::vector<bool> in_sample_;
  std::vector<Index> source_row_;
  std::vector<std::vector<Index>> units_;
  std::vector<std::vector<Index>> sampled_;
};

// The sampled units of a frame, ordered by area and then by unit index, so
// that each area occupies a contiguous block of rows.
class SampleView {
 public:
  explicit SampleView(const PopulationFrame& pop);

  const PopulationFrame& frame() const { return *pop_; }
  Index size() const { return static_cast<Index>(units_.size()); }
  int num_areas() const { return pop_->num_areas(); }
  // Population index of sample row r.
  Index unit(Index r) const { return units_[r]; }
  const std::vector<Index>& units() const { return units_; }
  Index area_start(int j) const { return start_[j]; }
  Index area_size(int j) const { return start_[j + 1] - start_[j]; }
  int area_of_row(Index r) const { return pop_->area(units_[r]); }

  Vector y() const;
  Vector w() const;

 private:
  const PopulationFrame* pop_;
  std::vector<Index> units_;
  std::vector<Index> start_;
};

// Fixed-effect design rows (1, x, w) for the outcome model.
Matrix outcome_design(const PopulationFrame& pop, const std::vector<Index>& units);
Matrix outcome_design(const PopulationFrame& pop);
// Covariate design rows (1, x) for propensity models.
Matrix propensity_design(const PopulationFrame& pop, const std::vector<Index>& units);
Matrix propensity_design(const PopulationFrame& pop);

PopulationFrame load_population(const std::string& path, const Schema& schema = {});
// One numeric column of a population file, in data-row order.
Vector load_numeric_column(const std::string& path, const std::string& column);

// Simple random sampling without replacement within each area. Each area
// draws from its own substream of rng, keyed by the area index.
PopulationFrame draw_sample(const PopulationFrame& pop, const std::vector<Index>& sizes,
                            const Rng& rng);

struct ValidationIssue {
  enum class Kind { kNoTreated, kNoControl, kMissingOutcome, kNonFiniteCovariate };
  Kind kind;
  std::string area;
  std::optional<Index> row;
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool clean() const { return issues.empty(); }
};

ValidationReport validate_frame(const PopulationFrame& pop);

}  // namespace ipwsae
