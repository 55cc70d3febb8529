#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ipwsae {

struct BoxStats {
  double q1 = 0.0, median = 0.0, q3 = 0.0;
  double whisker_lo = 0.0, whisker_hi = 0.0;  // furthest points within 1.5 IQR
  std::vector<double> outliers;
  int count = 0;
};

// Tukey box statistics of the finite entries (type-7 quartiles).
BoxStats box_stats(const std::vector<double>& values);

struct BoxGroup {
  std::string label;
  std::vector<double> values;
};

// One box per group on a shared vertical axis.
void write_boxplot_svg(std::ostream& out, const std::string& title, const std::string& y_label,
                       const std::vector<BoxGroup>& groups);

}  // namespace ipwsae
