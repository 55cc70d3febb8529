#include "ipwsae/svg.hpp"

#include <algorithm>
#include <cmath>

#include "text.hpp"

namespace ipwsae {

namespace {

double quantile_sorted(const std::vector<double>& v, double p) {
  const double h = p * static_cast<double>(v.size() - 1);
  const auto k = static_cast<std::size_t>(std::floor(h));
  if (k + 1 >= v.size()) return v.back();
  return v[k] + (h - static_cast<double>(k)) * (v[k + 1] - v[k]);
}

std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

// Round step (1, 2 or 5 times a power of ten) giving about n ticks.
double nice_step(double span, int n) {
  const double raw = span / n;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double f : {1.0, 2.0, 5.0, 10.0}) {
    if (f * mag >= raw) return f * mag;
  }
  return 10.0 * mag;
}

}  // namespace

BoxStats box_stats(const std::vector<double>& values) {
  std::vector<double> v;
  for (double x : values)
    if (std::isfinite(x)) v.push_back(x);
  BoxStats b;
  b.count = static_cast<int>(v.size());
  if (v.empty()) return b;
  std::sort(v.begin(), v.end());
  b.q1 = quantile_sorted(v, 0.25);
  b.median = quantile_sorted(v, 0.5);
  b.q3 = quantile_sorted(v, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
  b.whisker_lo = b.q1;
  b.whisker_hi = b.q3;
  for (double x : v) {
    if (x < lo || x > hi) {
      b.outliers.push_back(x);
    } else {
      b.whisker_lo = std::min(b.whisker_lo, x);
      b.whisker_hi = std::max(b.whisker_hi, x);
    }
  }
  return b;
}

void write_boxplot_svg(std::ostream& out, const std::string& title, const std::string& y_label,
                       const std::vector<BoxGroup>& groups) {
  const double W = 120.0 + 110.0 * std::max<std::size_t>(groups.size(), 1), H = 400.0;
  const double left = 80.0, right = W - 20.0, top = 50.0, bottom = H - 50.0;
  std::vector<BoxStats> stats;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& g : groups) {
    stats.push_back(box_stats(g.values));
    const auto& s = stats.back();
    if (s.count == 0) continue;
    lo = std::min({lo, s.whisker_lo, s.outliers.empty() ? s.whisker_lo : s.outliers.front()});
    hi = std::max({hi, s.whisker_hi, s.outliers.empty() ? s.whisker_hi : s.outliers.back()});
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  const double step = nice_step(hi - lo, 6);
  lo = std::floor(lo / step) * step;
  hi = std::ceil(hi / step) * step;
  auto Y = [&](double v) { return bottom - (v - lo) / (hi - lo) * (bottom - top); };
  auto f = [](double v) { return detail::fmt(v, 6); };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f(W) << "\" height=\"" << f(H)
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << f(W / 2) << "\" y=\"25\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
      << "</text>\n";
  out << "<text transform=\"translate(18," << f((top + bottom) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(y_label) << "</text>\n";
  for (double t = lo; t <= hi + step * 1e-9; t += step) {
    const double tv = std::abs(t) < step * 1e-9 ? 0.0 : t;
    out << "<line x1=\"" << f(left) << "\" x2=\"" << f(right) << "\" y1=\"" << f(Y(tv)) << "\" y2=\"" << f(Y(tv))
        << "\" stroke=\"#dddddd\"/>\n";
    out << "<text x=\"" << f(left - 6) << "\" y=\"" << f(Y(tv) + 4) << "\" text-anchor=\"end\">" << f(tv)
        << "</text>\n";
  }
  out << "<line x1=\"" << f(left) << "\" x2=\"" << f(left) << "\" y1=\"" << f(top) << "\" y2=\"" << f(bottom)
      << "\" stroke=\"black\"/>\n";
  const double slot = (right - left) / std::max<std::size_t>(groups.size(), 1);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& s = stats[g];
    const double cx = left + slot * (static_cast<double>(g) + 0.5), half = slot * 0.25;
    out << "<text x=\"" << f(cx) << "\" y=\"" << f(bottom + 20) << "\" text-anchor=\"middle\">"
        << escape(groups[g].label) << "</text>\n";
    if (s.count == 0) continue;
    out << "<line x1=\"" << f(cx) << "\" x2=\"" << f(cx) << "\" y1=\"" << f(Y(s.whisker_lo)) << "\" y2=\""
        << f(Y(s.q1)) << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << f(cx) << "\" x2=\"" << f(cx) << "\" y1=\"" << f(Y(s.q3)) << "\" y2=\""
        << f(Y(s.whisker_hi)) << "\" stroke=\"black\"/>\n";
    for (double w : {s.whisker_lo, s.whisker_hi}) {
      out << "<line x1=\"" << f(cx - half / 2) << "\" x2=\"" << f(cx + half / 2) << "\" y1=\"" << f(Y(w))
          << "\" y2=\"" << f(Y(w)) << "\" stroke=\"black\"/>\n";
    }
    out << "<rect x=\"" << f(cx - half) << "\" y=\"" << f(Y(s.q3)) << "\" width=\"" << f(2 * half)
        << "\" height=\"" << f(Y(s.q1) - Y(s.q3)) << "\" fill=\"#9ecae1\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << f(cx - half) << "\" x2=\"" << f(cx + half) << "\" y1=\"" << f(Y(s.median))
        << "\" y2=\"" << f(Y(s.median)) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    for (double o : s.outliers) {
      out << "<circle cx=\"" << f(cx) << "\" cy=\"" << f(Y(o)) << "\" r=\"2.5\" fill=\"none\" stroke=\"black\"/>\n";
    }
  }
  out << "</svg>\n";
}

}  // namespace ipwsae
