#include "ipwsae/frames.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace ipwsae {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

bool is_missing_token(const std::string& s) {
  return s.empty() || s == "NA" || s == "na" || s == "NaN" || s == "nan";
}

double parse_real(const std::string& s, Index row, const std::string& column) {
  if (is_missing_token(s)) return std::nan("");
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size()) {
    throw Error(ErrorKind::kParse, "row " + std::to_string(row) + ": column '" + column +
                                       "' value '" + s + "' is not a number");
  }
  return v;
}

int parse_binary(const std::string& s, Index row, const std::string& column) {
  if (s == "0") return 0;
  if (s == "1") return 1;
  throw Error(ErrorKind::kParse, "row " + std::to_string(row) + ": column '" + column +
                                     "' value '" + s + "' is not 0/1");
}

bool is_x_column(const std::string& name) {
  return name.size() > 1 && name[0] == 'x' &&
         std::all_of(name.begin() + 1, name.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

Schema Schema::parse(const std::string& spec) {
  Schema s;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::kSchema, "schema entry '" + item + "' is not role=column");
    }
    const std::string role = trim(item.substr(0, eq));
    const std::string col = trim(item.substr(eq + 1));
    if (role == "area") {
      s.area = col;
    } else if (role == "x") {
      std::stringstream xs(col);
      std::string c;
      while (std::getline(xs, c, ';')) {
        if (!trim(c).empty()) s.x.push_back(trim(c));
      }
    } else if (role == "w") {
      s.w = col;
    } else if (role == "y") {
      s.y = col;
      s.y_required = true;
    } else if (role == "in_sample") {
      s.in_sample = col;
      s.in_sample_required = true;
    } else {
      throw Error(ErrorKind::kSchema, "unknown schema role '" + role + "'");
    }
  }
  return s;
}

PopulationFrame PopulationFrame::create(const std::vector<std::string>& unit_area_labels, Matrix x,
                                        std::vector<int> w, std::vector<std::optional<double>> y,
                                        std::vector<bool> in_sample,
                                        std::vector<std::string> covariate_names) {
  const std::size_t n = unit_area_labels.size();
  if (static_cast<std::size_t>(x.rows()) != n || w.size() != n || y.size() != n ||
      in_sample.size() != n) {
    throw Error(ErrorKind::kValidation, "frame columns have inconsistent lengths");
  }
  PopulationFrame f;
  std::unordered_map<std::string, int> index;
  f.area_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, inserted] = index.try_emplace(unit_area_labels[i], static_cast<int>(f.labels_.size()));
    if (inserted) f.labels_.push_back(unit_area_labels[i]);
    f.area_[i] = it->second;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] != 0 && w[i] != 1) {
      throw Error(ErrorKind::kParse, "row " + std::to_string(i + 1) + ": treatment is not 0/1");
    }
    if (in_sample[i] && (!y[i] || !std::isfinite(*y[i]))) {
      throw Error(ErrorKind::kValidation,
                  "row " + std::to_string(i + 1) + ": sampled unit has no outcome");
    }
  }
  if (covariate_names.empty()) {
    for (Index k = 0; k < x.cols(); ++k) covariate_names.push_back("x" + std::to_string(k + 1));
  }
  f.covariate_names_ = std::move(covariate_names);
  f.x_ = std::move(x);
  f.w_ = std::move(w);
  f.y_ = std::move(y);
  f.in_sample_ = std::move(in_sample);
  f.source_row_.resize(n);
  std::iota(f.source_row_.begin(), f.source_row_.end(), Index{1});
  f.index_units();
  return f;
}

void PopulationFrame::index_units() {
  units_.assign(labels_.size(), {});
  sampled_.assign(labels_.size(), {});
  for (Index i = 0; i < size(); ++i) {
    units_[area_[i]].push_back(i);
    if (in_sample_[i]) sampled_[area_[i]].push_back(i);
  }
}

Index PopulationFrame::total_sample() const {
  Index n = 0;
  for (const auto& s : sampled_) n += static_cast<Index>(s.size());
  return n;
}

PopulationFrame PopulationFrame::with_sample(std::vector<bool> in_sample) const {
  if (in_sample.size() != area_.size()) {
    throw Error(ErrorKind::kValidation, "sample mask length does not match frame");
  }
  for (std::size_t i = 0; i < in_sample.size(); ++i) {
    if (in_sample[i] && (!y_[i] || !std::isfinite(*y_[i]))) {
      throw Error(ErrorKind::kValidation,
                  "row " + std::to_string(source_row_[i]) + ": sampled unit has no outcome");
    }
  }
  PopulationFrame f = *this;
  f.in_sample_ = std::move(in_sample);
  f.index_units();
  return f;
}

PopulationFrame PopulationFrame::with_outcomes(std::vector<std::optional<double>> y) const {
  if (y.size() != area_.size()) {
    throw Error(ErrorKind::kValidation, "outcome vector length does not match frame");
  }
  PopulationFrame f = *this;
  f.y_ = std::move(y);
  return f.with_sample(in_sample_);
}

PopulationFrame PopulationFrame::subset(const std::vector<Index>& keep) const {
  PopulationFrame f;
  f.labels_ = labels_;
  f.covariate_names_ = covariate_names_;
  const Index n = static_cast<Index>(keep.size());
  f.x_.resize(n, x_.cols());
  for (Index r = 0; r < n; ++r) {
    const Index i = keep[r];
    f.area_.push_back(area_[i]);
    f.x_.row(r) = x_.row(i);
    f.w_.push_back(w_[i]);
    f.y_.push_back(y_[i]);
    f.in_sample_.push_back(in_sample_[i]);
    f.source_row_.push_back(source_row_[i]);
  }
  f.index_units();
  return f;
}

SampleView::SampleView(const PopulationFrame& pop) : pop_(&pop) {
  start_.reserve(pop.num_areas() + 1);
  for (int j = 0; j < pop.num_areas(); ++j) {
    start_.push_back(static_cast<Index>(units_.size()));
    const auto& s = pop.sampled_in_area(j);
    units_.insert(units_.end(), s.begin(), s.end());
  }
  start_.push_back(static_cast<Index>(units_.size()));
}

Vector SampleView::y() const {
  Vector v(size());
  for (Index r = 0; r < size(); ++r) v[r] = *pop_->y(units_[r]);
  return v;
}

Vector SampleView::w() const {
  Vector v(size());
  for (Index r = 0; r < size(); ++r) v[r] = pop_->w(units_[r]);
  return v;
}

Matrix outcome_design(const PopulationFrame& pop, const std::vector<Index>& units) {
  const Index p = pop.num_covariates();
  Matrix d(static_cast<Index>(units.size()), p + 2);
  for (Index r = 0; r < d.rows(); ++r) {
    const Index i = units[r];
    d(r, 0) = 1.0;
    d.row(r).segment(1, p) = pop.x().row(i);
    d(r, p + 1) = pop.w(i);
  }
  return d;
}

Matrix outcome_design(const PopulationFrame& pop) {
  std::vector<Index> all(pop.size());
  std::iota(all.begin(), all.end(), Index{0});
  return outcome_design(pop, all);
}

Matrix propensity_design(const PopulationFrame& pop, const std::vector<Index>& units) {
  const Index p = pop.num_covariates();
  Matrix d(static_cast<Index>(units.size()), p + 1);
  for (Index r = 0; r < d.rows(); ++r) {
    d(r, 0) = 1.0;
    d.row(r).segment(1, p) = pop.x().row(units[r]);
  }
  return d;
}

Matrix propensity_design(const PopulationFrame& pop) {
  std::vector<Index> all(pop.size());
  std::iota(all.begin(), all.end(), Index{0});
  return propensity_design(pop, all);
}

PopulationFrame load_population(const std::string& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kSchema, "cannot open '" + path + "'");
  std::string line;
  while (std::getline(in, line) && (trim(line).empty() || line[0] == '#')) {
  }
  if (trim(line).empty()) throw Error(ErrorKind::kSchema, "'" + path + "' has no header row");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t k = 0; k < header.size(); ++k) col.emplace(header[k], k);

  auto require = [&](const std::string& name) {
    const auto it = col.find(name);
    if (it == col.end()) throw Error(ErrorKind::kSchema, "missing column '" + name + "'");
    return it->second;
  };
  const std::size_t c_area = require(schema.area);
  const std::size_t c_w = require(schema.w);
  std::vector<std::string> xnames = schema.x;
  if (xnames.empty()) {
    for (const auto& h : header) {
      if (is_x_column(h)) xnames.push_back(h);
    }
  }
  std::vector<std::size_t> c_x;
  for (const auto& name : xnames) c_x.push_back(require(name));
  std::optional<std::size_t> c_y;
  std::optional<std::size_t> c_s;
  if (schema.y_required || col.count(schema.y)) c_y = require(schema.y);
  if (schema.in_sample_required || col.count(schema.in_sample)) c_s = require(schema.in_sample);

  std::vector<std::string> labels;
  std::vector<std::vector<double>> xs;
  std::vector<int> w;
  std::vector<std::optional<double>> y;
  std::vector<bool> s;
  Index row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty() || line[0] == '#') continue;
    ++row;
    const auto f = split_csv_line(line);
    if (f.size() < header.size()) {
      throw Error(ErrorKind::kParse, "row " + std::to_string(row) + ": expected " +
                                         std::to_string(header.size()) + " fields, got " +
                                         std::to_string(f.size()));
    }
    labels.push_back(f[c_area]);
    std::vector<double> xr;
    for (std::size_t k = 0; k < c_x.size(); ++k) xr.push_back(parse_real(f[c_x[k]], row, xnames[k]));
    xs.push_back(std::move(xr));
    w.push_back(parse_binary(f[c_w], row, schema.w));
    std::optional<double> yv;
    if (c_y && !is_missing_token(f[*c_y])) yv = parse_real(f[*c_y], row, schema.y);
    y.push_back(yv);
    const bool sampled = c_s ? parse_binary(f[*c_s], row, schema.in_sample) == 1 : yv.has_value();
    if (sampled && !yv) {
      throw Error(ErrorKind::kValidation,
                  "row " + std::to_string(row) + ": sampled unit has missing outcome");
    }
    s.push_back(sampled);
  }
  Matrix x(static_cast<Index>(xs.size()), static_cast<Index>(xnames.size()));
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index k = 0; k < x.cols(); ++k) x(r, k) = xs[r][k];
  }
  return PopulationFrame::create(labels, std::move(x), std::move(w), std::move(y), std::move(s),
                                 xnames);
}

Vector load_numeric_column(const std::string& path, const std::string& column) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kSchema, "cannot open '" + path + "'");
  std::string line;
  while (std::getline(in, line) && (trim(line).empty() || line[0] == '#')) {
  }
  const auto header = split_csv_line(line);
  const auto it = std::find(header.begin(), header.end(), column);
  if (it == header.end()) throw Error(ErrorKind::kSchema, "missing column '" + column + "'");
  const auto c = static_cast<std::size_t>(it - header.begin());
  std::vector<double> v;
  Index row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty() || line[0] == '#') continue;
    ++row;
    const auto f = split_csv_line(line);
    if (f.size() <= c) throw Error(ErrorKind::kParse, "row " + std::to_string(row) + ": too few fields");
    v.push_back(parse_real(f[c], row, column));
  }
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

PopulationFrame draw_sample(const PopulationFrame& pop, const std::vector<Index>& sizes,
                            const Rng& rng) {
  if (static_cast<int>(sizes.size()) != pop.num_areas()) {
    throw Error(ErrorKind::kBounds, "one sample size per area is required");
  }
  std::vector<bool> mask(pop.size(), false);
  for (int j = 0; j < pop.num_areas(); ++j) {
    const auto& units = pop.units_in_area(j);
    const Index nj = sizes[j];
    if (nj < 0 || nj > static_cast<Index>(units.size())) {
      throw Error(ErrorKind::kBounds, "sample size " + std::to_string(nj) + " for area '" +
                                          pop.area_labels()[j] + "' exceeds population count " +
                                          std::to_string(units.size()));
    }
    Rng r = rng.substream(static_cast<std::uint64_t>(j));
    std::vector<Index> pool = units;
    // Partial Fisher-Yates: the first nj slots are the draw.
    for (Index k = 0; k < nj; ++k) {
      const std::size_t pick = k + r.index(pool.size() - k);
      std::swap(pool[k], pool[pick]);
      mask[pool[k]] = true;
    }
  }
  return pop.with_sample(std::move(mask));
}

ValidationReport validate_frame(const PopulationFrame& pop) {
  ValidationReport rep;
  for (int j = 0; j < pop.num_areas(); ++j) {
    Index treated = 0;
    for (Index i : pop.units_in_area(j)) treated += pop.w(i);
    const std::string& label = pop.area_labels()[j];
    if (treated == 0) {
      rep.issues.push_back({ValidationIssue::Kind::kNoTreated, label, std::nullopt,
                            "area '" + label + "' has no treated units (K_j = 0)"});
    }
    if (treated == pop.population_count(j)) {
      rep.issues.push_back({ValidationIssue::Kind::kNoControl, label, std::nullopt,
                            "area '" + label + "' has no control units (T_j = 0)"});
    }
  }
  for (Index i = 0; i < pop.size(); ++i) {
    const std::string& label = pop.area_labels()[pop.area(i)];
    if (pop.in_sample(i) && (!pop.y(i) || !std::isfinite(*pop.y(i)))) {
      rep.issues.push_back({ValidationIssue::Kind::kMissingOutcome, label, pop.source_row(i),
                            "row " + std::to_string(pop.source_row(i)) +
                                ": sampled unit has no finite outcome"});
    }
    if (!pop.x().row(i).allFinite()) {
      rep.issues.push_back({ValidationIssue::Kind::kNonFiniteCovariate, label, pop.source_row(i),
                            "row " + std::to_string(pop.source_row(i)) +
                                ": non-finite covariate"});
    }
  }
  return rep;
}

}  // namespace ipwsae
