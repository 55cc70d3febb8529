#include <doctest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "ipwsae/frames.hpp"
#include "support/toy.hpp"

using namespace ipwsae;

namespace {

std::string write_file(const std::filesystem::path& dir, const std::string& name,
                       const std::string& body) {
  const auto p = dir / name;
  std::ofstream(p) << body;
  return p.string();
}

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::kContract;
}

}  // namespace

TEST_CASE("four-row csv with two areas") {
  const auto dir = toy::temp_dir("frames4");
  const auto path = write_file(dir, "p.csv",
                               "area,x1,w,y,in_sample\n"
                               "a,1.0,1,3.0,1\n"
                               "a,2.0,0,1.0,1\n"
                               "b,0.5,1,2.5,1\n"
                               "b,1.5,0,0.5,1\n");
  const auto pop = load_population(path);
  CHECK(pop.num_areas() == 2);
  CHECK(pop.population_count(0) == 2);
  CHECK(pop.population_count(1) == 2);
  CHECK(pop.sample_count(0) == 2);
  CHECK(pop.sample_count(1) == 2);
  CHECK(pop.area_labels()[1] == "b");
  CHECK(pop.total_sample() == 4);
}

TEST_CASE("non-binary treatment names the row") {
  const auto dir = toy::temp_dir("frames_parse");
  const auto path = write_file(dir, "p.csv",
                               "area,x1,w,y\n"
                               "a,1,1,3\n"
                               "a,2,0,1\n"
                               "b,3,2,2\n");
  try {
    load_population(path);
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kParse);
    CHECK(std::string(e.what()).find("row 3") != std::string::npos);
  }
}

TEST_CASE("missing column is a schema error naming it") {
  const auto dir = toy::temp_dir("frames_schema");
  const auto path = write_file(dir, "p.csv", "region,x1,w\na,1,1\n");
  try {
    load_population(path);
    FAIL("expected schema error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kSchema);
    CHECK(std::string(e.what()).find("'area'") != std::string::npos);
  }
  const auto pop = load_population(path, Schema::parse("area=region"));
  CHECK(pop.num_areas() == 1);
  CHECK(kind_of([&] { load_population(path, Schema::parse("area=region,y=out")); }) ==
        ErrorKind::kSchema);
}

TEST_CASE("sampled unit with missing outcome") {
  const auto dir = toy::temp_dir("frames_missing");
  const auto path = write_file(dir, "p.csv", "area,x1,w,y,in_sample\na,1,1,,1\n");
  CHECK(kind_of([&] { load_population(path); }) == ErrorKind::kValidation);
}

TEST_CASE("large frame counts agree with an independent line count") {
  const auto dir = toy::temp_dir("frames_large");
  Rng rng(77);
  std::ostringstream body;
  body << "id,area,x1,x2,w,y,in_sample\n";
  for (int r = 0; r < 11011; ++r) {
    const int a = static_cast<int>(rng.index(19));
    const bool s = rng.uniform() < 0.1;
    body << r << ",\"reg " << a << "\"," << rng.normal(0, 1) << "," << rng.uniform() << ","
         << (rng.uniform() < 0.4 ? 1 : 0) << ",";
    if (s) body << rng.normal(5, 1);
    body << "," << (s ? 1 : 0) << "\n";
  }
  const auto path = write_file(dir, "big.csv", body.str());

  // Oracle: count data lines per label by plain string handling.
  std::map<std::string, int> pop_count;
  std::map<std::string, int> samp_count;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  int lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    const auto q1 = line.find('"');
    const auto q2 = line.find('"', q1 + 1);
    const std::string label = line.substr(q1 + 1, q2 - q1 - 1);
    ++pop_count[label];
    if (line.back() == '1') ++samp_count[label];
  }
  CHECK(lines == 11011);

  const auto pop = load_population(path);
  CHECK(pop.size() == 11011);
  CHECK(pop.num_areas() == 19);
  CHECK(pop.num_covariates() == 2);
  Index n_total = 0;
  for (int j = 0; j < pop.num_areas(); ++j) {
    const auto& label = pop.area_labels()[j];
    CHECK(pop.population_count(j) == pop_count[label]);
    CHECK(pop.sample_count(j) == samp_count[label]);
    n_total += pop.population_count(j);
  }
  CHECK(n_total == pop.size());
}

TEST_CASE("draw_sample contracts") {
  auto pop = toy::lmm_population({6, 5, 4}, 0.0, 1.0, 1.0, 3);
  const Rng rng(11);
  SUBCASE("exhaustive draw") {
    const auto s = draw_sample(pop, {6, 5, 4}, rng);
    CHECK(s.total_sample() == pop.size());
  }
  SUBCASE("empty area") {
    const auto s = draw_sample(pop, {2, 0, 3}, rng);
    CHECK(s.sample_count(0) == 2);
    CHECK(s.sample_count(1) == 0);
    CHECK(s.sample_count(2) == 3);
    CHECK(s.total_sample() == 5);
  }
  SUBCASE("determinism") {
    const auto a = draw_sample(pop, {3, 3, 3}, rng);
    const auto b = draw_sample(pop, {3, 3, 3}, Rng(11));
    CHECK(a.sample_mask() == b.sample_mask());
    const auto c = draw_sample(pop, {3, 3, 3}, Rng(12));
    CHECK(c.total_sample() == 9);
  }
  SUBCASE("per-area substreams are independent of other areas") {
    const auto a = draw_sample(pop, {3, 3, 3}, rng);
    const auto b = draw_sample(pop, {5, 3, 1}, rng);
    CHECK(a.sampled_in_area(1) == b.sampled_in_area(1));
  }
  SUBCASE("oversize is a bounds error") {
    CHECK(kind_of([&] { draw_sample(pop, {7, 1, 1}, rng); }) == ErrorKind::kBounds);
  }
  SUBCASE("input frame unchanged") {
    const auto before = pop.sample_mask();
    draw_sample(pop, {1, 1, 1}, rng);
    CHECK(pop.sample_mask() == before);
  }
}

TEST_CASE("srswor inclusion frequencies are uniform") {
  auto pop = toy::lmm_population({10}, 0.0, 1.0, 1.0, 5);
  std::vector<int> hits(10, 0);
  const int reps = 4000;
  for (int r = 0; r < reps; ++r) {
    const auto s = draw_sample(pop, {3}, Rng(r));
    for (Index i = 0; i < 10; ++i) hits[i] += s.in_sample(i);
  }
  // Expected 1200 per unit, sd about 29.
  for (int h : hits) CHECK(std::abs(h - 1200) < 120);
}

TEST_CASE("validate_frame report") {
  Matrix x(6, 1);
  x << 1, 2, 3, 4, std::nan(""), 6;
  std::vector<std::optional<double>> y(6, 1.0);
  SUBCASE("clean frame") {
    auto good = x;
    good(4, 0) = 5;
    const auto pop = PopulationFrame::create({"a", "a", "a", "b", "b", "b"}, good,
                                             {1, 0, 1, 0, 1, 0}, y, std::vector<bool>(6, true));
    CHECK(validate_frame(pop).clean());
  }
  SUBCASE("all-control area and NaN covariate") {
    std::vector<std::string> labels = {"a", "a", "a", "b", "b", "b"};
    const auto pop = PopulationFrame::create(labels, x, {1, 0, 1, 0, 0, 0}, y,
                                             std::vector<bool>(6, true));
    const auto rep = validate_frame(pop);
    REQUIRE(rep.issues.size() == 2);
    CHECK(rep.issues[0].kind == ValidationIssue::Kind::kNoTreated);
    CHECK(rep.issues[0].area == "b");
    CHECK(rep.issues[1].kind == ValidationIssue::Kind::kNonFiniteCovariate);
    CHECK(rep.issues[1].row == 5);
  }
  SUBCASE("NaN covariate at file row 7") {
    const auto dir = toy::temp_dir("frames_nan");
    const auto path = write_file(dir, "p.csv",
                                 "area,x1,w\na,1,1\na,2,0\na,3,1\nb,4,0\nb,5,1\nb,6,0\nb,NA,1\n");
    const auto rep = validate_frame(load_population(path));
    REQUIRE(rep.issues.size() == 1);
    CHECK(rep.issues[0].row == 7);
    CHECK(rep.issues[0].message.find("row 7") != std::string::npos);
  }
}

TEST_CASE("subset and sample view ordering") {
  auto pop = toy::lmm_population({3, 4}, 0.0, 1.0, 1.0, 9);
  const auto sub = pop.subset({6, 0, 5});
  CHECK(sub.num_areas() == 2);
  CHECK(sub.population_count(0) == 1);
  CHECK(sub.population_count(1) == 2);
  CHECK(sub.source_row(0) == 7);
  const SampleView view(sub);
  CHECK(view.area_start(1) == 1);
  CHECK(view.unit(0) == 1);
  CHECK(view.area_of_row(2) == 1);
  const Matrix d = outcome_design(sub);
  CHECK(d.cols() == 3);
  CHECK(d(0, 0) == 1.0);
  CHECK(d(0, 2) == sub.w(0));
}
