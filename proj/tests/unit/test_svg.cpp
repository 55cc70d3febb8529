#include <cmath>
#include <sstream>

#include "doctest.h"
#include "ipwsae/svg.hpp"

using namespace ipwsae;

TEST_CASE("box statistics") {
  const auto b = box_stats({1, 2, 3, 4, 5, 6, 7, 8, 9, 100, std::nan("")});
  CHECK(b.count == 10);
  CHECK(b.median == doctest::Approx(5.5));
  CHECK(b.q1 == doctest::Approx(3.25));
  CHECK(b.q3 == doctest::Approx(7.75));
  CHECK(b.whisker_lo == 1.0);
  CHECK(b.whisker_hi == 9.0);
  REQUIRE(b.outliers.size() == 1);
  CHECK(b.outliers[0] == 100.0);
  CHECK(box_stats({}).count == 0);
  const auto one = box_stats({2.0});
  CHECK(one.median == 2.0);
  CHECK(one.whisker_hi == 2.0);
}

TEST_CASE("box plot svg") {
  std::ostringstream os;
  write_boxplot_svg(os, "RRMSE <1a>", "percent", {{"direct", {50, 60, 70, 200}}, {"eblup", {20, 25}}, {"mq", {}}});
  const std::string s = os.str();
  CHECK(s.rfind("<svg xmlns=\"http://www.w3.org/2000/svg\"", 0) == 0);
  CHECK(s.find("RRMSE &lt;1a&gt;") != std::string::npos);
  CHECK(s.find(">eblup</text>") != std::string::npos);
  CHECK(s.find(">mq</text>") != std::string::npos);
  CHECK(s.find("<circle") != std::string::npos);
  CHECK(s.substr(s.size() - 7) == "</svg>\n");
  std::ostringstream again;
  write_boxplot_svg(again, "RRMSE <1a>", "percent", {{"direct", {50, 60, 70, 200}}, {"eblup", {20, 25}}, {"mq", {}}});
  CHECK(again.str() == s);
}
