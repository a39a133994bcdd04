#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "stainfuse/csv.hpp"
#include "stainfuse/error.hpp"
#include "stainfuse/image.hpp"
#include "stainfuse/random.hpp"

using namespace stainfuse;

TEST_CASE("format_double round-trips exactly") {
  Engine engine = make_engine(5);
  for (int i = 0; i < 2000; ++i) {
    const double x = uniform(engine, -1e6, 1e6) * std::pow(10.0, static_cast<int>(uniform(engine, -12, 12)));
    REQUIRE(csv::parse_double(csv::format_double(x), "x") == x);
  }
  CHECK(csv::format_double(0.5) == "0.5");
  CHECK(csv::format_double(0.1) == "0.1");
  CHECK(csv::parse_double(csv::format_double(0.1 + 0.2), "x") == 0.1 + 0.2);
}

TEST_CASE("parse_double rejects junk and non-finite values") {
  CHECK_THROWS_AS(csv::parse_double("abc", "score"), ConfigError);
  CHECK_THROWS_AS(csv::parse_double("1.5x", "score"), ConfigError);
  CHECK_THROWS_AS(csv::parse_double("", "score"), ConfigError);
  CHECK_THROWS_AS(csv::parse_double("nan", "score"), ConfigError);
  CHECK_THROWS_AS(csv::parse_int("3.5", "n"), ConfigError);
  CHECK(csv::parse_int("-12", "n") == -12);
}

TEST_CASE("csv line helpers") {
  CHECK(csv::split("a,,b") == std::vector<std::string>{"a", "", "b"});
  std::istringstream in("\xEF\xBB\xBFx,y\r\n1,2\r\n");
  csv::expect_header(in, "x,y", "test");
  std::string line;
  REQUIRE(csv::read_line(in, line));
  CHECK(line == "1,2");
  CHECK_FALSE(csv::read_line(in, line));

  std::istringstream bad("x,z\n");
  CHECK_THROWS_AS(csv::expect_header(bad, "x,y", "test"), ConfigError);
}

TEST_CASE("png round trip is lossless") {
  testing::TempDir dir("png");
  RgbImage image(37, 23);
  Engine engine = make_engine(9);
  for (auto& p : image.pixels) p = static_cast<std::uint8_t>(engine() & 0xff);
  write_png(dir.path() / "x.png", image);
  CHECK(read_png(dir.path() / "x.png") == image);
  CHECK_THROWS_AS(read_png(dir.path() / "missing.png"), ConfigError);
}

TEST_CASE("hsv conversion round trips on the 8-bit cube") {
  for (int r = 0; r < 256; r += 15) {
    for (int g = 0; g < 256; g += 17) {
      for (int b = 0; b < 256; b += 13) {
        const Hsv hsv = rgb_to_hsv(r / 255.0, g / 255.0, b / 255.0);
        REQUIRE(hsv.h >= 0.0);
        REQUIRE(hsv.h < 1.0);
        double rr, gg, bb;
        hsv_to_rgb(hsv, rr, gg, bb);
        REQUIRE(rr * 255.0 == doctest::Approx(r).epsilon(1e-9));
        REQUIRE(gg * 255.0 == doctest::Approx(g).epsilon(1e-9));
        REQUIRE(bb * 255.0 == doctest::Approx(b).epsilon(1e-9));
      }
    }
  }
  const Hsv red = rgb_to_hsv(1.0, 0.0, 0.0);
  CHECK(red.h == 0.0);
  CHECK(red.s == 1.0);
  CHECK(rgb_to_hsv(0.0, 1.0, 0.0).h == doctest::Approx(1.0 / 3.0));
}
