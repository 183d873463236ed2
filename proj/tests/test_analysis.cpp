#include <doctest.h>

#include <boost/math/special_functions/beta.hpp>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "oodprobe/analysis/analysis.hpp"
#include "oodprobe/errors.hpp"

using namespace oodprobe;
using namespace oodprobe::analysis;

namespace {

// Textbook single-pass product-moment formula in long double.
double direct_r(const std::vector<double>& x, const std::vector<double>& y) {
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  const auto n = static_cast<long double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += static_cast<long double>(x[i]) * x[i];
    syy += static_cast<long double>(y[i]) * y[i];
    sxy += static_cast<long double>(x[i]) * y[i];
  }
  return static_cast<double>((n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy)));
}

double df2_p(double t) { return 2.0 * (0.5 - t / (2.0 * std::sqrt(2.0 + t * t))); }

ResultRow row(std::string algo, int env, double gen, std::vector<double> probe, std::uint64_t seed = 0,
              std::string dataset = "rotated_digits") {
  ResultRow r{std::move(algo), std::move(dataset), env, seed, gen, {}};
  for (double p : probe) r.probe.emplace_back(p);
  return r;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("pearson: examples and errors") {
  const std::vector<double> x3{1, 2, 3}, y3{2, 4, 6};
  CHECK(pearson(x3, y3).r == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson(x3, y3).p == 0.0);

  const std::vector<double> x{1, 2, 4, 5}, y{1, 3, 3, 5};
  const auto c = pearson(x, y);
  CHECK(std::abs(c.r - 8.0 / std::sqrt(80.0)) < 1e-15);
  const double t = c.r * std::sqrt(2.0 / (1.0 - c.r * c.r));
  CHECK(t == doctest::Approx(2.8284271).epsilon(1e-7));
  CHECK(std::abs(c.p - df2_p(t)) < 1e-12);
  CHECK(c.p == doctest::Approx(0.1056).epsilon(1e-3));
  CHECK(c.n == 4);

  const std::vector<double> flat{2, 2, 2};
  CHECK_THROWS_WITH_AS(pearson(flat, y3), doctest::Contains("degenerate correlation"), DegenerateError);
  const std::vector<double> two{1, 2};
  CHECK_THROWS_AS(pearson(two, two), StatisticsError);
  CHECK_THROWS_AS(pearson(x3, x), StatisticsError);
}

TEST_CASE("pearson: direct-formula and incomplete-beta oracles") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_r = 0.0, worst_p = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 3 + trial % 40;
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = u(rng);
      y[i] = 0.5 * x[i] + u(rng);
    }
    const auto c = pearson(x, y);
    worst_r = std::max(worst_r, std::abs(c.r - direct_r(x, y)));
    const double df = static_cast<double>(n - 2);
    const double t = c.r * std::sqrt(df / (1 - c.r * c.r));
    worst_p = std::max(worst_p, std::abs(c.p - boost::math::ibeta(df / 2, 0.5, df / (df + t * t))));

    const auto back = pearson(y, x);
    REQUIRE(back.r == doctest::Approx(c.r).epsilon(1e-14));
    std::vector<double> ax(n);
    for (std::size_t i = 0; i < n; ++i) ax[i] = 3.5 * x[i] - 7.0;
    REQUIRE(std::abs(pearson(ax, y).r - c.r) < 1e-12);
    REQUIRE(std::abs(c.r) <= 1.0);
  }
  CHECK(worst_r < 1e-12);
  CHECK(worst_p < 1e-12);

  for (double t : {0.0, 0.1, 0.5, 1.0, 2.8284271247461903, 5.0, 30.0, 400.0}) {
    CAPTURE(t);
    CHECK(std::abs(student_t_two_sided(t, 2.0) - df2_p(t)) < 1e-12);
  }
  for (double a : {0.5, 1.0, 3.0, 12.5}) {
    for (double xv : {0.01, 0.2, 0.5, 0.77, 0.99}) {
      CHECK(std::abs(incomplete_beta(xv, a, 0.5) - boost::math::ibeta(a, 0.5, xv)) < 1e-13);
    }
  }
  double prev = 1.0;
  const std::vector<double> xs{1, 2, 3, 4, 5, 6};
  for (double noise : {2.0, 1.0, 0.5, 0.2, 0.05}) {
    std::vector<double> ys{1 + noise, 2 - noise, 3 + noise, 4 - noise, 5 + noise, 6 - noise};
    const auto c = pearson(xs, ys);
    CHECK(c.p <= prev);
    prev = c.p;
  }
}

TEST_CASE("stars") {
  CHECK(stars(0.2) == "");
  CHECK(stars(0.04) == "*");
  CHECK(stars(0.009) == "**");
  CHECK(stars(0.0009) == "***");
  CHECK(stars(0.05) == "");
}

TEST_CASE("filter_3sigma") {
  const std::map<std::string, Reference> ref{{"a", {0.96, 0.03}}, {"b", {0.5, 0.1}}, {"c", {0.96, 0.03}}};
  const auto f = filter_3sigma({{"a", 0.20}, {"b", 0.5}, {"c", 0.96 + 3 * 0.03}}, ref);
  CHECK(f.removed == std::vector<std::string>{"a", "c"});
  CHECK(f.retained == std::vector<std::string>{"b"});
  CHECK(filter_3sigma({{"c", 0.96 + 2.99 * 0.03}}, ref).removed.empty());
  CHECK_THROWS_WITH_AS(filter_3sigma({{"zz", 0.1}}, ref), doctest::Contains("zz"), CoverageError);

  const auto table = parse_reference_csv(read_file(OODPROBE_FIXTURES "/rotated_reference.csv"));
  CHECK(table.size() == 21);
  CHECK(table.at("IB_IRM").mean == 0.20);
  CHECK(table.at("IRM").std == 0.12);
  CHECK_THROWS_AS(parse_reference_csv("algorithm,mean,std\nx,1\n"), FormatError);
}

TEST_CASE("layerwise_correlation") {
  ResultsTable id, refl;
  const std::vector<double> gens{0.9, 0.7, 0.5, 0.8, 0.6};
  for (std::size_t a = 0; a < gens.size(); ++a) {
    for (int e = 0; e < 3; ++e) {
      const double g = gens[a] + 0.01 * e;
      id.rows.push_back(row("alg" + std::to_string(a), e, g, {g, g, g}));
      refl.rows.push_back(row("alg" + std::to_string(a), e, g, {1 - g, 1 - g, 1 - g}));
    }
  }
  for (const auto& e : layerwise_correlation(id, "rotated_digits").entries) {
    CHECK(e.available);
    CHECK(e.value.r == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(e.value.n == 5);
  }
  for (const auto& e : layerwise_correlation(refl, "rotated_digits").entries) {
    CHECK(e.value.r == doctest::Approx(-1.0).epsilon(1e-12));
  }

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ResultsTable rnd;
  std::vector<double> px(5), gx(5);
  for (int a = 0; a < 5; ++a) {
    double psum = 0, gsum = 0;
    for (int e = 0; e < 4; ++e) {
      const double g = u(rng), p = u(rng);
      psum += p;
      gsum += g;
      rnd.rows.push_back(row("alg" + std::to_string(a), e, g, {p, 0.5}));
    }
    px[static_cast<std::size_t>(a)] = psum / 4;
    gx[static_cast<std::size_t>(a)] = gsum / 4;
  }
  const auto rep = layerwise_correlation(rnd, "rotated_digits");
  REQUIRE(rep.entries.size() == 2);
  CHECK(std::abs(rep.entries[0].value.r - direct_r(px, gx)) < 1e-12);
  CHECK_FALSE(rep.entries[1].available);  // constant column
  CHECK(rep.entries[1].note.find("degenerate") != std::string::npos);

  const auto filtered = layerwise_correlation(rnd, "rotated_digits", {"alg0", "alg1", "alg2"});
  CHECK_FALSE(filtered.entries[0].available);

  ResultsTable dup = rnd;
  dup.rows.push_back(dup.rows.front());
  CHECK_THROWS_AS(layerwise_correlation(dup, "rotated_digits"), ConsistencyError);
}

TEST_CASE("per_algorithm_correlation") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ResultsTable t;
  std::vector<double> px, gx;
  for (int e = 0; e < 6; ++e) {
    const double g = u(rng), p = u(rng);
    t.rows.push_back(row("erm", e, g, {g, p, g, g, g}));
    px.push_back(p);
    gx.push_back(g);
  }
  const auto rep = per_algorithm_correlation(t, "rotated_digits", 6);
  REQUIRE(rep.entries.size() == 6);
  CHECK(rep.entries[0].value.r == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(rep.entries[1].value.r - direct_r(px, gx)) < 1e-12);
  CHECK_FALSE(rep.entries[5].available);
  CHECK(rep.entries[5].note == "N/A");
  const auto csv = correlation_csv(rep);
  CHECK(csv.find("erm,Probe_5,N/A,N/A") != std::string::npos);
  CHECK(csv.rfind("algorithm,probe,r,p,n,stars\n", 0) == 0);

  // Seeds are averaged within an env before correlating.
  ResultsTable seeds;
  for (int e = 0; e < 4; ++e) {
    seeds.rows.push_back(row("erm", e, 0.1 * e, {0.1 * e}, 0));
    seeds.rows.push_back(row("erm", e, 0.1 * e + 0.2, {0.1 * e + 0.2}, 1));
  }
  const auto sr = per_algorithm_correlation(seeds, "rotated_digits");
  CHECK(sr.entries[0].value.n == 4);
  CHECK(sr.entries[0].value.r == doctest::Approx(1.0));
}

TEST_CASE("aggregate_loo") {
  ResultsTable t;
  for (int e = 0; e < 3; ++e) t.rows.push_back(row("a", e, 0.2, {}));
  t.rows.push_back(row("b", 0, 0.1, {}));
  t.rows.push_back(row("b", 1, 0.3, {}));
  // Seeds average first: env 0 → 0.98, env 1 → 0.98 ± 0 within c.
  t.rows.push_back(row("c", 0, 0.97, {}, 0));
  t.rows.push_back(row("c", 0, 0.99, {}, 1));
  t.rows.push_back(row("c", 1, 0.98, {}, 0));
  const auto cells = aggregate_loo(t);
  REQUIRE(cells.size() == 3);
  CHECK(cells[0].mean == doctest::Approx(0.2));
  CHECK(cells[0].std == doctest::Approx(0.0));
  CHECK(cells[1].mean == doctest::Approx(0.2));
  CHECK(cells[1].std == doctest::Approx(0.1));
  CHECK(cells[1].formatted() == "0.20 ± 0.10");
  CHECK(cells[2].envs == 2);
  CHECK(cells[2].formatted() == "0.98 ± 0.00");

  ResultsTable shuffled;
  shuffled.rows = {t.rows[4], t.rows[1], t.rows[3], t.rows[0], t.rows[6], t.rows[2], t.rows[5]};
  CHECK(aggregate_loo(shuffled)[0].mean == cells[0].mean);
  CHECK(loo_csv(cells).find("b,rotated_digits,0.2000,0.1000,2,0.20 ± 0.10") != std::string::npos);
  CHECK_THROWS_AS(aggregate_loo(ResultsTable{}), CoverageError);
}

TEST_CASE("trend_classify") {
  const std::vector<double> dec{0.9, 0.7, 0.5, 0.3}, peak{0.4, 0.8, 0.9, 0.5}, flat{0.5, 0.5, 0.5};
  CHECK(trend_classify(dec) == Trend::decreasing);
  CHECK(trend_classify(peak) == Trend::middle_peak);
  CHECK(trend_classify(flat) == Trend::other);
  const std::vector<double> bumpy{0.9, 0.905, 0.8, 0.7};  // rise within 0.01 tolerance
  CHECK(trend_classify(bumpy) == Trend::decreasing);
  const std::vector<double> rise{0.9, 0.95, 0.6};  // rise of 0.05 breaks monotonicity but peaks interior
  CHECK(trend_classify(rise) == Trend::middle_peak);
  const std::vector<double> small{0.9, 0.86, 0.87};
  CHECK(trend_classify(small) == Trend::other);
  CHECK(trend_slope(dec) == doctest::Approx(-0.2));
  CHECK(trend_slope(flat) == doctest::Approx(0.0));
  CHECK(to_string(Trend::middle_peak) == "middle_peak");
}

TEST_CASE("report rendering") {
  const std::map<std::string, std::vector<double>> grid{{"erm", {0.91234, 0.5, 0.2}}, {"irm", {0.3, 0.25, 1.0}}};
  const auto csv = grid_csv(grid);
  CHECK(csv == "algorithm,Probe_0,Probe_1,Probe_2\nerm,0.9123,0.5000,0.2000\nirm,0.3000,0.2500,1.0000\n");
  CHECK(trend_csv(grid).find("erm,decreasing,") != std::string::npos);
  const auto svg = heatmap_svg(grid, 0.2, "grid");
  CHECK(svg.find("data-min=\"0.2000\"") != std::string::npos);
  CHECK(svg.find("fill=\"#f7fbff\"") != std::string::npos);  // value at the lower bound
  CHECK(svg.find("fill=\"#08306b\"") != std::string::npos);  // value 1.0
  CHECK(heatmap_svg(grid, 0.2, "grid") == svg);
  CHECK(format_real(-0.00001) == "0.0000");
  CHECK(format_real(0.12345) == "0.1235");
}
