#include "oodprobe/analysis/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <tuple>

#include "oodprobe/errors.hpp"

namespace oodprobe::analysis {

namespace {

constexpr double kTol = 1e-12;

// Modified Lentz evaluation of the incomplete-beta continued fraction.
double beta_fraction(double x, double a, double b) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16, kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

std::string probe_name(std::size_t t) { return "Probe_" + std::to_string(t); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// Seed-averaged values per env for one algorithm and dataset.
struct EnvSeries {
  std::vector<int> envs;
  std::vector<double> gen;
  std::vector<std::vector<std::optional<double>>> probe;  // env → tap
};

EnvSeries env_series(const ResultsTable& table, const std::string& algorithm, const std::string& dataset,
                     std::size_t taps) {
  std::map<int, std::vector<const ResultRow*>> by_env;
  for (const auto& r : table.rows) {
    if (r.algorithm == algorithm && r.dataset == dataset) by_env[r.test_env].push_back(&r);
  }
  EnvSeries s;
  for (const auto& [env, rows] : by_env) {
    s.envs.push_back(env);
    double g = 0.0;
    for (const auto* r : rows) g += r->gen_acc;
    s.gen.push_back(g / static_cast<double>(rows.size()));
    std::vector<std::optional<double>> per_tap(taps);
    for (std::size_t t = 0; t < taps; ++t) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto* r : rows) {
        if (t < r->probe.size() && r->probe[t]) {
          sum += *r->probe[t];
          ++n;
        }
      }
      if (n) per_tap[t] = sum / static_cast<double>(n);
    }
    s.probe.push_back(std::move(per_tap));
  }
  return s;
}

std::vector<std::string> algorithms_in(const ResultsTable& table, const std::string& dataset,
                                       const std::set<std::string>& exclude) {
  std::set<std::string> names;
  for (const auto& r : table.rows) {
    if (r.dataset == dataset && !exclude.count(r.algorithm)) names.insert(r.algorithm);
  }
  return {names.begin(), names.end()};
}

CorrelationEntry correlate(std::string key, std::size_t tap, const std::vector<double>& x,
                           const std::vector<double>& y) {
  CorrelationEntry e;
  e.key = std::move(key);
  e.tap = tap;
  try {
    e.value = pearson(x, y);
    e.available = true;
  } catch (const Error& err) {
    e.note = err.what();
    e.value.n = x.size();
  }
  return e;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s.rfind("-0.", 0) == 0 && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

}  // namespace

double incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0 && b > 0.0)) throw DomainError("incomplete beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw DomainError("incomplete beta needs x in [0,1]");
  if (x == 0.0 || x == 1.0) return x;
  const double front =
      std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_fraction(x, a, b) / a;
  return 1.0 - front * beta_fraction(1.0 - x, b, a) / b;
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) throw DomainError("t distribution needs df > 0");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(df / (df + t * t), df / 2.0, 0.5);
}

Correlation pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw StatisticsError("pearson: lengths differ (" + std::to_string(x.size()) + " vs " + std::to_string(y.size()) +
                          ")");
  }
  const std::size_t n = x.size();
  if (n < 3) throw StatisticsError("pearson: sample size " + std::to_string(n) + " < 3");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateError("degenerate correlation: constant input");
  Correlation c;
  c.n = n;
  c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = static_cast<double>(n - 2);
  if (std::abs(c.r) == 1.0) {
    c.p = 0.0;
  } else {
    const double t = c.r * std::sqrt(df / (1.0 - c.r * c.r));
    c.p = std::clamp(student_t_two_sided(t, df), 0.0, 1.0);
  }
  return c;
}

std::string stars(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

void ResultsTable::validate() const {
  std::set<std::tuple<std::string, std::string, int, std::uint64_t>> keys;
  std::map<std::string, std::size_t> taps;
  for (const auto& r : rows) {
    if (!keys.insert({r.algorithm, r.dataset, r.test_env, r.seed}).second) {
      throw ConsistencyError("duplicate result row " + r.algorithm + "/" + r.dataset + "/env" +
                             std::to_string(r.test_env) + "/seed" + std::to_string(r.seed));
    }
    auto [it, fresh] = taps.emplace(r.dataset, r.probe.size());
    if (!fresh && it->second != r.probe.size()) {
      throw ConsistencyError("dataset " + r.dataset + " rows disagree on the tap count");
    }
  }
}

std::size_t ResultsTable::tap_count(const std::string& dataset) const {
  for (const auto& r : rows) {
    if (r.dataset == dataset) return r.probe.size();
  }
  return 0;
}

FilterResult filter_3sigma(const std::map<std::string, double>& observed,
                           const std::map<std::string, Reference>& reference) {
  std::string missing;
  for (const auto& [name, v] : observed) {
    if (!reference.count(name)) missing += (missing.empty() ? "" : ", ") + name;
  }
  if (!missing.empty()) throw CoverageError("no reference entry for: " + missing);
  FilterResult out;
  for (const auto& [name, v] : observed) {
    const auto& ref = reference.at(name);
    const double dev = std::abs(v - ref.mean), bound = 3.0 * ref.std;
    (dev >= bound - kTol * std::max(1.0, bound) ? out.removed : out.retained).push_back(name);
  }
  return out;
}

std::map<std::string, Reference> parse_reference_csv(const std::string& text) {
  std::map<std::string, Reference> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || lineno == 1) continue;
    std::vector<std::string> cols;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cols.push_back(cell);
    if (cols.size() != 3) throw FormatError("reference line " + std::to_string(lineno) + ": expected 3 columns");
    try {
      out[cols[0]] = Reference{std::stod(cols[1]), std::stod(cols[2])};
    } catch (const std::exception&) {
      throw FormatError("reference line " + std::to_string(lineno) + ": bad number");
    }
  }
  return out;
}

CorrelationReport layerwise_correlation(const ResultsTable& table, const std::string& dataset,
                                        const std::set<std::string>& exclude) {
  table.validate();
  CorrelationReport rep;
  rep.axis = "layerwise";
  rep.dataset = dataset;
  rep.columns = table.tap_count(dataset);
  const auto algos = algorithms_in(table, dataset, exclude);
  std::vector<EnvSeries> series;
  for (const auto& a : algos) series.push_back(env_series(table, a, dataset, rep.columns));
  for (std::size_t t = 0; t < rep.columns; ++t) {
    std::vector<double> x, y;
    for (const auto& s : series) {
      double px = 0.0;
      std::size_t n = 0;
      for (const auto& per_env : s.probe) {
        if (per_env[t]) {
          px += *per_env[t];
          ++n;
        }
      }
      if (!n) continue;
      double g = 0.0;
      for (double v : s.gen) g += v;
      x.push_back(px / static_cast<double>(n));
      y.push_back(g / static_cast<double>(s.gen.size()));
    }
    rep.entries.push_back(correlate("", t, x, y));
  }
  return rep;
}

CorrelationReport per_algorithm_correlation(const ResultsTable& table, const std::string& dataset, std::size_t columns,
                                            const std::set<std::string>& exclude) {
  table.validate();
  CorrelationReport rep;
  rep.axis = "per_algorithm";
  rep.dataset = dataset;
  const std::size_t taps = table.tap_count(dataset);
  rep.columns = std::max(columns, taps);
  for (const auto& a : algorithms_in(table, dataset, exclude)) {
    const auto s = env_series(table, a, dataset, taps);
    for (std::size_t t = 0; t < rep.columns; ++t) {
      if (t >= taps) {
        CorrelationEntry e;
        e.key = a;
        e.tap = t;
        e.note = "N/A";
        rep.entries.push_back(std::move(e));
        continue;
      }
      std::vector<double> x, y;
      for (std::size_t i = 0; i < s.envs.size(); ++i) {
        if (s.probe[i][t]) {
          x.push_back(*s.probe[i][t]);
          y.push_back(s.gen[i]);
        }
      }
      rep.entries.push_back(correlate(a, t, x, y));
    }
  }
  return rep;
}

std::string LooCell::formatted() const { return fixed(mean, 2) + " ± " + fixed(std, 2); }

std::vector<LooCell> aggregate_loo(const ResultsTable& table) {
  table.validate();
  std::set<std::pair<std::string, std::string>> cells;
  for (const auto& r : table.rows) cells.insert({r.algorithm, r.dataset});
  if (cells.empty()) throw CoverageError("no results to aggregate");
  std::vector<LooCell> out;
  for (const auto& [a, d] : cells) {
    const auto s = env_series(table, a, d, 0);
    if (s.gen.empty()) throw CoverageError("no environments for " + a + "/" + d);
    LooCell c{a, d, 0.0, 0.0, s.gen.size()};
    for (double v : s.gen) c.mean += v;
    c.mean /= static_cast<double>(s.gen.size());
    for (double v : s.gen) c.std += (v - c.mean) * (v - c.mean);
    c.std = std::sqrt(c.std / static_cast<double>(s.gen.size()));
    out.push_back(std::move(c));
  }
  return out;
}

std::string to_string(Trend t) {
  switch (t) {
    case Trend::decreasing:
      return "decreasing";
    case Trend::middle_peak:
      return "middle_peak";
    default:
      return "other";
  }
}

Trend trend_classify(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n < 3) return Trend::other;
  bool monotone = true;
  for (std::size_t i = 1; i < n; ++i) monotone &= v[i] <= v[i - 1] + 0.01 + kTol;
  if (monotone && v[n - 1] <= v[0] - 0.05 + kTol) return Trend::decreasing;
  const auto peak = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  if (peak > 0 && peak < n - 1 && v[peak] >= v[0] + 0.05 - kTol && v[peak] >= v[n - 1] + 0.05 - kTol) {
    return Trend::middle_peak;
  }
  return Trend::other;
}

double trend_slope(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n < 2) return 0.0;
  const double mx = static_cast<double>(n - 1) / 2.0;
  double my = 0.0;
  for (double y : v) my += y;
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - mx;
    sxy += dx * (v[i] - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

std::string format_real(double v) { return fixed(v, 4); }

std::string loo_csv(const std::vector<LooCell>& cells) {
  std::string out = "algorithm,dataset,mean,std,envs,formatted\n";
  for (const auto& c : cells) {
    out += csv_field(c.algorithm) + "," + csv_field(c.dataset) + "," + format_real(c.mean) + "," +
           format_real(c.std) + "," + std::to_string(c.envs) + "," + c.formatted() + "\n";
  }
  return out;
}

std::string correlation_csv(const CorrelationReport& report) {
  std::string out = "algorithm,probe,r,p,n,stars\n";
  for (const auto& e : report.entries) {
    out += csv_field(e.key.empty() ? "all" : e.key) + "," + probe_name(e.tap) + ",";
    if (e.available) {
      out += format_real(e.value.r) + "," + format_real(e.value.p) + "," + std::to_string(e.value.n) + "," +
             stars(e.value.p) + "\n";
    } else {
      out += "N/A,N/A," + std::to_string(e.value.n) + ",\n";
    }
  }
  return out;
}

std::string grid_csv(const std::map<std::string, std::vector<double>>& grid) {
  std::size_t cols = 0;
  for (const auto& [a, row] : grid) cols = std::max(cols, row.size());
  std::string out = "algorithm";
  for (std::size_t t = 0; t < cols; ++t) out += "," + probe_name(t);
  out += "\n";
  for (const auto& [a, row] : grid) {
    out += csv_field(a);
    for (std::size_t t = 0; t < cols; ++t) out += "," + (t < row.size() ? format_real(row[t]) : std::string("N/A"));
    out += "\n";
  }
  return out;
}

std::string trend_csv(const std::map<std::string, std::vector<double>>& grid) {
  std::string out = "algorithm,trend,slope\n";
  for (const auto& [a, row] : grid) {
    out += csv_field(a) + "," + to_string(trend_classify(row)) + "," + format_real(trend_slope(row)) + "\n";
  }
  return out;
}

std::string heatmap_svg(const std::map<std::string, std::vector<double>>& grid, double lower,
                        const std::string& title) {
  std::size_t cols = 0;
  for (const auto& [a, row] : grid) cols = std::max(cols, row.size());
  const int cell_w = 70, cell_h = 28, left = 110, top = 40, bar_w = 16;
  const int width = left + static_cast<int>(cols) * cell_w + 80;
  const int height = top + static_cast<int>(grid.size()) * cell_h + 40;
  const int grid_h = static_cast<int>(grid.size()) * cell_h;
  auto color = [&](double v) {
    const double t = lower < 1.0 ? std::clamp((v - lower) / (1.0 - lower), 0.0, 1.0) : 1.0;
    auto mix = [&](int lo, int hi) { return static_cast<int>(std::lround(lo + (hi - lo) * t)); };
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", mix(247, 8), mix(251, 48), mix(255, 107));
    return std::string(buf);
  };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  for (std::size_t t = 0; t < cols; ++t) {
    s << "<text x=\"" << left + static_cast<int>(t) * cell_w + cell_w / 2 << "\" y=\"" << top - 6
      << "\" text-anchor=\"middle\">" << probe_name(t) << "</text>\n";
  }
  int r = 0;
  for (const auto& [a, row] : grid) {
    const int y = top + r * cell_h;
    s << "<text x=\"" << left - 6 << "\" y=\"" << y + cell_h / 2 + 4 << "\" text-anchor=\"end\">" << a << "</text>\n";
    for (std::size_t t = 0; t < row.size(); ++t) {
      const int x = left + static_cast<int>(t) * cell_w;
      const double tv = lower < 1.0 ? (row[t] - lower) / (1.0 - lower) : 1.0;
      s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell_w << "\" height=\"" << cell_h << "\" fill=\""
        << color(row[t]) << "\"/>\n";
      s << "<text x=\"" << x + cell_w / 2 << "\" y=\"" << y + cell_h / 2 + 4 << "\" text-anchor=\"middle\" fill=\""
        << (tv > 0.6 ? "#ffffff" : "#000000") << "\">" << format_real(row[t]) << "</text>\n";
    }
    ++r;
  }
  const int bx = left + static_cast<int>(cols) * cell_w + 20;
  s << "<defs><linearGradient id=\"bar\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">"
    << "<stop offset=\"0\" stop-color=\"" << color(lower) << "\"/><stop offset=\"1\" stop-color=\"" << color(1.0)
    << "\"/></linearGradient></defs>\n";
  s << "<rect x=\"" << bx << "\" y=\"" << top << "\" width=\"" << bar_w << "\" height=\"" << grid_h
    << "\" fill=\"url(#bar)\" data-min=\"" << format_real(lower) << "\" data-max=\"1.0000\"/>\n";
  s << "<text x=\"" << bx + bar_w + 4 << "\" y=\"" << top + grid_h << "\">" << format_real(lower) << "</text>\n";
  s << "<text x=\"" << bx + bar_w + 4 << "\" y=\"" << top + 10 << "\">1.0000</text>\n";
  s << "</svg>\n";
  return s.str();
}

}  // namespace oodprobe::analysis
