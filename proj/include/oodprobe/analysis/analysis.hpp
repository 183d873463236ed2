#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace oodprobe::analysis {

struct Correlation {
  double r = 0.0;
  double p = 1.0;
  std::size_t n = 0;
};

/// Product-moment r with a two-sided p from Student's t with n - 2 df.
/// Throws StatisticsError for n < 3 or unequal lengths, DegenerateError for constant input.
Correlation pearson(std::span<const double> x, std::span<const double> y);

/// I_x(a, b) by continued fraction.
double incomplete_beta(double x, double a, double b);

/// Two-sided p of |T| >= |t| for T ~ t(df).
double student_t_two_sided(double t, double df);

/// "***" for p < 0.001, "**" for p < 0.01, "*" for p < 0.05, "" otherwise.
std::string stars(double p);

struct ResultRow {
  std::string algorithm;
  std::string dataset;
  int test_env = 0;
  std::uint64_t seed = 0;
  double gen_acc = 0.0;                       // Perf(f_g)
  std::vector<std::optional<double>> probe;  // Perf(f_p) per tap
};

struct ResultsTable {
  std::vector<ResultRow> rows;

  /// Throws ConsistencyError on duplicate keys or tap counts that differ within a dataset.
  void validate() const;
  std::size_t tap_count(const std::string& dataset) const;
};

struct Reference {
  double mean = 0.0;
  double std = 0.0;
};

struct FilterResult {
  std::vector<std::string> retained;
  std::vector<std::string> removed;
};

/// Drops an algorithm iff |observed - mean| >= 3 std. Throws CoverageError for keys
/// missing from the reference.
FilterResult filter_3sigma(const std::map<std::string, double>& observed, const std::map<std::string, Reference>& reference);

/// algorithm,mean,std rows with a header line.
std::map<std::string, Reference> parse_reference_csv(const std::string& text);

struct CorrelationEntry {
  std::string key;  // algorithm for the per-algorithm axis, empty for the layerwise axis
  std::size_t tap = 0;
  bool available = false;
  Correlation value;
  std::string note;  // reason when unavailable
};

struct CorrelationReport {
  std::string axis;  // "layerwise" | "per_algorithm"
  std::string dataset;
  std::size_t columns = 0;
  std::vector<CorrelationEntry> entries;
};

/// Per tap, Pearson over algorithm-level (mean probe acc, mean gen acc) pairs.
CorrelationReport layerwise_correlation(const ResultsTable& table, const std::string& dataset,
                                        const std::set<std::string>& exclude = {});

/// Per algorithm and tap, Pearson over held-out envs (seeds averaged within env).
/// Columns beyond the dataset's tap count are reported unavailable.
CorrelationReport per_algorithm_correlation(const ResultsTable& table, const std::string& dataset,
                                            std::size_t columns = 0, const std::set<std::string>& exclude = {});

struct LooCell {
  std::string algorithm;
  std::string dataset;
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t envs = 0;
  std::string formatted() const;  // "0.98 ± 0.02"
};

/// Mean ± population std over held-out envs of the seed-averaged Perf(f_g).
std::vector<LooCell> aggregate_loo(const ResultsTable& table);

enum class Trend { decreasing, middle_peak, other };
std::string to_string(Trend t);
Trend trend_classify(std::span<const double> values);
/// Least-squares slope against tap index.
double trend_slope(std::span<const double> values);

std::string format_real(double v);  // 4 decimals

std::string loo_csv(const std::vector<LooCell>& cells);
std::string correlation_csv(const CorrelationReport& report);
std::string grid_csv(const std::map<std::string, std::vector<double>>& grid);
std::string trend_csv(const std::map<std::string, std::vector<double>>& grid);

/// Heatmap of an (algorithm × tap) grid, colors linear from `lower` to 1.0.
std::string heatmap_svg(const std::map<std::string, std::vector<double>>& grid, double lower, const std::string& title);

}  // namespace oodprobe::analysis
