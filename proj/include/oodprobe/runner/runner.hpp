#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "oodprobe/analysis/analysis.hpp"
#include "oodprobe/runner/config.hpp"

namespace oodprobe::runner {

using probing::CellKey;

/// Restricts the configured cross product; unset fields keep the config values.
struct CellFilter {
  std::optional<std::string> algorithm;
  std::optional<int> test_env;
  std::optional<std::uint64_t> seed;
};

struct TrainSummary {
  std::size_t trained = 0;
  std::size_t skipped = 0;
  std::vector<std::string> failed;  // "cell: message"
};

struct ProbeSummary {
  std::size_t probed = 0;   // (cell, tap, control) units trained
  std::size_t skipped = 0;  // already complete
};

struct ReportSummary {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> removed;  // by the 3σ filter
};

using Log = std::function<void(const std::string&)>;

class Runner {
 public:
  explicit Runner(ExperimentConfig config, Log log = {});

  const ExperimentConfig& config() const noexcept { return config_; }
  const data::EnvironmentDataset& dataset();
  const algorithms::SplitDataset& splits();

  /// Cells of the (algorithms × test envs × seeds) product in canonical order.
  std::vector<CellKey> cells(const CellFilter& filter = {}) const;

  TrainSummary train(const CellFilter& filter = {});
  ProbeSummary probe(const CellFilter& filter = {});
  ReportSummary report();
  /// Writes one PGM per (spatial tap, input); returns the file count.
  std::size_t dump(const CellFilter& filter = {}, std::size_t inputs = 3, std::uint64_t seed = 0);

  // Path scheme.
  std::filesystem::path checkpoint_path(const CellKey& cell, std::int64_t step) const;
  std::filesystem::path final_checkpoint_path(const CellKey& cell) const;
  std::filesystem::path metrics_path(const CellKey& cell) const;
  std::filesystem::path probe_path(const CellKey& cell, std::size_t tap, bool control) const;
  std::filesystem::path report_dir() const;
  std::filesystem::path dump_dir(const CellKey& cell) const;

  bool training_complete(const CellKey& cell) const;
  bool probe_complete(const CellKey& cell, std::size_t tap, bool control) const;

  /// Result rows assembled from the metrics and probe records on disk.
  analysis::ResultsTable collect_results(bool control = false) const;

  features::FeaturizerSpec featurizer_spec();

 private:
  void build_data();
  void say(const std::string& msg) const;

  ExperimentConfig config_;
  Log log_;
  std::optional<data::EnvironmentDataset> dataset_;
  std::optional<algorithms::SplitDataset> splits_;
};

/// Last JSON object of a JSONL file when it is a completion marker.
std::optional<nlohmann::json> completion_marker(const std::filesystem::path& path);

/// Binary PGM (P5) of a row-major H×W image min-max scaled to 0..255; constant images become 128.
void write_pgm(const std::filesystem::path& path, std::span<const float> pixels, std::size_t height,
               std::size_t width);

}  // namespace oodprobe::runner
