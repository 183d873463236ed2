#include "oodprobe/runner/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>

#include "oodprobe/util/pool.hpp"
#include "oodprobe/util/rng.hpp"

namespace oodprobe::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_atomic(const fs::path& path, const std::string& content) {
  ensure_dir(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

std::string to_lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string cell_dir(const CellKey& c) { return "env" + std::to_string(c.test_env) + "_seed" + std::to_string(c.seed); }

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  std::vector<json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception&) {
      rows.clear();  // a torn write invalidates the file
      return rows;
    }
  }
  return rows;
}

json cell_json(const CellKey& c, const std::string& dataset) {
  return {{"algorithm", c.algorithm}, {"dataset", dataset}, {"test_env", c.test_env}, {"seed", c.seed}};
}

std::string seconds_since(std::chrono::steady_clock::time_point t0) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1fs",
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return buf;
}

}  // namespace

std::optional<json> completion_marker(const fs::path& path) {
  if (!fs::exists(path)) return std::nullopt;
  const auto rows = read_jsonl(path);
  if (rows.empty()) return std::nullopt;
  const auto& last = rows.back();
  if (last.is_object() && last.value("record", "") == "complete") return last;
  return std::nullopt;
}

void write_pgm(const fs::path& path, std::span<const float> pixels, std::size_t height, std::size_t width) {
  if (pixels.size() != height * width) throw DimensionError("pgm: pixel count does not match H×W");
  const auto [lo, hi] = std::minmax_element(pixels.begin(), pixels.end());
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (float v : pixels) {
    const double t = *hi > *lo ? (static_cast<double>(v) - *lo) / (static_cast<double>(*hi) - *lo) : 128.0 / 255.0;
    out += static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0)));
  }
  write_atomic(path, out);
}

Runner::Runner(ExperimentConfig config, Log log) : config_(std::move(config)), log_(std::move(log)) {
  config_.validate();
}

void Runner::say(const std::string& msg) const {
  if (log_) log_(msg);
}

void Runner::build_data() {
  if (dataset_) return;
  const auto& d = config_.dataset;
  const data::LabeledImages base =
      d.source == "idx" ? data::load_idx(d.idx_images, d.idx_labels) : data::synth_glyphs(d.seed, d.pool_per_class);
  if (d.name == "rotated_digits") {
    const auto& envs = d.envs.empty() ? data::kDefaultAngles : d.envs;
    dataset_ = data::build_rotated(base, envs, d.per_env_n, d.seed);
  } else {
    const auto& envs = d.envs.empty() ? data::kDefaultCorrelations : d.envs;
    dataset_ = data::build_colored(base, envs, d.label_noise, d.per_env_n, d.seed);
  }
  dataset_->split_fraction = d.split_fraction;
  for (int e : config_.train.test_envs) {
    if (e < 0 || static_cast<std::size_t>(e) >= dataset_->num_envs()) {
      throw ConfigError("train.test_envs entry " + std::to_string(e) + " outside [0," +
                        std::to_string(dataset_->num_envs()) + ")");
    }
  }
  splits_ = algorithms::split_dataset(*dataset_);
}

const data::EnvironmentDataset& Runner::dataset() {
  build_data();
  return *dataset_;
}

const algorithms::SplitDataset& Runner::splits() {
  build_data();
  return *splits_;
}

features::FeaturizerSpec Runner::featurizer_spec() {
  const auto& env = dataset().environments.front();
  const nn::Shape input{env.channels(), env.height(), env.width()};
  const auto k = static_cast<std::size_t>(env.num_classes);
  const auto& ch = config_.train.channels;
  if (features::family_from_string(config_.train.featurizer) == features::Family::mini_cnn) {
    return ch.empty() ? features::FeaturizerSpec::mini_cnn(input, k) : features::FeaturizerSpec::mini_cnn(input, k, ch);
  }
  return ch.empty() ? features::FeaturizerSpec::mini_resnet(input, k)
                    : features::FeaturizerSpec::mini_resnet(input, k, ch);
}

std::vector<CellKey> Runner::cells(const CellFilter& filter) const {
  std::vector<std::string> algos = config_.train.algorithms;
  if (filter.algorithm) {
    if (!algorithms::is_algorithm(*filter.algorithm)) {
      algorithms::AlgorithmConfig c;
      c.name = *filter.algorithm;
      c.validate();
    }
    algos = {*filter.algorithm};
  }
  std::vector<int> envs = config_.train.test_envs;
  if (envs.empty()) {
    const std::size_t n = config_.dataset.envs.empty()
                              ? (config_.dataset.name == "rotated_digits" ? data::kDefaultAngles.size()
                                                                          : data::kDefaultCorrelations.size())
                              : config_.dataset.envs.size();
    for (std::size_t e = 0; e < n; ++e) envs.push_back(static_cast<int>(e));
  }
  if (filter.test_env) envs = {*filter.test_env};
  std::vector<std::uint64_t> seeds = config_.train.seeds;
  if (filter.seed) seeds = {*filter.seed};
  std::vector<CellKey> out;
  for (const auto& a : algos) {
    for (int e : envs) {
      for (auto s : seeds) out.push_back({a, e, s});
    }
  }
  return out;
}

fs::path Runner::checkpoint_path(const CellKey& c, std::int64_t step) const {
  char name[32];
  std::snprintf(name, sizeof name, "step%06lld.ckpt", static_cast<long long>(step));
  return config_.out_dir / "checkpoints" / config_.dataset.name / c.algorithm / cell_dir(c) / name;
}

fs::path Runner::final_checkpoint_path(const CellKey& c) const {
  return checkpoint_path(c, config_.train.algorithm.steps);
}

fs::path Runner::metrics_path(const CellKey& c) const {
  return config_.out_dir / "metrics" / config_.dataset.name / c.algorithm / (cell_dir(c) + ".jsonl");
}

fs::path Runner::probe_path(const CellKey& c, std::size_t tap, bool control) const {
  return config_.out_dir / "probes" / config_.dataset.name / c.algorithm / cell_dir(c) /
         ("tap" + std::to_string(tap) + (control ? "_control" : "") + ".jsonl");
}

fs::path Runner::report_dir() const { return config_.out_dir / "reports" / config_.dataset.name; }

fs::path Runner::dump_dir(const CellKey& c) const {
  return config_.out_dir / "dumps" / config_.dataset.name / c.algorithm / cell_dir(c);
}

bool Runner::training_complete(const CellKey& c) const {
  return fs::exists(final_checkpoint_path(c)) && completion_marker(metrics_path(c)).has_value();
}

bool Runner::probe_complete(const CellKey& c, std::size_t tap, bool control) const {
  return completion_marker(probe_path(c, tap, control)).has_value();
}

TrainSummary Runner::train(const CellFilter& filter) {
  const auto todo = cells(filter);
  build_data();
  const auto spec = featurizer_spec();
  algorithms::TrainSettings settings;
  settings.featurizer = spec;
  settings.eval_interval = config_.train.eval_interval;
  settings.checkpoint_every = config_.train.checkpoint_every;

  TrainSummary summary;
  std::mutex mu;
  const std::size_t width = config_.workers ? config_.workers : default_workers();
  parallel_for(todo.size(), width, [&](std::size_t i) {
    const auto& cell = todo[i];
    if (training_complete(cell)) {
      std::lock_guard lock(mu);
      ++summary.skipped;
      say("train " + probing::to_string(cell) + ": complete, skipped");
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto mpath = metrics_path(cell);
    ensure_dir(mpath.parent_path());
    std::ofstream log(mpath, std::ios::trunc);
    if (!log) throw IoError("cannot write " + mpath.string());
    algorithms::AlgorithmConfig algo = config_.train.algorithm;
    algo.name = cell.algorithm;
    algorithms::TrainCallbacks cb;
    cb.on_checkpoint = [&](const features::Checkpoint& k) {
      features::save_checkpoint(checkpoint_path(cell, k.meta.step), k);
    };
    cb.on_metric = [&](const algorithms::MetricRecord& r) { log << algorithms::to_json(r).dump() << "\n"; };
    auto marker = cell_json(cell, dataset_->name);
    try {
      const auto result = algorithms::train_algorithm(algo, *splits_, cell.test_env, cell.seed, settings, cb);
      marker["record"] = "complete";
      marker["steps"] = algo.steps;
      marker["test_accuracy"] = result.test_accuracy;
      marker["featurizer_checksum"] = features::featurizer_checksum(result.final_checkpoint);
      log << marker.dump() << "\n";
      log.close();
      std::lock_guard lock(mu);
      ++summary.trained;
      say("train " + probing::to_string(cell) + ": test acc " + analysis::format_real(result.test_accuracy) + " (" +
          seconds_since(t0) + ")");
    } catch (const TrainingFailure& e) {
      marker["record"] = "failed";
      marker["step"] = e.step();
      marker["error"] = e.what();
      log << marker.dump() << "\n";
      log.close();
      std::lock_guard lock(mu);
      summary.failed.push_back(probing::to_string(cell) + ": " + e.what());
      say("train " + probing::to_string(cell) + ": FAILED " + e.what());
    }
  });
  std::sort(summary.failed.begin(), summary.failed.end());
  return summary;
}

ProbeSummary Runner::probe(const CellFilter& filter) {
  const auto todo = cells(filter);
  std::string missing;
  for (const auto& c : todo) {
    if (!training_complete(c)) missing += (missing.empty() ? "" : ", ") + probing::to_string(c);
  }
  if (!missing.empty()) throw CoverageError("missing checkpoints: " + missing);
  build_data();
  const std::size_t num_envs = splits_->splits.size() - 1;
  std::vector<bool> modes{false};
  if (config_.probe.control) modes.push_back(true);

  ProbeSummary summary;
  std::mutex mu;
  const std::size_t width = config_.workers ? config_.workers : default_workers();
  parallel_for(todo.size(), width, [&](std::size_t i) {
    const auto& cell = todo[i];
    const auto path = final_checkpoint_path(cell);
    const auto ckpt = features::load_checkpoint(path);
    const auto before = features::featurizer_checksum(ckpt);
    const auto marker = completion_marker(metrics_path(cell));
    if (marker && marker->contains("featurizer_checksum") && marker->at("featurizer_checksum") != before) {
      throw IntegrityError("featurizer checksum of " + path.string() + " differs from the training record");
    }
    auto model = features::instantiate(ckpt);
    auto probes = probing::attach_probes(ckpt, num_envs);
    std::size_t done = 0, skipped = 0;
    for (auto& p : probes) {
      std::vector<bool> needed;
      for (bool control : modes) {
        if (probe_complete(cell, p.tap_index, control)) {
          ++skipped;
        } else {
          needed.push_back(control);
        }
      }
      if (needed.empty()) continue;
      const auto pd = probing::extract_probe_data(model, *splits_, cell.test_env, p.tap_index,
                                                  config_.probe.settings.chunk);
      for (bool control : needed) {
        auto settings = config_.probe.settings;
        settings.shuffle_labels = control;
        auto fresh = p;
        auto r = probing::fit_probe(fresh, pd, settings, probing::probe_seed(cell, p.tap_index, control));
        r.algorithm = cell.algorithm;
        r.dataset = ckpt.meta.dataset;
        r.test_env = cell.test_env;
        r.seed = cell.seed;
        if (features::featurizer_checksum(model) != before) {
          throw IntegrityError("featurizer changed while probing " + probing::to_string(cell));
        }
        std::string text;
        for (const auto& row : probing::to_json_rows(r)) text += row.dump() + "\n";
        auto end = cell_json(cell, ckpt.meta.dataset);
        end["record"] = "complete";
        end["tap_index"] = p.tap_index;
        end["control"] = control;
        end["featurizer_checksum"] = before;
        text += end.dump() + "\n";
        write_atomic(probe_path(cell, p.tap_index, control), text);
        ++done;
      }
    }
    if (features::featurizer_checksum(features::load_checkpoint(path)) != before) {
      throw IntegrityError("checkpoint " + path.string() + " changed during probing");
    }
    std::lock_guard lock(mu);
    summary.probed += done;
    summary.skipped += skipped;
    say("probe " + probing::to_string(cell) + ": " + std::to_string(done) + " probes trained, " +
        std::to_string(skipped) + " already complete");
  });
  return summary;
}

analysis::ResultsTable Runner::collect_results(bool control) const {
  analysis::ResultsTable table;
  std::size_t taps = 0;
  {
    auto self = const_cast<Runner*>(this);
    features::Model<float> m(self->featurizer_spec(), 0);
    taps = m.taps().size();
  }
  for (const auto& cell : cells()) {
    const auto marker = completion_marker(metrics_path(cell));
    if (!marker || !fs::exists(final_checkpoint_path(cell))) continue;
    analysis::ResultRow row{cell.algorithm, config_.dataset.name, cell.test_env, cell.seed,
                            marker->at("test_accuracy").get<double>(), std::vector<std::optional<double>>(taps)};
    for (std::size_t t = 0; t < taps; ++t) {
      if (!probe_complete(cell, t, control)) continue;
      for (const auto& r : read_jsonl(probe_path(cell, t, control))) {
        if (r.value("metric", "") == "probe_acc") row.probe[t] = r.at("value").get<double>();
      }
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

ReportSummary Runner::report() {
  build_data();
  const auto table = collect_results(false);
  if (table.rows.empty()) throw CoverageError("no completed training cells under " + config_.out_dir.string());
  const std::size_t num_envs = splits_->splits.size() - 1;
  const double lower = probing::dummy_accuracy(num_envs);

  ReportSummary summary;
  const auto dir = report_dir();
  auto emit = [&](const std::string& name, const std::string& content) {
    write_atomic(dir / name, content);
    summary.files.push_back(dir / name);
  };

  const auto loo = analysis::aggregate_loo(table);
  emit("loo.csv", analysis::loo_csv(loo));

  auto grid_of = [](const analysis::ResultsTable& t) {
    std::map<std::string, std::vector<double>> grid;
    std::map<std::string, std::vector<std::size_t>> counts;
    for (const auto& r : t.rows) {
      auto& g = grid[r.algorithm];
      auto& n = counts[r.algorithm];
      g.resize(r.probe.size(), 0.0);
      n.resize(r.probe.size(), 0);
      for (std::size_t i = 0; i < r.probe.size(); ++i) {
        if (r.probe[i]) {
          g[i] += *r.probe[i];
          ++n[i];
        }
      }
    }
    bool any = false;
    for (auto& [a, g] : grid) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (counts[a][i]) {
          g[i] /= static_cast<double>(counts[a][i]);
          any = true;
        } else {
          g[i] = std::nan("");
        }
      }
    }
    return any ? grid : std::map<std::string, std::vector<double>>{};
  };
  const auto grid = grid_of(table);
  if (grid.empty()) throw CoverageError("no probe records under " + config_.out_dir.string() + "; run probe first");
  emit("grid.csv", analysis::grid_csv(grid));
  emit("grid.svg", analysis::heatmap_svg(grid, lower, config_.dataset.name + " probing accuracy"));
  emit("trend.csv", analysis::trend_csv(grid));

  const auto control = grid_of(collect_results(true));
  if (!control.empty()) {
    emit("control_grid.csv", analysis::grid_csv(control));
    emit("control_grid.svg",
         analysis::heatmap_svg(control, lower, config_.dataset.name + " shuffled-label control"));
  }

  std::set<std::string> excluded;
  if (!config_.reference.empty()) {
    std::ifstream in(config_.reference);
    if (!in) throw ConfigError("cannot read reference table " + config_.reference.string());
    std::stringstream ss;
    ss << in.rdbuf();
    std::map<std::string, analysis::Reference> by_lower, ref;
    for (const auto& [k, v] : analysis::parse_reference_csv(ss.str())) by_lower[to_lower(k)] = v;
    std::map<std::string, double> observed;
    for (const auto& c : loo) {
      observed[c.algorithm] = c.mean;
      if (auto it = by_lower.find(to_lower(c.algorithm)); it != by_lower.end()) ref[c.algorithm] = it->second;
    }
    const auto f = analysis::filter_3sigma(observed, ref);
    std::string csv = "algorithm,observed,reference_mean,reference_std,decision\n";
    for (const auto& [a, v] : observed) {
      const bool removed = std::find(f.removed.begin(), f.removed.end(), a) != f.removed.end();
      csv += a + "," + analysis::format_real(v) + "," + analysis::format_real(ref.at(a).mean) + "," +
             analysis::format_real(ref.at(a).std) + "," + (removed ? "removed" : "retained") + "\n";
    }
    emit("filter.csv", csv);
    excluded.insert(f.removed.begin(), f.removed.end());
    summary.removed = f.removed;
  }
  emit("layerwise_correlation.csv",
       analysis::correlation_csv(analysis::layerwise_correlation(table, config_.dataset.name, excluded)));
  emit("per_algorithm_correlation.csv",
       analysis::correlation_csv(analysis::per_algorithm_correlation(table, config_.dataset.name, 6, excluded)));

  features::Model<float> m(featurizer_spec(), 0);
  std::string bound = "probe,parameters,log_class_size,epsilon,delta,recommended_samples\n";
  for (const auto& t : m.taps()) {
    const std::size_t params = t.width() * num_envs + num_envs;
    const double lf = probing::probe_log_class_size(params, config_.probe.bits);
    bound += "Probe_" + std::to_string(t.index) + "," + std::to_string(params) + "," + analysis::format_real(lf) +
             "," + analysis::format_real(config_.probe.epsilon) + "," + analysis::format_real(config_.probe.delta) +
             "," + std::to_string(probing::recommend_probe_samples(config_.probe.epsilon, config_.probe.delta, lf)) +
             "\n";
  }
  emit("sample_bound.csv", bound);
  for (const auto& f : summary.files) say("report " + f.string());
  return summary;
}

std::size_t Runner::dump(const CellFilter& filter, std::size_t inputs, std::uint64_t seed) {
  const auto todo = cells(filter);
  if (todo.empty()) throw CoverageError("no cell selected");
  const auto& cell = todo.front();
  if (!training_complete(cell)) throw CoverageError("missing checkpoints: " + probing::to_string(cell));
  build_data();
  auto model = features::instantiate(features::load_checkpoint(final_checkpoint_path(cell)));
  const auto& src = splits_->splits[static_cast<std::size_t>(cell.test_env)].out_split;
  const std::size_t n = std::min(inputs, src.size());
  const auto out = model.forward_with_taps(nn::slice_rows(src.images, 0, n));
  const auto dir = dump_dir(cell);
  ensure_dir(dir);
  std::size_t files = 0;
  for (std::size_t t = 0; t < out.taps.size(); ++t) {
    const auto& rep = out.taps[t];
    if (rep.rank() != 4) continue;
    const std::size_t c = rep.dim(1), h = rep.dim(2), w = rep.dim(3);
    for (std::size_t i = 0; i < n; ++i) {
      std::mt19937_64 rng(derive_seed(seed, {t, i}));
      const std::size_t ch = uniform_index(rng, c);
      const std::span<const float> plane(rep.data.data() + (i * c + ch) * h * w, h * w);
      write_pgm(dir / ("tap" + std::to_string(t) + "_input" + std::to_string(i) + "_ch" + std::to_string(ch) + ".pgm"),
                plane, h, w);
      ++files;
    }
  }
  say("dump " + probing::to_string(cell) + ": " + std::to_string(files) + " images in " + dir.string());
  return files;
}

}  // namespace oodprobe::runner
