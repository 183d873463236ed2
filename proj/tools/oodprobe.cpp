#include <CLI11.hpp>

#include <iostream>

#include "oodprobe/nn/gradcheck.hpp"
#include "oodprobe/runner/runner.hpp"
#include "oodprobe/util/alloc.hpp"

using namespace oodprobe;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kCoverage = 3, kTraining = 4 };

struct Options {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> algorithm;
  std::optional<int> test_env;
  std::optional<std::size_t> workers;
  std::size_t inputs = 3;
  std::uint64_t channel_seed = 0;
  std::size_t networks = 20;
};

runner::Runner make_runner(const Options& o) {
  runner::ExperimentConfig c = o.config.empty() ? runner::ExperimentConfig{} : runner::load_config(o.config);
  if (!o.out_dir.empty()) c.out_dir = o.out_dir;
  if (o.workers) c.workers = *o.workers;
  return runner::Runner(std::move(c), [](const std::string& m) { std::cerr << m << std::endl; });
}

runner::CellFilter filter_of(const Options& o) { return {o.algorithm, o.test_env, o.seed}; }

int run(const std::string& cmd, const Options& o) {
  if (cmd == "gradcheck") {
    const auto s = nn::grad_check_suite(o.networks, o.seed.value_or(0));
    for (std::size_t i = 0; i < s.per_network.size(); ++i) {
      std::printf("network %2zu  max rel error %.3e\n", i, s.per_network[i]);
    }
    std::printf("max rel error %.3e over %zu networks, %zu of %zu coordinates skipped at kinks\n", s.max_rel_error,
                s.per_network.size(), s.skipped, s.coordinates);
    return s.max_rel_error < 1e-5 ? kOk : kOther;
  }
  auto r = make_runner(o);
  if (cmd == "train") {
    const auto s = r.train(filter_of(o));
    std::printf("trained %zu, skipped %zu, failed %zu\n", s.trained, s.skipped, s.failed.size());
    for (const auto& f : s.failed) std::printf("  failed %s\n", f.c_str());
    return s.failed.empty() ? kOk : kTraining;
  }
  if (cmd == "probe") {
    const auto s = r.probe(filter_of(o));
    std::printf("probed %zu, skipped %zu\n", s.probed, s.skipped);
    return kOk;
  }
  if (cmd == "report") {
    const auto s = r.report();
    for (const auto& f : s.files) std::printf("%s\n", f.string().c_str());
    for (const auto& a : s.removed) std::printf("removed by 3-sigma filter: %s\n", a.c_str());
    return kOk;
  }
  const auto n = r.dump(filter_of(o), o.inputs, o.channel_seed);
  std::printf("wrote %zu images\n", n);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Leave-one-domain-out training and environment probing"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "TOML experiment config")->check(CLI::ExistingFile);
  app.add_option("--out-dir", o.out_dir, "Output directory (overrides config)");
  app.add_option("--seed", o.seed, "Restrict to one training seed (gradcheck: RNG seed)");
  app.add_option("--algorithm", o.algorithm, "Restrict to one algorithm");
  app.add_option("--test-env", o.test_env, "Restrict to one held-out environment");
  app.add_option("--workers", o.workers, "Worker threads (0 = one per core)");

  app.add_subcommand("train", "Train every configured cell, skipping completed ones");
  app.add_subcommand("probe", "Fit environment probes on final checkpoints");
  app.add_subcommand("report", "Write tables, correlations and heatmaps");
  auto* dump = app.add_subcommand("dump", "Write PGM images of spatial representations");
  dump->add_option("--inputs", o.inputs, "Number of held-out inputs")->capture_default_str();
  dump->add_option("--channel-seed", o.channel_seed, "Seed for the sampled channels")->capture_default_str();
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the autograd kernels");
  gc->add_option("--networks", o.networks, "Number of random networks")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return run(cmd, o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const SpecError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const CoverageError& e) {
    std::cerr << "coverage error: " << e.what() << "\n";
    return kCoverage;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return kCoverage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCoverage;
  } catch (const TrainingFailure& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return kTraining;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
