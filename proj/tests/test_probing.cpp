#include <doctest.h>

#include <cmath>
#include <random>

#include "oodprobe/probing/probing.hpp"
#include "oodprobe/util/rng.hpp"

using namespace oodprobe;
using namespace oodprobe::probing;
using nn::Shape;
using nn::TensorF;

namespace {

const features::FeaturizerSpec kSmallCnn = features::FeaturizerSpec::mini_cnn({1, 28, 28}, 10, {2, 3, 3, 4});

data::EnvironmentDataset small_rotated(std::size_t envs = 6, std::size_t per_env = 40) {
  std::vector<double> angles;
  for (std::size_t e = 0; e < envs; ++e) angles.push_back(15.0 * static_cast<double>(e));
  return data::build_rotated(data::synth_glyphs(1, 20), angles, per_env, 1);
}

features::Checkpoint random_checkpoint(const features::FeaturizerSpec& spec, std::uint64_t seed, int test_env = 0,
                                       const std::string& algorithm = "erm") {
  features::Model<float> m(spec, seed);
  return features::capture(m, {algorithm, "rotated_digits", test_env, seed, 0});
}

// Gaussian clusters, one per environment, centered far apart along distinct axes.
ProbeData clustered(std::size_t m, std::size_t d, std::size_t per_env, double spread, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, spread);
  auto make = [&](TensorF& x, std::vector<int>& y) {
    x = TensorF({m * per_env, d});
    for (std::size_t e = 0; e < m; ++e) {
      for (std::size_t i = 0; i < per_env; ++i) {
        const std::size_t row = e * per_env + i;
        for (std::size_t j = 0; j < d; ++j) x.data[row * d + j] = static_cast<float>((j == e ? 3.0 : 0.0) + noise(rng));
        y.push_back(static_cast<int>(e));
      }
    }
  };
  ProbeData p;
  p.num_classes = m;
  make(p.train_x, p.train_y);
  make(p.val_x, p.val_y);
  return p;
}

Probe probe_for(std::size_t d, std::size_t m) {
  Probe p;
  p.input_dim = d;
  p.num_classes = m;
  p.weight = TensorF({d, m});
  p.bias = TensorF({m});
  return p;
}

}  // namespace

TEST_CASE("attach_probes") {
  const auto cnn = attach_probes(random_checkpoint(features::FeaturizerSpec::mini_cnn({1, 28, 28}, 10), 1), 5);
  REQUIRE(cnn.size() == 5);
  CHECK(cnn[1].input_dim == 25088);
  CHECK(cnn[0].input_dim == 64 * 28 * 28);
  CHECK(cnn[4].input_dim == 128);
  for (std::size_t i = 0; i < cnn.size(); ++i) {
    CHECK(cnn[i].tap_index == i);
    CHECK(cnn[i].num_classes == 5);
    CHECK(cnn[i].weight.shape == Shape{cnn[i].input_dim, 5});
    for (float v : cnn[i].weight.data) REQUIRE(v == 0.0f);
  }
  const auto res = attach_probes(random_checkpoint(features::FeaturizerSpec::mini_resnet({2, 28, 28}, 2), 1), 2);
  CHECK(res.size() == 6);

  auto bad = random_checkpoint(kSmallCnn, 1);
  bad.spec.channels = {2, 3, 3};
  CHECK_THROWS_AS(attach_probes(bad, 5), CheckpointError);
}

TEST_CASE("dummy_accuracy") {
  CHECK(dummy_accuracy(5) == 0.2);
  CHECK(dummy_accuracy(4) == 0.25);
  CHECK(dummy_accuracy(1) == 1.0);
  CHECK_THROWS_AS(dummy_accuracy(0), DomainError);
}

TEST_CASE("recommend_probe_samples") {
  const double delta = 0.05;
  const double log_f = 184.0 - std::log(2.0 / delta);
  CHECK(recommend_probe_samples(0.02, delta, log_f) == 230000);
  CHECK(recommend_probe_samples(0.1, delta, 20.0 - std::log(2.0 / delta)) == 1000);
  for (double eps : {0.3, 0.1, 0.05, 0.02, 0.013}) {
    const auto n = static_cast<double>(recommend_probe_samples(eps, delta, log_f));
    const auto n2 = static_cast<double>(recommend_probe_samples(eps / 2, delta, log_f));
    CHECK(std::abs(n2 - 4 * n) <= 4.0);
  }
  CHECK_THROWS_AS(recommend_probe_samples(0.0, delta, 1.0), DomainError);
  CHECK_THROWS_AS(recommend_probe_samples(0.1, 1.0, 1.0), DomainError);
  CHECK_THROWS_AS(recommend_probe_samples(0.1, 0.1, 0.0), DomainError);
  CHECK(probe_log_class_size(10) == doctest::Approx(10 * 4 * std::log(2.0)));
}

TEST_CASE("fit_probe: separable clusters, shuffled control, determinism") {
  const auto data = clustered(5, 8, 60, 0.3, 3);
  ProbeSettings s;
  s.budget = 500;
  s.eval_interval = 25;
  auto p = probe_for(8, 5);
  const auto r = fit_probe(p, data, s, 1);
  CHECK(r.accuracy >= 0.99);
  REQUIRE(!r.curve.empty());
  CHECK(r.curve.front().step == 0);
  CHECK(r.curve.front().accuracy == doctest::Approx(0.2));  // zero weights pick env 0
  CHECK(r.samples_used % 64 == 0);
  CHECK(r.samples_used <= 500 * 64);
  for (const auto& c : r.curve) CHECK(c.accuracy <= r.accuracy);

  auto p2 = probe_for(8, 5);
  const auto again = fit_probe(p2, data, s, 1);
  CHECK(again.curve == r.curve);
  CHECK(p2.weight.data == p.weight.data);

  ProbeSettings control = s;
  control.shuffle_labels = true;
  auto pc = probe_for(8, 5);
  const auto rc = fit_probe(pc, clustered(5, 8, 400, 0.3, 4), control, 2);
  CHECK(rc.control);
  CHECK(std::abs(rc.accuracy - 0.2) <= 0.05);

  auto wrong = probe_for(7, 5);
  CHECK_THROWS_AS(fit_probe(wrong, data, s, 1), CheckpointError);
}

TEST_CASE("fit_probe: early stop on a plateau") {
  ProbeData flat = clustered(4, 3, 30, 0.3, 5);
  for (auto& v : flat.train_x.data) v = 0.0f;
  for (auto& v : flat.val_x.data) v = 0.0f;
  ProbeSettings s;
  s.budget = 2000;
  s.eval_interval = 10;
  auto p = probe_for(3, 4);
  const auto r = fit_probe(p, flat, s, 0);
  CHECK(r.curve.size() == 4);  // step 0 plus 3 stale evaluations
  CHECK(r.samples_used == 30 * 64);
  CHECK(r.accuracy == doctest::Approx(0.25));
}

TEST_CASE("train_probe on checkpoints") {
  const auto ds = small_rotated();
  const auto sd = algorithms::split_dataset(ds);
  ProbeSettings s;
  s.budget = 200;
  s.eval_interval = 20;

  auto zeroed = random_checkpoint(kSmallCnn, 2);
  for (auto& p : zeroed.parameters) {
    if (p.name.rfind("features.", 0) == 0) std::fill(p.values.begin(), p.values.end(), 0.0f);
  }
  for (auto& probe : attach_probes(zeroed, 5)) {
    const auto r = train_probe(probe, zeroed, sd, 0, s, 1);
    CAPTURE(probe.tap_index);
    CHECK(std::abs(r.accuracy - 0.2) <= 0.05);
    CHECK(r.algorithm == "erm");
    CHECK(r.test_env == 0);
  }

  const auto ckpt = random_checkpoint(kSmallCnn, 3);
  auto probes = attach_probes(ckpt, 5);
  const auto a = train_probe(probes[0], ckpt, sd, 1, s, 9);
  auto fresh = attach_probes(ckpt, 5);
  const auto b = train_probe(fresh[0], ckpt, sd, 1, s, 9);
  CHECK(a.curve == b.curve);
  CHECK(a.accuracy == b.accuracy);

  const auto other = random_checkpoint(features::FeaturizerSpec::mini_cnn({1, 28, 28}, 10, {2, 5, 5, 4}), 3);
  CHECK_THROWS_AS(train_probe(probes[1], other, sd, 0, s, 1), CheckpointError);

  const std::vector<double> two{0, 30};
  const auto ds2 = data::build_rotated(data::synth_glyphs(1, 10), two, 40, 1);
  const auto sd2 = algorithms::split_dataset(ds2);
  auto p1 = attach_probes(ckpt, 1);
  CHECK_THROWS_AS(train_probe(p1[0], ckpt, sd2, 0, s, 1), ProtocolError);

  const auto colored = data::build_colored(data::synth_glyphs(1, 20), data::kDefaultCorrelations, 0.25, 40, 1);
  const auto sdc = algorithms::split_dataset(colored);
  CHECK_THROWS_AS(train_probe(probes[0], ckpt, sdc, 0, s, 1), CheckpointError);
}

TEST_CASE("run_probing_suite: counting, grid means, coverage, frozen featurizer") {
  const auto ds = small_rotated();
  const auto sd = algorithms::split_dataset(ds);
  std::map<CellKey, features::Checkpoint> ckpts;
  for (int e = 0; e < 6; ++e) ckpts[{"erm", e, 0}] = random_checkpoint(kSmallCnn, 10 + e, e);
  std::map<CellKey, std::string> before;
  for (const auto& [k, c] : ckpts) before[k] = features::featurizer_checksum(c);

  SuiteRequest req;
  req.algorithms = {"erm"};
  req.test_envs = {0, 1, 2, 3, 4, 5};
  req.seeds = {0};
  req.settings.budget = 60;
  req.settings.eval_interval = 20;
  req.workers = 2;
  const auto out = run_probing_suite(ckpts, sd, req);
  CHECK(out.raw.size() == 30);
  REQUIRE(out.grid.size() == 1);
  REQUIRE(out.grid.at("erm").size() == 5);
  CHECK(out.num_classes == 5);
  for (std::size_t t = 0; t < 5; ++t) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : out.raw) {
      if (r.tap_index == t) {
        sum += r.accuracy;
        ++n;
      }
    }
    CHECK(n == 6);
    CHECK(out.grid.at("erm")[t] == doctest::Approx(sum / 6).epsilon(1e-15));
  }
  for (const auto& [k, c] : ckpts) CHECK(features::featurizer_checksum(c) == before[k]);

  req.workers = 1;
  const auto serial = run_probing_suite(ckpts, sd, req);
  for (std::size_t i = 0; i < out.raw.size(); ++i) CHECK(serial.raw[i].curve == out.raw[i].curve);

  const auto rows = to_json_rows(out.raw.front());
  CHECK(rows.back().at("metric") == "probe_acc");
  CHECK(rows.back().at("tap_index") == 0);
  CHECK(rows.front().at("metric") == "probe_val_curve");
  CHECK(rows.size() == out.raw.front().curve.size() + 1);

  req.algorithms = {"erm", "irm"};
  req.test_envs = {0, 1};
  CHECK_THROWS_WITH_AS(run_probing_suite(ckpts, sd, req), doctest::Contains("irm/env1/seed0"), CoverageError);
}
