#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oodprobe/algorithms/penalties.hpp"
#include "oodprobe/algorithms/trainer.hpp"
#include "oodprobe/util/rng.hpp"

using namespace oodprobe;
using namespace oodprobe::algorithms;
using nn::Shape;
using nn::TensorD;
using nn::TensorF;

namespace {

TensorD random_d(Shape shape, std::uint64_t seed, double scale = 1.0) {
  TensorD t(std::move(shape));
  std::mt19937_64 rng(seed);
  for (auto& v : t.data) v = scale * (2.0 * uniform01(rng) - 1.0);
  return t;
}

std::vector<int> random_labels(std::size_t n, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(k)));
  return y;
}

// CE(w·z, y) evaluated directly.
double scaled_ce(const TensorD& z, const std::vector<int>& y, double w) {
  TensorD s = z;
  for (auto& v : s.data) v *= w;
  return nn::cross_entropy(s, y).value;
}

template <typename F>
void check_fd(std::vector<TensorD>& inputs, const std::vector<TensorD>& grads, F objective, double tol) {
  const double h = 1e-6;
  for (std::size_t e = 0; e < inputs.size(); ++e) {
    for (std::size_t i = 0; i < inputs[e].numel(); ++i) {
      const double orig = inputs[e].data[i];
      inputs[e].data[i] = orig + h;
      const double up = objective();
      inputs[e].data[i] = orig - h;
      const double down = objective();
      inputs[e].data[i] = orig;
      const double fd = (up - down) / (2 * h);
      CAPTURE(e);
      CAPTURE(i);
      CHECK(std::abs(fd - grads[e].data[i]) <= tol * std::max(1.0, std::abs(fd)));
    }
  }
}

data::EnvironmentDataset small_rotated(std::uint64_t seed, std::size_t per_env = 60) {
  const std::vector<double> angles{0, 30, 60};
  return data::build_rotated(data::synth_glyphs(seed, 40), angles, per_env, seed);
}

TrainSettings small_settings() {
  TrainSettings s;
  s.featurizer = features::FeaturizerSpec::mini_cnn({1, 28, 28}, 10, {2, 3, 3, 4});
  s.eval_interval = 10;
  s.checkpoint_every = 10;
  return s;
}

}  // namespace

TEST_CASE("erm_loss") {
  const TensorD a = random_d({4, 3}, 1), b = random_d({6, 3}, 2);
  const auto ya = random_labels(4, 3, 3), yb = random_labels(6, 3, 4);
  std::vector<TensorD> one{a};
  std::vector<std::vector<int>> yone{ya};
  CHECK(erm_loss<double>(one, yone).value == doctest::Approx(nn::cross_entropy(a, ya).value).epsilon(1e-14));

  std::vector<TensorD> twice{a, a};
  std::vector<std::vector<int>> ytwice{ya, ya};
  CHECK(erm_loss<double>(twice, ytwice).value == doctest::Approx(nn::cross_entropy(a, ya).value).epsilon(1e-14));

  // Two equal-size envs with losses 0.2 and 0.4: single-sample binary logits z with CE = ln(1 + e^-z).
  auto logit_for = [](double loss) { return -std::log(std::exp(loss) - 1.0); };
  std::vector<TensorD> two{TensorD(Shape{1, 2}, std::vector<double>{logit_for(0.2), 0.0}),
                           TensorD(Shape{1, 2}, std::vector<double>{logit_for(0.4), 0.0})};
  std::vector<std::vector<int>> y0{{0}, {0}};
  CHECK(erm_loss<double>(two, y0).value == doctest::Approx(0.3).epsilon(1e-12));

  std::vector<TensorD> mixed{a, b};
  std::vector<std::vector<int>> ym{ya, yb};
  const auto r = erm_loss<double>(mixed, ym);
  CHECK(r.value == doctest::Approx((4 * nn::cross_entropy(a, ya).value + 6 * nn::cross_entropy(b, yb).value) / 10));
  check_fd(mixed, r.grads, [&] { return erm_loss<double>(mixed, ym).value; }, 1e-7);
}

TEST_CASE("irm_penalty: finite-difference oracle, duplication, stationary point") {
  std::vector<TensorD> logits{
      TensorD(Shape{3, 3}, std::vector<double>{1.0, -0.5, 0.3, 0.2, 2.0, -1.0, -0.7, 0.1, 0.9}),
      TensorD(Shape{2, 3}, std::vector<double>{0.4, 0.4, -2.0, 1.5, -0.3, 0.6})};
  std::vector<std::vector<int>> labels{{0, 1, 1}, {2, 0}};

  double expected = 0.0;
  for (std::size_t e = 0; e < 2; ++e) {
    const double h = 1e-5;
    const double fd = (scaled_ce(logits[e], labels[e], 1 + h) - scaled_ce(logits[e], labels[e], 1 - h)) / (2 * h);
    CHECK(irm_scale_gradient(logits[e], labels[e]) == doctest::Approx(fd).epsilon(1e-6));
    expected += fd * fd;
  }
  const auto pen = irm_penalty<double>(logits, labels);
  CHECK(std::abs(pen.value - expected) / expected < 1e-6);
  check_fd(logits, pen.grads, [&] { return irm_penalty<double>(logits, labels).value; }, 1e-6);

  std::vector<TensorD> dup{logits[0], logits[0]};
  std::vector<std::vector<int>> ydup{labels[0], labels[0]};
  std::vector<TensorD> single{logits[0]};
  std::vector<std::vector<int>> ysingle{labels[0]};
  CHECK(irm_penalty<double>(dup, ydup).value ==
        doctest::Approx(2 * irm_penalty<double>(single, ysingle).value).epsilon(1e-14));

  // Rescale the logits to the root of the scale derivative; the penalty vanishes there.
  TensorD z = logits[0];
  double lo = 0.01, hi = 20.0;
  auto g_at = [&](double w) {
    TensorD s = z;
    for (auto& v : s.data) v *= w;
    return irm_scale_gradient(s, labels[0]);
  };
  REQUIRE(g_at(lo) * g_at(hi) < 0);
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (g_at(lo) * g_at(mid) <= 0 ? hi : lo) = mid;
  }
  for (auto& v : z.data) v *= 0.5 * (lo + hi);
  std::vector<TensorD> stationary{z, z};
  CHECK(irm_penalty<double>(stationary, ydup).value < 1e-9);
}

TEST_CASE("vrex_penalty") {
  const std::vector<double> equal{0.3, 0.3, 0.3};
  CHECK(vrex_penalty(equal).value == 0.0);
  const std::vector<double> r{0.2, 0.4};
  CHECK(vrex_penalty(r).value == doctest::Approx(0.01).epsilon(1e-12));
  const std::vector<double> a{0.1, 0.7, 0.4, 0.2}, b{0.4, 0.2, 0.1, 0.7};
  CHECK(vrex_penalty(a).value == doctest::Approx(vrex_penalty(b).value).epsilon(1e-14));
  const std::vector<double> one{0.5};
  CHECK_THROWS_AS(vrex_penalty(one), DegenerateError);

  std::vector<double> x = a;
  const auto g = vrex_penalty(x).grad;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double h = 1e-6, orig = x[i];
    x[i] = orig + h;
    const double up = vrex_penalty(x).value;
    x[i] = orig - h;
    const double down = vrex_penalty(x).value;
    x[i] = orig;
    CHECK(g[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-7));
  }
}

TEST_CASE("groupdro_reweight") {
  const std::vector<double> uniform{0.5, 0.5};
  const std::vector<double> same{0.7, 0.7};
  const auto s = groupdro_reweight(uniform, same, 0.3);
  CHECK(s.q[0] == doctest::Approx(0.5));
  CHECK(s.q[1] == doctest::Approx(0.5));

  const std::vector<double> losses{0.0, std::log(2.0)};
  const auto u = groupdro_reweight(uniform, losses, 1.0);
  CHECK(u.q[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(u.q[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(u.loss == doctest::Approx(2.0 / 3 * std::log(2.0)).epsilon(1e-12));

  const std::vector<double> bad{0.5, 0.6};
  CHECK_THROWS_AS(groupdro_reweight(bad, losses, 1.0), StateError);

  std::mt19937_64 rng(11);
  std::vector<double> q(4, 0.25);
  for (int it = 0; it < 10000; ++it) {
    std::vector<double> l(4);
    for (auto& v : l) v = 5.0 * uniform01(rng);
    q = groupdro_reweight(q, l, 0.5).q;
    REQUIRE(std::abs(std::accumulate(q.begin(), q.end(), 0.0) - 1.0) <= 1e-6);
    for (double v : q) REQUIRE(v >= 0.0);
  }
}

TEST_CASE("coral_penalty") {
  std::vector<TensorD> ab{TensorD(Shape{2, 1}, std::vector<double>{-1, 1}),
                          TensorD(Shape{2, 1}, std::vector<double>{0, 2})};
  CHECK(coral_penalty<double>(ab).value == doctest::Approx(1.0).epsilon(1e-14));

  const TensorD f = random_d({6, 4}, 5);
  std::vector<TensorD> same{f, f};
  CHECK(coral_penalty<double>(same).value < 1e-9);

  std::vector<TensorD> envs{random_d({5, 3}, 6), random_d({7, 3}, 7), random_d({4, 3}, 8)};
  const double base = coral_penalty<double>(envs).value;
  std::vector<std::size_t> rows{4, 2, 0, 3, 1};
  std::vector<TensorD> shuffled{nn::gather_rows(envs[0], rows), envs[1], envs[2]};
  CHECK(coral_penalty<double>(shuffled).value == doctest::Approx(base).epsilon(1e-12));

  const auto pen = coral_penalty<double>(envs);
  check_fd(envs, pen.grads, [&] { return coral_penalty<double>(envs).value; }, 1e-6);

  std::vector<TensorD> tiny{TensorD(Shape{1, 2}), TensorD(Shape{3, 2})};
  CHECK_THROWS_AS(coral_penalty<double>(tiny), StatisticsError);
}

TEST_CASE("mmd_penalty") {
  std::vector<TensorD> xy{TensorD(Shape{1, 1}, std::vector<double>{0}), TensorD(Shape{1, 1}, std::vector<double>{1})};
  CHECK(mmd_penalty<double>(xy, 1.0).value == doctest::Approx(2.0 - 2.0 * std::exp(-1.0)).epsilon(1e-14));

  const TensorD f = random_d({5, 3}, 9);
  std::vector<TensorD> same{f, f};
  CHECK(std::abs(mmd_penalty<double>(same, 0.7).value) < 1e-12);

  std::vector<TensorD> ab{random_d({4, 3}, 10), random_d({6, 3}, 11)};
  std::vector<TensorD> ba{ab[1], ab[0]};
  CHECK(mmd_penalty<double>(ab, 0.5).value == doctest::Approx(mmd_penalty<double>(ba, 0.5).value).epsilon(1e-14));
  CHECK(mmd_penalty<double>(ab, 0.5).value >= 0.0);

  const auto pen = mmd_penalty<double>(ab, 0.5);
  check_fd(ab, pen.grads, [&] { return mmd_penalty<double>(ab, 0.5).value; }, 1e-6);
  CHECK_THROWS_AS(mmd_penalty<double>(ab, 0.0), DomainError);
}

TEST_CASE("mixup") {
  const TensorD a = random_d({3, 1, 2, 2}, 12), b = random_d({3, 1, 2, 2}, 13);
  const std::vector<int> ya{0, 1, 2}, yb{2, 2, 1};
  CHECK(mixup_minibatches(a, ya, b, yb, 1.0).images.data == a.data);
  CHECK(mixup_minibatches(a, ya, b, yb, 0.0).images.data == b.data);

  const TensorD pa(Shape{1, 1, 1, 1}, 0.2), pb(Shape{1, 1, 1, 1}, 0.6);
  const std::vector<int> y1{0};
  CHECK(mixup_minibatches(pa, y1, pb, y1, 0.5).images.data[0] == doctest::Approx(0.4).epsilon(1e-15));

  const TensorD c = random_d({2, 1, 2, 2}, 14);
  CHECK_THROWS_AS(mixup_minibatches(a, ya, c, std::vector<int>{0, 1}, 0.5), DimensionError);

  std::mt19937_64 rng(15), rng2(15);
  const auto m1 = mixup_minibatches(a, ya, b, yb, 0.2, rng);
  const auto m2 = mixup_minibatches(a, ya, b, yb, 0.2, rng2);
  CHECK(m1.lambda == m2.lambda);
  CHECK(m1.lambda >= 0.0);
  CHECK(m1.lambda <= 1.0);

  const TensorD logits = random_d({3, 3}, 16);
  const auto l = mixup_loss(logits, ya, yb, 0.3);
  CHECK(l.value == doctest::Approx(0.3 * nn::cross_entropy(logits, ya).value +
                                   0.7 * nn::cross_entropy(logits, yb).value).epsilon(1e-14));
}

TEST_CASE("andmask_aggregate") {
  {
    const std::vector<std::vector<float>> g{{1.0f}, {2.0f}};
    CHECK(andmask_aggregate(g, 1.0) == std::vector<float>{1.5f});
  }
  {
    const std::vector<std::vector<float>> g{{1.0f}, {-1.0f}};
    CHECK(andmask_aggregate(g, 1.0) == std::vector<float>{0.0f});
  }
  {
    const std::vector<std::vector<float>> g{{1.0f}, {1.0f}, {-1.0f}};
    CHECK(andmask_aggregate(g, 0.5) == std::vector<float>{0.0f});
    CHECK(andmask_aggregate(g, 0.3) == std::vector<float>{1.0f / 3.0f});
  }
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t envs = 2 + trial % 4, dim = 20;
    std::vector<std::vector<float>> g(envs, std::vector<float>(dim));
    for (auto& row : g) {
      for (auto& v : row) v = static_cast<float>(2.0 * uniform01(rng) - 1.0);
    }
    const double tau = uniform01(rng);
    const auto out = andmask_aggregate(g, tau);
    for (std::size_t i = 0; i < dim; ++i) {
      double sum = 0.0;
      for (const auto& row : g) sum += row[i];
      const auto mean = static_cast<float>(sum / static_cast<double>(envs));
      CHECK((out[i] == 0.0f || out[i] == mean));
    }
  }
}

TEST_CASE("AlgorithmConfig validation") {
  AlgorithmConfig c;
  c.validate();
  c.name = "dann";
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("valid: erm"), ConfigError);
  c = {};
  c.tau = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lambda = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.alpha = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("train_algorithm: lambda = 0 reproduces ERM exactly; runs are deterministic") {
  const auto ds = small_rotated(1);
  const auto sd = split_dataset(ds);
  const auto st = small_settings();
  AlgorithmConfig erm;
  erm.steps = 20;
  erm.batch_size = 8;
  const auto ref = train_algorithm(erm, sd, 0, 4, st);
  for (const char* name : {"irm", "vrex", "coral", "mmd"}) {
    AlgorithmConfig c = erm;
    c.name = name;
    c.lambda = 0.0;
    c.anneal_step = 0;
    const auto r = train_algorithm(c, sd, 0, 4, st);
    CAPTURE(name);
    CHECK(r.final_checkpoint.parameters == ref.final_checkpoint.parameters);
    CHECK(r.test_accuracy == ref.test_accuracy);
  }
  for (const auto& name : algorithm_names()) {
    AlgorithmConfig c = erm;
    c.name = name;
    c.anneal_step = 5;
    const auto a = train_algorithm(c, sd, 1, 4, st);
    const auto b = train_algorithm(c, sd, 1, 4, st);
    CAPTURE(name);
    CHECK(a.final_checkpoint.parameters == b.final_checkpoint.parameters);
    CHECK(a.final_checkpoint.buffers == b.final_checkpoint.buffers);
    CHECK(a.metrics.size() == b.metrics.size());
    CHECK(a.final_checkpoint.meta.step == 20);
  }
}

TEST_CASE("train_algorithm: metrics, checkpoints and failures") {
  const auto ds = small_rotated(2);
  const auto sd = split_dataset(ds);
  auto st = small_settings();
  AlgorithmConfig c;
  c.steps = 25;
  c.batch_size = 8;
  std::vector<std::int64_t> ckpt_steps;
  std::size_t streamed = 0;
  TrainCallbacks cb;
  cb.on_checkpoint = [&](const features::Checkpoint& k) { ckpt_steps.push_back(k.meta.step); };
  cb.on_metric = [&](const MetricRecord&) { ++streamed; };
  const auto r = train_algorithm(c, sd, 2, 0, st, cb);
  CHECK(ckpt_steps == std::vector<std::int64_t>{10, 20, 25});
  CHECK(streamed == r.metrics.size());
  CHECK(r.metrics.size() == 3 * 6);
  for (const auto& m : r.metrics) {
    CHECK(m.test_env == 2);
    CHECK(m.dataset == ds.name);
  }
  const auto j = to_json(r.metrics.front());
  CHECK(j.at("split") == "in");
  CHECK(j.at("metric") == "acc");
  CHECK(j.at("step") == 10);

  CHECK_THROWS_AS(train_algorithm(c, sd, 3, 0, st), ProtocolError);

  try {
    AlgorithmConfig wild = c;
    wild.lr = 1e30;
    train_algorithm(wild, sd, 0, 0, st);
    FAIL("expected TrainingFailure");
  } catch (const TrainingFailure& e) {
    CHECK(e.step() >= 1);
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
  }
}

TEST_CASE("property: ERM objective descends over the first 100 steps") {
  const auto ds = small_rotated(3, 100);
  const auto sd = split_dataset(ds);
  auto st = small_settings();
  st.eval_interval = 1000;
  st.checkpoint_every = 1000;
  st.featurizer = features::FeaturizerSpec::mini_cnn({1, 28, 28}, 10, {4, 8, 8, 8});
  // Mean objective over the first and last 10 steps, averaged over 3 seeds.
  double first = 0.0, last = 0.0;
  for (std::uint64_t seed : {0, 1, 2}) {
    AlgorithmConfig c;
    c.steps = 100;
    c.batch_size = 16;
    c.lr = 3e-3;
    std::vector<double> objective;
    TrainCallbacks cb;
    cb.on_step = [&](std::int64_t, double v) { objective.push_back(v); };
    train_algorithm(c, sd, 0, seed, st, cb);
    REQUIRE(objective.size() == 100);
    for (int i = 0; i < 10; ++i) {
      first += objective[i] / 30;
      last += objective[90 + i] / 30;
    }
  }
  CHECK(last < first - 0.05);
}
