#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "oodprobe/features/checkpoint.hpp"
#include "oodprobe/util/rng.hpp"

using namespace oodprobe;
using namespace oodprobe::features;
using nn::Shape;
using nn::TensorF;
namespace fs = std::filesystem;

namespace {

TensorF random_batch(Shape shape, std::uint64_t seed) {
  TensorF t(std::move(shape));
  std::mt19937_64 rng(seed);
  for (auto& v : t.data) v = static_cast<float>(uniform01(rng));
  return t;
}

fs::path temp_dir() {
  auto dir = fs::temp_directory_path() / ("oodprobe_feat_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

std::vector<Shape> tap_shapes(const Model<float>& m) {
  std::vector<Shape> out;
  for (const auto& t : m.taps()) out.push_back(t.shape);
  return out;
}

}  // namespace

TEST_CASE("mini_cnn: canonical tap shapes on 1x28x28 input") {
  Model<float> m(FeaturizerSpec::mini_cnn({1, 28, 28}, 10), 1);
  const std::vector<Shape> want{{64, 28, 28}, {128, 14, 14}, {128, 14, 14}, {128, 14, 14}, {128}};
  CHECK(tap_shapes(m) == want);
  CHECK(m.taps()[1].width() == 25088);
  const auto out = m.forward_with_taps(random_batch({2, 1, 28, 28}, 3));
  REQUIRE(out.taps.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    Shape observed(out.taps[i].shape.begin() + 1, out.taps[i].shape.end());
    CHECK(observed == want[i]);
  }
  CHECK(out.logits.shape == Shape{2, 10});
}

TEST_CASE("mini_resnet: 4 blocks on 2x28x28 input") {
  Model<float> m(FeaturizerSpec::mini_resnet({2, 28, 28}, 2), 1);
  const std::vector<Shape> want{{32, 28, 28}, {32, 28, 28}, {64, 14, 14}, {64, 14, 14}, {128, 7, 7}, {128}};
  CHECK(tap_shapes(m) == want);
  CHECK(m.taps().size() == 6);
  const auto out = m.forward_with_taps(random_batch({3, 2, 28, 28}, 4));
  CHECK(out.taps.size() == 6);
  CHECK(out.taps.back().shape == Shape{3, 128});
}

TEST_CASE("build: same seed gives identical parameters; invalid plans are rejected") {
  const auto spec = FeaturizerSpec::mini_cnn({1, 12, 12}, 5, {4, 6, 6, 8});
  Model<float> a(spec, 9), b(spec, 9), c(spec, 10);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value.data == pb[i]->value.data);
    differs |= pa[i]->value.data != pc[i]->value.data;
  }
  CHECK(differs);

  CHECK_THROWS_AS(Model<float>(FeaturizerSpec::mini_cnn({1, 12, 12}, 5, {4, 6, 6}), 0), SpecError);
  CHECK_THROWS_AS(Model<float>(FeaturizerSpec::mini_cnn({1, 12, 12}, 5, {4, 0, 6, 6}), 0), SpecError);
  auto bad = FeaturizerSpec::mini_resnet({1, 12, 12}, 5, {4, 4, 4});
  bad.blocks = 4;
  CHECK_THROWS_AS(Model<float>(bad, 0), SpecError);
  CHECK_THROWS_AS(family_from_string("vgg"), SpecError);
}

TEST_CASE("forward_with_taps: determinism and wiring") {
  for (auto spec : {FeaturizerSpec::mini_cnn({1, 10, 10}, 4, {3, 5, 5, 6}),
                    FeaturizerSpec::mini_resnet({2, 10, 10}, 3, {4, 4, 6, 6, 8})}) {
    Model<float> m(spec, 2);
    // One train-mode pass so batch-norm running statistics are non-trivial.
    m.forward(random_batch({4, spec.input_shape[0], 10, 10}, 1), nn::Mode::train);
    const TensorF x = random_batch({3, spec.input_shape[0], 10, 10}, 5);
    auto first = m.forward_with_taps(x), second = m.forward_with_taps(x);
    CHECK(first.logits.data == second.logits.data);
    for (std::size_t i = 0; i < first.taps.size(); ++i) CHECK(first.taps[i].data == second.taps[i].data);
    CHECK(first.taps.size() == m.taps().size());

    // The final tap is exactly what the classifier sees.
    CHECK(m.classify(first.taps.back(), nn::Mode::eval).data == first.logits.data);
    CHECK(m.forward(x, nn::Mode::eval).data == first.logits.data);

    // Stored tap copies are detached: editing them leaves the logits alone.
    for (auto& t : first.taps) t.fill(7.0f);
    CHECK(m.forward_with_taps(x).logits.data == second.logits.data);

    for (std::size_t i = 0; i < m.taps().size(); ++i) {
      CHECK(m.tap(x, i).data == second.taps[i].data);
    }
    CHECK_THROWS_AS(m.forward_with_taps(random_batch({1, spec.input_shape[0], 9, 10}, 1)), DimensionError);
  }
}

TEST_CASE("property: reported tap shapes equal observed shapes") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 1 + rng() % 3, h = 5 + rng() % 12, w = 5 + rng() % 12;
    FeaturizerSpec spec;
    if (trial % 2 == 0) {
      spec = FeaturizerSpec::mini_cnn({c, h, w}, 2 + rng() % 4,
                                      {1 + rng() % 4, 1 + rng() % 4, 1 + rng() % 4, 1 + rng() % 4});
    } else {
      std::vector<std::size_t> ch(2 + rng() % 4);
      for (auto& x : ch) x = 1 + rng() % 4;
      spec = FeaturizerSpec::mini_resnet({c, h, w}, 2 + rng() % 4, ch);
    }
    Model<float> m(spec, static_cast<std::uint64_t>(trial));
    const auto out = m.forward_with_taps(random_batch({2, c, h, w}, trial));
    REQUIRE(out.taps.size() == m.taps().size());
    for (std::size_t i = 0; i < out.taps.size(); ++i) {
      CAPTURE(trial);
      CAPTURE(i);
      CHECK(Shape(out.taps[i].shape.begin() + 1, out.taps[i].shape.end()) == m.taps()[i].shape);
      CHECK(m.taps()[i].index == i);
    }
  }
}

TEST_CASE("flatten_tap") {
  TensorF t(Shape{1, 2, 2, 2}, std::vector<float>{0, 1, 2, 3, 4, 5, 6, 7});
  const auto f = flatten_tap(t);
  CHECK(f.shape == Shape{1, 8});
  CHECK(f.data == std::vector<float>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(flatten_tap(TensorF(Shape{3, 128, 14, 14})).shape == Shape{3, 25088});
  const TensorF flat(Shape{2, 128}, 0.5f);
  CHECK(flatten_tap(flat).shape == flat.shape);
  CHECK(flatten_tap(flat).data == flat.data);
  CHECK_THROWS_AS(flatten_tap(TensorF(Shape{2, 3, 4})), DimensionError);
}

TEST_CASE("checkpoint: round trip gives bit-identical logits") {
  const auto dir = temp_dir();
  for (auto spec : {FeaturizerSpec::mini_cnn({1, 12, 12}, 10, {4, 6, 6, 8}),
                    FeaturizerSpec::mini_resnet({2, 12, 12}, 2, {4, 4, 6, 6, 8})}) {
    Model<float> m(spec, 3);
    m.forward(random_batch({4, spec.input_shape[0], 12, 12}, 2), nn::Mode::train);
    const TrainingMetadata meta{"irm", "rotated_digits", 2, 5, 1500};
    const auto path = dir / (to_string(spec.family) + ".ckpt");
    save_checkpoint(path, capture(m, meta));
    const Checkpoint back = load_checkpoint(path);
    CHECK(back.meta == meta);
    CHECK(back.spec == spec);
    CHECK(featurizer_checksum(back) == featurizer_checksum(m));
    Model<float> copy = instantiate(back);
    const TensorF x = random_batch({5, spec.input_shape[0], 12, 12}, 8);
    CHECK(copy.forward_with_taps(x).logits.data == m.forward_with_taps(x).logits.data);

    // Saving the reloaded checkpoint reproduces the file byte for byte.
    const auto path2 = dir / (to_string(spec.family) + "2.ckpt");
    save_checkpoint(path2, back);
    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
  }
}

TEST_CASE("checkpoint: classifier weights do not enter the featurizer checksum") {
  Model<float> m(FeaturizerSpec::mini_cnn({1, 8, 8}, 3, {2, 2, 2, 2}), 1);
  const auto before = featurizer_checksum(m);
  for (auto* p : m.classifier_parameters()) p->value.fill(0.25f);
  CHECK(featurizer_checksum(m) == before);
  m.featurizer_parameters().front()->value.data[0] += 1.0f;
  CHECK(featurizer_checksum(m) != before);
}

TEST_CASE("checkpoint: corruption and mismatch errors") {
  const auto dir = temp_dir();
  Model<float> m(FeaturizerSpec::mini_cnn({1, 8, 8}, 3, {2, 2, 2, 2}), 1);
  const auto path = dir / "c.ckpt";
  save_checkpoint(path, capture(m, {"erm", "d", 0, 0, 10}));

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary | std::ios::trunc);
    out << b;
  };

  std::string flipped = bytes;
  flipped[flipped.size() - 200] ^= 0x40;  // inside the featurizer blob
  write(flipped);
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), IntegrityError);

  write(bytes.substr(0, bytes.size() - 4));
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), CheckpointError);

  std::string tag = bytes;
  tag.replace(tag.find("oodprobe-ckpt-v1"), 16, "oodprobe-ckpt-v9");
  write(tag);
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "bad.ckpt"), doctest::Contains("format"), CheckpointError);

  Model<float> other(FeaturizerSpec::mini_cnn({1, 8, 8}, 3, {2, 2, 2, 4}), 1);
  CHECK_THROWS_AS(restore(other, load_checkpoint(path)), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), CheckpointError);
}
