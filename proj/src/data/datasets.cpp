#include "oodprobe/data/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "oodprobe/util/rng.hpp"

namespace oodprobe::data {

using nn::Shape;
using nn::TensorF;

void LabeledImages::validate() const {
  if (images.rank() != 4) throw DimensionError("images must be N×C×H×W, got " + nn::shape_to_string(images.shape));
  if (labels.empty() || images.dim(0) != labels.size()) {
    throw DimensionError("image count " + std::to_string(images.dim(0)) + " does not match " +
                         std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw LabelError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                       " outside [0," + std::to_string(num_classes) + ")");
    }
  }
  for (float v : images.data) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DomainError("pixel value outside [0,1]");
  }
}

LabeledImages select(const LabeledImages& src, std::span<const std::size_t> indices) {
  LabeledImages out;
  out.images = nn::gather_rows(src.images, indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(src.labels.at(i));
  out.num_classes = src.num_classes;
  return out;
}

LabeledImages concat(std::span<const LabeledImages> parts) {
  if (parts.empty()) throw DimensionError("concat of zero collections");
  std::vector<TensorF> tensors;
  LabeledImages out;
  out.num_classes = parts.front().num_classes;
  for (const auto& p : parts) {
    tensors.push_back(p.images);
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.num_classes = std::max(out.num_classes, p.num_classes);
  }
  out.images = nn::concat_rows(std::span<const TensorF>(tensors));
  return out;
}

void EnvironmentDataset::validate() const {
  if (environments.empty()) throw DimensionError("dataset has no environments");
  if (env_params.size() != environments.size()) {
    throw ConsistencyError("env_params length " + std::to_string(env_params.size()) + " != environment count " +
                           std::to_string(environments.size()));
  }
  const auto& first = environments.front();
  for (const auto& e : environments) {
    e.validate();
    if (e.images.dim(1) != first.images.dim(1) || e.images.dim(2) != first.images.dim(2) ||
        e.images.dim(3) != first.images.dim(3) || e.num_classes != first.num_classes) {
      throw ConsistencyError("environments disagree on image shape or class count");
    }
  }
}

// ---- IDX ---------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& path) {
  if (b.size() < off + 4) throw LengthError(path.string() + ": truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

std::string hex32(std::uint32_t v) {
  std::ostringstream s;
  s << "0x" << std::hex;
  s.width(8);
  s.fill('0');
  s << v;
  return s.str();
}

void expect_magic(std::uint32_t got, std::uint32_t want, const std::filesystem::path& path) {
  if (got != want) {
    throw FormatError(path.string() + ": bad magic " + hex32(got) + ", expected " + hex32(want));
  }
}

}  // namespace

LabeledImages load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto ib = read_file(images_path);
  const auto lb = read_file(labels_path);
  expect_magic(be32(ib, 0, images_path), 0x00000803u, images_path);
  expect_magic(be32(lb, 0, labels_path), 0x00000801u, labels_path);
  const std::size_t n = be32(ib, 4, images_path), h = be32(ib, 8, images_path), w = be32(ib, 12, images_path);
  const std::size_t nl = be32(lb, 4, labels_path);
  if (n == 0 || h == 0 || w == 0) throw FormatError(images_path.string() + ": zero dimension in header");
  if (ib.size() < 16 + n * h * w) {
    throw LengthError(images_path.string() + ": payload has " + std::to_string(ib.size() - 16) + " bytes, expected " +
                      std::to_string(n * h * w));
  }
  if (lb.size() < 8 + nl) {
    throw LengthError(labels_path.string() + ": payload has " + std::to_string(lb.size() - 8) + " bytes, expected " +
                      std::to_string(nl));
  }
  if (n != nl) {
    throw ConsistencyError("image file holds " + std::to_string(n) + " items but label file holds " +
                           std::to_string(nl));
  }
  LabeledImages out;
  out.images = TensorF(Shape{n, 1, h, w});
  for (std::size_t i = 0; i < n * h * w; ++i) out.images.data[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  out.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out.labels[i] = lb[8 + i];
    max_label = std::max(max_label, out.labels[i]);
  }
  out.num_classes = max_label + 1;
  return out;
}

// ---- glyphs ----------------------------------------------------------------------

namespace {

struct Pt {
  double x, y;
};
using Stroke = std::vector<Pt>;

Stroke arc(double cx, double cy, double rx, double ry, double deg0, double deg1, int segments = 16) {
  Stroke s;
  for (int i = 0; i <= segments; ++i) {
    const double a = (deg0 + (deg1 - deg0) * i / segments) * std::numbers::pi / 180.0;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return s;
}

// Unit-box glyph outlines, x right and y down, roughly within [-0.6,0.6]×[-0.8,0.8].
// Angles for arc() are measured with y down, so 90° points to the bottom.
const std::array<std::vector<Stroke>, 10>& glyph_table() {
  static const std::array<std::vector<Stroke>, 10> table = [] {
    std::array<std::vector<Stroke>, 10> t;
    t[0] = {arc(0, 0, 0.5, 0.78, 0, 360, 28)};
    t[1] = {{{-0.25, -0.55}, {0.05, -0.8}, {0.05, 0.8}}, {{-0.25, 0.8}, {0.35, 0.8}}};
    t[2] = {arc(0, -0.35, 0.45, 0.42, 180, 380), {{0.42, -0.2}, {-0.5, 0.8}, {0.5, 0.8}}};
    t[3] = {arc(0, -0.4, 0.42, 0.38, 200, 450), arc(0, 0.38, 0.48, 0.42, 270, 520)};
    t[4] = {{{0.25, 0.8}, {0.25, -0.8}, {-0.5, 0.3}, {0.55, 0.3}}};
    t[5] = {{{0.45, -0.8}, {-0.4, -0.8}, {-0.45, -0.1}}, arc(0, 0.3, 0.48, 0.45, 230, 500)};
    t[6] = {{{0.35, -0.8}, {-0.35, 0.05}}, arc(0, 0.38, 0.45, 0.42, 0, 360, 24)};
    t[7] = {{{-0.5, -0.8}, {0.5, -0.8}, {-0.1, 0.8}}};
    t[8] = {arc(0, -0.42, 0.36, 0.36, 0, 360, 22), arc(0, 0.38, 0.46, 0.42, 0, 360, 24)};
    t[9] = {arc(0, -0.35, 0.45, 0.42, 0, 360, 24), {{0.45, -0.35}, {0.3, 0.8}}};
    return t;
  }();
  return table;
}

double segment_distance(double px, double py, Pt a, Pt b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - a.x) * vx + (py - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

void render_glyph(int cls, std::mt19937_64& rng, float* out) {
  constexpr int kSize = 28;
  constexpr double kHalf = 9.0;  // glyph half-height in pixels before jitter
  constexpr double kTilt = 15.0;  // max per-sample tilt in degrees
  const double tx = uniform(rng, -2.0, 2.0), ty = uniform(rng, -2.0, 2.0);
  const double thickness = uniform(rng, 0.8, 1.5);
  const double sx = kHalf * uniform(rng, 0.85, 1.1), sy = kHalf * uniform(rng, 0.85, 1.1);
  const double shear = uniform(rng, -0.2, 0.2);
  const double tilt = uniform(rng, -kTilt, kTilt) * std::numbers::pi / 180.0;
  const double ct = std::cos(tilt), st = std::sin(tilt);
  const double cx = (kSize - 1) / 2.0 + tx, cy = (kSize - 1) / 2.0 + ty;

  std::vector<std::pair<Pt, Pt>> segments;
  for (const auto& stroke : glyph_table()[cls]) {
    for (std::size_t i = 0; i + 1 < stroke.size(); ++i) {
      auto map = [&](Pt p) {
        const double x = sx * (p.x + shear * p.y), y = sy * p.y;
        return Pt{cx + ct * x - st * y, cy + st * x + ct * y};
      };
      segments.emplace_back(map(stroke[i]), map(stroke[i + 1]));
    }
  }
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      double d = 1e9;
      for (const auto& [a, b] : segments) d = std::min(d, segment_distance(x, y, a, b));
      out[y * kSize + x] = static_cast<float>(std::clamp((thickness + 1.0 - d) / 1.5, 0.0, 1.0));
    }
  }
}

}  // namespace

LabeledImages synth_glyphs(std::uint64_t seed, std::size_t n_per_class) {
  if (n_per_class == 0) throw DomainError("synth_glyphs: n_per_class must be >= 1");
  const std::size_t n = 10 * n_per_class;
  LabeledImages out;
  out.images = TensorF(Shape{n, 1, 28, 28});
  out.labels.resize(n);
  out.num_classes = 10;
  std::mt19937_64 rng(derive_seed(seed, {0x9171}));
  // Interleave classes so any prefix is close to balanced.
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 10);
    out.labels[i] = cls;
    render_glyph(cls, rng, out.images.data.data() + i * 28 * 28);
  }
  return out;
}

// ---- rotation ----------------------------------------------------------------------

TensorF rotate_images(const TensorF& images, double degrees) {
  if (images.rank() != 4) throw DimensionError("rotate_images expects N×C×H×W");
  if (degrees == 0.0) return images;
  const std::size_t planes = images.dim(0) * images.dim(1), h = images.dim(2), w = images.dim(3);
  const double a = degrees * std::numbers::pi / 180.0, c = std::cos(a), s = std::sin(a);
  const double cx = (static_cast<double>(w) - 1) / 2.0, cy = (static_cast<double>(h) - 1) / 2.0;

  // Source coordinates are shared by every plane.
  struct Tap {
    long x0, y0;
    double fx, fy;
  };
  std::vector<Tap> taps(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double srcx = cx + dx * c - dy * s, srcy = cy + dx * s + dy * c;
      const double fx0 = std::floor(srcx), fy0 = std::floor(srcy);
      taps[y * w + x] = {static_cast<long>(fx0), static_cast<long>(fy0), srcx - fx0, srcy - fy0};
    }
  }
  TensorF out(images.shape);
  const long lw = static_cast<long>(w), lh = static_cast<long>(h);
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = images.data.data() + p * h * w;
    float* dst = out.data.data() + p * h * w;
    auto px = [&](long x, long y) -> double { return (x < 0 || y < 0 || x >= lw || y >= lh) ? 0.0 : src[y * lw + x]; };
    for (std::size_t i = 0; i < h * w; ++i) {
      const Tap& t = taps[i];
      const double v = (1 - t.fx) * (1 - t.fy) * px(t.x0, t.y0) + t.fx * (1 - t.fy) * px(t.x0 + 1, t.y0) +
                       (1 - t.fx) * t.fy * px(t.x0, t.y0 + 1) + t.fx * t.fy * px(t.x0 + 1, t.y0 + 1);
      dst[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

namespace {

// Base indices for each environment: disjoint chunks of one permutation when the
// pool allows it, otherwise an independent permutation per environment.
std::vector<std::vector<std::size_t>> sample_envs(std::size_t pool, std::size_t envs, std::size_t per_env_n,
                                                  std::uint64_t seed) {
  if (per_env_n == 0) throw SamplingError("per_env_n must be >= 1");
  if (per_env_n > pool) {
    throw SamplingError("per_env_n " + std::to_string(per_env_n) + " exceeds the " + std::to_string(pool) +
                        " available base images");
  }
  std::vector<std::vector<std::size_t>> out(envs);
  if (per_env_n * envs <= pool) {
    std::mt19937_64 rng(derive_seed(seed, {0x5a11}));
    const auto perm = permutation(pool, rng);
    for (std::size_t e = 0; e < envs; ++e) out[e].assign(perm.begin() + e * per_env_n, perm.begin() + (e + 1) * per_env_n);
  } else {
    for (std::size_t e = 0; e < envs; ++e) {
      std::mt19937_64 rng(derive_seed(seed, {0x5a12, e}));
      auto perm = permutation(pool, rng);
      perm.resize(per_env_n);
      out[e] = std::move(perm);
    }
  }
  return out;
}

}  // namespace

EnvironmentDataset build_rotated(const LabeledImages& base, std::span<const double> angles, std::size_t per_env_n,
                                 std::uint64_t seed) {
  if (angles.empty()) throw DomainError("build_rotated: angle list is empty");
  const auto picks = sample_envs(base.size(), angles.size(), per_env_n, seed);
  EnvironmentDataset ds;
  ds.name = "rotated_digits";
  ds.family = EnvFamily::rotated;
  ds.seed = seed;
  ds.env_params.assign(angles.begin(), angles.end());
  for (std::size_t e = 0; e < angles.size(); ++e) {
    LabeledImages env = select(base, picks[e]);
    env.images = rotate_images(env.images, angles[e]);
    ds.environments.push_back(std::move(env));
  }
  return ds;
}

EnvironmentDataset build_colored(const LabeledImages& base, std::span<const double> correlations, double label_noise,
                                 std::size_t per_env_n, std::uint64_t seed) {
  if (correlations.empty()) throw DomainError("build_colored: correlation list is empty");
  for (double p : correlations) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("build_colored: correlation " + std::to_string(p) + " outside [0,1]");
  }
  if (!(label_noise >= 0.0 && label_noise <= 0.5)) {
    throw DomainError("build_colored: label_noise " + std::to_string(label_noise) + " outside [0,0.5]");
  }
  if (base.images.dim(1) != 1) throw DimensionError("build_colored expects single-channel base images");
  const auto picks = sample_envs(base.size(), correlations.size(), per_env_n, seed);
  const std::size_t h = base.height(), w = base.width(), plane = h * w;

  EnvironmentDataset ds;
  ds.name = "colored_digits";
  ds.family = EnvFamily::colored;
  ds.seed = seed;
  ds.env_params.assign(correlations.begin(), correlations.end());
  for (std::size_t e = 0; e < correlations.size(); ++e) {
    std::mt19937_64 rng(derive_seed(seed, {0xc010, e}));
    LabeledImages env;
    env.num_classes = 2;
    env.images = TensorF(Shape{per_env_n, 2, h, w});
    env.labels.resize(per_env_n);
    for (std::size_t i = 0; i < per_env_n; ++i) {
      const std::size_t src = picks[e][i];
      int y = base.labels[src] < 5 ? 0 : 1;
      if (bernoulli(rng, label_noise)) y ^= 1;
      int color = y;
      if (bernoulli(rng, 1.0 - correlations[e])) color ^= 1;
      env.labels[i] = y;
      std::copy_n(base.images.data.begin() + src * plane, plane,
                  env.images.data.begin() + (i * 2 + static_cast<std::size_t>(color)) * plane);
    }
    ds.environments.push_back(std::move(env));
  }
  return ds;
}

SplitPair split_in_out(const LabeledImages& env, double fraction, std::uint64_t seed) {
  const std::size_t n = env.size();
  if (n < 2) throw SplitError("cannot split " + std::to_string(n) + " item(s)");
  if (!(fraction > 0.0 && fraction < 1.0)) throw SplitError("split fraction must lie in (0,1)");
  const auto n_out = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  if (n_out == 0 || n_out >= n) {
    throw SplitError("fraction " + std::to_string(fraction) + " leaves an empty side for N=" + std::to_string(n));
  }
  std::mt19937_64 rng(derive_seed(seed, {0x5b17}));
  const auto perm = permutation(n, rng);
  SplitPair sp;
  sp.in_indices.assign(perm.begin(), perm.end() - static_cast<long>(n_out));
  sp.out_indices.assign(perm.end() - static_cast<long>(n_out), perm.end());
  sp.in_split = select(env, sp.in_indices);
  sp.out_split = select(env, sp.out_indices);
  return sp;
}

}  // namespace oodprobe::data
