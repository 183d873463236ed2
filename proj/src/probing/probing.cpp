#include "oodprobe/probing/probing.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "oodprobe/nn/optim.hpp"
#include "oodprobe/util/pool.hpp"
#include "oodprobe/util/rng.hpp"

namespace oodprobe::probing {

using nn::TensorF;
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void ProbeSettings::validate() const {
  if (!(lr > 0.0)) throw ConfigError("probe lr must be positive");
  if (batch_size == 0) throw ConfigError("probe batch_size must be positive");
  if (budget <= 0) throw ConfigError("probe budget must be positive");
  if (eval_interval <= 0) throw ConfigError("probe eval_interval must be positive");
  if (patience <= 0) throw ConfigError("probe patience must be positive");
  if (chunk == 0) throw ConfigError("probe chunk must be positive");
}

std::vector<nlohmann::json> to_json_rows(const ProbeResult& r) {
  auto base = [&](const char* metric) {
    return nlohmann::json{{"algorithm", r.algorithm}, {"dataset", r.dataset}, {"test_env", r.test_env},
                          {"seed", r.seed},           {"split", "out"},       {"metric", metric},
                          {"tap_index", r.tap_index}, {"control", r.control}};
  };
  std::vector<nlohmann::json> rows;
  for (const auto& p : r.curve) {
    auto j = base("probe_val_curve");
    j["step"] = p.step;
    j["value"] = p.accuracy;
    rows.push_back(std::move(j));
  }
  auto j = base("probe_acc");
  j["step"] = r.curve.empty() ? 0 : r.curve.back().step;
  j["value"] = r.accuracy;
  j["samples_used"] = r.samples_used;
  rows.push_back(std::move(j));
  return rows;
}

namespace {

features::Model<float> frozen_model(const features::Checkpoint& checkpoint) {
  try {
    return features::instantiate(checkpoint);
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint does not describe a valid featurizer: ") + e.what());
  }
}

std::vector<std::size_t> held_in_envs(const algorithms::SplitDataset& data, int test_env) {
  if (!data.source) throw StateError("split dataset has no source");
  const auto n = static_cast<int>(data.splits.size());
  if (test_env < 0 || test_env >= n) {
    throw ProtocolError("test_env " + std::to_string(test_env) + " outside [0," + std::to_string(n) + ")");
  }
  std::vector<std::size_t> envs;
  for (int e = 0; e < n; ++e) {
    if (e != test_env) envs.push_back(static_cast<std::size_t>(e));
  }
  if (envs.size() < 2) {
    throw ProtocolError("probing needs at least 2 training environments, got " + std::to_string(envs.size()));
  }
  return envs;
}

TensorF extract(features::Model<float>& model, const TensorF& images, std::size_t tap, std::size_t chunk) {
  std::vector<TensorF> parts;
  for (std::size_t b = 0; b < images.dim(0); b += chunk) {
    parts.push_back(model.tap(nn::slice_rows(images, b, std::min(images.dim(0), b + chunk)), tap));
  }
  return nn::concat_rows(std::span<const TensorF>(parts));
}

double accuracy(const TensorF& x, const std::vector<int>& y, const Probe& p) {
  const std::size_t n = x.dim(0), d = p.input_dim, m = p.num_classes;
  RowMat logits = CMap(x.data.data(), n, d) * CMap(p.weight.data.data(), d, m);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < m; ++k) {
      if (logits(i, k) + p.bias.data[k] > logits(i, best) + p.bias.data[best]) best = k;
    }
    correct += static_cast<int>(best) == y[i];
  }
  return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

}  // namespace

std::vector<Probe> attach_probes(const features::Checkpoint& checkpoint, std::size_t num_envs) {
  auto model = frozen_model(checkpoint);
  std::vector<Probe> probes;
  for (const auto& t : model.taps()) {
    Probe p;
    p.tap_index = t.index;
    p.input_dim = t.width();
    p.num_classes = num_envs;
    p.weight = TensorF({p.input_dim, num_envs});
    p.bias = TensorF({num_envs});
    probes.push_back(std::move(p));
  }
  return probes;
}

ProbeData extract_probe_data(features::Model<float>& model, const algorithms::SplitDataset& data, int test_env,
                             std::size_t tap_index, std::size_t chunk) {
  const auto envs = held_in_envs(data, test_env);
  const auto& first = data.splits[envs.front()].in_split;
  const nn::Shape input{first.channels(), first.height(), first.width()};
  if (model.spec().input_shape != input) {
    throw CheckpointError("checkpoint expects input " + nn::shape_to_string(model.spec().input_shape) +
                          ", dataset provides " + nn::shape_to_string(input));
  }
  if (tap_index >= model.taps().size()) {
    throw CheckpointError("tap " + std::to_string(tap_index) + " not present in checkpoint");
  }
  ProbeData out;
  out.num_classes = envs.size();
  std::vector<TensorF> train, val;
  for (std::size_t k = 0; k < envs.size(); ++k) {
    const auto& sp = data.splits[envs[k]];
    train.push_back(extract(model, sp.in_split.images, tap_index, chunk));
    val.push_back(extract(model, sp.out_split.images, tap_index, chunk));
    out.train_y.insert(out.train_y.end(), sp.in_split.size(), static_cast<int>(k));
    out.val_y.insert(out.val_y.end(), sp.out_split.size(), static_cast<int>(k));
  }
  out.train_x = nn::concat_rows(std::span<const TensorF>(train));
  out.val_x = nn::concat_rows(std::span<const TensorF>(val));
  return out;
}

ProbeResult fit_probe(Probe& probe, const ProbeData& data, const ProbeSettings& settings, std::uint64_t seed) {
  settings.validate();
  const std::size_t d = probe.input_dim, m = probe.num_classes;
  if (data.train_x.rank() != 2 || data.train_x.dim(1) != d || data.val_x.rank() != 2 || data.val_x.dim(1) != d) {
    throw CheckpointError("probe input dim " + std::to_string(d) + " does not match tap features " +
                          nn::shape_to_string(data.train_x.shape));
  }
  if (m != data.num_classes) {
    throw ProtocolError("probe has " + std::to_string(m) + " classes, data has " + std::to_string(data.num_classes));
  }
  if (m < 2) throw ProtocolError("probing needs at least 2 environments");
  const std::size_t n = data.train_x.dim(0);
  if (n == 0 || data.val_x.dim(0) == 0) throw ProtocolError("empty probe data");

  std::mt19937_64 rng(derive_seed(seed, {0x9b0e}));
  std::vector<int> train_y = data.train_y, val_y = data.val_y;
  if (settings.shuffle_labels) {
    auto shuffle = [&](std::vector<int>& y) {
      const auto perm = permutation(y.size(), rng);
      std::vector<int> s(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) s[i] = y[perm[i]];
      y = std::move(s);
    };
    shuffle(train_y);
    shuffle(val_y);
  }

  nn::Parameter<float> w("probe.weight", TensorF({d, m}));
  nn::Parameter<float> b("probe.bias", TensorF({m}));
  std::vector<nn::Parameter<float>*> params{&w, &b};
  const nn::Adam adam{settings.lr};

  ProbeResult r;
  r.tap_index = probe.tap_index;
  r.control = settings.shuffle_labels;
  auto sync = [&] {
    probe.weight = w.value;
    probe.bias = b.value;
  };
  sync();
  double best = accuracy(data.val_x, val_y, probe);
  r.curve.push_back({0, best});
  int stale = 0;

  std::vector<std::size_t> order = permutation(n, rng);
  std::size_t cursor = 0;
  const std::size_t batch = std::min(settings.batch_size, n);
  std::int64_t step = 0;
  std::vector<std::size_t> idx(batch);
  std::vector<int> yb(batch);
  while (step < settings.budget) {
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == n) {
        order = permutation(n, rng);
        cursor = 0;
      }
      idx[i] = order[cursor++];
      yb[i] = train_y[idx[i]];
    }
    const TensorF xb = nn::gather_rows(data.train_x, idx);
    TensorF logits({batch, m});
    Map(logits.data.data(), batch, m).noalias() = CMap(xb.data.data(), batch, d) * CMap(w.value.data.data(), d, m);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t k = 0; k < m; ++k) logits.data[i * m + k] += b.value.data[k];
    }
    const auto ce = nn::cross_entropy(logits, yb);
    nn::zero_grad(params);
    Map(w.grad.data.data(), d, m).noalias() = CMap(xb.data.data(), batch, d).transpose() *
                                              CMap(ce.grad.data.data(), batch, m);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t k = 0; k < m; ++k) b.grad.data[k] += ce.grad.data[i * m + k];
    }
    nn::optimizer_step<float>(params, adam);
    ++step;

    if (step % settings.eval_interval == 0 || step == settings.budget) {
      sync();
      const double acc = accuracy(data.val_x, val_y, probe);
      r.curve.push_back({step, acc});
      stale = acc >= best + settings.min_improvement ? 0 : stale + 1;
      best = std::max(best, acc);
      if (stale >= settings.patience) break;
    }
  }
  sync();
  r.accuracy = best;
  r.samples_used = static_cast<std::size_t>(step) * batch;
  return r;
}

ProbeResult train_probe(Probe& probe, const features::Checkpoint& checkpoint, const algorithms::SplitDataset& data,
                        int test_env, const ProbeSettings& settings, std::uint64_t seed) {
  held_in_envs(data, test_env);
  auto model = frozen_model(checkpoint);
  if (probe.tap_index >= model.taps().size() || model.taps()[probe.tap_index].width() != probe.input_dim) {
    throw CheckpointError("probe for tap " + std::to_string(probe.tap_index) + " does not fit this checkpoint");
  }
  const auto pd = extract_probe_data(model, data, test_env, probe.tap_index, settings.chunk);
  auto r = fit_probe(probe, pd, settings, seed);
  r.algorithm = checkpoint.meta.algorithm;
  r.dataset = checkpoint.meta.dataset;
  r.test_env = test_env;
  r.seed = checkpoint.meta.seed;
  return r;
}

double dummy_accuracy(std::size_t num_classes) {
  if (num_classes == 0) throw DomainError("dummy accuracy needs at least one class");
  return 1.0 / static_cast<double>(num_classes);
}

std::uint64_t recommend_probe_samples(double epsilon, double delta, double log_class_size) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw DomainError("epsilon must lie in (0,1)");
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("delta must lie in (0,1)");
  if (!(log_class_size > 0.0)) throw DomainError("log_class_size must be positive");
  const double l = log_class_size + std::log(2.0 / delta);
  const double n = l / (2.0 * epsilon * epsilon);
  // Absorb rounding noise so exact quotients do not round up.
  return static_cast<std::uint64_t>(std::ceil(n * (1.0 - 1e-12)));
}

double probe_log_class_size(std::size_t parameters, double bits) {
  return static_cast<double>(parameters) * bits * std::log(2.0);
}

std::string to_string(const CellKey& k) {
  return k.algorithm + "/env" + std::to_string(k.test_env) + "/seed" + std::to_string(k.seed);
}

std::uint64_t probe_seed(const CellKey& cell, std::size_t tap_index, bool control) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : cell.algorithm) h = (h ^ c) * 0x100000001b3ULL;
  return derive_seed(cell.seed, {h, static_cast<std::uint64_t>(cell.test_env), tap_index, control ? 1u : 0u});
}

SuiteResult run_probing_suite(const std::map<CellKey, features::Checkpoint>& checkpoints,
                              const algorithms::SplitDataset& data, const SuiteRequest& request) {
  request.settings.validate();
  std::vector<CellKey> cells;
  std::string missing;
  for (const auto& a : request.algorithms) {
    for (int e : request.test_envs) {
      for (auto s : request.seeds) {
        CellKey k{a, e, s};
        if (!checkpoints.count(k)) missing += (missing.empty() ? "" : ", ") + to_string(k);
        cells.push_back(std::move(k));
      }
    }
  }
  if (!missing.empty()) throw CoverageError("missing checkpoints: " + missing);
  if (cells.empty()) throw CoverageError("no cells requested");

  std::vector<std::vector<ProbeResult>> per_cell(cells.size());
  parallel_for(cells.size(), request.workers, [&](std::size_t c) {
    const auto& cell = cells[c];
    const auto& ckpt = checkpoints.at(cell);
    auto model = frozen_model(ckpt);
    const auto before = features::featurizer_checksum(model);
    auto probes = attach_probes(ckpt, data.splits.size() - 1);
    for (auto& p : probes) {
      const auto pd = extract_probe_data(model, data, cell.test_env, p.tap_index, request.settings.chunk);
      auto r = fit_probe(p, pd, request.settings, probe_seed(cell, p.tap_index, request.settings.shuffle_labels));
      r.algorithm = cell.algorithm;
      r.dataset = ckpt.meta.dataset;
      r.test_env = cell.test_env;
      r.seed = cell.seed;
      per_cell[c].push_back(std::move(r));
    }
    if (features::featurizer_checksum(model) != before || features::featurizer_checksum(ckpt) != before) {
      throw IntegrityError("featurizer changed while probing " + to_string(cell));
    }
  });

  SuiteResult out;
  out.num_classes = data.splits.size() - 1;
  std::map<std::string, std::vector<std::size_t>> counts;
  for (auto& rs : per_cell) {
    for (auto& r : rs) {
      auto& g = out.grid[r.algorithm];
      auto& n = counts[r.algorithm];
      if (g.size() <= r.tap_index) {
        g.resize(r.tap_index + 1, 0.0);
        n.resize(r.tap_index + 1, 0);
      }
      g[r.tap_index] += r.accuracy;
      ++n[r.tap_index];
      out.raw.push_back(std::move(r));
    }
  }
  for (auto& [a, g] : out.grid) {
    for (std::size_t t = 0; t < g.size(); ++t) g[t] /= static_cast<double>(counts[a][t]);
  }
  return out;
}

}  // namespace oodprobe::probing
