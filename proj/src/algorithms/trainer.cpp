#include "oodprobe/algorithms/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "oodprobe/algorithms/penalties.hpp"
#include "oodprobe/nn/optim.hpp"
#include "oodprobe/util/rng.hpp"

namespace oodprobe::algorithms {

using features::Model;
using nn::Mode;
using nn::TensorF;

const std::vector<std::string>& algorithm_names() {
  static const std::vector<std::string> names{"erm", "irm", "vrex", "groupdro", "coral", "mmd", "mixup", "andmask"};
  return names;
}

bool is_algorithm(const std::string& name) {
  const auto& n = algorithm_names();
  return std::find(n.begin(), n.end(), name) != n.end();
}

void AlgorithmConfig::validate() const {
  if (!is_algorithm(name)) {
    std::string valid;
    for (const auto& n : algorithm_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown algorithm '" + name + "' (valid: " + valid + ")");
  }
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (steps <= 0) throw ConfigError("steps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (anneal_step < 0) throw ConfigError("anneal_step must be >= 0");
  if (!(eta >= 0.0)) throw ConfigError("eta must be >= 0");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0,1]");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
}

nlohmann::json to_json(const MetricRecord& r) {
  return {{"algorithm", r.algorithm}, {"dataset", r.dataset}, {"test_env", r.test_env}, {"seed", r.seed},
          {"step", r.step},           {"split", r.split},     {"metric", r.metric},     {"value", r.value}};
}

SplitDataset split_dataset(const data::EnvironmentDataset& dataset) {
  dataset.validate();
  SplitDataset s;
  s.source = &dataset;
  for (std::size_t e = 0; e < dataset.num_envs(); ++e) {
    s.splits.push_back(data::split_in_out(dataset.environments[e], dataset.split_fraction,
                                          derive_seed(dataset.seed, {0x5b1, e})));
  }
  return s;
}

namespace {

// Epoch-shuffled minibatch cursor over one environment's in-split.
class EnvSampler {
 public:
  EnvSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t b) {
    std::vector<std::size_t> out;
    out.reserve(b);
    while (out.size() < b) {
      if (cursor_ == n_) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_ = permutation(n_, rng_);
    cursor_ = 0;
  }
  std::size_t n_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct EvalSet {
  TensorF images;
  std::vector<int> labels;
};

EvalSet make_eval_set(const std::vector<const data::LabeledImages*>& parts, std::size_t limit) {
  EvalSet s;
  std::vector<TensorF> imgs;
  for (const auto* p : parts) {
    const std::size_t n = std::min(limit, p->size());
    imgs.push_back(nn::slice_rows(p->images, 0, n));
    s.labels.insert(s.labels.end(), p->labels.begin(), p->labels.begin() + static_cast<long>(n));
  }
  s.images = nn::concat_rows(std::span<const TensorF>(imgs));
  return s;
}

std::pair<double, double> evaluate(Model<float>& model, const EvalSet& set, std::size_t chunk) {
  double loss = 0.0;
  std::size_t correct = 0;
  const std::size_t n = set.labels.size();
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t e = std::min(n, b + chunk);
    const TensorF logits = model.forward(nn::slice_rows(set.images, b, e), Mode::eval);
    const std::span<const int> labels(set.labels.data() + b, e - b);
    loss += nn::cross_entropy(logits, labels).value * static_cast<double>(e - b);
    const auto pred = nn::argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  }
  return {static_cast<double>(correct) / static_cast<double>(n), loss / static_cast<double>(n)};
}

std::vector<TensorF> split_rows(const TensorF& t, std::size_t parts) {
  std::vector<TensorF> out;
  const std::size_t per = t.dim(0) / parts;
  for (std::size_t p = 0; p < parts; ++p) out.push_back(nn::slice_rows(t, p * per, (p + 1) * per));
  return out;
}

TensorF join_rows(const std::vector<TensorF>& parts) { return nn::concat_rows(std::span<const TensorF>(parts)); }

void add_scaled(std::vector<TensorF>& dst, const std::vector<TensorF>& src, double w) {
  for (std::size_t e = 0; e < dst.size(); ++e) {
    for (std::size_t i = 0; i < dst[e].numel(); ++i) dst[e].data[i] += static_cast<float>(w * src[e].data[i]);
  }
}

void scale(TensorF& t, double w) {
  for (auto& v : t.data) v = static_cast<float>(v * w);
}

bool needs_two_envs(const std::string& name) { return name != "erm" && name != "irm" && name != "groupdro"; }

}  // namespace

double evaluate_accuracy(Model<float>& model, const data::LabeledImages& images, std::size_t chunk) {
  EvalSet s{images.images, images.labels};
  return evaluate(model, s, chunk).first;
}

TrainResult train_algorithm(const AlgorithmConfig& config, const SplitDataset& data, int test_env, std::uint64_t seed,
                            const TrainSettings& settings, const TrainCallbacks& callbacks) {
  config.validate();
  if (!data.source) throw StateError("split dataset has no source");
  const auto& ds = *data.source;
  const auto n_envs = static_cast<int>(ds.num_envs());
  if (test_env < 0 || test_env >= n_envs) {
    throw ProtocolError("test_env " + std::to_string(test_env) + " outside [0," + std::to_string(n_envs) + ")");
  }
  std::vector<std::size_t> train_envs;
  for (int e = 0; e < n_envs; ++e) {
    if (e != test_env) train_envs.push_back(static_cast<std::size_t>(e));
  }
  const std::size_t m = train_envs.size();
  if (m == 0) throw ProtocolError("no training environments remain");
  if (m < 2 && needs_two_envs(config.name)) {
    throw ConfigError(config.name + " needs at least 2 training environments");
  }
  const auto& first = ds.environments.front();
  const nn::Shape input{first.channels(), first.height(), first.width()};
  if (settings.featurizer.input_shape != input ||
      settings.featurizer.num_classes != static_cast<std::size_t>(first.num_classes)) {
    throw SpecError("featurizer expects input " + nn::shape_to_string(settings.featurizer.input_shape) + " and " +
                    std::to_string(settings.featurizer.num_classes) + " classes; dataset has " +
                    nn::shape_to_string(input) + " and " + std::to_string(first.num_classes));
  }

  const auto run_seed = derive_seed(seed, {static_cast<std::uint64_t>(test_env)});
  Model<float> model(settings.featurizer, derive_seed(run_seed, {1}));
  auto params = model.parameters();
  const nn::Adam adam{config.lr};

  std::size_t batch = config.batch_size;
  std::vector<EnvSampler> samplers;
  for (auto e : train_envs) {
    batch = std::min(batch, data.splits[e].in_split.size());
    samplers.emplace_back(data.splits[e].in_split.size(), derive_seed(run_seed, {2, e}));
  }
  std::mt19937_64 algo_rng(derive_seed(run_seed, {3}));
  std::vector<double> q(m, 1.0 / static_cast<double>(m));
  const double gamma = config.gamma > 0 ? config.gamma : 1.0 / static_cast<double>(settings.featurizer.feature_dim());

  std::vector<const data::LabeledImages*> in_parts, out_parts;
  for (auto e : train_envs) {
    in_parts.push_back(&data.splits[e].in_split);
    out_parts.push_back(&data.splits[e].out_split);
  }
  const EvalSet eval_in = make_eval_set(in_parts, settings.eval_in_limit);
  const EvalSet eval_out = make_eval_set(out_parts, SIZE_MAX);
  const EvalSet eval_test = make_eval_set({&data.splits[static_cast<std::size_t>(test_env)].out_split}, SIZE_MAX);

  TrainResult result;
  features::TrainingMetadata meta{config.name, ds.name, test_env, seed, 0};
  auto emit = [&](std::int64_t step, const char* split, const char* metric, double value) {
    MetricRecord r{config.name, ds.name, test_env, seed, step, split, metric, value};
    if (callbacks.on_metric) callbacks.on_metric(r);
    result.metrics.push_back(std::move(r));
  };

  for (std::int64_t step = 0; step < config.steps; ++step) {
    std::vector<TensorF> xs;
    std::vector<std::vector<int>> ys;
    for (std::size_t k = 0; k < m; ++k) {
      const auto idx = samplers[k].next(batch);
      const auto& src = data.splits[train_envs[k]].in_split;
      xs.push_back(nn::gather_rows(src.images, idx));
      std::vector<int> y;
      for (auto i : idx) y.push_back(src.labels[i]);
      ys.push_back(std::move(y));
    }
    nn::zero_grad(params);
    const double weight = step >= config.anneal_step ? config.lambda : 0.0;
    double objective = 0.0;

    if (config.name == "andmask") {
      std::vector<std::vector<float>> env_grads;
      for (std::size_t k = 0; k < m; ++k) {
        nn::zero_grad(params);
        const auto ce = nn::cross_entropy(model.forward(xs[k], Mode::train), ys[k]);
        objective += ce.value / static_cast<double>(m);
        model.backward_features(model.backward_classifier(ce.grad));
        std::vector<float> flat;
        for (auto* p : params) flat.insert(flat.end(), p->grad.data.begin(), p->grad.data.end());
        env_grads.push_back(std::move(flat));
      }
      const auto masked = andmask_aggregate(env_grads, config.tau);
      std::size_t off = 0;
      for (auto* p : params) {
        std::copy_n(masked.begin() + static_cast<long>(off), p->grad.numel(), p->grad.data.begin());
        off += p->grad.numel();
      }
    } else if (config.name == "mixup") {
      const auto order = permutation(m, algo_rng);
      std::vector<MixedBatch<float>> mixed;
      std::vector<TensorF> imgs;
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t a = order[i], b = order[(i + 1) % m];
        mixed.push_back(mixup_minibatches(xs[a], ys[a], xs[b], ys[b], config.alpha, algo_rng));
        imgs.push_back(mixed.back().images);
      }
      const TensorF logits = model.forward(join_rows(imgs), Mode::train);
      auto parts = split_rows(logits, m);
      std::vector<TensorF> grads;
      for (std::size_t i = 0; i < m; ++i) {
        auto l = mixup_loss(parts[i], mixed[i].labels_a, mixed[i].labels_b, mixed[i].lambda);
        objective += l.value / static_cast<double>(m);
        scale(l.grad, 1.0 / static_cast<double>(m));
        grads.push_back(std::move(l.grad));
      }
      model.backward_features(model.backward_classifier(join_rows(grads)));
    } else {
      const TensorF feats = model.features(join_rows(xs), Mode::train);
      const TensorF logits = model.classify(feats, Mode::train);
      const auto env_logits = split_rows(logits, m);
      std::vector<TensorF> grad_logits;
      std::vector<TensorF> grad_feats;

      if (config.name == "groupdro") {
        std::vector<double> losses;
        std::vector<nn::LossResult<float>> ces;
        for (std::size_t k = 0; k < m; ++k) {
          ces.push_back(nn::cross_entropy(env_logits[k], ys[k]));
          losses.push_back(ces.back().value);
        }
        const auto upd = groupdro_reweight(q, losses, config.eta);
        q = upd.q;
        objective = upd.loss;
        for (std::size_t k = 0; k < m; ++k) {
          scale(ces[k].grad, q[k]);
          grad_logits.push_back(std::move(ces[k].grad));
        }
      } else {
        auto erm = erm_loss<float>(env_logits, ys);
        objective = erm.value;
        grad_logits = std::move(erm.grads);
        if (weight > 0.0) {
          if (config.name == "irm") {
            const auto pen = irm_penalty<float>(env_logits, ys);
            objective += weight * pen.value;
            add_scaled(grad_logits, pen.grads, weight);
          } else if (config.name == "vrex") {
            std::vector<double> risks;
            std::vector<nn::LossResult<float>> ces;
            for (std::size_t k = 0; k < m; ++k) {
              ces.push_back(nn::cross_entropy(env_logits[k], ys[k]));
              risks.push_back(ces.back().value);
            }
            const auto pen = vrex_penalty(risks);
            objective += weight * pen.value;
            for (std::size_t k = 0; k < m; ++k) {
              for (std::size_t i = 0; i < grad_logits[k].numel(); ++i) {
                grad_logits[k].data[i] += static_cast<float>(weight * pen.grad[k] * ces[k].grad.data[i]);
              }
            }
          } else if (config.name == "coral" || config.name == "mmd") {
            const auto env_feats = split_rows(feats, m);
            const auto pen = config.name == "coral" ? coral_penalty<float>(env_feats) : mmd_penalty<float>(env_feats, gamma);
            objective += weight * pen.value;
            grad_feats = pen.grads;
            for (auto& g : grad_feats) scale(g, weight);
          }
        }
      }
      TensorF gf = model.backward_classifier(join_rows(grad_logits));
      if (!grad_feats.empty()) {
        const TensorF extra = join_rows(grad_feats);
        for (std::size_t i = 0; i < gf.numel(); ++i) gf.data[i] += extra.data[i];
      }
      model.backward_features(gf);
    }

    if (!std::isfinite(objective)) {
      throw TrainingFailure(config.name + ": non-finite objective at step " + std::to_string(step), step);
    }
    if (callbacks.on_step) callbacks.on_step(step, objective);
    nn::optimizer_step<float>(params, adam);

    const std::int64_t done = step + 1;
    if (done % settings.eval_interval == 0 || done == config.steps) {
      const auto [in_acc, in_loss] = evaluate(model, eval_in, settings.eval_chunk);
      const auto [out_acc, out_loss] = evaluate(model, eval_out, settings.eval_chunk);
      const auto [test_acc, test_loss] = evaluate(model, eval_test, settings.eval_chunk);
      emit(done, "in", "acc", in_acc);
      emit(done, "in", "loss", in_loss);
      emit(done, "out", "acc", out_acc);
      emit(done, "out", "loss", out_loss);
      emit(done, "test", "acc", test_acc);
      emit(done, "test", "loss", test_loss);
      result.test_accuracy = test_acc;
    }
    if (done % settings.checkpoint_every == 0 || done == config.steps) {
      meta.step = done;
      auto ckpt = features::capture(model, meta);
      if (callbacks.on_checkpoint) callbacks.on_checkpoint(ckpt);
      if (done == config.steps) result.final_checkpoint = std::move(ckpt);
    }
  }
  return result;
}

}  // namespace oodprobe::algorithms
