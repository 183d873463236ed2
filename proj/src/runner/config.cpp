#include "oodprobe/runner/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <toml.hpp>

namespace oodprobe::runner {

namespace {

class Block {
 public:
  Block(const toml::table* table, std::string path) : table_(table), path_(std::move(path)) {}

  void allow(std::initializer_list<const char*> keys) const {
    if (!table_) return;
    std::set<std::string> known(keys.begin(), keys.end());
    for (const auto& [k, v] : *table_) {
      if (!known.count(std::string(k.str()))) throw ConfigError("unknown config key '" + key(std::string(k.str())) + "'");
    }
  }

  template <typename T>
  void get(const char* name, T& out) const {
    const toml::node* n = node(name);
    if (!n) return;
    out = scalar<T>(*n, key(name));
  }

  template <typename T>
  void get_list(const char* name, std::vector<T>& out) const {
    const toml::node* n = node(name);
    if (!n) return;
    const auto* arr = n->as_array();
    if (!arr) throw ConfigError("config key '" + key(name) + "' must be an array");
    out.clear();
    for (std::size_t i = 0; i < arr->size(); ++i) {
      out.push_back(scalar<T>(*arr->get(i), key(name) + "[" + std::to_string(i) + "]"));
    }
  }

  void get_path(const char* name, std::filesystem::path& out, const std::filesystem::path& base) const {
    std::string s;
    if (!node(name)) return;
    get(name, s);
    out = std::filesystem::path(s).is_absolute() ? std::filesystem::path(s) : base / s;
  }

 private:
  const toml::node* node(const char* name) const { return table_ ? table_->get(name) : nullptr; }
  std::string key(const std::string& name) const { return path_.empty() ? name : path_ + "." + name; }

  template <typename T>
  static T scalar(const toml::node& n, const std::string& key) {
    if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = n.value<std::string>()) return *v;
      throw ConfigError("config key '" + key + "' must be a string");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (auto v = n.value<bool>()) return *v;
      throw ConfigError("config key '" + key + "' must be a boolean");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (n.is_integer() || n.is_floating_point()) return static_cast<T>(*n.value<double>());
      throw ConfigError("config key '" + key + "' must be a number");
    } else {
      if (!n.is_integer()) throw ConfigError("config key '" + key + "' must be an integer");
      const auto v = *n.value<std::int64_t>();
      if (std::is_unsigned_v<T> && v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
      return static_cast<T>(v);
    }
  }

  const toml::table* table_;
  std::string path_;
};

const toml::table* sub_table(const toml::table& root, const char* name) {
  const toml::node* n = root.get(name);
  if (!n) return nullptr;
  if (!n->is_table()) throw ConfigError(std::string("config key '") + name + "' must be a table");
  return n->as_table();
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dataset.name != "rotated_digits" && dataset.name != "colored_digits") {
    throw ConfigError("dataset.name must be rotated_digits or colored_digits, got '" + dataset.name + "'");
  }
  if (dataset.source != "synthetic" && dataset.source != "idx") {
    throw ConfigError("dataset.source must be synthetic or idx, got '" + dataset.source + "'");
  }
  if (dataset.source == "idx" && (dataset.idx_images.empty() || dataset.idx_labels.empty())) {
    throw ConfigError("dataset.images and dataset.labels are required when dataset.source = \"idx\"");
  }
  if (dataset.per_env_n == 0) throw ConfigError("dataset.per_env_n must be positive");
  if (dataset.pool_per_class == 0) throw ConfigError("dataset.pool_per_class must be positive");
  if (!(dataset.split_fraction > 0.0 && dataset.split_fraction < 1.0)) {
    throw ConfigError("dataset.split_fraction must lie in (0,1)");
  }
  if (train.algorithms.empty()) throw ConfigError("train.algorithms must not be empty");
  for (const auto& a : train.algorithms) {
    algorithms::AlgorithmConfig c = train.algorithm;
    c.name = a;
    try {
      c.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("train: ") + e.what());
    }
  }
  if (train.seeds.empty()) throw ConfigError("train.seeds must not be empty");
  if (train.featurizer != "mini_cnn" && train.featurizer != "mini_resnet") {
    throw ConfigError("train.featurizer must be mini_cnn or mini_resnet, got '" + train.featurizer + "'");
  }
  if (train.eval_interval <= 0) throw ConfigError("train.eval_interval must be positive");
  if (train.checkpoint_every <= 0) throw ConfigError("train.checkpoint_every must be positive");
  try {
    probe.settings.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("probe: ") + e.what());
  }
  if (!(probe.epsilon > 0.0 && probe.epsilon < 1.0)) throw ConfigError("probe.epsilon must lie in (0,1)");
  if (!(probe.delta > 0.0 && probe.delta < 1.0)) throw ConfigError("probe.delta must lie in (0,1)");
  if (!(probe.bits > 0.0)) throw ConfigError("probe.bits must be positive");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config parse error at line " << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }
  ExperimentConfig c;
  const Block top(&root, "");
  top.allow({"out_dir", "reference", "workers", "dataset", "train", "probe"});
  top.get_path("out_dir", c.out_dir, base_dir);
  top.get_path("reference", c.reference, base_dir);
  top.get("workers", c.workers);

  const Block ds(sub_table(root, "dataset"), "dataset");
  ds.allow({"name", "source", "images", "labels", "pool_per_class", "envs", "label_noise", "per_env_n",
            "split_fraction", "seed"});
  ds.get("name", c.dataset.name);
  ds.get("source", c.dataset.source);
  ds.get_path("images", c.dataset.idx_images, base_dir);
  ds.get_path("labels", c.dataset.idx_labels, base_dir);
  ds.get("pool_per_class", c.dataset.pool_per_class);
  ds.get_list("envs", c.dataset.envs);
  ds.get("label_noise", c.dataset.label_noise);
  ds.get("per_env_n", c.dataset.per_env_n);
  ds.get("split_fraction", c.dataset.split_fraction);
  ds.get("seed", c.dataset.seed);

  const Block tr(sub_table(root, "train"), "train");
  tr.allow({"algorithms", "test_envs", "seeds", "steps", "batch_size", "lr", "lambda", "anneal_step", "eta", "tau",
            "alpha", "gamma", "featurizer", "channels", "eval_interval", "checkpoint_every"});
  tr.get_list("algorithms", c.train.algorithms);
  tr.get_list("test_envs", c.train.test_envs);
  tr.get_list("seeds", c.train.seeds);
  auto& a = c.train.algorithm;
  tr.get("steps", a.steps);
  tr.get("batch_size", a.batch_size);
  tr.get("lr", a.lr);
  tr.get("lambda", a.lambda);
  tr.get("anneal_step", a.anneal_step);
  tr.get("eta", a.eta);
  tr.get("tau", a.tau);
  tr.get("alpha", a.alpha);
  tr.get("gamma", a.gamma);
  tr.get("featurizer", c.train.featurizer);
  tr.get_list("channels", c.train.channels);
  tr.get("eval_interval", c.train.eval_interval);
  tr.get("checkpoint_every", c.train.checkpoint_every);

  const Block pr(sub_table(root, "probe"), "probe");
  pr.allow({"budget", "eval_interval", "lr", "batch_size", "patience", "min_improvement", "control", "epsilon",
            "delta", "bits"});
  auto& s = c.probe.settings;
  pr.get("budget", s.budget);
  pr.get("eval_interval", s.eval_interval);
  pr.get("lr", s.lr);
  pr.get("batch_size", s.batch_size);
  pr.get("patience", s.patience);
  pr.get("min_improvement", s.min_improvement);
  pr.get("control", c.probe.control);
  pr.get("epsilon", c.probe.epsilon);
  pr.get("delta", c.probe.delta);
  pr.get("bits", c.probe.bits);

  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

}  // namespace oodprobe::runner
