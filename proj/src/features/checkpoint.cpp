#include "oodprobe/features/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace oodprobe::features {

using nlohmann::json;

namespace {

NamedArray to_named(const std::string& name, const nn::Shape& shape, const std::vector<float>& values) {
  return {name, shape, values};
}

void copy_into(const NamedArray& src, const std::string& name, std::size_t count, std::vector<float>& dst) {
  if (src.name != name) throw CheckpointError("checkpoint entry '" + src.name + "' where model expects '" + name + "'");
  if (src.values.size() != count) {
    throw CheckpointError("checkpoint entry '" + name + "' holds " + std::to_string(src.values.size()) +
                          " values, model expects " + std::to_string(count));
  }
  dst = src.values;
}

struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ull;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  }
  void floats(const std::vector<float>& v) {
    for (float f : v) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      const unsigned char le[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                   static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
      bytes(le, 4);
    }
  }
  std::string hex() const {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << h;
    return s.str();
  }
};

bool is_classifier(const std::string& name) { return name.rfind("classifier", 0) == 0; }

void write_le32(std::ostream& out, const std::vector<float>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
  } else {
    for (float f : values) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      const char le[4] = {static_cast<char>(u), static_cast<char>(u >> 8), static_cast<char>(u >> 16),
                          static_cast<char>(u >> 24)};
      out.write(le, 4);
    }
  }
}

std::vector<float> read_le32(const std::string& blob, std::size_t offset, std::size_t count) {
  std::vector<float> v(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto* b = reinterpret_cast<const unsigned char*>(blob.data() + offset + 4 * i);
    const std::uint32_t u = std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
                            (std::uint32_t{b[3]} << 24);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

}  // namespace

Checkpoint capture(Model<float>& model, const TrainingMetadata& meta) {
  Checkpoint c;
  c.spec = model.spec();
  c.meta = meta;
  for (auto* p : model.parameters()) c.parameters.push_back(to_named(p->name, p->value.shape, p->value.data));
  for (const auto& b : model.buffers()) c.buffers.push_back(to_named(b.name, {b.values->size()}, *b.values));
  return c;
}

void restore(Model<float>& model, const Checkpoint& ckpt) {
  if (!(ckpt.spec == model.spec())) throw CheckpointError("checkpoint architecture does not match the model");
  auto params = model.parameters();
  auto buffers = model.buffers();
  if (params.size() != ckpt.parameters.size() || buffers.size() != ckpt.buffers.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(ckpt.parameters.size()) + " parameters and " +
                          std::to_string(ckpt.buffers.size()) + " buffers, model has " + std::to_string(params.size()) +
                          " and " + std::to_string(buffers.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ckpt.parameters[i].shape != params[i]->value.shape) {
      throw CheckpointError("shape mismatch for '" + params[i]->name + "'");
    }
    copy_into(ckpt.parameters[i], params[i]->name, params[i]->value.numel(), params[i]->value.data);
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    copy_into(ckpt.buffers[i], buffers[i].name, buffers[i].values->size(), *buffers[i].values);
  }
}

Model<float> instantiate(const Checkpoint& ckpt) {
  Model<float> m(ckpt.spec, 0);
  restore(m, ckpt);
  return m;
}

std::string featurizer_checksum(const Checkpoint& ckpt) {
  Fnv f;
  for (const auto* group : {&ckpt.parameters, &ckpt.buffers}) {
    for (const auto& a : *group) {
      if (is_classifier(a.name)) continue;
      f.bytes(a.name.data(), a.name.size());
      f.floats(a.values);
    }
  }
  return f.hex();
}

std::string featurizer_checksum(Model<float>& model) {
  Fnv f;
  for (auto* p : model.featurizer_parameters()) {
    f.bytes(p->name.data(), p->name.size());
    f.floats(p->value.data);
  }
  for (const auto& b : model.buffers()) {
    f.bytes(b.name.data(), b.name.size());
    f.floats(*b.values);
  }
  return f.hex();
}

json spec_to_json(const FeaturizerSpec& spec) {
  return json{{"family", to_string(spec.family)},
              {"input_shape", spec.input_shape},
              {"channels", spec.channels},
              {"blocks", spec.blocks},
              {"num_classes", spec.num_classes}};
}

FeaturizerSpec spec_from_json(const json& j) {
  try {
    FeaturizerSpec s;
    s.family = family_from_string(j.at("family").get<std::string>());
    s.input_shape = j.at("input_shape").get<nn::Shape>();
    s.channels = j.at("channels").get<std::vector<std::size_t>>();
    s.blocks = j.at("blocks").get<std::size_t>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed featurizer spec: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["spec"] = spec_to_json(ckpt.spec);
  manifest["metadata"] = {{"algorithm", ckpt.meta.algorithm}, {"dataset", ckpt.meta.dataset},
                          {"test_env", ckpt.meta.test_env},   {"seed", ckpt.meta.seed},
                          {"step", ckpt.meta.step},           {"featurizer_checksum", featurizer_checksum(ckpt)}};
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& [kind, group] : {std::pair{"parameter", &ckpt.parameters}, std::pair{"buffer", &ckpt.buffers}}) {
    for (const auto& a : *group) {
      entries.push_back({{"name", a.name}, {"kind", kind}, {"shape", a.shape}, {"offset", offset}});
      offset += a.values.size() * 4;
    }
  }
  manifest["tensors"] = entries;
  manifest["blob_bytes"] = offset;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    const std::uint64_t len = text.size();
    unsigned char le[8];
    for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>(len >> (8 * i));
    out.write(reinterpret_cast<const char*>(le), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* group : {&ckpt.parameters, &ckpt.buffers}) {
      for (const auto& a : *group) write_le32(out, a.values);
    }
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw CheckpointError(path.string() + ": truncated header");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t{static_cast<unsigned char>(bytes[i])} << (8 * i);
  if (bytes.size() < 8 + len) throw CheckpointError(path.string() + ": truncated manifest");

  json manifest;
  try {
    manifest = json::parse(bytes.substr(8, len));
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": manifest is not valid JSON: " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw CheckpointError(path.string() + ": unsupported format tag '" + manifest.value("format", "") + "'");
  }
  const std::string blob = bytes.substr(8 + len);
  Checkpoint c;
  try {
    c.spec = spec_from_json(manifest.at("spec"));
    const auto& m = manifest.at("metadata");
    c.meta.algorithm = m.at("algorithm").get<std::string>();
    c.meta.dataset = m.at("dataset").get<std::string>();
    c.meta.test_env = m.at("test_env").get<int>();
    c.meta.seed = m.at("seed").get<std::uint64_t>();
    c.meta.step = m.at("step").get<std::int64_t>();
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>()) {
      throw CheckpointError(path.string() + ": blob holds " + std::to_string(blob.size()) + " bytes, manifest says " +
                            std::to_string(manifest.at("blob_bytes").get<std::size_t>()));
    }
    for (const auto& e : manifest.at("tensors")) {
      NamedArray a;
      a.name = e.at("name").get<std::string>();
      a.shape = e.at("shape").get<nn::Shape>();
      const std::size_t offset = e.at("offset").get<std::size_t>(), count = nn::shape_numel(a.shape);
      if (offset + 4 * count > blob.size()) throw CheckpointError(path.string() + ": entry '" + a.name + "' overruns blob");
      a.values = read_le32(blob, offset, count);
      (e.at("kind").get<std::string>() == "buffer" ? c.buffers : c.parameters).push_back(std::move(a));
    }
    const auto recorded = m.at("featurizer_checksum").get<std::string>();
    if (recorded != featurizer_checksum(c)) {
      throw IntegrityError(path.string() + ": featurizer checksum " + featurizer_checksum(c) +
                           " does not match recorded " + recorded);
    }
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": malformed manifest: " + e.what());
  }
  return c;
}

}  // namespace oodprobe::features
