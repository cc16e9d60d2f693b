#include "advlab/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "advlab/common.hpp"

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

namespace advlab {

namespace {

using nlohmann::json;

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},   {"d_model", c.d_model},
              {"n_heads", c.n_heads},     {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
              {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw IoError(std::string("corrupt checkpoint: bad config: ") + e.what());
  }
  c.validate();
  return c;
}

struct RawCheckpoint {
  ModelConfig config;
  json tensors;               // manifest tensor table
  std::vector<char> data;     // raw f32 section
};

RawCheckpoint read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  in.seekg(0, std::ios::end);
  const std::uint64_t file_size = std::uint64_t(in.tellg());
  in.seekg(0);

  std::uint64_t manifest_len = 0;
  if (file_size < 8) throw IoError("corrupt checkpoint: truncated header");
  in.read(reinterpret_cast<char*>(&manifest_len), 8);
  if (manifest_len == 0 || 8 + manifest_len > file_size)
    throw IoError("corrupt checkpoint: manifest length out of bounds");

  std::string manifest_text(manifest_len, '\0');
  in.read(manifest_text.data(), std::streamsize(manifest_len));
  json manifest = json::parse(manifest_text, nullptr, false);
  if (manifest.is_discarded())
    throw IoError("corrupt checkpoint: manifest is not valid JSON");

  if (!manifest.contains("format_version") ||
      !manifest["format_version"].is_number_integer())
    throw IoError("corrupt checkpoint: missing format_version");
  const int version = manifest["format_version"].get<int>();
  if (version != kCheckpointVersion)
    throw IoError("unknown checkpoint format_version " +
                  std::to_string(version));
  if (!manifest.contains("config") || !manifest.contains("tensors"))
    throw IoError("corrupt checkpoint: missing config or tensor table");

  RawCheckpoint raw;
  raw.config = config_from_json(manifest["config"]);
  raw.tensors = manifest["tensors"];
  const std::uint64_t data_size = file_size - 8 - manifest_len;
  raw.data.resize(data_size);
  in.read(raw.data.data(), std::streamsize(data_size));
  if (!in) throw IoError("corrupt checkpoint: short read");
  return raw;
}

template <typename T>
Model<T> load_into(const RawCheckpoint& raw) {
  Model<T> m = Model<T>::zeros(raw.config);
  m.cfg.seed = raw.config.seed;
  auto named = m.named_tensors();
  if (!raw.tensors.is_array() || raw.tensors.size() != named.size())
    throw IoError("corrupt checkpoint: expected " +
                  std::to_string(named.size()) + " tensors, found " +
                  std::to_string(raw.tensors.size()));

  std::uint64_t expected_total = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    const json& tj = raw.tensors[i];
    const std::string name = tj.at("name").get<std::string>();
    if (name != named[i].first)
      throw IoError("corrupt checkpoint: tensor " + std::to_string(i) +
                    " is '" + name + "', expected '" + named[i].first + "'");
    if (tj.at("dtype").get<std::string>() != "f32")
      throw IoError("corrupt checkpoint: unsupported dtype for " + name);
    Tensor<T>& dst = *named[i].second;
    const std::vector<std::size_t> shape =
        tj.at("shape").get<std::vector<std::size_t>>();
    if (shape != dst.shape)
      throw IoError("corrupt checkpoint: shape mismatch for " + name);
    const std::uint64_t off = tj.at("byte_offset").get<std::uint64_t>();
    const std::uint64_t bytes = std::uint64_t(dst.numel()) * 4;
    if (off + bytes > raw.data.size())
      throw IoError("corrupt checkpoint: data out of bounds for " + name);
    const float* src = reinterpret_cast<const float*>(raw.data.data() + off);
    for (std::size_t k = 0; k < dst.numel(); ++k) dst.data[k] = T(src[k]);
    expected_total += bytes;
  }
  if (expected_total != raw.data.size())
    throw IoError("corrupt checkpoint: data section size mismatch");
  return m;
}

}  // namespace

void save_checkpoint(Model<float>& model, const std::string& path) {
  auto named = model.named_tensors();
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (auto& [name, t] : named) {
    tensors.push_back(json{{"name", name},
                           {"shape", t->shape},
                           {"dtype", "f32"},
                           {"byte_offset", offset}});
    offset += std::uint64_t(t->numel()) * 4;
  }
  json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["config"] = config_to_json(model.cfg);
  manifest["tensors"] = tensors;
  const std::string mtext = manifest.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp);
    const std::uint64_t mlen = mtext.size();
    out.write(reinterpret_cast<const char*>(&mlen), 8);
    out.write(mtext.data(), std::streamsize(mtext.size()));
    for (auto& [name, t] : named)
      out.write(reinterpret_cast<const char*>(t->data.data()),
                std::streamsize(t->data.size() * 4));
    if (!out) throw IoError("short write while saving checkpoint");
  }
  std::filesystem::rename(tmp, path);
}

Model<float> load_checkpoint_f32(const std::string& path) {
  return load_into<float>(read_raw(path));
}

Model<double> load_checkpoint_f64(const std::string& path) {
  return load_into<double>(read_raw(path));
}

}  // namespace advlab
