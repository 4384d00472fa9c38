// Copyright 2026 The lifelong-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include "lmoe/model/checkpoint.hpp"

#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace lmoe {

namespace fs = std::filesystem;

namespace {

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

std::string blob_name(std::size_t index, const std::string& name) {
  // index keeps names unique even if sanitising collides
  std::string safe;
  for (char c : name) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_') ? c : '_';
  return std::to_string(index) + "_" + safe + ".bin";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out << text;
  if (!out) throw CheckpointError("short write to " + path.string());
}

}  // namespace

template <typename T>
std::size_t write_f32_blob(const fs::path& path, std::span<const T> values) {
  std::vector<std::uint32_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float f = static_cast<float>(values[i]);
    std::uint32_t w;
    std::memcpy(&w, &f, 4);
    words[i] = to_le(w);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (!out) throw CheckpointError("short write to " + path.string());
  return words.size() * 4;
}

template <typename T>
std::vector<T> read_f32_blob(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing blob " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * 4) {
    throw CheckpointError("blob " + path.string() + " has " + std::to_string(bytes) + " bytes, expected " +
                          std::to_string(count * 4));
  }
  in.seekg(0);
  std::vector<std::uint32_t> words(count);
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  std::vector<T> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t w = to_le(words[i]);
    float f;
    std::memcpy(&f, &w, 4);
    out[i] = static_cast<T>(f);
  }
  return out;
}

template <typename T>
void save_model(const TransformerLM<T>& model, const fs::path& dir, const nlohmann::json& extra) {
  std::error_code ec;
  fs::create_directories(dir / "params", ec);
  if (ec) throw CheckpointError("cannot create " + (dir / "params").string() + ": " + ec.message());
  nlohmann::json manifest = extra;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["model"] = model.config();
  manifest["experts"] = model.num_experts();
  auto params = nlohmann::json::array();
  std::size_t index = 0;
  for (const auto* p : model.parameters()) {
    const std::string file = "params/" + blob_name(index++, p->name);
    const auto bytes = write_f32_blob<T>(dir / file, p->var.values());
    params.push_back({{"name", p->name},
                      {"shape", p->shape()},
                      {"trainable", p->trainable},
                      {"origin_phase", p->origin_phase},
                      {"file", file},
                      {"bytes", bytes}});
  }
  manifest["params"] = std::move(params);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

nlohmann::json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw CheckpointError("no checkpoint manifest at " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  if (!m.contains("format_version") || !m["format_version"].is_number_integer()) {
    throw CheckpointError("manifest " + (dir / "manifest.json").string() + " has no format_version");
  }
  const int version = m["format_version"].get<int>();
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError("unsupported checkpoint format version " + std::to_string(version) + " (supported: " +
                          std::to_string(kCheckpointFormatVersion) + ")");
  }
  return m;
}

template <typename T>
TransformerLM<T> load_model(const fs::path& dir) {
  const auto m = read_manifest(dir);
  TransformerLM<T> model = [&] {
    try {
      const auto config = m.at("model").get<ModelConfig>();
      return TransformerLM<T>(config, 0, m.at("experts").get<std::size_t>());
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError("manifest " + (dir / "manifest.json").string() + ": " + e.what());
    }
  }();
  std::unordered_map<std::string, Parameter<T>*> by_name;
  for (auto* p : model.parameters()) by_name[p->name] = p;
  std::size_t restored = 0;
  for (const auto& rec : m.at("params")) {
    const auto name = rec.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint parameter " + name + " does not exist in the model");
    Parameter<T>& p = *it->second;
    if (rec.at("shape").get<Shape>() != p.shape()) {
      throw CheckpointError("checkpoint parameter " + name + " has shape " + shape_str(rec.at("shape").get<Shape>()) +
                            ", model expects " + shape_str(p.shape()));
    }
    p.var.mutable_values() = read_f32_blob<T>(dir / rec.at("file").get<std::string>(), p.size());
    p.trainable = rec.at("trainable").get<bool>();
    p.origin_phase = rec.at("origin_phase").get<int>();
    ++restored;
  }
  if (restored != by_name.size()) {
    throw CheckpointError("checkpoint restores " + std::to_string(restored) + " of " +
                          std::to_string(by_name.size()) + " parameters");
  }
  return model;
}

#define LMOE_INSTANTIATE(T)                                                                 \
  template std::size_t write_f32_blob<T>(const fs::path&, std::span<const T>);             \
  template std::vector<T> read_f32_blob<T>(const fs::path&, std::size_t);                  \
  template void save_model<T>(const TransformerLM<T>&, const fs::path&, const nlohmann::json&); \
  template TransformerLM<T> load_model<T>(const fs::path&);

LMOE_INSTANTIATE(float)
LMOE_INSTANTIATE(double)
#undef LMOE_INSTANTIATE

}  // namespace lmoe
