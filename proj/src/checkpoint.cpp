#include "pretune/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace pretune {

namespace {

constexpr char kMagic[6] = {'P', 'T', 'C', 'K', '1', '\n'};

void write_u64(std::ofstream& f, uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  f.write(buf, 8);
}

uint64_t read_u64(std::ifstream& f) {
  unsigned char buf[8];
  f.read(reinterpret_cast<char*>(buf), 8);
  if (!f) throw IoError("checkpoint: truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return v;
}

void write_string(std::ofstream& f, const std::string& s) {
  write_u64(f, s.size());
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& f) {
  const uint64_t n = read_u64(f);
  std::string s(n, '\0');
  f.read(s.data(), static_cast<std::streamsize>(n));
  if (!f) throw IoError("checkpoint: truncated string");
  return s;
}

void write_doubles(std::ofstream& f, const std::vector<double>& v) {
  write_u64(f, v.size());
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}

std::vector<double> read_doubles(std::ifstream& f) {
  const uint64_t n = read_u64(f);
  std::vector<double> v(n);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8));
  if (!f) throw IoError("checkpoint: truncated payload");
  return v;
}

nlohmann::json manifest_to_json(const CheckpointManifest& m) {
  return {{"format", m.format},
          {"model_kind", m.model_kind},
          {"arch", m.arch},
          {"inventory_digest", m.inventory_digest},
          {"seed", m.seed},
          {"epoch", m.epoch},
          {"provenance", m.provenance},
          {"has_optimizer", m.has_optimizer},
          {"extra", m.extra}};
}

CheckpointManifest manifest_from_json(const nlohmann::json& j) {
  CheckpointManifest m;
  m.format = j.at("format");
  m.model_kind = j.at("model_kind");
  m.arch = j.at("arch");
  m.inventory_digest = j.at("inventory_digest");
  m.seed = j.at("seed");
  m.epoch = j.at("epoch");
  m.provenance = j.at("provenance");
  m.has_optimizer = j.at("has_optimizer");
  m.extra = j.value("extra", nlohmann::json::object());
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, CheckpointManifest manifest,
                     const OptimizerState* optimizer) {
  manifest.model_kind = model.kind();
  manifest.arch = model.arch_json();
  manifest.inventory_digest = model.inventory().digest();
  manifest.has_optimizer = optimizer != nullptr;

  // write-then-rename so an interrupted run never leaves a torn checkpoint
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + tmp);
    f.write(kMagic, sizeof(kMagic));
    write_string(f, manifest_to_json(manifest).dump());
    write_u64(f, model.params().size());
    for (const auto& p : model.params()) {
      write_string(f, p.name);
      write_doubles(f, p.tensor.values());
    }
    if (optimizer) {
      write_u64(f, static_cast<uint64_t>(optimizer->step_count));
      write_u64(f, optimizer->m.size());
      for (const auto& [name, m] : optimizer->m) {
        write_string(f, name);
        write_doubles(f, m);
        write_doubles(f, optimizer->v.at(name));
      }
    }
    if (!f) throw IoError("checkpoint write failed: " + tmp);
  }
  std::remove(path.c_str());
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("cannot move checkpoint into place: " + path);
  }
}

CheckpointManifest read_checkpoint_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  char magic[6];
  f.read(magic, 6);
  if (!f || std::memcmp(magic, kMagic, 6) != 0) throw IoError("not a pretune checkpoint: " + path);
  return manifest_from_json(nlohmann::json::parse(read_string(f)));
}

RawCheckpoint load_checkpoint_raw(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  char magic[6];
  f.read(magic, 6);
  if (!f || std::memcmp(magic, kMagic, 6) != 0) throw IoError("not a pretune checkpoint: " + path);

  RawCheckpoint out;
  out.manifest = manifest_from_json(nlohmann::json::parse(read_string(f)));
  const uint64_t n = read_u64(f);
  out.params.reserve(n);
  for (uint64_t i = 0; i < n; ++i) {
    std::string name = read_string(f);
    out.params.emplace_back(std::move(name), read_doubles(f));
  }
  if (out.manifest.has_optimizer) {
    OptimizerState st;
    st.step_count = static_cast<int64_t>(read_u64(f));
    const uint64_t entries = read_u64(f);
    for (uint64_t i = 0; i < entries; ++i) {
      const std::string name = read_string(f);
      st.m[name] = read_doubles(f);
      st.v[name] = read_doubles(f);
    }
    out.optimizer = std::move(st);
  }
  return out;
}

void overlay_parameters(Model& model, const RawCheckpoint& raw) {
  auto& params = model.params();
  if (params.size() != raw.params.size()) {
    throw ManifestError("checkpoint parameter count mismatch");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != raw.params[i].first) {
      throw ManifestError("checkpoint parameter order mismatch at " + raw.params[i].first);
    }
    if (params[i].tensor.values().size() != raw.params[i].second.size()) {
      throw ManifestError("checkpoint parameter size mismatch at " + raw.params[i].first);
    }
    params[i].tensor.mutable_values() = raw.params[i].second;
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  RawCheckpoint raw = load_checkpoint_raw(path);
  LoadedCheckpoint out;
  out.manifest = raw.manifest;
  out.model = model_from_arch(out.manifest.model_kind, out.manifest.arch);

  const std::string rebuilt = out.model->inventory().digest();
  if (rebuilt != out.manifest.inventory_digest) {
    throw ManifestError("checkpoint inventory digest mismatch (file " +
                        out.manifest.inventory_digest + ", rebuilt " + rebuilt + ")");
  }
  overlay_parameters(*out.model, raw);
  out.optimizer = std::move(raw.optimizer);
  return out;
}

std::string parameter_digest(const std::vector<nn::ParamEntry>& params,
                             std::optional<bool> trainable_filter) {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    if (trainable_filter && p.trainable != *trainable_filter) continue;
    h = fnv1a64(p.name, h);
    const auto& v = p.tensor.values();
    h = fnv1a64(v.data(), v.size() * sizeof(double), h);
  }
  return hex64(h);
}

}  // namespace pretune
