#pragma once

// Checkpoint file: "CRCK", u32 version, u32 header length, JSON header, then raw
// little-endian float32 blobs at the offsets the header lists. The header carries
// the run configuration, step counter and sampler state; tensors are parameters
// ("param/<group>/<name>") followed by momentum buffers ("momentum/<group>/<name>").

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "crcda/config.hpp"
#include "crcda/model.hpp"
#include "crcda/optim.hpp"

namespace crcda {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

inline constexpr char kCheckpointMagic[4] = {'C', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  json config;  // run configuration echo
  ModelConfig model_config;
  std::size_t iter = 0;
  Model<float> model;
  OptimizerState<float> optim;
  std::string rng_state;  // textual mt19937_64 state

  std::mt19937_64 rng() const {
    std::mt19937_64 r;
    std::istringstream is(rng_state);
    is >> r;
    if (!is) throw FormatError("checkpoint: corrupt sampler state");
    return r;
  }
};

inline std::string rng_to_string(const std::mt19937_64& r) {
  std::ostringstream os;
  os << r;
  return os.str();
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  json tensors = json::array();
  std::string blob;
  auto add = [&](const std::string& name, const Shape& shape, std::span<const float> data) {
    tensors.push_back(json{{"name", name}, {"shape", shape}, {"offset", blob.size()}, {"count", data.size()}});
    blob.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  };
  for (const auto* g : c.model.groups())
    for (const auto& [name, t] : *g) add("param/" + param_key(g->name(), name), t.shape(), t.data());
  for (const auto& [key, v] : c.optim.velocity) add("momentum/" + key, Shape{v.size()}, v);

  const json header{{"format", "crcda-checkpoint"},
                    {"config", c.config},
                    {"model", model_config_to_json(c.model_config)},
                    {"iter", c.iter},
                    {"rng", c.rng_state},
                    {"tensors", tensors}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  out += blob;
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError(what + ": not a checkpoint file (bad magic)");
  const auto version = detail::get_u32(bytes, 4);
  if (version != kCheckpointVersion)
    throw FormatError(what + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto hlen = detail::get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(hlen)) throw FormatError(what + ": truncated header");
  const std::size_t blob_at = 12 + hlen;
  Checkpoint c;
  try {
    const json h = json::parse(bytes.substr(12, hlen));
    if (h.at("format") != "crcda-checkpoint") throw FormatError(what + ": unexpected format tag");
    c.config = h.at("config");
    c.model_config = model_config_from_json(h.at("model"));
    c.iter = h.at("iter").get<std::size_t>();
    c.rng_state = h.at("rng").get<std::string>();
    validate(c.model_config);
    c.model = Model<float>(c.model_config, 0);
    std::size_t params_seen = 0;
    for (const auto& t : h.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (blob_at + offset + count * sizeof(float) > bytes.size()) throw FormatError(what + ": tensor " + name + " runs past end of file");
      const char* src = bytes.data() + blob_at + offset;
      if (name.starts_with("param/")) {
        const auto rest = name.substr(6);
        const auto slash = rest.find('/');
        ParamGroup<float>* group = nullptr;
        for (auto* g : c.model.groups())
          if (g->name() == rest.substr(0, slash)) group = g;
        if (!group || !group->contains(rest.substr(slash + 1)))
          throw FormatError(what + ": tensor " + name + " does not belong to the model");
        auto& p = group->at(rest.substr(slash + 1));
        if (p.size() != count || Shape(t.at("shape").get<std::vector<std::size_t>>()) != p.shape())
          throw FormatError(what + ": shape mismatch for " + name);
        std::memcpy(p.data().data(), src, count * sizeof(float));
        ++params_seen;
      } else if (name.starts_with("momentum/")) {
        std::vector<float> v(count);
        std::memcpy(v.data(), src, count * sizeof(float));
        c.optim.velocity.emplace(name.substr(9), std::move(v));
      } else {
        throw FormatError(what + ": unknown tensor kind " + name);
      }
    }
    std::size_t expected = 0;
    for (const auto* g : c.model.groups()) expected += g->size();
    if (params_seen != expected) throw FormatError(what + ": missing parameter tensors");
  } catch (const json::exception& e) {
    throw FormatError(what + ": bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(what + ": " + e.what());
  }
  return c;
}

/// Writes via a temporary file and rename, so an interrupted write never leaves
/// a partial checkpoint behind.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = serialize_checkpoint(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PipelineError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw PipelineError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), path.string());
}

/// Snapshot of a trainer.
inline Checkpoint make_checkpoint(Trainer& t, const json& config) {
  Checkpoint c;
  c.config = config;
  c.model_config = t.model_config();
  c.iter = t.iter();
  c.model = t.model();
  c.optim = t.optimizer();
  c.rng_state = rng_to_string(t.rng());
  return c;
}

}  // namespace crcda
