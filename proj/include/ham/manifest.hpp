#pragma once

// Manifest ingestion for prepared multi-modal 2D data.
//
//   {"modalities": [...], "classes": C, "image_shape": [a, b],
//    "normalize": false,
//    "samples": [{"id": ..., "label": ..., "channels": [path-or-null, ...]}]}
//
// Each channel payload is a raw little-endian float32 file of a*b values,
// row-major. Paths are relative to the manifest's directory. A null path is an
// absent modality and loads as an all-zero channel with mask bit 0.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ham/data.hpp"

namespace ham {

namespace fs = std::filesystem;

namespace detail {

inline std::vector<float> read_f32_le(const fs::path& path, std::size_t expected, const std::string& sample_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ProtocolError("sample '" + sample_id + "': missing payload file " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected * 4)
    throw ProtocolError("sample '" + sample_id + "': payload " + path.string() + " holds " + std::to_string(bytes / 4) +
                        " values, declared image shape needs " + std::to_string(expected));
  in.seekg(0);
  std::vector<std::uint8_t> raw(bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  std::vector<float> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t u = static_cast<std::uint32_t>(raw[4 * i]) | (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                      (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                      (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

inline void write_f32_le(const fs::path& path, const double* values, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write payload " + path.string());
  std::vector<std::uint8_t> raw(4 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    raw[4 * i] = static_cast<std::uint8_t>(u);
    raw[4 * i + 1] = static_cast<std::uint8_t>(u >> 8);
    raw[4 * i + 2] = static_cast<std::uint8_t>(u >> 16);
    raw[4 * i + 3] = static_cast<std::uint8_t>(u >> 24);
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

}  // namespace detail

inline Dataset load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest " + path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();

  Dataset ds;
  try {
    ds.modality_names = j.at("modalities").get<std::vector<std::string>>();
    ds.m = ds.modality_names.size();
    ds.classes = j.at("classes").get<std::size_t>();
    const auto shape = j.at("image_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw ConfigError("manifest: image_shape must be [a, b]");
    ds.height = shape[0];
    ds.width = shape[1];
    const bool normalize = j.value("normalize", false);
    if (ds.m == 0 || ds.classes == 0) throw ConfigError("manifest: needs at least one modality and one class");
    const std::size_t hw = ds.height * ds.width;

    for (const auto& e : j.at("samples")) {
      Sample s;
      s.id = e.at("id").get<std::string>();
      const auto label = e.at("label").get<long long>();
      if (label < 0 || static_cast<std::size_t>(label) >= ds.classes)
        throw ProtocolError("sample '" + s.id + "': label " + std::to_string(label) + " out of range [0," +
                            std::to_string(ds.classes) + ")");
      s.label = static_cast<std::size_t>(label);
      const auto& channels = e.at("channels");
      if (channels.size() != ds.m)
        throw ProtocolError("sample '" + s.id + "': " + std::to_string(channels.size()) + " channel entries for " +
                            std::to_string(ds.m) + " modalities");
      s.image = Tensor({ds.m, ds.height, ds.width});
      s.mask = ModalityMask::none(ds.m);
      for (std::size_t c = 0; c < ds.m; ++c) {
        if (channels[c].is_null()) continue;
        const auto values = detail::read_f32_le(base / channels[c].get<std::string>(), hw, s.id);
        for (std::size_t i = 0; i < hw; ++i) {
          const double v = values[i];
          if (!std::isfinite(v)) throw ProtocolError("sample '" + s.id + "': non-finite intensity");
          if (!normalize && (v < 0.0 || v > 1.0))
            throw ProtocolError("sample '" + s.id + "': intensity outside [0,1] in an unnormalized manifest");
          s.image[c * hw + i] = v;
        }
        s.mask.set(c, true);
      }
      if (normalize) normalize_minmax(s);
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest " + path.string() + ": " + e.what());
  }
  return ds;
}

// Writes <dir>/manifest.json plus payloads under <dir>/payload/.
inline fs::path save_manifest(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "payload");
  nlohmann::json j;
  j["modalities"] = ds.modality_names;
  j["classes"] = ds.classes;
  j["image_shape"] = {ds.height, ds.width};
  j["normalize"] = false;
  j["samples"] = nlohmann::json::array();
  const std::size_t hw = ds.height * ds.width;
  for (const Sample& s : ds.samples) {
    nlohmann::json channels = nlohmann::json::array();
    for (std::size_t c = 0; c < ds.m; ++c) {
      if (!s.mask[c]) {
        channels.push_back(nullptr);
        continue;
      }
      const std::string rel = "payload/" + s.id + "_" + ds.modality_names[c] + ".f32";
      detail::write_f32_le(dir / rel, s.image.data().data() + c * hw, hw);
      channels.push_back(rel);
    }
    j["samples"].push_back({{"id", s.id}, {"label", s.label}, {"channels", channels}});
  }
  const fs::path path = dir / "manifest.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
  return path;
}

}  // namespace ham
