#pragma once

// Binary checkpoint: magic "HAMCKPT\0", u64 LE header length, JSON header,
// then every parameter tensor as little-endian f64 in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "ham/config.hpp"
#include "ham/training.hpp"

namespace ham {

inline constexpr char kCheckpointMagic[8] = {'H', 'A', 'M', 'C', 'K', 'P', 'T', '\0'};
inline constexpr int kCheckpointFormat = 1;
inline constexpr int kLayoutVersion = 1;

inline json to_json(const TaskNetConfig& n) {
  return json{{"m", n.m},         {"classes", n.classes}, {"widths", n.widths},
              {"kernel", n.kernel}, {"height", n.height},   {"width", n.width}};
}

inline TaskNetConfig net_from_json(const json& j) {
  detail::check_keys(j, {"m", "classes", "widths", "kernel", "height", "width"}, "checkpoint.net");
  TaskNetConfig n;
  try {
    n.m = j.at("m").get<std::size_t>();
    n.classes = j.at("classes").get<std::size_t>();
    n.widths = j.at("widths").get<std::vector<std::size_t>>();
    n.kernel = j.at("kernel").get<std::size_t>();
    n.height = j.at("height").get<std::size_t>();
    n.width = j.at("width").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint.net: ") + e.what());
  }
  n.validate();
  return n;
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

struct Checkpoint {
  TrainedModel model;
  std::uint64_t seed = 0;
  TrainConfig train;
  TaskNetConfig net;
};

inline std::string serialize_checkpoint(const TrainedModel& model, std::uint64_t seed, const TrainConfig& cfg,
                                        const TaskNetConfig& net) {
  const ParamSet& ps = model.param_set();
  json sections = json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    sections.push_back({{"name", ps.names[i]}, {"shape", ps.values[i].shape()}, {"offset", offset}});
    offset += ps.values[i].size();
  }
  const json header{{"format", kCheckpointFormat}, {"layout_version", kLayoutVersion},
                    {"method", method_name(model.method)}, {"seed", seed},
                    {"config", to_json(cfg)}, {"net", to_json(net)},
                    {"sections", sections}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + 8 * offset);
  for (const Tensor& t : ps.values)
    for (double v : t.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw ProtocolError("checkpoint: bad magic");
  const std::uint64_t hlen = detail::get_u64(p + 8);
  if (hlen > bytes.size() - 16) throw ProtocolError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(16, hlen));
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("checkpoint: malformed header: ") + e.what());
  }
  Checkpoint ck;
  try {
    if (header.at("format").get<int>() != kCheckpointFormat) throw ProtocolError("checkpoint: unsupported format");
    if (header.at("layout_version").get<int>() != kLayoutVersion)
      throw ProtocolError("checkpoint: unsupported layout version");
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.train = train_from_json(header.at("config"));
    ck.net = net_from_json(header.at("net"));
    // Rebuild the parameter skeleton, then overwrite values section by section.
    Rng rng(0);
    ck.model = init_model(parse_method(header.at("method").get<std::string>()), ck.net, ck.train, rng);
    ParamSet& ps = ck.model.param_set();
    const json& sections = header.at("sections");
    if (sections.size() != ps.size()) throw ProtocolError("checkpoint: section count does not match the model");
    const std::size_t payload = 16 + hlen;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const json& s = sections[i];
      if (s.at("name").get<std::string>() != ps.names[i])
        throw ProtocolError("checkpoint: section '" + s.at("name").get<std::string>() + "' where '" + ps.names[i] +
                        "' was expected");
      if (s.at("shape").get<Shape>() != ps.values[i].shape())
        throw ProtocolError("checkpoint: shape mismatch in section '" + ps.names[i] + "'");
      const std::size_t off = s.at("offset").get<std::size_t>();
      const std::size_t n = ps.values[i].size();
      if (payload + 8 * (off + n) > bytes.size()) throw ProtocolError("checkpoint: truncated payload");
      auto& data = ps.values[i].data();
      for (std::size_t k = 0; k < n; ++k) data[k] = std::bit_cast<double>(detail::get_u64(p + payload + 8 * (off + k)));
    }
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainedModel& model, std::uint64_t seed,
                            const TrainConfig& cfg, const TaskNetConfig& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint '" + path.string() + "'");
  const std::string bytes = serialize_checkpoint(model, seed, cfg, net);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ProtocolError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Run records

inline json metrics_json(const MetricsReport& r) {
  return json{{"balanced_accuracy", r.balanced_accuracy},
              {"sensitivity", r.sensitivity},
              {"specificity", r.specificity},
              {"precision", r.precision},
              {"per_class_sensitivity", r.per_class_sensitivity},
              {"per_class_specificity", r.per_class_specificity},
              {"per_class_precision", r.per_class_precision}};
}

inline json run_record_json(const RunRecord& r) {
  json mus = json::array();
  for (const auto& mu : r.mu_log) mus.push_back(mu.str());
  json evals = json::array();
  for (const auto& [it, cm] : r.evaluations) evals.push_back({{"iteration", it}, {"confusion", cm.counts()}});
  return json{{"method", r.method},
              {"seed", r.seed},
              {"chosen_iterations", r.chosen_iterations},
              {"optimizer_param_count", r.optimizer_param_count},
              {"loss_history", r.loss_history},
              {"reselections", r.reselections},
              {"mu_log", mus},
              {"batches", r.batches},
              {"evaluations", evals}};
}

}  // namespace ham
