#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynprop/detector.hpp"

// Binary format: "DYNP1", then records
//   [u32 name_len][name][u32 rank][u32 dims x rank][f64 values], little endian.
// Model configuration comes first as rank-0 "config.*" records, followed by
// every parameter in registration order.

namespace dynprop {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[] = "DYNP1";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline void put_record(std::string& out, const std::string& name, const Shape& dims,
                       std::span<const double> values) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : values) put_f64(out, v);
}

struct Record {
  std::string name;
  Shape dims;
  std::vector<double> values;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  Record next() {
    Record r;
    const auto len = u32("record name length");
    r.name = take(len, "record name");
    const std::string who = "record '" + r.name + "'";
    const auto rank = u32(who + " rank");
    if (rank > 8) throw CheckpointError(who + ": implausible rank " + std::to_string(rank));
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      r.dims.push_back(u32(who + " dims"));
      count *= r.dims.back();
    }
    if (count > (bytes_.size() - pos_) / 8)
      throw CheckpointError(who + ": truncated values (" + std::to_string(count) + " expected)");
    r.values.resize(count);
    for (auto& v : r.values) {
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
      pos_ += 8;
      v = std::bit_cast<double>(bits);
    }
    return r;
  }

  std::string take(std::size_t n, const std::string& what) {
    if (n > bytes_.size() - pos_) throw CheckpointError("truncated checkpoint while reading " + what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::uint32_t u32(const std::string& what) {
    const std::string s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::pair<std::string, double>> config_fields(const ModelConfig& c) {
  return {{"config.arch", static_cast<double>(c.arch)},
          {"config.mode", static_cast<double>(c.mode)},
          {"config.proposals", c.proposals},
          {"config.theta", c.theta},
          {"config.k", c.k},
          {"config.strategy", static_cast<double>(c.strategy)},
          {"config.stages", c.stages},
          {"config.dim", c.dim},
          {"config.classes", c.classes},
          {"config.image_size", c.image_size},
          {"config.patch", c.patch},
          {"config.anchors", c.anchors},
          {"config.encoder_blocks", c.encoder_blocks},
          {"config.encoder_hidden", c.encoder_hidden},
          {"config.interaction_hidden", c.interaction_hidden},
          {"config.ffn_hidden", c.ffn_hidden},
          {"config.head_hidden", c.head_hidden},
          {"config.estimator_detach", c.estimator_detach ? 1.0 : 0.0}};
}

inline int config_int(const std::map<std::string, double>& m, const std::string& key, int lo, int hi) {
  const auto it = m.find(key);
  if (it == m.end()) throw CheckpointError("missing record '" + key + "'");
  const double v = it->second;
  if (!(v >= lo && v <= hi) || v != std::floor(v))
    throw CheckpointError("record '" + key + "': invalid value " + std::to_string(v));
  return static_cast<int>(v);
}

}  // namespace detail

inline std::string checkpoint_bytes(const Detector& model) {
  std::string out(kCheckpointMagic, 5);
  for (auto& [name, v] : detail::config_fields(model.config())) {
    const double value = v;
    detail::put_record(out, name, {}, std::span<const double>(&value, 1));
  }
  for (auto& [name, t] : model.params().entries()) detail::put_record(out, name, t.shape(), t.values());
  return out;
}

inline Detector detector_from_bytes(const std::string& bytes) {
  if (bytes.size() < 5 || bytes.compare(0, 5, kCheckpointMagic) != 0)
    throw CheckpointError("bad magic: not a DYNP1 checkpoint");
  detail::Reader reader(bytes);
  reader.take(5, "magic");
  std::map<std::string, double> cfg_values;
  std::vector<detail::Record> params;
  while (!reader.done()) {
    auto r = reader.next();
    if (r.name.rfind("config.", 0) == 0) {
      if (!r.dims.empty()) throw CheckpointError("record '" + r.name + "': config records must be scalars");
      cfg_values[r.name] = r.values[0];
    } else {
      params.push_back(std::move(r));
    }
  }
  constexpr int kBig = 1 << 20;
  ModelConfig c;
  c.arch = static_cast<Arch>(detail::config_int(cfg_values, "config.arch", 0, 1));
  c.mode = static_cast<Mode>(detail::config_int(cfg_values, "config.mode", 0, 2));
  c.proposals = detail::config_int(cfg_values, "config.proposals", 1, kBig);
  c.theta = detail::config_int(cfg_values, "config.theta", 1, kBig);
  if (!cfg_values.contains("config.k")) throw CheckpointError("missing record 'config.k'");
  c.k = cfg_values["config.k"];
  c.strategy = static_cast<Strategy>(detail::config_int(cfg_values, "config.strategy", 0, 2));
  c.stages = detail::config_int(cfg_values, "config.stages", 1, 64);
  c.dim = detail::config_int(cfg_values, "config.dim", 2, kBig);
  c.classes = detail::config_int(cfg_values, "config.classes", 1, kBig);
  c.image_size = detail::config_int(cfg_values, "config.image_size", 1, kBig);
  c.patch = detail::config_int(cfg_values, "config.patch", 1, kBig);
  c.anchors = detail::config_int(cfg_values, "config.anchors", 1, 64);
  c.encoder_blocks = detail::config_int(cfg_values, "config.encoder_blocks", 0, 64);
  c.encoder_hidden = detail::config_int(cfg_values, "config.encoder_hidden", 1, kBig);
  c.interaction_hidden = detail::config_int(cfg_values, "config.interaction_hidden", 1, kBig);
  c.ffn_hidden = detail::config_int(cfg_values, "config.ffn_hidden", 1, kBig);
  c.head_hidden = detail::config_int(cfg_values, "config.head_hidden", 1, kBig);
  c.estimator_detach = detail::config_int(cfg_values, "config.estimator_detach", 0, 1) == 1;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("config records: ") + e.what());
  }

  Detector model(c, 0);
  auto& entries = model.params().entries();
  if (params.size() != entries.size())
    throw CheckpointError("expected " + std::to_string(entries.size()) + " parameter records, found " +
                          std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = entries[i];
    if (params[i].name != name)
      throw CheckpointError("record '" + params[i].name + "': expected parameter '" + name + "'");
    if (params[i].dims != t.shape())
      throw CheckpointError("record '" + name + "': shape " + shape_str(params[i].dims) + " does not match " +
                            shape_str(t.shape()));
    std::copy(params[i].values.begin(), params[i].values.end(), t.mutable_values().begin());
  }
  return model;
}

inline void save_checkpoint(const Detector& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  const auto bytes = checkpoint_bytes(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

inline Detector load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return detector_from_bytes(bytes);
}

}  // namespace dynprop
