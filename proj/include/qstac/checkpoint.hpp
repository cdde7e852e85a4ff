#pragma once

// qstac-ckpt-1 container:
//   uint64 little-endian header length n,
//   n bytes of JSON header {"format", "tensors": [{name, count, offset, layer_sizes?, activation?}], "meta"},
//   tensor payload as little-endian float64 values (offsets count values, not bytes).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "qstac/diffnet.hpp"
#include "qstac/errors.hpp"

namespace qstac {

inline constexpr const char* kCheckpointFormat = "qstac-ckpt-1";

struct CheckpointTensor {
  std::string name;
  Eigen::VectorXd data;
  std::vector<int> layer_sizes;  // set for network parameters
  std::string activation;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  void add(const std::string& name, const Eigen::VectorXd& data) { tensors.push_back({name, data, {}, {}}); }

  void add_net(const std::string& name, const NetSpec& spec, const NetParams& p) {
    tensors.push_back({name, p.flat(), spec.layer_sizes, to_string(spec.activation)});
  }

  void add_adam(const std::string& name, const AdamState& s) {
    add(name + ".m", s.m);
    add(name + ".v", s.v);
    add(name + ".step", Eigen::VectorXd::Constant(1, static_cast<double>(s.step)));
  }

  bool has(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }

  const CheckpointTensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw FormatError("checkpoint has no tensor '" + name + "'");
  }

  const Eigen::VectorXd& get(const std::string& name) const { return tensor(name).data; }

  /// Copies a stored network into `p`, checking it matches `spec`.
  void load_net(const std::string& name, const NetSpec& spec, NetParams& p) const {
    const CheckpointTensor& t = tensor(name);
    if (t.layer_sizes != spec.layer_sizes || t.activation != to_string(spec.activation))
      throw FormatError("checkpoint network '" + name + "' does not match the configured shape");
    p = NetParams(spec);
    if (p.size() != t.data.size()) throw FormatError("checkpoint network '" + name + "' has the wrong length");
    p.flat() = t.data;
  }

  void load_adam(const std::string& name, AdamState& s) const {
    const Eigen::VectorXd& m = get(name + ".m");
    const Eigen::VectorXd& v = get(name + ".v");
    if (m.size() != s.m.size() || v.size() != s.v.size())
      throw FormatError("checkpoint optimizer state '" + name + "' has the wrong length");
    s.m = m;
    s.v = v;
    s.step = static_cast<long>(get(name + ".step")[0]);
  }
};

namespace detail {

inline void write_le_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_le_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint is truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_le_f64(std::ostream& os, double x) { write_le_u64(os, std::bit_cast<std::uint64_t>(x)); }

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["meta"] = ck.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    nlohmann::json e = {{"name", t.name}, {"count", t.data.size()}, {"offset", offset}};
    if (!t.layer_sizes.empty()) {
      e["layer_sizes"] = t.layer_sizes;
      e["activation"] = t.activation;
    }
    header["tensors"].push_back(e);
    offset += static_cast<std::uint64_t>(t.data.size());
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write checkpoint '" + path.string() + "'");
    detail::write_le_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ck.tensors)
      for (Eigen::Index i = 0; i < t.data.size(); ++i) detail::write_le_f64(os, t.data[i]);
    if (!os) throw Error("failed writing checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  const std::uint64_t n = detail::read_le_u64(is);
  if (n > (1u << 28)) throw FormatError("checkpoint header length is implausible");
  std::string text(n, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(n))) throw FormatError("checkpoint truncated in header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != kCheckpointFormat)
    throw FormatError("unsupported checkpoint format '" + header.value("format", "") + "'");
  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  std::uint64_t expected = 0;
  for (const auto& e : header.at("tensors")) {
    CheckpointTensor t;
    t.name = e.at("name").get<std::string>();
    const auto count = e.at("count").get<std::uint64_t>();
    if (e.at("offset").get<std::uint64_t>() != expected) throw FormatError("checkpoint tensor offsets are not contiguous");
    expected += count;
    if (e.contains("layer_sizes")) {
      t.layer_sizes = e.at("layer_sizes").get<std::vector<int>>();
      t.activation = e.at("activation").get<std::string>();
    }
    t.data.resize(static_cast<Eigen::Index>(count));
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::uint64_t bits = detail::read_le_u64(is);
      t.data[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(bits);
    }
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

}  // namespace qstac
