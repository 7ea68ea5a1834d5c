#pragma once

// Binary checkpoint container:
//   "RDPDCKPT" | u32 version | u64 header_len | JSON header |
//   u64 payload_len | raw little-endian parameters | u64 FNV-1a checksum
// The checksum covers every byte before it. The version is checked before
// the checksum so that files from a newer writer fail with a version error.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdpd/distill.hpp"
#include "rdpd/errors.hpp"
#include "rdpd/layers.hpp"
#include "rdpd/optim.hpp"
#include "rdpd/training.hpp"

namespace rdpd {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'R', 'D', 'P', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class Real>
struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<Real> values;
};

template <class Real>
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string role;  // "teacher" or "student"
  std::string mode;
  ModelSpec spec;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::uint64_t rng_seed = 0;  // seed of the batch-order generator
  std::vector<StoredTensor<Real>> tensors;
  AdamState<Real> optimizer;
  nlohmann::json extra = nlohmann::json::object();

  const StoredTensor<Real>* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

template <class Real>
Checkpoint<Real> make_checkpoint(const Model<Real>& model, const CombineHead<Real>* head,
                                 const AdamState<Real>* optimizer, std::string role, std::string mode) {
  Checkpoint<Real> c;
  c.role = std::move(role);
  c.mode = std::move(mode);
  c.spec = model.spec();
  auto add = [&c](const NamedParameter<Real>& p) {
    c.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  };
  for (const auto& p : model.parameters()) add(p);
  if (head) {
    for (const auto& p : head->parameters()) add(p);
  }
  if (optimizer) c.optimizer = *optimizer;
  return c;
}

namespace detail {

template <class T>
void put_raw(std::string& out, const T& v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_raw(const std::string& in, std::size_t& pos, const std::string& path) {
  if (pos + sizeof(T) > in.size()) throw CorruptionError("checkpoint " + path + " is truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline std::uint64_t checksum(const std::string& bytes, std::size_t len) {
  return fnv1a({reinterpret_cast<const unsigned char*>(bytes.data()), len});
}

}  // namespace detail

template <class Real>
std::string serialize_checkpoint(const Checkpoint<Real>& c) {
  nlohmann::json table = nlohmann::json::array();
  std::string payload;
  auto append = [&](const std::string& name, const Shape& shape, const std::vector<Real>& v) {
    table.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size()}, {"count", v.size()}});
    for (Real x : v) detail::put_raw(payload, x);
  };
  for (const auto& t : c.tensors) append(t.name, t.shape, t.values);
  for (std::size_t k = 0; k < c.optimizer.m.size(); ++k) {
    append("adam.m." + std::to_string(k), {c.optimizer.m[k].size()}, c.optimizer.m[k]);
    append("adam.v." + std::to_string(k), {c.optimizer.v[k].size()}, c.optimizer.v[k]);
  }
  nlohmann::json header{{"role", c.role},
                        {"mode", c.mode},
                        {"spec", c.spec},
                        {"precision", sizeof(Real) * 8},
                        {"tensors", table},
                        {"n_model_tensors", c.tensors.size()},
                        {"config_hash", c.config_hash},
                        {"seed", c.seed},
                        {"rng_seed", c.rng_seed},
                        {"optimizer", {{"t", c.optimizer.t}, {"n_slots", c.optimizer.m.size()}}},
                        {"extra", c.extra}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_raw(out, c.version);
  detail::put_raw(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  detail::put_raw(out, static_cast<std::uint64_t>(payload.size()));
  out += payload;
  detail::put_raw(out, detail::checksum(out, out.size()));
  return out;
}

template <class Real>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Real>& c) {
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint " + path.string());
}

// Header fields only; used to pick the precision before a typed load.
inline nlohmann::json peek_checkpoint_header(const std::string& bytes, const std::string& path) {
  if (bytes.size() < sizeof kCheckpointMagic ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw FormatError(path + " is not a checkpoint");
  }
  std::size_t pos = sizeof kCheckpointMagic;
  const auto version = detail::get_raw<std::uint32_t>(bytes, pos, path);
  if (version > kCheckpointVersion) {
    throw VersionError("checkpoint " + path + " has format version " + std::to_string(version) +
                       "; this build reads up to " + std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < pos + 8 + 8 + 8) throw CorruptionError("checkpoint " + path + " is truncated");
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::size_t tail = body;
  const auto stored = detail::get_raw<std::uint64_t>(bytes, tail, path);
  if (stored != detail::checksum(bytes, body)) {
    throw CorruptionError("checkpoint " + path + " failed its checksum");
  }
  const auto header_len = detail::get_raw<std::uint64_t>(bytes, pos, path);
  if (pos + header_len > body) throw CorruptionError("checkpoint " + path + " header overruns file");
  try {
    auto header = nlohmann::json::parse(bytes.substr(pos, header_len));
    header["__payload_pos"] = pos + header_len;
    header["__version"] = version;
    return header;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("checkpoint " + path + " header: " + e.what());
  }
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline unsigned checkpoint_precision(const std::filesystem::path& path) {
  return peek_checkpoint_header(read_file_bytes(path), path.string()).at("precision").get<unsigned>();
}

template <class Real>
Checkpoint<Real> deserialize_checkpoint(const std::string& bytes, const std::string& path) {
  const auto header = peek_checkpoint_header(bytes, path);
  const auto precision = header.at("precision").get<std::size_t>();
  if (precision != sizeof(Real) * 8) {
    throw FormatError("checkpoint " + path + " stores " + std::to_string(precision) +
                      "-bit parameters, loader expects " + std::to_string(sizeof(Real) * 8));
  }
  std::size_t pos = header.at("__payload_pos").get<std::size_t>();
  const auto payload_len = detail::get_raw<std::uint64_t>(bytes, pos, path);
  if (pos + payload_len + sizeof(std::uint64_t) != bytes.size()) {
    throw CorruptionError("checkpoint " + path + " payload length disagrees with file size");
  }
  const std::size_t base = pos;

  Checkpoint<Real> c;
  c.version = header.at("__version").get<std::uint32_t>();
  c.role = header.at("role").get<std::string>();
  c.mode = header.at("mode").get<std::string>();
  c.spec = header.at("spec").get<ModelSpec>();
  c.config_hash = header.at("config_hash").get<std::string>();
  c.seed = header.at("seed").get<std::uint64_t>();
  c.rng_seed = header.at("rng_seed").get<std::uint64_t>();
  c.extra = header.at("extra");
  const auto n_model = header.at("n_model_tensors").get<std::size_t>();
  const auto& table = header.at("tensors");
  std::vector<StoredTensor<Real>> all;
  for (const auto& entry : table) {
    StoredTensor<Real> t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (count != shape_numel(t.shape) || offset + count * sizeof(Real) > payload_len) {
      throw CorruptionError("checkpoint " + path + ": tensor '" + t.name + "' is out of bounds");
    }
    t.values.resize(count);
    if (count) std::memcpy(t.values.data(), bytes.data() + base + offset, count * sizeof(Real));
    all.push_back(std::move(t));
  }
  if (n_model > all.size()) throw CorruptionError("checkpoint " + path + ": tensor table too short");
  c.tensors.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_model));
  const auto slots = header.at("optimizer").at("n_slots").get<std::size_t>();
  if (n_model + 2 * slots != all.size()) {
    throw CorruptionError("checkpoint " + path + ": optimizer slots disagree with tensor table");
  }
  c.optimizer.t = header.at("optimizer").at("t").get<std::uint64_t>();
  for (std::size_t k = 0; k < slots; ++k) {
    c.optimizer.m.push_back(std::move(all[n_model + 2 * k].values));
    c.optimizer.v.push_back(std::move(all[n_model + 2 * k + 1].values));
  }
  return c;
}

template <class Real>
Checkpoint<Real> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<Real>(read_file_bytes(path), path.string());
}

namespace detail {

template <class Real>
void copy_into(const Checkpoint<Real>& c, std::vector<NamedParameter<Real>> params) {
  for (auto& p : params) {
    const auto* t = c.find(p.name);
    if (!t) throw FormatError("checkpoint lacks tensor '" + p.name + "'");
    if (t->shape != p.tensor.shape()) {
      throw ShapeError("checkpoint tensor '" + p.name + "' has shape " + shape_str(t->shape) +
                       ", model expects " + shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(t->values.begin(), t->values.end(), dst.begin());
  }
}

}  // namespace detail

template <class Real>
Model<Real> restore_model(const Checkpoint<Real>& c) {
  Model<Real> m(c.spec, 0);
  detail::copy_into(c, m.parameters());
  return m;
}

// The combine head, if the checkpoint carries one.
template <class Real>
std::optional<CombineHead<Real>> restore_head(const Checkpoint<Real>& c) {
  const auto* b = c.find("combine.b");
  if (!b) return std::nullopt;
  CombineHead<Real> head(c.spec.n_classes, b->values.size() == 1 && c.spec.n_classes != 1);
  detail::copy_into(c, head.parameters());
  return head;
}

}  // namespace rdpd
