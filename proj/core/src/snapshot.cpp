#include "cahqp/snapshot.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cahqp {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'A', 'H', 'Q', 'P', 'S', 'N', 'P'};

static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes a little-endian host");

template <class T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("snapshot: truncated header");
  return v;
}

struct Parsed {
  SnapshotInfo info;
  std::vector<float> payload;
};

Parsed parse(const std::filesystem::path& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("snapshot: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("snapshot: bad magic in " + path.string());
  Parsed p;
  p.info.version = read_pod<std::uint32_t>(in);
  if (p.info.version != kSnapshotVersion) {
    throw std::runtime_error("snapshot: unsupported version " + std::to_string(p.info.version));
  }
  const auto manifest_size = read_pod<std::uint64_t>(in);
  std::string text(manifest_size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(manifest_size));
  if (!in) throw std::runtime_error("snapshot: truncated manifest");
  json m;
  try {
    m = json::parse(text);
    p.info.config_hash = std::stoull(m.at("config_hash").get<std::string>(), nullptr, 16);
    for (const auto& [k, v] : m.at("metadata").items()) p.info.metadata[k] = v.get<std::string>();
    for (const auto& t : m.at("tensors")) {
      p.info.tensors.push_back(SnapshotTensor{t.at("name").get<std::string>(), t.at("rows").get<int>(),
                                              t.at("cols").get<int>(), t.at("offset").get<std::uint64_t>()});
    }
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("snapshot: malformed manifest: ") + e.what());
  }
  const auto count = m.value("payload_floats", std::uint64_t{0});
  if (with_payload) {
    p.payload.resize(count);
    in.read(reinterpret_cast<char*>(p.payload.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw std::runtime_error("snapshot: truncated payload");
  }
  for (const auto& t : p.info.tensors) {
    if (t.offset + static_cast<std::uint64_t>(t.rows) * static_cast<std::uint64_t>(t.cols) > count) {
      throw std::runtime_error("snapshot: tensor " + t.name + " exceeds payload");
    }
  }
  return p;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void save_snapshot(const std::filesystem::path& path, const ParameterList& params, std::uint64_t config_hash,
                   const std::map<std::string, std::string>& metadata) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    tensors.push_back({{"name", p.name}, {"rows", p.var.rows()}, {"cols", p.var.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p.var.value().size());
  }
  json meta = json::object();
  for (const auto& [k, v] : metadata) meta[k] = v;
  const json manifest = {{"config_hash", hex(config_hash)},
                         {"metadata", meta},
                         {"tensors", tensors},
                         {"payload_floats", offset}};
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("snapshot: cannot write " + tmp.string());
    out.write(kMagic, 8);
    write_pod(out, kSnapshotVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::vector<float> buf;
    for (const auto& p : params) {
      const auto& m = p.var.value();
      buf.resize(static_cast<size_t>(m.size()));
      for (Eigen::Index i = 0; i < m.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(m.data()[i]);
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("snapshot: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

SnapshotInfo read_snapshot_info(const std::filesystem::path& path) { return parse(path, false).info; }

SnapshotInfo load_snapshot(const std::filesystem::path& path, const ParameterList& into, std::uint64_t expected_hash) {
  Parsed p = parse(path, true);
  if (expected_hash != 0 && p.info.config_hash != expected_hash) {
    throw std::runtime_error("snapshot: config hash mismatch in " + path.string());
  }
  if (p.info.tensors.size() != into.size()) throw std::runtime_error("snapshot: tensor count mismatch");
  for (size_t i = 0; i < into.size(); ++i) {
    const auto& t = p.info.tensors[i];
    ag::Var v = into[i].var;
    if (t.name != into[i].name || t.rows != v.rows() || t.cols != v.cols()) {
      throw std::runtime_error("snapshot: tensor mismatch at " + into[i].name);
    }
    auto& m = v.mutable_value();
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = p.payload[t.offset + static_cast<std::uint64_t>(k)];
  }
  return p.info;
}

}  // namespace cahqp
