#include "hydet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <zlib.h>

#include "hydet/error.hpp"

namespace hydet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'H', 'Y', 'D', 'E', 'T', 'C', 'K', 'P'};
constexpr std::size_t kPrefix = 8 + 4 + 8 + 8 + 4;

struct TensorEntry {
  std::string role, name;
  std::uint64_t offset = 0;
  Shape shape;
};

struct Container {
  KeyValueConfig config, meta;
  std::vector<TensorEntry> tensors;
  std::vector<float> payload;
};

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

template <typename V>
V get(const char* p) {
  V v;
  std::memcpy(&v, p, sizeof(V));
  return v;
}

std::uint32_t crc_of(const char* a, std::size_t na, const char* b, std::size_t nb) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(a), static_cast<uInt>(na));
  // The payload can exceed uInt; feed it in chunks.
  for (std::size_t off = 0; off < nb; off += 1u << 30) {
    const std::size_t n = std::min<std::size_t>(nb - off, 1u << 30);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(b + off), static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrc::io, "cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < kPrefix) throw CheckpointError(CheckpointErrc::truncated, "checkpoint too short: " + path);
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw CheckpointError(CheckpointErrc::bad_magic, "not a checkpoint file: " + path);
  }
  const auto version = get<std::uint32_t>(bytes.data() + 8);
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrc::version_mismatch, "checkpoint format version " + std::to_string(version) +
                                                                ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto header_len = get<std::uint64_t>(bytes.data() + 12);
  const auto payload_len = get<std::uint64_t>(bytes.data() + 20);
  const auto crc = get<std::uint32_t>(bytes.data() + 28);
  if (header_len > bytes.size() || payload_len > bytes.size() || kPrefix + header_len + payload_len != bytes.size() ||
      payload_len % 4 != 0) {
    throw CheckpointError(CheckpointErrc::truncated, "checkpoint size does not match its header: " + path);
  }
  const char* header = bytes.data() + kPrefix;
  const char* payload = header + header_len;
  if (crc_of(header, header_len, payload, payload_len) != crc) {
    throw CheckpointError(CheckpointErrc::integrity, "checkpoint checksum mismatch: " + path);
  }
  Container c;
  std::istringstream hs(std::string(header, header_len));
  std::string section, cfg_text, meta_text;
  for (std::string line; std::getline(hs, line);) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line;
      continue;
    }
    if (section == "[config]") {
      cfg_text += line + '\n';
    } else if (section == "[meta]") {
      meta_text += line + '\n';
    } else if (section == "[tensors]") {
      std::istringstream ls(line);
      TensorEntry e;
      int ndim = 0;
      if (!(ls >> e.role >> e.name >> e.offset >> ndim) || ndim < 0) {
        throw CheckpointError(CheckpointErrc::integrity, "malformed tensor entry in " + path);
      }
      e.shape.resize(static_cast<std::size_t>(ndim));
      for (auto& d : e.shape) {
        if (!(ls >> d) || d < 0) throw CheckpointError(CheckpointErrc::integrity, "malformed tensor shape in " + path);
      }
      if (e.offset + static_cast<std::uint64_t>(numel(e.shape)) > payload_len / 4) {
        throw CheckpointError(CheckpointErrc::truncated, "tensor " + e.name + " extends past the payload");
      }
      c.tensors.push_back(std::move(e));
    } else {
      throw CheckpointError(CheckpointErrc::integrity, "unexpected header content in " + path);
    }
  }
  try {
    c.config = KeyValueConfig::parse(cfg_text, path + "[config]");
    c.meta = KeyValueConfig::parse(meta_text, path + "[meta]");
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrc::integrity, e.what());
  }
  c.payload.resize(payload_len / 4);
  std::memcpy(c.payload.data(), payload, payload_len);
  return c;
}

ModelConfig config_of(const Container& c, const std::string& path) {
  try {
    return ModelConfig::from_kv(c.config);
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrc::config_mismatch, path + ": embedded config invalid: " + e.what());
  }
}

void fill(const Container& c, Detector<float>& model, CheckpointInfo* info, const std::string& path) {
  std::map<std::pair<std::string, std::string>, const TensorEntry*> index;
  for (const auto& e : c.tensors) index[{e.role, e.name}] = &e;
  auto find = [&](const std::string& role, const std::string& name, const Shape& shape) -> const float* {
    auto it = index.find({role, name});
    if (it == index.end()) {
      throw CheckpointError(CheckpointErrc::missing_tensor, path + ": missing " + role + " '" + name + "'");
    }
    if (it->second->shape != shape) {
      throw CheckpointError(CheckpointErrc::shape_mismatch, path + ": " + name + " has shape " +
                                                                to_string(it->second->shape) + ", model expects " +
                                                                to_string(shape));
    }
    return c.payload.data() + it->second->offset;
  };
  auto ps = model.parameters();
  for (auto& p : ps.params) {
    const float* src = find("param", p.name, p.tensor.shape());
    auto dst = p.tensor.mutable_data();
    std::copy(src, src + dst.size(), dst.begin());
  }
  for (auto& b : ps.buffers) {
    const float* src = find("buffer", b.name, {static_cast<std::int64_t>(b.data->size())});
    std::copy(src, src + b.data->size(), b.data->begin());
  }
  if (info) {
    info->config = model.config();
    info->meta = c.meta;
    info->momentum.clear();
    bool any = false;
    for (const auto& e : c.tensors) any = any || e.role == "momentum";
    if (any) {
      for (auto& p : ps.params) {
        const float* src = find("momentum", p.name, p.tensor.shape());
        info->momentum.emplace_back(src, src + p.tensor.numel());
      }
    }
  }
}

}  // namespace

void save_checkpoint(const std::string& path, Detector<float>& model, const KeyValueConfig& meta,
                     const std::vector<std::vector<float>>* momentum) {
  auto ps = model.parameters();
  if (momentum && momentum->size() != ps.params.size()) {
    throw CheckpointError(CheckpointErrc::shape_mismatch, "optimizer state does not match the parameter list");
  }
  std::string header = "[config]\n" + model.config().to_kv().to_string() + "[meta]\n" + meta.to_string() +
                       "[tensors]\n";
  std::vector<float> payload;
  auto add = [&](const std::string& role, const std::string& name, const Shape& shape, const float* data) {
    std::ostringstream os;
    os << role << ' ' << name << ' ' << payload.size() << ' ' << shape.size();
    for (auto d : shape) os << ' ' << d;
    header += os.str() + '\n';
    payload.insert(payload.end(), data, data + numel(shape));
  };
  for (auto& p : ps.params) add("param", p.name, p.tensor.shape(), p.tensor.data().data());
  for (auto& b : ps.buffers) add("buffer", b.name, {static_cast<std::int64_t>(b.data->size())}, b.data->data());
  if (momentum) {
    for (std::size_t i = 0; i < ps.params.size(); ++i) {
      if (static_cast<std::int64_t>((*momentum)[i].size()) != ps.params[i].tensor.numel()) {
        throw CheckpointError(CheckpointErrc::shape_mismatch, "optimizer state size mismatch for " + ps.params[i].name);
      }
      add("momentum", ps.params[i].name, ps.params[i].tensor.shape(), (*momentum)[i].data());
    }
  }
  const char* pbytes = reinterpret_cast<const char*>(payload.data());
  const std::size_t plen = payload.size() * sizeof(float);
  std::string out(kMagic, 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, header.size());
  put<std::uint64_t>(out, plen);
  put<std::uint32_t>(out, crc_of(header.data(), header.size(), pbytes, plen));
  out += header;
  out.append(pbytes, plen);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointErrc::io, "cannot write checkpoint " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(CheckpointErrc::io, "short write to checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw CheckpointError(CheckpointErrc::io, "cannot move checkpoint into place: " + path);
  }
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
  const Container c = read_container(path);
  CheckpointInfo info;
  info.config = config_of(c, path);
  info.meta = c.meta;
  return info;
}

std::unique_ptr<Detector<float>> load_checkpoint(const std::string& path, CheckpointInfo* info) {
  const Container c = read_container(path);
  auto model = std::make_unique<Detector<float>>(config_of(c, path));
  fill(c, *model, info, path);
  return model;
}

void load_weights(const std::string& path, Detector<float>& model, CheckpointInfo* info) {
  const Container c = read_container(path);
  const ModelConfig cfg = config_of(c, path);
  if (!(cfg == model.config())) {
    std::string detail;
    const auto want = model.config().to_kv();
    const auto have = cfg.to_kv();
    for (const auto& [k, v] : have.entries()) {
      if (want.get(k) != v) detail += " " + k + " (checkpoint " + v + ", model " + want.get(k) + ")";
    }
    throw CheckpointError(CheckpointErrc::config_mismatch, path + ": config differs:" + detail);
  }
  fill(c, model, info, path);
}

}  // namespace hydet
