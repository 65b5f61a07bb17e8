#include "mtl/checkpoint.h"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mtl/digest.h"
#include "mtl/error.h"

namespace mtl {

namespace {

constexpr char kMagic[8] = {'M', 'T', 'L', 'C', 'K', 'P', 'T', '1'};

using json = nlohmann::ordered_json;

std::vector<unsigned char> f32_bytes(const Tensor& t) {
  std::vector<unsigned char> out(t.data.size() * 4);
  for (size_t i = 0; i < t.data.size(); ++i) {
    float f = static_cast<float>(t.data[i]);
    uint32_t u;
    std::memcpy(&u, &f, 4);
    out[i * 4 + 0] = static_cast<unsigned char>(u & 0xff);
    out[i * 4 + 1] = static_cast<unsigned char>((u >> 8) & 0xff);
    out[i * 4 + 2] = static_cast<unsigned char>((u >> 16) & 0xff);
    out[i * 4 + 3] = static_cast<unsigned char>((u >> 24) & 0xff);
  }
  return out;
}

}  // namespace

void atomic_write_file(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    check_config(static_cast<bool>(out), "cannot open for writing: " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    check_config(static_cast<bool>(out), "write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check_config(static_cast<bool>(in), "cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void save_checkpoint(const std::map<std::string, Tensor>& tensors, const CheckpointMeta& meta,
                     const std::string& path) {
  json manifest;
  manifest["format"] = "mtl-checkpoint-v1";
  manifest["stage"] = meta.stage;
  manifest["config_digest"] = meta.config_digest;
  manifest["frozen_digest"] = meta.frozen_digest;
  json tlist = json::array();
  std::string payload;
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    auto bytes = f32_bytes(t);
    json entry;
    entry["name"] = name;
    entry["dtype"] = "f32";
    entry["shape"] = t.shape;
    entry["offset"] = offset;
    entry["digest"] = bytes_digest(bytes);
    tlist.push_back(entry);
    payload.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    offset += bytes.size();
  }
  manifest["tensors"] = tlist;
  std::string mstr = manifest.dump();

  std::string file;
  file.append(kMagic, 8);
  uint64_t mlen = mstr.size();
  for (int i = 0; i < 8; ++i) file.push_back(static_cast<char>((mlen >> (8 * i)) & 0xff));
  file += mstr;
  file += payload;
  atomic_write_file(path, file);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::string file = read_file(path);
  if (file.size() < 16 || std::memcmp(file.data(), kMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file: " + path);
  uint64_t mlen = 0;
  for (int i = 0; i < 8; ++i)
    mlen |= static_cast<uint64_t>(static_cast<unsigned char>(file[8 + static_cast<size_t>(i)]))
            << (8 * i);
  if (16 + mlen > file.size()) throw CheckpointError("truncated manifest: " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(file.substr(16, mlen));
  } catch (const std::exception& e) {
    throw CheckpointError("bad manifest in " + path + ": " + e.what());
  }
  const char* payload = file.data() + 16 + mlen;
  size_t payload_size = file.size() - 16 - mlen;

  LoadedCheckpoint out;
  out.meta.stage = manifest.value("stage", "");
  out.meta.config_digest = manifest.value("config_digest", "");
  out.meta.frozen_digest = manifest.value("frozen_digest", "");
  for (const auto& entry : manifest.at("tensors")) {
    std::string name = entry.at("name");
    std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
    uint64_t offset = entry.at("offset");
    std::string digest = entry.at("digest");
    int64_t numel = Tensor::numel_of(shape);
    uint64_t nbytes = static_cast<uint64_t>(numel) * 4;
    if (offset + nbytes > payload_size)
      throw CheckpointError("truncated payload for tensor '" + name + "' in " + path);
    std::vector<unsigned char> bytes(payload + offset, payload + offset + nbytes);
    if (bytes_digest(bytes) != digest)
      throw CheckpointError("digest mismatch for tensor '" + name + "' in " + path);
    Tensor t(shape);
    for (int64_t i = 0; i < numel; ++i) {
      uint32_t u = static_cast<uint32_t>(bytes[static_cast<size_t>(i) * 4 + 0]) |
                   (static_cast<uint32_t>(bytes[static_cast<size_t>(i) * 4 + 1]) << 8) |
                   (static_cast<uint32_t>(bytes[static_cast<size_t>(i) * 4 + 2]) << 16) |
                   (static_cast<uint32_t>(bytes[static_cast<size_t>(i) * 4 + 3]) << 24);
      float f;
      std::memcpy(&f, &u, 4);
      t.data[static_cast<size_t>(i)] = static_cast<double>(f);
    }
    out.tensors.emplace(name, std::move(t));
  }
  return out;
}

std::string LoadReport::summary() const {
  std::string s = "loaded " + std::to_string(loaded.size()) + " tensors";
  if (!fresh.empty()) {
    s += "; initialized fresh: ";
    for (size_t i = 0; i < fresh.size(); ++i) s += (i ? ", " : "") + fresh[i];
  }
  if (!unmatched.empty()) {
    s += "; unmatched in file: ";
    for (size_t i = 0; i < unmatched.size(); ++i) s += (i ? ", " : "") + unmatched[i];
  }
  return s;
}

LoadReport load_into(ParamStore& ps, const LoadedCheckpoint& ck) {
  LoadReport report;
  for (auto& [name, t] : ps.map()) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) {
      report.fresh.push_back(name);
      continue;
    }
    if (it->second.shape != t.shape)
      throw CheckpointError("shape mismatch for '" + name + "': file " +
                            it->second.shape_str() + " vs model " + t.shape_str());
    t.data = it->second.data;
    report.loaded.push_back(name);
  }
  for (const auto& [name, t] : ck.tensors)
    if (!ps.has(name)) report.unmatched.push_back(name);
  return report;
}

void save_params(const ParamStore& ps, const CheckpointMeta& meta, const std::string& path) {
  save_checkpoint(ps.map(), meta, path);
}

LoadReport load_params(ParamStore& ps, const std::string& path, CheckpointMeta* meta_out) {
  LoadedCheckpoint ck = load_checkpoint(path);
  if (meta_out) *meta_out = ck.meta;
  return load_into(ps, ck);
}

std::string subset_digest(const ParamStore& ps, const std::vector<std::string>& names) {
  std::vector<std::string> sorted = names;
  std::sort(sorted.begin(), sorted.end());
  uint64_t h = 1469598103934665603ULL;
  for (const std::string& n : sorted) {
    h = fnv1a64(n.data(), n.size(), h);
    const Tensor& t = ps.at(n);
    h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
  }
  return hex64(h);
}

}  // namespace mtl
