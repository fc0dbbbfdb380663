#include "gem/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <limits>
#include <map>
#include <set>

#include "gem/binary_io.hpp"

namespace gem::ckpt {

namespace {

constexpr size_t kSha1Bytes = 20;

void put_header(std::vector<uint8_t>& buf, const std::string& name, DType dtype, const Shape& dims) {
  if (name.empty() || name.size() > std::numeric_limits<uint16_t>::max()) throw Error("checkpoint: bad record name");
  if (dims.size() > 255) throw Error("checkpoint: rank too large for '" + name + "'");
  io::put(buf, static_cast<uint16_t>(name.size()));
  io::put_bytes(buf, name.data(), name.size());
  io::put(buf, static_cast<uint8_t>(dtype));
  io::put(buf, static_cast<uint8_t>(dims.size()));
  for (int64_t d : dims) {
    if (d < 0 || d > std::numeric_limits<uint32_t>::max()) throw Error("checkpoint: dimension out of range");
    io::put(buf, static_cast<uint32_t>(d));
  }
}

bool reserved(const std::string& name) { return name.rfind("meta.", 0) == 0; }

std::vector<uint8_t> sha1_raw(const void* data, size_t n) {
  std::vector<uint8_t> md(EVP_MAX_MD_SIZE);
  unsigned int len = 0;
  if (EVP_Digest(data, n, md.data(), &len, EVP_sha1(), nullptr) != 1) throw Error("sha1 digest failed");
  md.resize(len);
  return md;
}

}  // namespace

std::string sha1_hex(const void* data, size_t n) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (uint8_t b : sha1_raw(data, n)) {
    out += hex[b >> 4];
    out += hex[b & 15];
  }
  return out;
}

std::string sha1_hex(const std::vector<uint8_t>& bytes) { return sha1_hex(bytes.data(), bytes.size()); }

std::string sha1_file(const std::filesystem::path& path) { return sha1_hex(io::read_file(path)); }

std::vector<uint8_t> serialize(const Checkpoint& ck) {
  std::vector<uint8_t> buf;
  io::put_bytes(buf, kMagic, sizeof(kMagic));
  std::set<std::string> names;
  for (const auto& [name, t] : ck.tensors) {
    if (reserved(name)) throw Error("checkpoint: tensor name '" + name + "' uses the reserved meta. prefix");
    if (!names.insert(name).second) throw Error("checkpoint: duplicate tensor '" + name + "'");
    put_header(buf, name, DType::kF64, t.shape());
    for (double v : t.values()) io::put(buf, v);
  }
  put_header(buf, kConfigRecord, DType::kU8, {static_cast<int64_t>(ck.config.size())});
  io::put_bytes(buf, ck.config.data(), ck.config.size());
  put_header(buf, kStepRecord, DType::kI64, {1});
  io::put(buf, ck.step);
  const auto digest = sha1_raw(buf.data(), buf.size());
  put_header(buf, kHashRecord, DType::kU8, {static_cast<int64_t>(kSha1Bytes)});
  io::put_bytes(buf, digest.data(), digest.size());
  return buf;
}

Checkpoint deserialize(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw Error("checkpoint: missing GEMCKPT1 magic");
  io::Reader in(bytes);
  in.get_string(sizeof(kMagic));
  Checkpoint ck;
  std::set<std::string> names;
  bool have_config = false, have_step = false, have_hash = false;
  while (!in.done()) {
    if (have_hash) throw Error("checkpoint: data after the hash record");
    const size_t record_start = bytes.size() - in.remaining();
    const auto name = in.get_string(in.get<uint16_t>());
    const auto dtype = static_cast<DType>(in.get<uint8_t>());
    const auto rank = in.get<uint8_t>();
    Shape dims;
    for (int i = 0; i < rank; ++i) dims.push_back(in.get<uint32_t>());
    const int64_t n = shape_numel(dims);
    if (!names.insert(name).second) throw Error("checkpoint: duplicate record '" + name + "'");

    if (name == kConfigRecord) {
      if (dtype != DType::kU8 || rank != 1) throw Error("checkpoint: malformed config record");
      ck.config = in.get_string(static_cast<size_t>(n));
      have_config = true;
    } else if (name == kStepRecord) {
      if (dtype != DType::kI64 || n != 1) throw Error("checkpoint: malformed step record");
      ck.step = in.get<int64_t>();
      have_step = true;
    } else if (name == kHashRecord) {
      if (dtype != DType::kU8 || n != static_cast<int64_t>(kSha1Bytes)) throw Error("checkpoint: malformed hash record");
      const auto stored = in.get_string(kSha1Bytes);
      const auto actual = sha1_raw(bytes.data(), record_start);
      if (std::memcmp(stored.data(), actual.data(), kSha1Bytes) != 0) throw Error("checkpoint: content hash mismatch");
      have_hash = true;
    } else {
      if (reserved(name)) throw Error("checkpoint: unknown reserved record '" + name + "'");
      if (dtype != DType::kF64) throw Error("checkpoint: tensor '" + name + "' is not f64");
      if (static_cast<size_t>(n) * sizeof(double) > in.remaining()) throw Error("truncated binary data");
      std::vector<double> data(static_cast<size_t>(n));
      for (auto& v : data) v = in.get<double>();
      ck.tensors.emplace_back(name, Tensor(dims, std::move(data)));
    }
  }
  if (!have_config || !have_step || !have_hash) throw Error("checkpoint: missing meta records");
  return ck;
}

void save(const std::filesystem::path& path, const Checkpoint& ck) { io::write_file(path, serialize(ck)); }

Checkpoint load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("missing checkpoint: " + path.string());
  return deserialize(io::read_file(path));
}

Checkpoint from_params(const nn::ParamList& params, const std::string& config, int64_t step) {
  Checkpoint ck;
  for (const auto& p : params) ck.tensors.emplace_back(p.name, p.var.value());
  ck.config = config;
  ck.step = step;
  return ck;
}

void restore(const Checkpoint& ck, nn::ParamList& params) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ck.tensors) by_name[name] = &t;
  if (by_name.size() != params.size())
    throw Error("checkpoint: holds " + std::to_string(by_name.size()) + " tensors, model expects " +
                std::to_string(params.size()));
  for (auto& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw Error("checkpoint: missing tensor '" + p.name + "'");
    if (it->second->shape() != p.var.shape())
      throw Error("checkpoint: shape mismatch for '" + p.name + "': " + shape_str(it->second->shape()) + " vs " +
                  shape_str(p.var.shape()));
    p.var.mutable_value() = *it->second;
  }
}

}  // namespace gem::ckpt
