#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gem/graph.hpp"

// GEMCKPT1 checkpoints: the magic, then records of
// [u16 name length, name, u8 dtype, u8 rank, u32 dims..., little-endian data].
// Tensors are f64; the config echo, step counter, and a SHA-1 of every
// preceding byte ride along as reserved records.
namespace gem::ckpt {

inline constexpr char kMagic[8] = {'G', 'E', 'M', 'C', 'K', 'P', 'T', '1'};

enum class DType : uint8_t { kF64 = 0, kU8 = 1, kI64 = 2 };

inline constexpr const char* kConfigRecord = "meta.config";
inline constexpr const char* kStepRecord = "meta.step";
inline constexpr const char* kHashRecord = "meta.sha1";

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;  // in file order
  std::string config;
  int64_t step = 0;
};

std::vector<uint8_t> serialize(const Checkpoint& ck);
// Throws on bad magic, truncation, duplicate names, or a hash mismatch.
Checkpoint deserialize(const std::vector<uint8_t>& bytes);

void save(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load(const std::filesystem::path& path);

Checkpoint from_params(const nn::ParamList& params, const std::string& config, int64_t step);
// Copies values by name; names and shapes must match exactly.
void restore(const Checkpoint& ck, nn::ParamList& params);

std::string sha1_hex(const void* data, size_t n);
std::string sha1_hex(const std::vector<uint8_t>& bytes);
std::string sha1_file(const std::filesystem::path& path);

}  // namespace gem::ckpt
