#pragma once

#include "sdvlm/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sdvlm {

struct NamedTensor {
  std::string name;
  Dims dims;
  std::vector<double> data;
};

// Single-file model container: named f64 tensors plus a JSON meta blob
// (config, vocabulary, provenance of the training stage). Round-trips
// bitwise; load verifies magic, version and content checksum.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;
  uint32_t version = kVersion;
  std::string meta;
  std::vector<NamedTensor> tensors;

  NamedTensor& add(std::string name, Dims dims, std::vector<double> data);
  const NamedTensor* find(const std::string& name) const;  // nullptr when absent
  const NamedTensor& require(const std::string& name) const;  // throws when absent
};

// Canonical byte serialization (also what save() writes after the header).
std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ck);
// FNV-1a over the serialized bytes; stable witness that weights are untouched.
uint64_t checkpoint_checksum(const Checkpoint& ck);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sdvlm
