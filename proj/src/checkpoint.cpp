#include "sdvlm/checkpoint.hpp"

#include "sdvlm/rng.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sdvlm {

namespace {

constexpr char kMagic[4] = {'S', 'D', 'V', 'C'};

template <typename T>
void put(std::vector<unsigned char>& buf, const T& v) {
  const auto* p = reinterpret_cast<const unsigned char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

void put_bytes(std::vector<unsigned char>& buf, const void* p, size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  buf.insert(buf.end(), b, b + n);
}

struct Reader {
  const unsigned char* p;
  size_t left;
  const std::string& path;

  template <typename T>
  T get() {
    if (left < sizeof(T)) throw std::runtime_error(path + ": truncated checkpoint");
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    left -= sizeof(T);
    return v;
  }

  void get_bytes(void* dst, size_t n) {
    if (left < n) throw std::runtime_error(path + ": truncated checkpoint");
    std::memcpy(dst, p, n);
    p += n;
    left -= n;
  }
};

}  // namespace

NamedTensor& Checkpoint::add(std::string name, Dims dims, std::vector<double> data) {
  if (dims.numel() != data.size())
    throw std::invalid_argument("checkpoint: tensor '" + name + "' " + dims.str() +
                                " does not hold " + std::to_string(data.size()) + " values");
  tensors.push_back(NamedTensor{std::move(name), std::move(dims), std::move(data)});
  return tensors.back();
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const NamedTensor& Checkpoint::require(const std::string& name) const {
  const NamedTensor* t = find(name);
  if (!t) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
  return *t;
}

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ck) {
  std::vector<unsigned char> buf;
  put(buf, ck.version);
  put(buf, uint64_t(ck.meta.size()));
  put_bytes(buf, ck.meta.data(), ck.meta.size());
  put(buf, uint64_t(ck.tensors.size()));
  for (const NamedTensor& t : ck.tensors) {
    put(buf, uint64_t(t.name.size()));
    put_bytes(buf, t.name.data(), t.name.size());
    put(buf, uint32_t(t.dims.rank()));
    for (int d : t.dims.d) put(buf, int32_t(d));
    put(buf, uint64_t(t.data.size()));
    put_bytes(buf, t.data.data(), t.data.size() * sizeof(double));
  }
  return buf;
}

uint64_t checkpoint_checksum(const Checkpoint& ck) {
  auto buf = serialize_checkpoint(ck);
  return fnv1a64(buf.data(), buf.size());
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  auto payload = serialize_checkpoint(ck);
  uint64_t sum = fnv1a64(payload.data(), payload.size());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f.write(kMagic, 4);
  f.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size()));
  f.write(reinterpret_cast<const char*>(&sum), sizeof(sum));
  if (!f) throw std::runtime_error(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 4 + sizeof(uint64_t) || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw std::runtime_error(path + ": not a checkpoint file");
  size_t payload_len = bytes.size() - 4 - sizeof(uint64_t);
  const unsigned char* payload = bytes.data() + 4;
  uint64_t stored;
  std::memcpy(&stored, bytes.data() + 4 + payload_len, sizeof(stored));
  if (fnv1a64(payload, payload_len) != stored)
    throw std::runtime_error(path + ": checksum mismatch (corrupt checkpoint)");

  Reader r{payload, payload_len, path};
  Checkpoint ck;
  ck.version = r.get<uint32_t>();
  if (ck.version != Checkpoint::kVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(ck.version));
  uint64_t meta_len = r.get<uint64_t>();
  ck.meta.resize(meta_len);
  r.get_bytes(ck.meta.data(), meta_len);
  uint64_t n = r.get<uint64_t>();
  for (uint64_t i = 0; i < n; ++i) {
    NamedTensor t;
    uint64_t name_len = r.get<uint64_t>();
    t.name.resize(name_len);
    r.get_bytes(t.name.data(), name_len);
    uint32_t rank = r.get<uint32_t>();
    t.dims.d.resize(rank);
    for (uint32_t k = 0; k < rank; ++k) t.dims.d[k] = r.get<int32_t>();
    uint64_t numel = r.get<uint64_t>();
    if (numel != t.dims.numel())
      throw std::runtime_error(path + ": tensor '" + t.name + "' size mismatch");
    t.data.resize(numel);
    r.get_bytes(t.data.data(), numel * sizeof(double));
    ck.tensors.push_back(std::move(t));
  }
  if (r.left != 0) throw std::runtime_error(path + ": trailing bytes in checkpoint");
  return ck;
}

}  // namespace sdvlm
