#include "falcon/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace falcon {

namespace {

constexpr char kMagic[4] = {'F', 'L', 'C', 'N'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

void put_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

uint32_t take_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t take_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

double take_f64(std::istream& is) {
  uint64_t bits = take_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) {
  if (has(name)) {
    raise(ErrorKind::Validation, "checkpoint: duplicate tensor name '" + name + "'");
  }
  tensors.emplace_back(name, t);
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  raise(ErrorKind::Io, "checkpoint: missing tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) raise(ErrorKind::Io, "cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u64(os, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(t.rank()));
    for (size_t i = 0; i < t.rank(); ++i) {
      put_u64(os, static_cast<uint64_t>(t.dim(i)));
    }
    for (Scalar v : t.values()) put_f64(os, v);
  }
  if (!os) raise(ErrorKind::Io, "write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise(ErrorKind::Io, "cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    raise(ErrorKind::Io, "'" + path + "' is not a tensor archive");
  }
  uint32_t version = take_u32(is);
  if (version != kVersion) {
    raise(ErrorKind::Io, "unsupported archive version " + std::to_string(version));
  }
  uint64_t count = take_u64(is);
  Checkpoint ckpt;
  for (uint64_t t = 0; t < count; ++t) {
    uint32_t name_len = take_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = take_u32(is);
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<int64_t>(take_u64(is));
    }
    std::vector<Scalar> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = take_f64(is);
    if (!is) raise(ErrorKind::Io, "'" + path + "' is truncated");
    ckpt.add(name, Tensor::from(shape, std::move(data)));
  }
  return ckpt;
}

}  // namespace falcon
