#pragma once

#include <map>
#include <string>
#include <vector>

#include "falcon/tensor.hpp"

namespace falcon {

// Little-endian binary tensor archive.
//
//   header:      magic "FLCN" | u32 version (=1) | u64 tensor count
//   per tensor:  u32 name length | name bytes | u32 rank | u64 dims[rank]
//                | f64 data[numel]
//
// Round-trips bit-exactly: doubles are stored raw.
struct Checkpoint {
  // insertion-ordered
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(const std::string& name, const Tensor& t);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace falcon
