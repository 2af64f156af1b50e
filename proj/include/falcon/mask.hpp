#pragma once

#include <cstdint>
#include <vector>

#include "falcon/common.hpp"

namespace falcon {

// Square boolean attention-visibility matrix; true = row may attend column.
class BoolMatrix {
 public:
  BoolMatrix() : n_(0) {}
  explicit BoolMatrix(int64_t n, bool fill = false)
      : n_(n), bits_(static_cast<size_t>(n * n), fill ? 1 : 0) {}

  int64_t size() const { return n_; }
  bool get(int64_t i, int64_t j) const {
    return bits_[static_cast<size_t>(i * n_ + j)] != 0;
  }
  void set(int64_t i, int64_t j, bool v) {
    bits_[static_cast<size_t>(i * n_ + j)] = v ? 1 : 0;
  }

  bool operator==(const BoolMatrix& o) const {
    return n_ == o.n_ && bits_ == o.bits_;
  }
  bool operator!=(const BoolMatrix& o) const { return !(*this == o); }

 private:
  int64_t n_;
  std::vector<uint8_t> bits_;
};

// Visibility rule for k-token blocks: position i may attend j iff j's block
// does not lie in the future, block(x) = floor(x / k). k = 1 degenerates to
// the strict lower-triangular causal mask.
struct RelaxedCausalMask {
  int64_t size = 0;
  int64_t k = 1;
  BoolMatrix bits;

  bool allowed(int64_t i, int64_t j) const { return bits.get(i, j); }
};

RelaxedCausalMask build_relaxed_mask(int64_t seq_len, int64_t k);

// Strict causal: i attends j iff j <= i.
BoolMatrix strict_causal_mask(int64_t n);

}  // namespace falcon
