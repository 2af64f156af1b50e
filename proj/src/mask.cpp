#include "falcon/mask.hpp"

namespace falcon {

RelaxedCausalMask build_relaxed_mask(int64_t seq_len, int64_t k) {
  if (seq_len < 1) raise(ErrorKind::Domain, "mask needs seq_len >= 1");
  if (k < 1) raise(ErrorKind::Domain, "mask needs k >= 1");
  RelaxedCausalMask m;
  m.size = seq_len;
  m.k = k;
  m.bits = BoolMatrix(seq_len);
  for (int64_t i = 0; i < seq_len; ++i) {
    for (int64_t j = 0; j < seq_len; ++j) {
      m.bits.set(i, j, (j / k) <= (i / k));
    }
  }
  return m;
}

BoolMatrix strict_causal_mask(int64_t n) {
  BoolMatrix m(n);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

}  // namespace falcon
