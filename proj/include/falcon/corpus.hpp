#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "falcon/common.hpp"
#include "falcon/model.hpp"
#include "falcon/rng.hpp"

namespace falcon {

// Byte-level tokenization: one token per byte, trivially reversible.
TokenSeq tokenize(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> detokenize(const TokenSeq& tokens);

struct WindowSplit {
  std::vector<int64_t> train;  // window start offsets
  std::vector<int64_t> val;
};

struct Corpus {
  std::string source_path;
  std::vector<uint8_t> bytes;
  Scalar split_ratio = 0.9;
  uint64_t seed = 0;

  TokenSeq window(int64_t start, int64_t len) const;

  // Non-overlapping windows of `window_len` tokens, shuffled by the corpus
  // seed and partitioned by split_ratio. Deterministic for a given seed.
  WindowSplit split_windows(int64_t window_len) const;
};

Corpus ingest_corpus(const std::string& path, Scalar split_ratio, uint64_t seed);
Corpus corpus_from_bytes(std::vector<uint8_t> bytes, Scalar split_ratio,
                         uint64_t seed);

}  // namespace falcon
