#include "falcon/corpus.hpp"

#include <fstream>

namespace falcon {

TokenSeq tokenize(const std::vector<uint8_t>& bytes) {
  TokenSeq out(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<TokenId>(bytes[i]);
  return out;
}

std::vector<uint8_t> detokenize(const TokenSeq& tokens) {
  std::vector<uint8_t> out(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] > 255) {
      raise(ErrorKind::Vocabulary,
            "token " + std::to_string(tokens[i]) + " is not a byte");
    }
    out[i] = static_cast<uint8_t>(tokens[i]);
  }
  return out;
}

TokenSeq Corpus::window(int64_t start, int64_t len) const {
  if (start < 0 || len < 1 ||
      start + len > static_cast<int64_t>(bytes.size())) {
    raise(ErrorKind::Dimension, "corpus window out of range");
  }
  TokenSeq out(static_cast<size_t>(len));
  for (int64_t i = 0; i < len; ++i) {
    out[i] = static_cast<TokenId>(bytes[static_cast<size_t>(start + i)]);
  }
  return out;
}

WindowSplit Corpus::split_windows(int64_t window_len) const {
  if (window_len < 1) raise(ErrorKind::Domain, "window_len must be positive");
  const int64_t n = static_cast<int64_t>(bytes.size()) / window_len;
  if (n == 0) {
    raise(ErrorKind::Validation, "corpus smaller than one window of " +
                                     std::to_string(window_len) + " bytes");
  }
  std::vector<int64_t> starts(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) starts[i] = i * window_len;
  Rng rng(seed ^ 0x5eedc0de);
  for (int64_t i = n - 1; i > 0; --i) {
    int64_t j = static_cast<int64_t>(rng.next_index(static_cast<uint64_t>(i + 1)));
    std::swap(starts[i], starts[j]);
  }
  int64_t n_train = static_cast<int64_t>(split_ratio * static_cast<Scalar>(n));
  n_train = std::max<int64_t>(1, std::min(n, n_train));
  WindowSplit split;
  split.train.assign(starts.begin(), starts.begin() + n_train);
  split.val.assign(starts.begin() + n_train, starts.end());
  return split;
}

Corpus corpus_from_bytes(std::vector<uint8_t> bytes, Scalar split_ratio,
                         uint64_t seed) {
  if (bytes.empty()) raise(ErrorKind::Validation, "corpus is empty");
  if (split_ratio <= 0.0 || split_ratio > 1.0) {
    raise(ErrorKind::Validation, "split_ratio must lie in (0,1]");
  }
  Corpus c;
  c.source_path = "<memory>";
  c.bytes = std::move(bytes);
  c.split_ratio = split_ratio;
  c.seed = seed;
  return c;
}

Corpus ingest_corpus(const std::string& path, Scalar split_ratio, uint64_t seed) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise(ErrorKind::Io, "cannot open corpus '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                             std::istreambuf_iterator<char>());
  if (bytes.empty()) {
    raise(ErrorKind::Validation, "corpus '" + path + "' is empty");
  }
  Corpus c = corpus_from_bytes(std::move(bytes), split_ratio, seed);
  c.source_path = path;
  return c;
}

}  // namespace falcon
