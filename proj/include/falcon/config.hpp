#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "falcon/common.hpp"

namespace falcon {

// Plain-text "key = value" store. Lines starting with '#' and blank lines
// are ignored. Keeps insertion order for stable serialization.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_text(const std::string& text);
  static KeyValueConfig parse_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  Scalar get_scalar(const std::string& key, Scalar fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Later layers win: defaults < file < flags.
  void merge_from(const KeyValueConfig& overlay);

  std::string to_text() const;
  void save(const std::string& path) const;

 private:
  std::optional<std::string> find(const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct ModelConfig {
  int64_t vocab_size = 256;
  int64_t hidden_dim = 128;
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t context_len = 256;
  int64_t k = 2;  // tokens drafted per forward pass
  int64_t drafter_mlp_dim = 512;

  void validate() const;
  static ModelConfig from_kv(const KeyValueConfig& kv);
  KeyValueConfig to_kv() const;
};

struct TargetTrainConfig {
  int64_t epochs = 4;
  int64_t batch_size = 8;
  int64_t seq_len = 64;
  Scalar lr = 1e-3;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.95;
  Scalar weight_decay = 0.0;
  Scalar split_ratio = 0.9;
  int64_t max_steps_per_epoch = 0;  // 0 = full pass

  static TargetTrainConfig from_kv(const KeyValueConfig& kv);
};

struct CsgdConfig {
  Scalar alpha = 0.9;        // soft/hard mix inside the distillation loss
  Scalar omega_dist = 0.1;   // distillation weight in the total loss
  Scalar lambda_scale = 0.4;
  int64_t total_epochs = 20;
  Scalar noise_halfwidth = 0.1;
  Scalar lr = 1e-3;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.95;
  Scalar weight_decay = 0.0;
  int64_t batch_size = 8;
  int64_t seq_len = 64;
  Scalar split_ratio = 0.9;
  int64_t max_steps_per_epoch = 0;
  bool glancing = true;  // false = replacement plan always empty (ablation)

  void validate() const;
  static CsgdConfig from_kv(const KeyValueConfig& kv);
};

}  // namespace falcon
