#include "falcon/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace falcon {

namespace {
std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}
}  // namespace

KeyValueConfig KeyValueConfig::parse_text(const std::string& text) {
  KeyValueConfig kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      raise(ErrorKind::Parse,
            "config line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      raise(ErrorKind::Parse, "config line " + std::to_string(lineno) + ": empty key");
    }
    kv.set(key, value);
  }
  return kv;
}

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) raise(ErrorKind::Io, "cannot open config '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_text(buf.str());
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

bool KeyValueConfig::has(const std::string& key) const {
  return find(key).has_value();
}

std::optional<std::string> KeyValueConfig::find(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string KeyValueConfig::get_str(const std::string& key,
                                    const std::string& fallback) const {
  auto v = find(key);
  return v ? *v : fallback;
}

int64_t KeyValueConfig::get_int(const std::string& key, int64_t fallback) const {
  auto v = find(key);
  if (!v) return fallback;
  try {
    size_t pos = 0;
    int64_t out = std::stoll(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    raise(ErrorKind::Parse, "config key '" + key + "': '" + *v + "' is not an integer");
  }
}

Scalar KeyValueConfig::get_scalar(const std::string& key, Scalar fallback) const {
  auto v = find(key);
  if (!v) return fallback;
  try {
    size_t pos = 0;
    Scalar out = std::stod(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    raise(ErrorKind::Parse, "config key '" + key + "': '" + *v + "' is not a number");
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto v = find(key);
  if (!v) return fallback;
  std::string s = *v;
  std::transform(s.begin(), s.end(), s.begin(), ::tolower);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  raise(ErrorKind::Parse, "config key '" + key + "': '" + *v + "' is not a boolean");
}

void KeyValueConfig::merge_from(const KeyValueConfig& overlay) {
  for (const auto& [k, v] : overlay.entries_) set(k, v);
}

std::string KeyValueConfig::to_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
  return os.str();
}

void KeyValueConfig::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) raise(ErrorKind::Io, "cannot write config '" + path + "'");
  os << to_text();
}

void ModelConfig::validate() const {
  if (vocab_size < 2) raise(ErrorKind::Validation, "vocab_size must be >= 2");
  if (hidden_dim < 1 || n_layers < 1 || context_len < 1 || drafter_mlp_dim < 1) {
    raise(ErrorKind::Validation, "model dims must be positive");
  }
  if (k < 1) raise(ErrorKind::Validation, "k must be >= 1");
  if (n_heads < 1 || hidden_dim % n_heads != 0) {
    raise(ErrorKind::Validation,
          "hidden_dim " + std::to_string(hidden_dim) +
              " must be divisible by n_heads " + std::to_string(n_heads));
  }
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv) {
  ModelConfig def;
  ModelConfig c;
  c.vocab_size = kv.get_int("vocab_size", def.vocab_size);
  c.hidden_dim = kv.get_int("hidden_dim", def.hidden_dim);
  c.n_layers = kv.get_int("n_layers", def.n_layers);
  c.n_heads = kv.get_int("n_heads", def.n_heads);
  c.context_len = kv.get_int("context_len", def.context_len);
  c.k = kv.get_int("k", def.k);
  c.drafter_mlp_dim = kv.get_int("drafter_mlp_dim", def.drafter_mlp_dim);
  c.validate();
  return c;
}

KeyValueConfig ModelConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("vocab_size", std::to_string(vocab_size));
  kv.set("hidden_dim", std::to_string(hidden_dim));
  kv.set("n_layers", std::to_string(n_layers));
  kv.set("n_heads", std::to_string(n_heads));
  kv.set("context_len", std::to_string(context_len));
  kv.set("k", std::to_string(k));
  kv.set("drafter_mlp_dim", std::to_string(drafter_mlp_dim));
  return kv;
}

TargetTrainConfig TargetTrainConfig::from_kv(const KeyValueConfig& kv) {
  TargetTrainConfig def;
  TargetTrainConfig c;
  c.epochs = kv.get_int("epochs", def.epochs);
  c.batch_size = kv.get_int("batch_size", def.batch_size);
  c.seq_len = kv.get_int("seq_len", def.seq_len);
  c.lr = kv.get_scalar("lr", def.lr);
  c.beta1 = kv.get_scalar("beta1", def.beta1);
  c.beta2 = kv.get_scalar("beta2", def.beta2);
  c.weight_decay = kv.get_scalar("weight_decay", def.weight_decay);
  c.split_ratio = kv.get_scalar("split_ratio", def.split_ratio);
  c.max_steps_per_epoch = kv.get_int("max_steps_per_epoch", def.max_steps_per_epoch);
  if (c.epochs < 1 || c.batch_size < 1 || c.seq_len < 2) {
    raise(ErrorKind::Validation, "training config: epochs/batch_size/seq_len too small");
  }
  return c;
}

void CsgdConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) {
    raise(ErrorKind::Validation, "alpha must lie in [0,1]");
  }
  if (total_epochs < 1) raise(ErrorKind::Validation, "total_epochs must be >= 1");
  if (noise_halfwidth < 0.0) {
    raise(ErrorKind::Validation, "noise_halfwidth must be >= 0");
  }
  if (batch_size < 1 || seq_len < 2) {
    raise(ErrorKind::Validation, "batch_size/seq_len too small");
  }
}

CsgdConfig CsgdConfig::from_kv(const KeyValueConfig& kv) {
  CsgdConfig def;
  CsgdConfig c;
  c.alpha = kv.get_scalar("alpha", def.alpha);
  c.omega_dist = kv.get_scalar("omega_dist", def.omega_dist);
  c.lambda_scale = kv.get_scalar("lambda_scale", def.lambda_scale);
  c.total_epochs = kv.get_int("epochs", def.total_epochs);
  c.noise_halfwidth = kv.get_scalar("noise_halfwidth", def.noise_halfwidth);
  c.lr = kv.get_scalar("lr", def.lr);
  c.beta1 = kv.get_scalar("beta1", def.beta1);
  c.beta2 = kv.get_scalar("beta2", def.beta2);
  c.weight_decay = kv.get_scalar("weight_decay", def.weight_decay);
  c.batch_size = kv.get_int("batch_size", def.batch_size);
  c.seq_len = kv.get_int("seq_len", def.seq_len);
  c.split_ratio = kv.get_scalar("split_ratio", def.split_ratio);
  c.max_steps_per_epoch = kv.get_int("max_steps_per_epoch", def.max_steps_per_epoch);
  c.glancing = kv.get_bool("glancing", def.glancing);
  c.validate();
  return c;
}

}  // namespace falcon
