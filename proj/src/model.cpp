#include "falcon/model.hpp"

#include <cmath>
#include <cstring>

namespace falcon {

namespace {

// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
std::vector<Scalar> uniform_init(Rng& rng, int64_t fan_in, int64_t count) {
  Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(fan_in));
  std::vector<Scalar> v(static_cast<size_t>(count));
  for (auto& x : v) x = rng.next_uniform(-bound, bound);
  return v;
}

Tensor make_weight(GradientTape* tape, const Shape& shape,
                   std::vector<Scalar> init) {
  if (tape != nullptr) return tape->parameter(shape, std::move(init));
  return Tensor::from(shape, std::move(init));
}

Tensor attention_block(const Tensor& x, const Tensor& ln_g, const Tensor& ln_b,
                       const Tensor& w_qkv, const Tensor& b_qkv,
                       const Tensor& w_proj, const Tensor& b_proj,
                       int64_t n_heads, const BoolMatrix& mask) {
  const int64_t h = x.dim(1);
  Tensor norm = layer_norm(x, ln_g, ln_b);
  Tensor qkv = linear(norm, w_qkv, b_qkv);
  Tensor q = slice_cols(qkv, 0, h);
  Tensor k = slice_cols(qkv, h, h);
  Tensor v = slice_cols(qkv, 2 * h, h);
  Tensor attn = masked_attention(q, k, v, n_heads, mask);
  return add(x, linear(attn, w_proj, b_proj));
}

Tensor mlp_block(const Tensor& x, const Tensor& ln_g, const Tensor& ln_b,
                 const Tensor& w1, const Tensor& b1, const Tensor& w2,
                 const Tensor& b2) {
  Tensor norm = layer_norm(x, ln_g, ln_b);
  return add(x, linear(gelu(linear(norm, w1, b1)), w2, b2));
}

uint64_t fnv_mix(uint64_t h, const std::vector<Scalar>& data) {
  for (Scalar v : data) {
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xff;
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

}  // namespace

TargetModel::TargetModel(const ModelConfig& cfg, Rng& rng, GradientTape* tape)
    : cfg_(cfg) {
  cfg_.validate();
  const int64_t h = cfg_.hidden_dim;
  const int64_t v = cfg_.vocab_size;
  const int64_t mlp = 4 * h;
  tok_emb_ = make_weight(tape, {v, h}, uniform_init(rng, h, v * h));
  pos_emb_ = make_weight(tape, {cfg_.context_len, h},
                         uniform_init(rng, h, cfg_.context_len * h));
  for (int64_t l = 0; l < cfg_.n_layers; ++l) {
    Block b;
    b.ln1_g = make_weight(tape, {h}, std::vector<Scalar>(h, 1.0));
    b.ln1_b = make_weight(tape, {h}, std::vector<Scalar>(h, 0.0));
    b.w_qkv = make_weight(tape, {h, 3 * h}, uniform_init(rng, h, 3 * h * h));
    b.b_qkv = make_weight(tape, {3 * h}, std::vector<Scalar>(3 * h, 0.0));
    b.w_proj = make_weight(tape, {h, h}, uniform_init(rng, h, h * h));
    b.b_proj = make_weight(tape, {h}, std::vector<Scalar>(h, 0.0));
    b.ln2_g = make_weight(tape, {h}, std::vector<Scalar>(h, 1.0));
    b.ln2_b = make_weight(tape, {h}, std::vector<Scalar>(h, 0.0));
    b.w_mlp1 = make_weight(tape, {h, mlp}, uniform_init(rng, h, h * mlp));
    b.b_mlp1 = make_weight(tape, {mlp}, std::vector<Scalar>(mlp, 0.0));
    b.w_mlp2 = make_weight(tape, {mlp, h}, uniform_init(rng, mlp, mlp * h));
    b.b_mlp2 = make_weight(tape, {h}, std::vector<Scalar>(h, 0.0));
    blocks_.push_back(std::move(b));
  }
  final_ln_g_ = make_weight(tape, {h}, std::vector<Scalar>(h, 1.0));
  final_ln_b_ = make_weight(tape, {h}, std::vector<Scalar>(h, 0.0));
  head_w_ = make_weight(tape, {h, v}, uniform_init(rng, h, h * v));
}

TargetModel::TargetModel(const ModelConfig& cfg, const Checkpoint& ckpt)
    : cfg_(cfg) {
  cfg_.validate();
  tok_emb_ = ckpt.get("tok_emb");
  pos_emb_ = ckpt.get("pos_emb");
  for (int64_t l = 0; l < cfg_.n_layers; ++l) {
    std::string p = "blocks." + std::to_string(l) + ".";
    Block b;
    b.ln1_g = ckpt.get(p + "ln1.g");
    b.ln1_b = ckpt.get(p + "ln1.b");
    b.w_qkv = ckpt.get(p + "attn.w_qkv");
    b.b_qkv = ckpt.get(p + "attn.b_qkv");
    b.w_proj = ckpt.get(p + "attn.w_proj");
    b.b_proj = ckpt.get(p + "attn.b_proj");
    b.ln2_g = ckpt.get(p + "ln2.g");
    b.ln2_b = ckpt.get(p + "ln2.b");
    b.w_mlp1 = ckpt.get(p + "mlp.w1");
    b.b_mlp1 = ckpt.get(p + "mlp.b1");
    b.w_mlp2 = ckpt.get(p + "mlp.w2");
    b.b_mlp2 = ckpt.get(p + "mlp.b2");
    blocks_.push_back(std::move(b));
  }
  final_ln_g_ = ckpt.get("final_ln.g");
  final_ln_b_ = ckpt.get("final_ln.b");
  head_w_ = ckpt.get("head.w");
  if (tok_emb_.dim(0) != cfg_.vocab_size || tok_emb_.dim(1) != cfg_.hidden_dim) {
    raise(ErrorKind::Config, "checkpoint does not match model config");
  }
}

Checkpoint TargetModel::to_checkpoint() const {
  Checkpoint c;
  c.add("tok_emb", tok_emb_);
  c.add("pos_emb", pos_emb_);
  for (size_t l = 0; l < blocks_.size(); ++l) {
    std::string p = "blocks." + std::to_string(l) + ".";
    const Block& b = blocks_[l];
    c.add(p + "ln1.g", b.ln1_g);
    c.add(p + "ln1.b", b.ln1_b);
    c.add(p + "attn.w_qkv", b.w_qkv);
    c.add(p + "attn.b_qkv", b.b_qkv);
    c.add(p + "attn.w_proj", b.w_proj);
    c.add(p + "attn.b_proj", b.b_proj);
    c.add(p + "ln2.g", b.ln2_g);
    c.add(p + "ln2.b", b.ln2_b);
    c.add(p + "mlp.w1", b.w_mlp1);
    c.add(p + "mlp.b1", b.b_mlp1);
    c.add(p + "mlp.w2", b.w_mlp2);
    c.add(p + "mlp.b2", b.b_mlp2);
  }
  c.add("final_ln.g", final_ln_g_);
  c.add("final_ln.b", final_ln_b_);
  c.add("head.w", head_w_);
  return c;
}

void TargetModel::check_tokens(const TokenSeq& tokens) const {
  if (tokens.empty()) {
    raise(ErrorKind::Dimension, "token sequence must be nonempty");
  }
  if (static_cast<int64_t>(tokens.size()) > cfg_.context_len) {
    raise(ErrorKind::Domain, "context overflow: " + std::to_string(tokens.size()) +
                                 " tokens exceed context " +
                                 std::to_string(cfg_.context_len));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) {
      raise(ErrorKind::Vocabulary, "token id " + std::to_string(t) +
                                       " outside vocabulary of " +
                                       std::to_string(cfg_.vocab_size));
    }
  }
}

Tensor TargetModel::embed(const TokenSeq& tokens,
                          const std::vector<int64_t>& positions) const {
  for (int64_t p : positions) {
    if (p < 0 || p >= cfg_.context_len) {
      raise(ErrorKind::Domain,
            "context overflow: position " + std::to_string(p) +
                " exceeds context " + std::to_string(cfg_.context_len));
    }
  }
  return add(gather_rows(tok_emb_, tokens), gather_rows(pos_emb_, positions));
}

Tensor TargetModel::head(const Tensor& features) const {
  return matmul(features, head_w_);
}

ForwardResult TargetModel::forward(const TokenSeq& tokens,
                                   int64_t pos_offset) const {
  std::vector<int64_t> positions(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    positions[i] = pos_offset + static_cast<int64_t>(i);
  }
  return forward_masked(tokens, positions,
                        strict_causal_mask(static_cast<int64_t>(tokens.size())));
}

ForwardResult TargetModel::forward_masked(const TokenSeq& tokens,
                                          const std::vector<int64_t>& positions,
                                          const BoolMatrix& mask) const {
  check_tokens(tokens);
  if (positions.size() != tokens.size() ||
      mask.size() != static_cast<int64_t>(tokens.size())) {
    raise(ErrorKind::Dimension, "forward: tokens/positions/mask disagree");
  }
  Tensor x = embed(tokens, positions);
  for (const Block& b : blocks_) {
    x = attention_block(x, b.ln1_g, b.ln1_b, b.w_qkv, b.b_qkv, b.w_proj,
                        b.b_proj, cfg_.n_heads, mask);
    x = mlp_block(x, b.ln2_g, b.ln2_b, b.w_mlp1, b.b_mlp1, b.w_mlp2, b.b_mlp2);
  }
  ForwardResult r;
  r.features = layer_norm(x, final_ln_g_, final_ln_b_);
  r.logits = head(r.features);
  return r;
}

std::vector<Tensor> TargetModel::parameters() const {
  std::vector<Tensor> ps = {tok_emb_, pos_emb_};
  for (const Block& b : blocks_) {
    for (const Tensor& t : {b.ln1_g, b.ln1_b, b.w_qkv, b.b_qkv, b.w_proj,
                            b.b_proj, b.ln2_g, b.ln2_b, b.w_mlp1, b.b_mlp1,
                            b.w_mlp2, b.b_mlp2}) {
      ps.push_back(t);
    }
  }
  ps.push_back(final_ln_g_);
  ps.push_back(final_ln_b_);
  ps.push_back(head_w_);
  return ps;
}

bool TargetModel::is_frozen() const {
  for (const Tensor& p : parameters()) {
    if (p.requires_grad()) return false;
  }
  return true;
}

void TargetModel::freeze() {
  for (Tensor& p : parameters()) {
    p.node()->requires_grad = false;
    p.node()->tape = nullptr;
    p.node()->grad.clear();
  }
}

uint64_t TargetModel::weight_fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const Tensor& p : parameters()) h = fnv_mix(h, p.values());
  return h;
}

TokenSeq greedy_ar_generate(const TargetModel& model, const TokenSeq& prompt,
                            int64_t max_new) {
  if (prompt.empty()) raise(ErrorKind::Dimension, "prompt must be nonempty");
  if (static_cast<int64_t>(prompt.size()) + max_new > model.config().context_len) {
    raise(ErrorKind::Domain,
          "context overflow: prompt + max_new exceeds context length");
  }
  TokenSeq out = prompt;
  for (int64_t step = 0; step < max_new; ++step) {
    ForwardResult r = model.forward(out);
    const int64_t rows = r.logits.dim(0);
    const int64_t v = r.logits.dim(1);
    const auto& lv = r.logits.values();
    int64_t best = 0;
    for (int64_t j = 1; j < v; ++j) {
      if (lv[(rows - 1) * v + j] > lv[(rows - 1) * v + best]) best = j;
    }
    out.push_back(best);
  }
  return out;
}

DrafterModel::DrafterModel(const ModelConfig& cfg, const TargetModel& target,
                           Rng& rng, GradientTape* tape)
    : cfg_(cfg), target_(&target) {
  cfg_.validate();
  const int64_t h = cfg_.hidden_dim;
  const int64_t m = cfg_.drafter_mlp_dim;
  l1_w_ih_ = make_weight(tape, {2 * h, 4 * h}, uniform_init(rng, 2 * h, 8 * h * h));
  l1_w_hh_ = make_weight(tape, {h, 4 * h}, uniform_init(rng, h, 4 * h * h));
  l2_w_ih_ = make_weight(tape, {h, 4 * h}, uniform_init(rng, h, 4 * h * h));
  l2_w_hh_ = make_weight(tape, {h, 4 * h}, uniform_init(rng, h, 4 * h * h));
  // forget-gate bias starts at 1 so early training does not wash out state
  std::vector<Scalar> b1(4 * h, 0.0), b2(4 * h, 0.0);
  for (int64_t j = 0; j < h; ++j) b1[h + j] = 1.0;
  for (int64_t j = 0; j < h; ++j) b2[h + j] = 1.0;
  l1_b_ = make_weight(tape, {4 * h}, std::move(b1));
  l2_b_ = make_weight(tape, {4 * h}, std::move(b2));
  ln1_g_ = make_weight(tape, {h}, std::vector<Scalar>(h, 1.0));
  ln1_b_ = make_weight(tape, {h}, std::vector<Scalar>(h, 0.0));
  w_qkv_ = make_weight(tape, {h, 3 * h}, uniform_init(rng, h, 3 * h * h));
  b_qkv_ = make_weight(tape, {3 * h}, std::vector<Scalar>(3 * h, 0.0));
  w_proj_ = make_weight(tape, {h, h}, uniform_init(rng, h, h * h));
  b_proj_ = make_weight(tape, {h}, std::vector<Scalar>(h, 0.0));
  ln2_g_ = make_weight(tape, {h}, std::vector<Scalar>(h, 1.0));
  ln2_b_ = make_weight(tape, {h}, std::vector<Scalar>(h, 0.0));
  w_mlp1_ = make_weight(tape, {h, m}, uniform_init(rng, h, h * m));
  b_mlp1_ = make_weight(tape, {m}, std::vector<Scalar>(m, 0.0));
  w_mlp2_ = make_weight(tape, {m, h}, uniform_init(rng, m, m * h));
  b_mlp2_ = make_weight(tape, {h}, std::vector<Scalar>(h, 0.0));
}

DrafterModel::DrafterModel(const ModelConfig& cfg, const TargetModel& target,
                           const Checkpoint& ckpt)
    : cfg_(cfg), target_(&target) {
  cfg_.validate();
  l1_w_ih_ = ckpt.get("lstm1.w_ih");
  l1_w_hh_ = ckpt.get("lstm1.w_hh");
  l1_b_ = ckpt.get("lstm1.b");
  l2_w_ih_ = ckpt.get("lstm2.w_ih");
  l2_w_hh_ = ckpt.get("lstm2.w_hh");
  l2_b_ = ckpt.get("lstm2.b");
  ln1_g_ = ckpt.get("ln1.g");
  ln1_b_ = ckpt.get("ln1.b");
  w_qkv_ = ckpt.get("attn.w_qkv");
  b_qkv_ = ckpt.get("attn.b_qkv");
  w_proj_ = ckpt.get("attn.w_proj");
  b_proj_ = ckpt.get("attn.b_proj");
  ln2_g_ = ckpt.get("ln2.g");
  ln2_b_ = ckpt.get("ln2.b");
  w_mlp1_ = ckpt.get("mlp.w1");
  b_mlp1_ = ckpt.get("mlp.b1");
  w_mlp2_ = ckpt.get("mlp.w2");
  b_mlp2_ = ckpt.get("mlp.b2");
  if (l1_w_ih_.dim(0) != 2 * cfg_.hidden_dim) {
    raise(ErrorKind::Config, "drafter checkpoint does not match model config");
  }
}

Checkpoint DrafterModel::to_checkpoint() const {
  Checkpoint c;
  c.add("lstm1.w_ih", l1_w_ih_);
  c.add("lstm1.w_hh", l1_w_hh_);
  c.add("lstm1.b", l1_b_);
  c.add("lstm2.w_ih", l2_w_ih_);
  c.add("lstm2.w_hh", l2_w_hh_);
  c.add("lstm2.b", l2_b_);
  c.add("ln1.g", ln1_g_);
  c.add("ln1.b", ln1_b_);
  c.add("attn.w_qkv", w_qkv_);
  c.add("attn.b_qkv", b_qkv_);
  c.add("attn.w_proj", w_proj_);
  c.add("attn.b_proj", b_proj_);
  c.add("ln2.g", ln2_g_);
  c.add("ln2.b", ln2_b_);
  c.add("mlp.w1", w_mlp1_);
  c.add("mlp.b1", b_mlp1_);
  c.add("mlp.w2", w_mlp2_);
  c.add("mlp.b2", b_mlp2_);
  return c;
}

std::vector<Tensor> DrafterModel::parameters() const {
  return {l1_w_ih_, l1_w_hh_, l1_b_, l2_w_ih_, l2_w_hh_, l2_b_,
          ln1_g_,   ln1_b_,   w_qkv_, b_qkv_,  w_proj_,  b_proj_,
          ln2_g_,   ln2_b_,   w_mlp1_, b_mlp1_, w_mlp2_, b_mlp2_};
}

DrafterResult DrafterModel::forward(const Tensor& features,
                                    const TokenSeq& tokens_ahead,
                                    const RelaxedCausalMask& mask,
                                    bool want_logits, int64_t pos_offset) const {
  const int64_t s = static_cast<int64_t>(tokens_ahead.size());
  if (mask.size != s) {
    raise(ErrorKind::Dimension, "drafter: mask size " + std::to_string(mask.size) +
                                    " != sequence length " + std::to_string(s));
  }
  if (mask.k != cfg_.k) {
    raise(ErrorKind::Dimension, "drafter: mask block size " +
                                    std::to_string(mask.k) + " != configured k " +
                                    std::to_string(cfg_.k));
  }
  if (pos_offset % cfg_.k != 0) {
    raise(ErrorKind::Dimension,
          "drafter: position offset must be a multiple of k");
  }
  std::vector<int64_t> positions(static_cast<size_t>(s));
  std::vector<int64_t> parents(static_cast<size_t>(s));
  for (int64_t i = 0; i < s; ++i) {
    positions[i] = pos_offset + i;
    parents[i] = i - 1;
  }
  return forward_rows(features, tokens_ahead, positions, parents, mask.bits,
                      want_logits);
}

namespace {

// The helpers below mirror the op-layer arithmetic step for step (same
// accumulation order, same zero-skip) so cached rows reproduce the exact
// bits a full recompute would produce.

void matvec_into(const Scalar* x, int64_t in, const Tensor& w, Scalar* out) {
  const int64_t cols = w.dim(1);
  const Scalar* wv = w.values().data();
  for (int64_t j = 0; j < cols; ++j) out[j] = 0.0;
  for (int64_t kk = 0; kk < in; ++kk) {
    const Scalar xi = x[kk];
    if (xi == 0.0) continue;
    const Scalar* row = wv + kk * cols;
    for (int64_t j = 0; j < cols; ++j) out[j] += xi * row[j];
  }
}

void lstm_step(const Scalar* x, int64_t in, const Scalar* h_prev,
               const Scalar* c_prev, const Tensor& w_ih, const Tensor& w_hh,
               const Tensor& b, int64_t hid, Scalar* h_out, Scalar* c_out) {
  std::vector<Scalar> z(static_cast<size_t>(4 * hid));
  const Scalar* bv = b.values().data();
  for (int64_t j = 0; j < 4 * hid; ++j) z[j] = bv[j];
  const Scalar* wi = w_ih.values().data();
  for (int64_t i = 0; i < in; ++i) {
    const Scalar xi = x[i];
    if (xi == 0.0) continue;
    const Scalar* row = wi + i * 4 * hid;
    for (int64_t j = 0; j < 4 * hid; ++j) z[j] += xi * row[j];
  }
  const Scalar* wh = w_hh.values().data();
  for (int64_t i = 0; i < hid; ++i) {
    const Scalar hi = h_prev[i];
    if (hi == 0.0) continue;
    const Scalar* row = wh + i * 4 * hid;
    for (int64_t j = 0; j < 4 * hid; ++j) z[j] += hi * row[j];
  }
  for (int64_t j = 0; j < hid; ++j) {
    const Scalar gi = 1.0 / (1.0 + std::exp(-z[j]));
    const Scalar gf = 1.0 / (1.0 + std::exp(-z[hid + j]));
    const Scalar gg = std::tanh(z[2 * hid + j]);
    const Scalar go = 1.0 / (1.0 + std::exp(-z[3 * hid + j]));
    const Scalar cn = gf * c_prev[j] + gi * gg;
    c_out[j] = cn;
    h_out[j] = go * std::tanh(cn);
  }
}

void layer_norm_row(const Scalar* x, int64_t c, const Tensor& g,
                    const Tensor& b, Scalar* out) {
  Scalar mu = 0.0;
  for (int64_t j = 0; j < c; ++j) mu += x[j];
  mu /= static_cast<Scalar>(c);
  Scalar var = 0.0;
  for (int64_t j = 0; j < c; ++j) {
    Scalar d = x[j] - mu;
    var += d * d;
  }
  var /= static_cast<Scalar>(c);
  const Scalar is = 1.0 / std::sqrt(var + 1e-5);
  const Scalar* gv = g.values().data();
  const Scalar* bv = b.values().data();
  for (int64_t j = 0; j < c; ++j) out[j] = gv[j] * ((x[j] - mu) * is) + bv[j];
}

Scalar gelu_exact(Scalar v) {
  constexpr Scalar kInvSqrt2 = 0.7071067811865475244;
  return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
}

}  // namespace

DrafterResult DrafterModel::extend_cached(const RowCache& base, RowCache& local,
                                          const Tensor& features,
                                          const TokenSeq& tokens,
                                          const std::vector<int64_t>& positions,
                                          const std::vector<int64_t>& parents,
                                          const BoolMatrix& local_mask,
                                          bool want_logits) const {
  NoGradGuard ng;
  const int64_t n = static_cast<int64_t>(tokens.size());
  const int64_t h = cfg_.hidden_dim;
  const int64_t heads = cfg_.n_heads;
  const int64_t dh = h / heads;
  const Scalar sc = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  target_->check_tokens(tokens);
  if (features.dim(0) != n || features.dim(1) != h ||
      static_cast<int64_t>(positions.size()) != n ||
      static_cast<int64_t>(parents.size()) != n ||
      local_mask.size() != local.rows + n) {
    raise(ErrorKind::Dimension, "extend_cached: row inputs disagree");
  }
  const auto& tok_emb = target_->token_embedding().values();
  const auto& pos_emb = target_->position_embedding().values();

  Tensor out_features = Tensor::zeros({n, h});
  std::vector<Scalar> fused(static_cast<size_t>(2 * h));
  std::vector<Scalar> norm(static_cast<size_t>(h));
  std::vector<Scalar> qkv(static_cast<size_t>(3 * h));
  std::vector<Scalar> attn(static_cast<size_t>(h));
  std::vector<Scalar> proj(static_cast<size_t>(h));
  std::vector<Scalar> x2(static_cast<size_t>(h));
  std::vector<Scalar> mlp_h(static_cast<size_t>(cfg_.drafter_mlp_dim));
  std::vector<Scalar> mlp_o(static_cast<size_t>(h));

  auto state_row = [&](const std::vector<Scalar>& base_v,
                       const std::vector<Scalar>& local_v,
                       int64_t row) -> const Scalar* {
    return row < base.rows ? base_v.data() + row * h
                           : local_v.data() + (row - base.rows) * h;
  };

  for (int64_t i = 0; i < n; ++i) {
    if (positions[i] < 0 || positions[i] >= cfg_.context_len) {
      raise(ErrorKind::Domain, "extend_cached: position overflow");
    }
    // fused input [feature ; tok_emb + pos_emb]
    const auto& fv = features.values();
    for (int64_t j = 0; j < h; ++j) fused[j] = fv[i * h + j];
    for (int64_t j = 0; j < h; ++j) {
      fused[h + j] =
          tok_emb[tokens[i] * h + j] + pos_emb[positions[i] * h + j];
    }

    const int64_t parent = parents[i];
    if (parent >= base.rows + local.rows) {
      raise(ErrorKind::Validation, "extend_cached: parent not yet computed");
    }
    static const std::vector<Scalar> kZeros;
    std::vector<Scalar> zero_state(static_cast<size_t>(h), 0.0);
    const Scalar* ph1 = parent < 0 ? zero_state.data() : state_row(base.h1, local.h1, parent);
    const Scalar* pc1 = parent < 0 ? zero_state.data() : state_row(base.c1, local.c1, parent);
    const Scalar* ph2 = parent < 0 ? zero_state.data() : state_row(base.h2, local.h2, parent);
    const Scalar* pc2 = parent < 0 ? zero_state.data() : state_row(base.c2, local.c2, parent);

    local.h1.resize((local.rows + 1) * h);
    local.c1.resize((local.rows + 1) * h);
    local.h2.resize((local.rows + 1) * h);
    local.c2.resize((local.rows + 1) * h);
    Scalar* h1 = local.h1.data() + local.rows * h;
    Scalar* c1 = local.c1.data() + local.rows * h;
    Scalar* h2 = local.h2.data() + local.rows * h;
    Scalar* c2 = local.c2.data() + local.rows * h;
    lstm_step(fused.data(), 2 * h, ph1, pc1, l1_w_ih_, l1_w_hh_, l1_b_, h, h1, c1);
    lstm_step(h1, h, ph2, pc2, l2_w_ih_, l2_w_hh_, l2_b_, h, h2, c2);

    // attention block, pre-norm
    layer_norm_row(h2, h, ln1_g_, ln1_b_, norm.data());
    matvec_into(norm.data(), h, w_qkv_, qkv.data());
    const auto& bqkv = b_qkv_.values();
    for (int64_t j = 0; j < 3 * h; ++j) qkv[j] += bqkv[j];
    local.kproj.resize((local.rows + 1) * h);
    local.vproj.resize((local.rows + 1) * h);
    std::copy(qkv.begin() + h, qkv.begin() + 2 * h,
              local.kproj.begin() + local.rows * h);
    std::copy(qkv.begin() + 2 * h, qkv.end(),
              local.vproj.begin() + local.rows * h);

    const int64_t self_local = local.rows;  // this row's local index
    std::vector<Scalar> scores(static_cast<size_t>(base.rows + self_local + 1));
    for (int64_t head = 0; head < heads; ++head) {
      const int64_t off = head * dh;
      Scalar m = -1e300;
      // base columns first, then visible local columns: ascending global order
      for (int64_t j = 0; j < base.rows; ++j) {
        Scalar s = 0.0;
        const Scalar* kr = base.kproj.data() + j * h + off;
        for (int64_t d = 0; d < dh; ++d) s += qkv[off + d] * kr[d];
        s *= sc;
        scores[j] = s;
        m = std::max(m, s);
      }
      for (int64_t j = 0; j <= self_local; ++j) {
        if (!local_mask.get(self_local, j)) continue;
        Scalar s = 0.0;
        const Scalar* kr = local.kproj.data() + j * h + off;
        for (int64_t d = 0; d < dh; ++d) s += qkv[off + d] * kr[d];
        s *= sc;
        scores[base.rows + j] = s;
        m = std::max(m, s);
      }
      Scalar z = 0.0;
      for (int64_t j = 0; j < base.rows; ++j) {
        scores[j] = std::exp(scores[j] - m);
        z += scores[j];
      }
      for (int64_t j = 0; j <= self_local; ++j) {
        if (!local_mask.get(self_local, j)) continue;
        scores[base.rows + j] = std::exp(scores[base.rows + j] - m);
        z += scores[base.rows + j];
      }
      for (int64_t d = 0; d < dh; ++d) attn[off + d] = 0.0;
      for (int64_t j = 0; j < base.rows; ++j) {
        const Scalar a = scores[j] / z;
        const Scalar* vr = base.vproj.data() + j * h + off;
        for (int64_t d = 0; d < dh; ++d) attn[off + d] += a * vr[d];
      }
      for (int64_t j = 0; j <= self_local; ++j) {
        if (!local_mask.get(self_local, j)) continue;
        const Scalar a = scores[base.rows + j] / z;
        const Scalar* vr = local.vproj.data() + j * h + off;
        for (int64_t d = 0; d < dh; ++d) attn[off + d] += a * vr[d];
      }
    }
    matvec_into(attn.data(), h, w_proj_, proj.data());
    const auto& bproj = b_proj_.values();
    for (int64_t j = 0; j < h; ++j) x2[j] = h2[j] + (proj[j] + bproj[j]);

    // mlp block, pre-norm
    layer_norm_row(x2.data(), h, ln2_g_, ln2_b_, norm.data());
    matvec_into(norm.data(), h, w_mlp1_, mlp_h.data());
    const auto& b1 = b_mlp1_.values();
    for (int64_t j = 0; j < cfg_.drafter_mlp_dim; ++j) {
      mlp_h[j] = gelu_exact(mlp_h[j] + b1[j]);
    }
    matvec_into(mlp_h.data(), cfg_.drafter_mlp_dim, w_mlp2_, mlp_o.data());
    const auto& b2 = b_mlp2_.values();
    for (int64_t j = 0; j < h; ++j) {
      out_features.at(i * h + j) = x2[j] + (mlp_o[j] + b2[j]);
    }
    ++local.rows;
  }

  DrafterResult r;
  r.pred_features = out_features;
  if (want_logits) r.logits = target_->head(out_features);
  return r;
}

DrafterResult DrafterModel::forward_rows(const Tensor& features,
                                         const TokenSeq& tokens,
                                         const std::vector<int64_t>& positions,
                                         const std::vector<int64_t>& parents,
                                         const BoolMatrix& mask,
                                         bool want_logits) const {
  const int64_t rows = static_cast<int64_t>(tokens.size());
  const int64_t h = cfg_.hidden_dim;
  if (features.rank() != 2 || features.dim(0) != rows || features.dim(1) != h) {
    raise(ErrorKind::Dimension, "drafter: features " + shape_str(features.shape()) +
                                    " do not match " + std::to_string(rows) +
                                    " rows of hidden " + std::to_string(h));
  }
  if (static_cast<int64_t>(positions.size()) != rows ||
      static_cast<int64_t>(parents.size()) != rows || mask.size() != rows) {
    raise(ErrorKind::Dimension, "drafter: rows/positions/parents/mask disagree");
  }
  target_->check_tokens(tokens);

  Tensor fused = concat_cols(features, target_->embed(tokens, positions));

  // Two LSTM layers with parent-indexed recurrence; a parent of -1 starts
  // from the zero state. On plain sequences this is the usual chain.
  Tensor zero_h = Tensor::zeros({1, h});
  auto run_lstm = [&](const Tensor& input, const Tensor& w_ih, const Tensor& w_hh,
                      const Tensor& b) {
    std::vector<LstmState> states(static_cast<size_t>(rows));
    std::vector<Tensor> outs(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
      int64_t p = parents[r];
      if (p >= r) {
        raise(ErrorKind::Validation, "drafter: parent " + std::to_string(p) +
                                         " does not precede row " +
                                         std::to_string(r));
      }
      const Tensor& h_in = p < 0 ? zero_h : states[p].h;
      const Tensor& c_in = p < 0 ? zero_h : states[p].c;
      Tensor x = slice_rows(input, r, 1);
      states[r] = lstm_cell(x, h_in, c_in, w_ih, w_hh, b);
      outs[r] = states[r].h;
    }
    return concat_rows(outs);
  };

  Tensor x = run_lstm(fused, l1_w_ih_, l1_w_hh_, l1_b_);
  x = run_lstm(x, l2_w_ih_, l2_w_hh_, l2_b_);
  x = attention_block(x, ln1_g_, ln1_b_, w_qkv_, b_qkv_, w_proj_, b_proj_,
                      cfg_.n_heads, mask);
  x = mlp_block(x, ln2_g_, ln2_b_, w_mlp1_, b_mlp1_, w_mlp2_, b_mlp2_);

  DrafterResult r;
  r.pred_features = x;
  if (want_logits) r.logits = target_->head(x);
  return r;
}

}  // namespace falcon
