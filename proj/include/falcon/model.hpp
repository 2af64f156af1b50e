#pragma once

#include <vector>

#include "falcon/checkpoint.hpp"
#include "falcon/config.hpp"
#include "falcon/mask.hpp"
#include "falcon/ops.hpp"
#include "falcon/rng.hpp"
#include "falcon/tensor.hpp"

namespace falcon {

using TokenId = int64_t;
using TokenSeq = std::vector<TokenId>;

struct ForwardResult {
  Tensor features;  // seq x hidden, the final hidden states fed to the head
  Tensor logits;    // seq x vocab, exactly head(features)
};

// Decoder-only transformer trained from scratch. Pre-norm blocks, learned
// absolute position embeddings, untied embedding and head matrices.
class TargetModel {
 public:
  TargetModel(const ModelConfig& cfg, Rng& rng, GradientTape* tape = nullptr);
  TargetModel(const ModelConfig& cfg, const Checkpoint& ckpt);

  const ModelConfig& config() const { return cfg_; }

  // Strict causal self-attention over a contiguous sequence. pos_offset
  // shifts the position ids, letting training windows cover the whole
  // learned position table.
  ForwardResult forward(const TokenSeq& tokens, int64_t pos_offset = 0) const;

  // Tree verification path: every row carries an explicit position id, and
  // `mask` dictates visibility. Rows whose visible set matches the plain
  // sequence produce bit-identical outputs to forward().
  ForwardResult forward_masked(const TokenSeq& tokens,
                               const std::vector<int64_t>& positions,
                               const BoolMatrix& mask) const;

  // Shared LM head; logits = features @ head_w.
  Tensor head(const Tensor& features) const;
  // Token + position embedding rows, shared with the drafter.
  Tensor embed(const TokenSeq& tokens, const std::vector<int64_t>& positions) const;

  const Tensor& head_weight() const { return head_w_; }
  const Tensor& token_embedding() const { return tok_emb_; }
  const Tensor& position_embedding() const { return pos_emb_; }

  std::vector<Tensor> parameters() const;
  bool is_frozen() const;
  void freeze();
  uint64_t weight_fingerprint() const;

  Checkpoint to_checkpoint() const;

  void check_tokens(const TokenSeq& tokens) const;

 private:
  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor w_qkv, b_qkv;
    Tensor w_proj, b_proj;
    Tensor ln2_g, ln2_b;
    Tensor w_mlp1, b_mlp1;
    Tensor w_mlp2, b_mlp2;
  };

  ModelConfig cfg_;
  Tensor tok_emb_;  // vocab x hidden
  Tensor pos_emb_;  // context x hidden
  std::vector<Block> blocks_;
  Tensor final_ln_g_, final_ln_b_;
  Tensor head_w_;  // hidden x vocab
};

// One-token-at-a-time argmax decoding; the losslessness reference.
TokenSeq greedy_ar_generate(const TargetModel& model, const TokenSeq& prompt,
                            int64_t max_new);

struct DrafterResult {
  Tensor pred_features;  // rows x hidden
  Tensor logits;         // rows x vocab (empty unless requested)
};

// Semi-autoregressive draft head: two LSTM layers fuse [feature ; token
// embedding] rows down to hidden_dim, then one relaxed-causal-masked
// attention block and an MLP. Embedding and LM head are the target's,
// frozen. The output row for input row i estimates the target feature at
// position i + k - 1, so one pass over the last k committed rows yields the
// next k token distributions at once.
class DrafterModel {
 public:
  DrafterModel(const ModelConfig& cfg, const TargetModel& target, Rng& rng,
               GradientTape* tape = nullptr);
  DrafterModel(const ModelConfig& cfg, const TargetModel& target,
               const Checkpoint& ckpt);

  const ModelConfig& config() const { return cfg_; }
  const TargetModel& target() const { return *target_; }

  // Sequence form. Row i is [features[i] ; embed(tokens_ahead[i])]; the
  // caller supplies features already shifted one step behind the tokens.
  // Mask must cover exactly the sequence length. pos_offset must be a
  // multiple of k so window-relative blocks match absolute blocks.
  DrafterResult forward(const Tensor& features, const TokenSeq& tokens_ahead,
                        const RelaxedCausalMask& mask, bool want_logits = true,
                        int64_t pos_offset = 0) const;

  // Tree form: rows carry explicit positions, LSTM state flows from
  // parents[r] (-1 = initial state), and visibility comes from `mask`.
  DrafterResult forward_rows(const Tensor& features, const TokenSeq& tokens,
                             const std::vector<int64_t>& positions,
                             const std::vector<int64_t>& parents,
                             const BoolMatrix& mask,
                             bool want_logits = true) const;

  // Prefix-reuse cache: per-row LSTM states and attention key/value
  // projections, so re-drafting over a growing prefix touches new rows only.
  struct RowCache {
    int64_t rows = 0;
    std::vector<Scalar> h1, c1, h2, c2;  // rows x hidden
    std::vector<Scalar> kproj, vproj;    // rows x hidden

    void clear() {
      rows = 0;
      h1.clear(); c1.clear(); h2.clear(); c2.clear();
      kproj.clear(); vproj.clear();
    }
  };

  // Incremental row pipeline over [base | local | new]. New rows attend the
  // whole base unconditionally and local/new columns where local_mask (sized
  // local.rows + new) allows; parents index the concatenated row space.
  // States and projections of the new rows append to `local`. Arithmetic
  // matches forward_rows term for term, so outputs are bit-identical to a
  // full recompute with the equivalent visibility.
  DrafterResult extend_cached(const RowCache& base, RowCache& local,
                              const Tensor& features, const TokenSeq& tokens,
                              const std::vector<int64_t>& positions,
                              const std::vector<int64_t>& parents,
                              const BoolMatrix& local_mask,
                              bool want_logits = false) const;

  std::vector<Tensor> parameters() const;
  Checkpoint to_checkpoint() const;

 private:
  ModelConfig cfg_;
  const TargetModel* target_;

  Tensor l1_w_ih_, l1_w_hh_, l1_b_;  // 2h -> h
  Tensor l2_w_ih_, l2_w_hh_, l2_b_;  // h -> h
  Tensor ln1_g_, ln1_b_;
  Tensor w_qkv_, b_qkv_;
  Tensor w_proj_, b_proj_;
  Tensor ln2_g_, ln2_b_;
  Tensor w_mlp1_, b_mlp1_;
  Tensor w_mlp2_, b_mlp2_;
};

}  // namespace falcon
