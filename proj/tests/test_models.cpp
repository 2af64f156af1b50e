#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "falcon/corpus.hpp"
#include "falcon/train_target.hpp"

using namespace falcon;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 64;
  c.hidden_dim = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.context_len = 32;
  c.k = 2;
  c.drafter_mlp_dim = 24;
  return c;
}

}  // namespace

TEST_CASE("target forward: shape contract and determinism") {
  Rng rng(5);
  TargetModel model(tiny_config(), rng);
  TokenSeq tokens = {1, 5, 9, 2};
  ForwardResult a = model.forward(tokens);
  CHECK(a.logits.shape() == Shape{4, 64});
  CHECK(a.features.shape() == Shape{4, 16});

  ForwardResult b = model.forward(tokens);
  CHECK(a.logits.values() == b.logits.values());
  CHECK(a.features.values() == b.features.values());

  CHECK_THROWS_AS(model.forward({1, 64}), Error);     // vocabulary
  CHECK_THROWS_AS(model.forward({-1}), Error);        // vocabulary
  CHECK_THROWS_AS(model.forward(TokenSeq(33, 1)), Error);  // context overflow
  CHECK_THROWS_AS(model.forward({}), Error);
}

TEST_CASE("logits equal the head applied to features, exactly") {
  Rng rng(6);
  TargetModel model(tiny_config(), rng);
  ForwardResult r = model.forward({3, 1, 4, 1, 5});
  Tensor again = model.head(r.features);
  CHECK(r.logits.values() == again.values());
}

TEST_CASE("checkpoint round-trip preserves the forward pass bit-exactly") {
  Rng rng(7);
  ModelConfig cfg = tiny_config();
  TargetModel model(cfg, rng);
  save_checkpoint(model.to_checkpoint(), "target_rt.bin");
  TargetModel loaded(cfg, load_checkpoint("target_rt.bin"));
  TokenSeq tokens = {9, 8, 7};
  CHECK(model.forward(tokens).logits.values() ==
        loaded.forward(tokens).logits.values());
  std::remove("target_rt.bin");

  Rng drng(8);
  DrafterModel drafter(cfg, model, drng);
  save_checkpoint(drafter.to_checkpoint(), "drafter_rt.bin");
  DrafterModel dloaded(cfg, model, load_checkpoint("drafter_rt.bin"));
  Tensor feats = Tensor::zeros({4, 16});
  RelaxedCausalMask mask = build_relaxed_mask(4, cfg.k);
  CHECK(drafter.forward(feats, {1, 2, 3, 4}, mask).pred_features.values() ==
        dloaded.forward(feats, {1, 2, 3, 4}, mask).pred_features.values());
  std::remove("drafter_rt.bin");
}

TEST_CASE("drafter shares the target head: identical logits for any feature") {
  Rng rng(9);
  ModelConfig cfg = tiny_config();
  TargetModel target(cfg, rng);
  DrafterModel drafter(cfg, target, rng);

  Tensor feats = Tensor::zeros({2, 16});
  for (int64_t i = 0; i < feats.size(); ++i) feats.at(i) = 0.1 * (i % 7) - 0.3;
  RelaxedCausalMask mask = build_relaxed_mask(2, cfg.k);
  DrafterResult out = drafter.forward(feats, {11, 12}, mask);
  CHECK(out.logits.values() == target.head(out.pred_features).values());
}

TEST_CASE("drafter masks: k=1 is autoregressive, blocks stay sealed") {
  Rng rng(10);
  ModelConfig cfg = tiny_config();
  TargetModel target(cfg, rng);

  SUBCASE("k=1 degenerates to the strict causal mask") {
    CHECK(build_relaxed_mask(6, 1).bits == strict_causal_mask(6));
    ModelConfig c1 = cfg;
    c1.k = 1;
    DrafterModel drafter(c1, target, rng);
    Tensor feats = Tensor::zeros({4, 16});
    RelaxedCausalMask mask = build_relaxed_mask(4, 1);
    DrafterResult base = drafter.forward(feats, {1, 2, 3, 4}, mask);
    // changing the last input leaves all earlier outputs untouched
    DrafterResult moved = drafter.forward(feats, {1, 2, 3, 9}, mask);
    for (int64_t i = 0; i < 3 * 16; ++i) {
      CHECK(base.pred_features.at(i) == moved.pred_features.at(i));
    }
  }

  SUBCASE("k=2: within-block change propagates backwards") {
    DrafterModel drafter(cfg, target, rng);
    RelaxedCausalMask mask = build_relaxed_mask(4, 2);
    Tensor feats = Tensor::zeros({4, 16});
    DrafterResult base = drafter.forward(feats, {1, 2, 3, 4}, mask);
    DrafterResult moved = drafter.forward(feats, {1, 9, 3, 4}, mask);
    bool row0_changed = false;
    for (int64_t j = 0; j < 16; ++j) {
      row0_changed |= base.pred_features.at(j) != moved.pred_features.at(j);
    }
    CHECK(row0_changed);
  }

  SUBCASE("k=2: no future-block leakage, bit-identical") {
    DrafterModel drafter(cfg, target, rng);
    RelaxedCausalMask mask = build_relaxed_mask(4, 2);
    Tensor feats = Tensor::zeros({4, 16});
    Tensor feats2 = feats.detached();
    feats2.at(2 * 16 + 3) = 7.5;  // perturb a future-block feature too
    DrafterResult base = drafter.forward(feats, {1, 2, 3, 4}, mask);
    DrafterResult moved = drafter.forward(feats2, {1, 2, 9, 8}, mask);
    for (int64_t i = 0; i < 2 * 16; ++i) {
      CHECK(base.pred_features.at(i) == moved.pred_features.at(i));
    }
  }

  SUBCASE("mask size mismatch is a dimension error") {
    DrafterModel drafter(cfg, target, rng);
    RelaxedCausalMask mask = build_relaxed_mask(3, 2);
    CHECK_THROWS_AS(drafter.forward(Tensor::zeros({4, 16}), {1, 2, 3, 4}, mask),
                    Error);
  }
}

TEST_CASE("greedy decoding basics") {
  Rng rng(11);
  TargetModel model(tiny_config(), rng);
  TokenSeq prompt = {4, 9};

  CHECK(greedy_ar_generate(model, prompt, 0) == prompt);
  CHECK(greedy_ar_generate(model, prompt, 6) == greedy_ar_generate(model, prompt, 6));
  CHECK_THROWS_AS(greedy_ar_generate(model, prompt, 31), Error);  // overflow
  CHECK_THROWS_AS(greedy_ar_generate(model, {}, 3), Error);
}

TEST_CASE("trained on a single-rule corpus, the model completes the rule") {
  // alternating "ab": after 'a' the only continuation is 'b'
  std::vector<uint8_t> bytes;
  for (int i = 0; i < 512; ++i) {
    bytes.push_back('a');
    bytes.push_back('b');
  }
  Corpus corpus = corpus_from_bytes(bytes, 0.9, 1);

  ModelConfig mc;
  mc.vocab_size = 256;
  mc.hidden_dim = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.context_len = 32;
  mc.k = 2;
  mc.drafter_mlp_dim = 32;
  TargetTrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.seq_len = 8;
  tc.lr = 3e-3;
  std::vector<TargetEpochMetrics> metrics;
  TargetModel model = train_target(mc, corpus, tc, 42, &metrics);

  CHECK(model.is_frozen());
  REQUIRE(!metrics.empty());
  CHECK(metrics.back().train_loss < metrics.front().train_loss);

  TokenSeq prompt = {'a', 'b', 'a'};
  TokenSeq out = greedy_ar_generate(model, prompt, 5);
  CHECK(out[3] == 'b');
  CHECK(out[4] == 'a');
  CHECK(out[5] == 'b');
}
