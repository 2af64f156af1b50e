#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "falcon/csgd.hpp"
#include "falcon/ops.hpp"
#include "support/gradcheck.hpp"

using namespace falcon;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 48;
  c.hidden_dim = 12;
  c.n_layers = 1;
  c.n_heads = 2;
  c.context_len = 32;
  c.k = 2;
  c.drafter_mlp_dim = 16;
  return c;
}

Corpus pattern_corpus(size_t bytes) {
  std::vector<uint8_t> data;
  const std::string unit = "the cat sat. ";
  while (data.size() < bytes) {
    data.insert(data.end(), unit.begin(), unit.end());
  }
  return corpus_from_bytes(data, 0.9, 3);
}

}  // namespace

TEST_CASE("hamming distance") {
  CHECK(hamming_distance({1, 2, 3}, {1, 2, 3}) == 0);
  CHECK(hamming_distance({1, 2, 3}, {1, 5, 3}) == 1);
  CHECK(hamming_distance({1, 2, 3, 4}, {5, 6, 7, 8}) == 4);
  CHECK_THROWS_AS(hamming_distance({1}, {1, 2}), Error);
}

TEST_CASE("glancing lambda schedule") {
  CHECK(glancing_lambda(0, 10) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(glancing_lambda(10, 10) == 0.0);
  CHECK(glancing_lambda(5, 10) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK_THROWS_AS(glancing_lambda(0, 0), Error);
  CHECK_THROWS_AS(glancing_lambda(-1, 10), Error);
  // non-increasing across the whole schedule, exactly zero at the end
  Scalar prev = 1e9;
  for (int ep = 0; ep <= 17; ++ep) {
    Scalar l = glancing_lambda(ep, 17);
    CHECK(l <= prev);
    CHECK(l >= 0.0);
    prev = l;
  }
}

TEST_CASE("glancing plan: size, contiguity, uniform placement") {
  Rng rng(77);
  TokenSeq teacher = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

  SUBCASE("lambda 0 or perfect draft give an empty plan") {
    GlancingPlan p1 = make_glancing_plan({9, 9, 9, 9, 9, 9, 9, 9, 9, 9}, teacher,
                                         0.0, rng);
    CHECK(p1.empty());
    GlancingPlan p2 = make_glancing_plan(teacher, teacher, 0.4, rng);
    CHECK(p2.empty());
  }

  SUBCASE("d=5 with lambda 0.4 marks a contiguous pair, uniformly placed") {
    TokenSeq draft = {1, 2, 3, 4, 5, 0, 0, 0, 0, 0};  // d = 5
    REQUIRE(hamming_distance(draft, teacher) == 5);
    std::map<int64_t, int64_t> start_count;
    const int64_t samples = 1000;
    for (int64_t s = 0; s < samples; ++s) {
      GlancingPlan p = make_glancing_plan(draft, teacher, 0.4, rng);
      REQUIRE(p.n == 2);
      REQUIRE(p.positions.size() == 2);
      CHECK(p.positions[1] == p.positions[0] + 1);
      CHECK(p.span_start >= 0);
      CHECK(p.span_start + p.n <= 10);
      start_count[p.span_start]++;
    }
    // nine valid starts; each should land within 5% absolute of uniform
    for (const auto& [start, count] : start_count) {
      CHECK(start >= 0);
      CHECK(start <= 8);
      Scalar frac = static_cast<Scalar>(count) / static_cast<Scalar>(samples);
      CHECK(frac > 1.0 / 9.0 - 0.05);
      CHECK(frac < 1.0 / 9.0 + 0.05);
    }
    CHECK(start_count.size() == 9);
  }
}

TEST_CASE("coupled replacement swaps token and feature together") {
  const int64_t rows = 6, h = 3;
  auto fresh_inputs = [&]() {
    DrafterInputs in;
    in.tokens = {10, 11, 12, 13, 14, 15};
    std::vector<Scalar> f(rows * h);
    for (size_t i = 0; i < f.size(); ++i) f[i] = static_cast<Scalar>(i);
    in.features = Tensor::from({rows, h}, f);
    return in;
  };
  TokenSeq teacher_tokens = {20, 21, 22, 23, 24, 25};
  std::vector<Scalar> tf(rows * h, -1.0);
  Tensor teacher_features = Tensor::from({rows, h}, tf);

  SUBCASE("empty plan leaves inputs untouched") {
    DrafterInputs in = fresh_inputs();
    apply_coupled_replacement(in, GlancingPlan{}, 2, teacher_tokens,
                              teacher_features);
    CHECK(in.tokens == fresh_inputs().tokens);
    CHECK(in.features.values() == fresh_inputs().features.values());
  }

  SUBCASE("full-span plan copies the teacher over the span") {
    DrafterInputs in = fresh_inputs();
    GlancingPlan plan;
    plan.n = 4;
    plan.span_start = 0;
    plan.positions = {0, 1, 2, 3};
    apply_coupled_replacement(in, plan, 2, teacher_tokens, teacher_features);
    for (int64_t row = 2; row < 6; ++row) {
      CHECK(in.tokens[row] == teacher_tokens[row]);
      for (int64_t j = 0; j < h; ++j) {
        CHECK(in.features.at(row * h + j) == -1.0);
      }
    }
    CHECK(in.tokens[0] == 10);
    CHECK(in.tokens[1] == 11);
  }

  SUBCASE("positional audit over random plans: token <-> feature coupling") {
    Rng rng(5150);
    for (int trial = 0; trial < 200; ++trial) {
      DrafterInputs in = fresh_inputs();
      const int64_t offset = static_cast<int64_t>(rng.next_index(3));
      GlancingPlan plan;
      plan.n = static_cast<int64_t>(rng.next_index(5));
      if (plan.n > 0) {
        plan.span_start = static_cast<int64_t>(
            rng.next_index(static_cast<uint64_t>(rows - plan.n + 1)));
        for (int64_t i = 0; i < plan.n; ++i) {
          plan.positions.push_back(plan.span_start + i);
        }
      }
      DrafterInputs before = in;
      before.features = in.features.detached();
      apply_coupled_replacement(in, plan, offset, teacher_tokens, teacher_features);
      for (int64_t row = 0; row < rows; ++row) {
        const bool token_replaced = in.tokens[row] != before.tokens[row];
        bool feature_replaced = false;
        for (int64_t j = 0; j < h; ++j) {
          feature_replaced |= in.features.at(row * h + j) != before.features.at(row * h + j);
        }
        const bool planned =
            plan.n > 0 && row >= plan.span_start + offset &&
            row < plan.span_start + plan.n + offset;
        // a planned row must now hold teacher values in BOTH channels
        if (planned) {
          CHECK(in.tokens[row] == teacher_tokens[row]);
          for (int64_t j = 0; j < h; ++j) CHECK(in.features.at(row * h + j) == -1.0);
        } else {
          CHECK_FALSE(token_replaced);
          CHECK_FALSE(feature_replaced);
        }
      }
    }
  }
}

TEST_CASE("csgd loss values and recomposition") {
  Rng rng(31);
  ModelConfig mc = tiny_config();
  TargetModel target(mc, rng);
  target.freeze();
  CsgdConfig cfg;

  const int64_t w = 5, h = mc.hidden_dim;
  std::vector<Scalar> fv = falcon::testing::random_vec(rng, w * h);
  Tensor teacher_features = Tensor::from({w, h}, fv);
  Tensor teacher_logits = target.head(teacher_features);
  TokenSeq teacher_tokens = {1, 2, 3, 4, 5};

  SUBCASE("identical features zero out regression and soft loss") {
    CsgdLossParts parts =
        csgd_loss(teacher_features.detached(), teacher_features, teacher_logits,
                  teacher_tokens, target, cfg);
    CHECK(parts.reg.item() == 0.0);
    CHECK(parts.soft.item() == 0.0);
    CHECK(parts.hard.item() > 0.0);
    CHECK(parts.total.item() ==
          doctest::Approx(0.1 * 0.1 * parts.hard.item()).epsilon(1e-15));
  }

  SUBCASE("alpha=1 reduces the distillation term to the soft loss") {
    CsgdConfig a1 = cfg;
    a1.alpha = 1.0;
    Tensor pred = Tensor::from({w, h}, falcon::testing::random_vec(rng, w * h));
    CsgdLossParts parts = csgd_loss(pred, teacher_features, teacher_logits,
                                    teacher_tokens, target, a1);
    CHECK(parts.total.item() ==
          parts.reg.item() + a1.omega_dist * (1.0 * parts.soft.item()));
  }

  SUBCASE("recomposition from returned components is exact") {
    Tensor pred = Tensor::from({w, h}, falcon::testing::random_vec(rng, w * h));
    CsgdLossParts parts = csgd_loss(pred, teacher_features, teacher_logits,
                                    teacher_tokens, target, cfg);
    const Scalar rebuilt =
        parts.reg.item() +
        cfg.omega_dist * (cfg.alpha * parts.soft.item() +
                          (1.0 - cfg.alpha) * parts.hard.item());
    CHECK(parts.total.item() - rebuilt == 0.0);
  }

  SUBCASE("gradient w.r.t. predicted features matches finite differences") {
    auto init = falcon::testing::random_vec(rng, w * h);
    CHECK(falcon::testing::gradcheck_max_rel_err(
              [&](const std::vector<Tensor>& p) {
                return csgd_loss(p[0], teacher_features, teacher_logits,
                                 teacher_tokens, target, cfg)
                    .total;
              },
              {{{w, h}, init}}) < 1e-4);
  }
}

TEST_CASE("train_drafter mechanics") {
  ModelConfig mc = tiny_config();
  mc.vocab_size = 256;
  Corpus corpus = pattern_corpus(2048);

  Rng trng(1);
  TargetModel target(mc, trng);
  target.freeze();

  CsgdConfig cfg;
  cfg.total_epochs = 2;
  cfg.batch_size = 2;
  cfg.seq_len = 13;
  cfg.lr = 1e-3;
  cfg.max_steps_per_epoch = 3;

  SUBCASE("unfrozen target is rejected") {
    GradientTape tape;
    Rng r2(2);
    TargetModel live(mc, r2, &tape);
    CHECK_THROWS_AS(train_drafter(live, corpus, cfg, 9), Error);
  }

  SUBCASE("smoke run: finite losses, frozen teacher, audited coupling") {
    const uint64_t fp_before = target.weight_fingerprint();
    std::vector<EpochMetrics> metrics;
    int64_t audits = 0;
    auto observer = [&](const ReplacementAudit& a) {
      ++audits;
      const int64_t rows = static_cast<int64_t>(a.before.tokens.size());
      const int64_t h = a.before.features.dim(1);
      for (int64_t row = 0; row < rows; ++row) {
        const bool planned =
            !a.plan.empty() && row >= a.plan.span_start + a.row_offset &&
            row < a.plan.span_start + a.plan.n + a.row_offset;
        bool tok_diff = a.before.tokens[row] != a.after.tokens[row];
        bool feat_diff = false;
        for (int64_t j = 0; j < h; ++j) {
          feat_diff |=
              a.before.features.at(row * h + j) != a.after.features.at(row * h + j);
        }
        if (planned) {
          // both channels now carry teacher values: the coupling biconditional
          REQUIRE(a.after.tokens[row] == a.teacher_tokens[row]);
          for (int64_t j = 0; j < h; ++j) {
            REQUIRE(a.after.features.at(row * h + j) ==
                    a.teacher_features.at(row * h + j));
          }
        } else {
          REQUIRE_FALSE(tok_diff);
          REQUIRE_FALSE(feat_diff);
        }
      }
    };
    DrafterModel drafter =
        train_drafter(target, corpus, cfg, 9, &metrics, nullptr, observer);
    CHECK(audits > 0);
    CHECK(target.weight_fingerprint() == fp_before);
    REQUIRE(metrics.size() == 2);
    for (const auto& em : metrics) {
      CHECK(std::isfinite(em.loss));
      CHECK(em.lambda == glancing_lambda(em.epoch, cfg.total_epochs));
    }
  }

  SUBCASE("noise_halfwidth=0 runs are bit-identical across repeats") {
    CsgdConfig det = cfg;
    det.noise_halfwidth = 0.0;
    DrafterModel a = train_drafter(target, corpus, det, 123);
    DrafterModel b = train_drafter(target, corpus, det, 123);
    Checkpoint ca = a.to_checkpoint();
    Checkpoint cb = b.to_checkpoint();
    REQUIRE(ca.tensors.size() == cb.tensors.size());
    for (size_t i = 0; i < ca.tensors.size(); ++i) {
      CHECK(ca.tensors[i].second.values() == cb.tensors[i].second.values());
    }
  }
}
