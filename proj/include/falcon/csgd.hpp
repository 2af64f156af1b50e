#pragma once

#include <functional>
#include <ostream>
#include <vector>

#include "falcon/config.hpp"
#include "falcon/corpus.hpp"
#include "falcon/model.hpp"
#include "falcon/rng.hpp"

namespace falcon {

// Number of positions where the sequences disagree.
int64_t hamming_distance(const TokenSeq& a, const TokenSeq& b);

// lambda(ep_c) = scale * (ep_t - ep_c) / ep_t
Scalar glancing_lambda(int64_t ep_c, int64_t ep_t, Scalar scale = 0.4);

// Contiguous span of input positions scheduled for coupled token+feature
// correction. N = floor(lambda * hamming); start uniform over valid starts.
struct GlancingPlan {
  int64_t n = 0;
  int64_t span_start = 0;
  std::vector<int64_t> positions;

  bool empty() const { return n == 0; }
};

GlancingPlan make_glancing_plan(const TokenSeq& draft_tokens,
                                const TokenSeq& teacher_tokens, Scalar lambda,
                                Rng& rng);

// One row per drafter input: token t_i paired with the feature one step
// behind it.
struct DrafterInputs {
  TokenSeq tokens;
  Tensor features;  // rows x hidden
};

// Substitutes teacher values at every planned position: plan position w maps
// to input row w + row_offset; rows past the end are outside the sample and
// skipped. Token and feature are always swapped together.
void apply_coupled_replacement(DrafterInputs& inputs, const GlancingPlan& plan,
                               int64_t row_offset,
                               const TokenSeq& teacher_tokens,
                               const Tensor& teacher_features);

struct CsgdLossParts {
  Tensor total;  // reg + omega * (alpha * soft + (1 - alpha) * hard)
  Tensor reg;
  Tensor soft;
  Tensor hard;
};

// Combined regression + distillation loss over the prediction window. Both
// probability sides run through the target's LM head; the teacher side is
// detached.
CsgdLossParts csgd_loss(const Tensor& pred_features,
                        const Tensor& teacher_features,
                        const Tensor& teacher_logits,
                        const TokenSeq& teacher_tokens,
                        const TargetModel& target, const CsgdConfig& cfg);

struct EpochMetrics {
  int64_t epoch = 0;
  Scalar lambda = 0.0;
  Scalar loss = 0.0;
  Scalar reg = 0.0;
  Scalar soft = 0.0;
  Scalar hard = 0.0;
};

void append_metrics_csv(const std::string& path,
                        const std::vector<EpochMetrics>& rows);

// Inspection hook: fires after each glancing replacement with the inputs
// before/after and the teacher rows, so tests can audit the coupling.
struct ReplacementAudit {
  const GlancingPlan& plan;
  int64_t row_offset;
  const DrafterInputs& before;
  const DrafterInputs& after;
  const TokenSeq& teacher_tokens;
  const Tensor& teacher_features;
  Scalar lambda;
  int64_t hamming;
};
using ReplacementObserver = std::function<void(const ReplacementAudit&)>;

// Two-pass glancing distillation. Per batch sample: teacher targets come
// from a cached frozen-teacher forward; pass 1 predicts with teacher-fed
// inputs; the second-pass inputs are the drafter's own detached predictions
// with a teacher-corrected span; the loss and optimizer step use pass 2
// only. Teacher features receive U(-noise,+noise) perturbation wherever
// they enter the drafter.
DrafterModel train_drafter(const TargetModel& target, const Corpus& corpus,
                           const CsgdConfig& cfg, uint64_t seed,
                           std::vector<EpochMetrics>* metrics_out = nullptr,
                           std::ostream* log = nullptr,
                           const ReplacementObserver& observer = nullptr);

}  // namespace falcon
