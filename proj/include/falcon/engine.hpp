#pragma once

#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "falcon/model.hpp"
#include "falcon/tree.hpp"

namespace falcon {

// Anything that can grow a draft tree from the committed state. The trained
// drafter is the production implementation; tests plug in oracle and
// adversarial doubles.
class DraftSource {
 public:
  virtual ~DraftSource() = default;
  virtual DraftTree propose(const Tensor& prefix_features,
                            const TokenSeq& prefix_tokens,
                            const TreeShape& shape, int64_t passes) = 0;
};

class ModelDraftSource : public DraftSource {
 public:
  explicit ModelDraftSource(const DrafterModel& drafter) : drafter_(&drafter) {}
  DraftTree propose(const Tensor& prefix_features, const TokenSeq& prefix_tokens,
                    const TreeShape& shape, int64_t passes) override;

 private:
  const DrafterModel* drafter_;
};

// Upper-bound double: drafts exactly the target's greedy continuation along
// the first block of every level and the shaped ranks elsewhere.
class OracleDraftSource : public DraftSource {
 public:
  explicit OracleDraftSource(const TargetModel& target) : target_(&target) {}
  DraftTree propose(const Tensor& prefix_features, const TokenSeq& prefix_tokens,
                    const TreeShape& shape, int64_t passes) override;

 private:
  const TargetModel* target_;
};

struct DecodeMetrics {
  int64_t tokens_total = 0;         // emitted beyond the prompt
  int64_t tokens_from_drafter = 0;  // emitted tokens that the drafter proposed
  int64_t draft_phases = 0;
  std::vector<int64_t> accepted_per_phase;
  uint64_t wall_ns_speculative = 0;
  uint64_t wall_ns_baseline = 0;

  Scalar alpha() const {
    return tokens_total == 0
               ? 0.0
               : static_cast<Scalar>(tokens_from_drafter) /
                     static_cast<Scalar>(tokens_total);
  }
  Scalar tau() const {
    if (accepted_per_phase.empty()) return 0.0;
    Scalar sum = 0.0;
    for (int64_t a : accepted_per_phase) sum += static_cast<Scalar>(a);
    return sum / static_cast<Scalar>(accepted_per_phase.size());
  }
};

struct VerifyResult {
  std::vector<int64_t> accepted_nodes;  // indices into the tree, root path
  TokenSeq accepted_tokens;
  TokenId bonus = 0;
  Tensor features;  // target features for [prefix rows | tree rows]
};

// One target forward over prefix + flattened tree with ancestor-only
// visibility, then the greedy walk: a node is accepted iff its token equals
// the target argmax at its parent's row. Also yields the bonus token at the
// deepest accepted row.
VerifyResult verify_tree_greedy(const TargetModel& target,
                                const TokenSeq& prefix, const DraftTree& tree);

struct DecodeSession {
  const TargetModel* target = nullptr;
  DraftSource* drafter = nullptr;
  TreeShape shape;
  uint64_t seed = 0;

  // committed state after the last generate call
  TokenSeq committed;
  std::vector<Scalar> features;  // committed rows x hidden
  int64_t feature_rows_valid = 0;
};

struct GenerateResult {
  TokenSeq tokens;  // prompt + generated
  DecodeMetrics metrics;
  bool truncated = false;  // stopped early at the context boundary
};

// Draft / verify / commit loop at temperature 0. Output is token-for-token
// identical to greedy_ar_generate for any draft source; phases that cannot
// fit a tree inside the context fall back to single AR steps.
GenerateResult speculative_generate(DecodeSession& session,
                                    const TokenSeq& prompt, int64_t max_new);

struct BenchRow {
  int64_t prompt_id = 0;
  int64_t rep = 0;
  int64_t tokens = 0;
  int64_t phases = 0;
  Scalar alpha = 0.0;
  Scalar tau = 0.0;
  uint64_t wall_ns_spec = 0;
  uint64_t wall_ns_ar = 0;
  Scalar speedup = 0.0;
  bool low_confidence = false;  // timings below timer-resolution comfort
};

struct BenchReport {
  std::vector<BenchRow> rows;
  Scalar mean_speedup = 0.0;
  Scalar mean_alpha = 0.0;
  Scalar mean_tau = 0.0;
  bool any_low_confidence = false;
};

// Each prompt runs one untimed warmup pair, then `reps` timed pairs of
// speculative vs plain greedy decoding.
BenchReport bench(DecodeSession& session, const std::vector<TokenSeq>& prompts,
                  int64_t reps, int64_t max_new);

void write_bench_csv(const BenchReport& report, const std::string& path);
std::string bench_table(const BenchReport& report);

}  // namespace falcon
