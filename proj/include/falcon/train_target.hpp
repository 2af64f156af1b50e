#pragma once

#include <ostream>
#include <vector>

#include "falcon/config.hpp"
#include "falcon/corpus.hpp"
#include "falcon/model.hpp"

namespace falcon {

struct TargetEpochMetrics {
  int64_t epoch = 0;
  Scalar train_loss = 0.0;
  Scalar val_loss = 0.0;
};

// Next-token cross-entropy over corpus windows with AdamW. The returned
// model is frozen.
TargetModel train_target(const ModelConfig& mc, const Corpus& corpus,
                         const TargetTrainConfig& cfg, uint64_t seed,
                         std::vector<TargetEpochMetrics>* metrics_out = nullptr,
                         std::ostream* log = nullptr);

}  // namespace falcon
