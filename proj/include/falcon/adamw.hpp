#pragma once

#include <vector>

#include "falcon/tensor.hpp"

namespace falcon {

struct AdamWConfig {
  Scalar lr = 1e-3;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.95;
  Scalar eps = 1e-8;
  Scalar weight_decay = 0.0;
};

// Decoupled weight decay Adam with bias-corrected moments.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg);

  // Applies one update from the accumulated gradients. Rejects the step
  // (leaving params and state untouched) when any gradient is non-finite.
  void step();
  void zero_grad();

  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<Scalar>> m_;
  std::vector<std::vector<Scalar>> v_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace falcon
