#include "falcon/adamw.hpp"

#include <cmath>

namespace falcon {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamW::step() {
  for (const auto& p : params_) {
    if (!p.has_grad()) continue;
    for (Scalar g : p.node()->grad) {
      if (!std::isfinite(g)) {
        raise(ErrorKind::Numeric, "adamw: non-finite gradient, step rejected");
      }
    }
  }
  ++t_;
  const Scalar bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<Scalar>(t_));
  const Scalar bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<Scalar>(t_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    auto node = params_[pi].node();
    if (node->grad.empty()) continue;
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (size_t i = 0; i < node->values.size(); ++i) {
      const Scalar g = node->grad[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const Scalar mhat = m[i] / bc1;
      const Scalar vhat = v[i] / bc2;
      node->values[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                    cfg_.weight_decay * node->values[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace falcon
