#include "falcon/tensor.hpp"

#include <atomic>

namespace falcon {

namespace {
std::atomic<uint64_t> g_next_node_id{1};

std::shared_ptr<TensorData> make_data(const Shape& shape,
                                      std::vector<Scalar> values) {
  for (int64_t d : shape) {
    if (d <= 0) raise(ErrorKind::Dimension, "tensor dims must be positive, got " + shape_str(shape));
  }
  if (numel(shape) != static_cast<int64_t>(values.size())) {
    raise(ErrorKind::Dimension,
          "shape " + shape_str(shape) + " does not match buffer of " +
              std::to_string(values.size()) + " elements");
  }
  auto d = std::make_shared<TensorData>();
  d->shape = shape;
  d->values = std::move(values);
  d->id = g_next_node_id.fetch_add(1);
  return d;
}
}  // namespace

uint64_t GradientTape::next_id() { return g_next_node_id.fetch_add(1); }

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(make_data(shape, std::vector<Scalar>(numel(shape), 0.0)));
}

Tensor Tensor::full(const Shape& shape, Scalar v) {
  return Tensor(make_data(shape, std::vector<Scalar>(numel(shape), v)));
}

Tensor Tensor::from(const Shape& shape, std::vector<Scalar> values) {
  return Tensor(make_data(shape, std::move(values)));
}

Scalar Tensor::item() const {
  if (size() != 1) {
    raise(ErrorKind::Dimension,
          "item() requires a scalar tensor, got shape " + shape_str(shape()));
  }
  return data_->values[0];
}

const std::vector<Scalar>& Tensor::grad() const {
  if (data_->grad.empty()) {
    raise(ErrorKind::Contract, "tensor has no gradient; run backward() first");
  }
  return data_->grad;
}

Tensor Tensor::detached() const {
  return Tensor(make_data(data_->shape, data_->values));
}

Tensor Tensor::reshaped(const Shape& shape) const {
  if (numel(shape) != size()) {
    raise(ErrorKind::Dimension, "cannot reshape " + shape_str(this->shape()) +
                                    " to " + shape_str(shape));
  }
  Tensor out(make_data(shape, data_->values));
  auto src = data_;
  auto dst = out.data_;
  autograd_record({*this}, out, [src, dst]() {
    if (dst->grad.empty() || !src->requires_grad) return;
    src->ensure_grad();
    for (size_t i = 0; i < src->grad.size(); ++i) src->grad[i] += dst->grad[i];
  });
  return out;
}

Tensor GradientTape::parameter(const Shape& shape, std::vector<Scalar> init) {
  Tensor t(make_data(shape, std::move(init)));
  t.data_->requires_grad = true;
  t.data_->tape = this;
  return t;
}

void GradientTape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    raise(ErrorKind::Dimension,
          "backward() expects a scalar loss, got " + shape_str(loss.shape()));
  }
  if (loss.tape() != this || !loss.requires_grad()) {
    raise(ErrorKind::Contract, "loss is not tracked by this tape");
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    it->backward();
  }
}

namespace {
thread_local bool g_recording = true;
}

NoGradGuard::NoGradGuard() : prev_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = prev_; }

bool autograd_active(const std::vector<Tensor>& inputs) {
  if (!g_recording) return false;
  for (const auto& t : inputs) {
    if (t.requires_grad() && t.tape() != nullptr) return true;
  }
  return false;
}

void autograd_record(const std::vector<Tensor>& inputs, Tensor& out,
                     std::function<void()> backward_fn) {
  if (!g_recording) return;
  GradientTape* tape = nullptr;
  std::vector<uint64_t> ids;
  for (const auto& t : inputs) {
    if (t.requires_grad() && t.tape() != nullptr) {
      if (tape != nullptr && tape != t.tape()) {
        raise(ErrorKind::Contract, "operation mixes tensors from two tapes");
      }
      tape = t.tape();
    }
    ids.push_back(t.id());
  }
  if (tape == nullptr) return;
  out.node()->requires_grad = true;
  out.node()->tape = tape;
  tape->record(std::move(ids), out.id(), std::move(backward_fn));
}

}  // namespace falcon
