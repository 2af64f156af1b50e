#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "falcon/common.hpp"

namespace falcon {

class GradientTape;

struct TensorData {
  Shape shape;
  std::vector<Scalar> values;
  std::vector<Scalar> grad;  // empty until the first accumulation
  bool requires_grad = false;
  GradientTape* tape = nullptr;
  uint64_t id = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

// Dense row-major tensor with shared storage. Copying a Tensor aliases the
// underlying buffer; use clone()/detached() for an independent copy.
class Tensor {
 public:
  Tensor() : data_(nullptr) {}

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, Scalar v);
  static Tensor from(const Shape& shape, std::vector<Scalar> values);
  static Tensor scalar(Scalar v) { return from({1}, {v}); }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  int64_t size() const { return static_cast<int64_t>(data_->values.size()); }
  int64_t dim(size_t i) const { return data_->shape[i]; }
  size_t rank() const { return data_->shape.size(); }

  std::vector<Scalar>& values() { return data_->values; }
  const std::vector<Scalar>& values() const { return data_->values; }
  Scalar& at(int64_t i) { return data_->values[static_cast<size_t>(i)]; }
  Scalar at(int64_t i) const { return data_->values[static_cast<size_t>(i)]; }
  Scalar item() const;

  bool requires_grad() const { return data_->requires_grad; }
  GradientTape* tape() const { return data_->tape; }
  uint64_t id() const { return data_->id; }

  bool has_grad() const { return !data_->grad.empty(); }
  const std::vector<Scalar>& grad() const;
  void zero_grad() {
    if (!data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
  }

  // Independent copy of the values, detached from any tape.
  Tensor detached() const;
  // Same values, reinterpreted shape; shares no storage with the source.
  Tensor reshaped(const Shape& shape) const;

  std::shared_ptr<TensorData> node() const { return data_; }

 private:
  friend class GradientTape;
  explicit Tensor(std::shared_ptr<TensorData> d) : data_(std::move(d)) {}
  std::shared_ptr<TensorData> data_;
};

// Reverse-mode tape. Operations append a record during the forward pass;
// backward() replays the records in reverse order. Records are appended in
// forward order, so an op's inputs always precede it on the tape.
class GradientTape {
 public:
  struct Record {
    std::vector<uint64_t> input_ids;
    uint64_t output_id;
    std::function<void()> backward;
  };

  // A trainable leaf owned by this tape.
  Tensor parameter(const Shape& shape, std::vector<Scalar> init);

  void record(std::vector<uint64_t> input_ids, uint64_t output_id,
              std::function<void()> backward_fn) {
    records_.push_back(
        {std::move(input_ids), output_id, std::move(backward_fn)});
  }

  // Seeds d(loss)/d(loss) = 1 and replays the tape. `loss` must be scalar.
  void backward(const Tensor& loss);

  // Drops all recorded operations (parameters stay alive independently).
  void clear() { records_.clear(); }
  size_t op_count() const { return records_.size(); }

  static uint64_t next_id();

 private:
  std::vector<Record> records_;
};

// Stamps `out` as requiring grad on `tape` and records the backward closure,
// if any input participates in gradient tracking. Ops call this after
// computing their forward values.
void autograd_record(const std::vector<Tensor>& inputs, Tensor& out,
                     std::function<void()> backward_fn);

// True when at least one input is tracked by a tape and recording is on.
bool autograd_active(const std::vector<Tensor>& inputs);

// Suspends recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

}  // namespace falcon
