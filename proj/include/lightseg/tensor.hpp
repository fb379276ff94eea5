#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lightseg/errors.hpp"

namespace lightseg {

struct Shape4 {
  std::int64_t n = 0, c = 0, h = 0, w = 0;

  std::int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

// Integer label plane(s), shape (N,H,W). Used for segmentation targets.
struct IntMask {
  std::int64_t n = 0, h = 0, w = 0;
  std::vector<std::int32_t> values;

  std::int64_t numel() const { return n * h * w; }
  std::int32_t at(std::int64_t ni, std::int64_t hi, std::int64_t wi) const {
    return values[(ni * h + hi) * w + wi];
  }
};

template <typename T>
struct TensorImpl {
  Shape4 shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // written by Tape::backward for requires_grad leaves
};

template <typename T>
class Tape;

// Dense 4-D array with value semantics over shared storage. A tensor becomes
// a node of a Tape when an op consumes or produces it; the handle is only
// meaningful for the tape that assigned it.
template <typename T>
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

  Tensor(Shape4 shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
      throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape.str());
    }
    impl_->shape = shape;
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape4 shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<T>(static_cast<std::size_t>(shape.numel()), T(0)),
                  requires_grad);
  }
  static Tensor full(Shape4 shape, T value, bool requires_grad = false) {
    return Tensor(shape, std::vector<T>(static_cast<std::size_t>(shape.numel()), value),
                  requires_grad);
  }
  // 1-D convenience: shape (1, len, 1, 1).
  static Tensor vec(std::vector<T> values, bool requires_grad = false) {
    const auto len = static_cast<std::int64_t>(values.size());
    return Tensor({1, len, 1, 1}, std::move(values), requires_grad);
  }

  const Shape4& shape() const { return impl_->shape; }
  std::int64_t numel() const { return impl_->shape.numel(); }
  std::span<const T> data() const { return impl_->data; }
  std::span<T> data() { return impl_->data; }
  T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    const auto& s = impl_->shape;
    return impl_->data[((n * s.c + c) * s.h + h) * s.w + w];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }

  bool defined() const { return impl_ && impl_->shape.numel() > 0; }
  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
  std::int64_t node_ = -1;
  std::uint64_t tape_id_ = 0;

  friend class Tape<T>;
};

// Reverse-mode tape. Nodes are appended in recording order; backward walks
// them once in reverse. Leaves are registered lazily the first time an op
// consumes a tensor that the tape has not seen.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<T>&)>;

  explicit Tape(bool grad_enabled = true);

  bool grad_enabled() const { return grad_enabled_; }
  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }

  // Node id for an input tensor, registering it as a leaf if needed.
  std::int64_t node_of(const Tensor<T>& t);
  bool node_needs_grad(std::int64_t node) const { return nodes_[node].needs_grad; }

  // Records an op that produced `result` from `inputs`.
  void record(Tensor<T>& result, const std::vector<std::int64_t>& inputs, BackwardFn fn);

  // Runs reverse accumulation from a scalar loss recorded on this tape.
  // Populates impl->grad on every requires_grad leaf. Single use.
  void backward(const Tensor<T>& loss);

  // Gradient buffer of a node, zero-initialised on first touch (backward only).
  std::vector<T>& grad_slot(std::int64_t node, std::int64_t numel);
  bool grad_pending(std::int64_t node) const { return !grads_[node].empty(); }

 private:
  struct Node {
    std::vector<std::int64_t> inputs;
    bool needs_grad = false;
    std::shared_ptr<TensorImpl<T>> leaf;  // set for leaf nodes only
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  std::unordered_map<TensorImpl<T>*, std::int64_t> leaf_ids_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
  std::uint64_t id_ = 0;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace lightseg
