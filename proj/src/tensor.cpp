#include "lightseg/tensor.hpp"

#include <atomic>

namespace lightseg {

namespace {
std::atomic<std::uint64_t> g_tape_counter{1};
}

template <typename T>
Tape<T>::Tape(bool grad_enabled)
    : grad_enabled_(grad_enabled), id_(g_tape_counter.fetch_add(1)) {}

template <typename T>
std::int64_t Tape<T>::node_of(const Tensor<T>& t) {
  if (t.tape_id_ == id_ && t.node_ >= 0) return t.node_;
  auto* key = t.impl_.get();
  if (auto it = leaf_ids_.find(key); it != leaf_ids_.end()) return it->second;
  Node node;
  node.needs_grad = t.impl_->requires_grad;
  node.leaf = t.impl_;
  nodes_.push_back(std::move(node));
  const auto idx = static_cast<std::int64_t>(nodes_.size()) - 1;
  leaf_ids_.emplace(key, idx);
  return idx;
}

template <typename T>
void Tape<T>::record(Tensor<T>& result, const std::vector<std::int64_t>& inputs,
                     BackwardFn fn) {
  Node node;
  node.inputs = inputs;
  for (auto i : inputs) node.needs_grad = node.needs_grad || nodes_[i].needs_grad;
  node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  result.node_ = static_cast<std::int64_t>(nodes_.size()) - 1;
  result.tape_id_ = id_;
}

template <typename T>
std::vector<T>& Tape<T>::grad_slot(std::int64_t node, std::int64_t numel) {
  auto& g = grads_[node];
  if (g.empty()) g.assign(static_cast<std::size_t>(numel), T(0));
  return g;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (backward_done_) {
    throw std::logic_error("backward already ran on this tape; record a fresh graph");
  }
  if (loss.tape_id_ != id_ || loss.node_ < 0) {
    throw std::invalid_argument("backward: loss was not produced by ops on this tape");
  }
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                loss.shape().str());
  }
  backward_done_ = true;
  grads_.assign(nodes_.size(), {});
  grads_[loss.node_] = {T(1)};

  for (std::int64_t i = static_cast<std::int64_t>(nodes_.size()) - 1; i >= 0; --i) {
    auto& node = nodes_[i];
    if (!node.backward || grads_[i].empty() || !node.needs_grad) continue;
    node.backward(*this, grads_[i]);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    auto& node = nodes_[i];
    if (!node.leaf || !node.leaf->requires_grad) continue;
    if (grads_[i].empty()) {
      node.leaf->grad.assign(node.leaf->data.size(), T(0));
    } else {
      node.leaf->grad = std::move(grads_[i]);
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace lightseg
