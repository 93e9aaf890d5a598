#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "propih/common.hpp"

namespace propih {

template <typename T>
class Tape;

// Dense row-major tensor. Copying a Tensor copies a handle: the payload
// (values plus accumulated leaf gradient) is shared. Values produced by ops
// are treated as immutable; mutable_values() exists for optimizers and
// fixtures that own their tensors.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : p_(std::make_shared<Payload>()) {
    std::int64_t n = shape_numel(shape);
    if (n != static_cast<std::int64_t>(values.size()))
      fail_validation("tensor: shape ", shape_str(shape), " wants ", n,
                      " values, got ", values.size());
    p_->shape = std::move(shape);
    p_->data = std::move(values);
    p_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::int64_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)),
                  requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::int64_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value),
                  requires_grad);
  }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  bool defined() const { return static_cast<bool>(p_); }

  const Shape& shape() const { return p_->shape; }

  int dim(std::size_t i) const { return p_->shape.at(i); }

  std::int64_t numel() const { return static_cast<std::int64_t>(p_->data.size()); }

  const std::vector<T>& values() const { return p_->data; }

  std::vector<T>& mutable_values() { return p_->data; }

  // Shares ownership of the payload while exposing only the value array;
  // backward closures capture this so inputs outlive the graph.
  std::shared_ptr<const std::vector<T>> shared_values() const {
    return std::shared_ptr<const std::vector<T>>(p_, &p_->data);
  }

  T item() const {
    if (numel() != 1) fail_validation("item: tensor has ", numel(), " elements");
    return p_->data[0];
  }

  T at(std::initializer_list<int> idx) const {
    const Shape& s = p_->shape;
    if (idx.size() != s.size())
      fail_validation("at: rank mismatch for shape ", shape_str(s));
    std::int64_t flat = 0;
    std::size_t d = 0;
    for (int i : idx) {
      if (i < 0 || i >= s[d]) fail_validation("at: index out of range");
      flat = flat * s[d] + i;
      ++d;
    }
    return p_->data[static_cast<std::size_t>(flat)];
  }

  bool requires_grad() const { return p_ && p_->requires_grad; }

  void set_requires_grad(bool v) { p_->requires_grad = v; }

  // Accumulated gradient for leaf tensors; empty until a backward pass has
  // been flushed into this leaf.
  const std::vector<T>& grad() const { return p_->grad; }

  void zero_grad() { p_->grad.clear(); }

  // Same payload, detached from any tape and never requiring grad.
  Tensor detach() const {
    Tensor t;
    t.p_ = std::make_shared<Payload>();
    t.p_->shape = p_->shape;
    t.p_->data = p_->data;  // copy: detached values are independent
    t.p_->requires_grad = false;
    return t;
  }

  // Deep copy: a fresh payload with the same values, flag, and gradient.
  Tensor clone() const {
    Tensor t;
    t.p_ = std::make_shared<Payload>(*p_);
    return t;
  }

 private:
  struct Payload {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  std::shared_ptr<Payload> p_;
  Tape<T>* tape_ = nullptr;  // set when this tensor is the output of a recorded op
  int node_ = -1;

  friend class Tape<T>;
};

// Records ops in execution order, which for a single-threaded graph build is
// already a topological order, so the reverse sweep is a plain reverse loop.
// Gradients of shared subexpressions accumulate because every consumer adds
// into the producer's buffer before the producer's own backward runs.
template <typename T>
class Tape {
 public:
  class NodeCtx;
  using BackwardFn = std::function<void(NodeCtx&)>;

 private:
  struct InputRef {
    int id = -1;
    std::int64_t numel = 0;
    bool needs = false;
  };
  struct Node {
    std::vector<InputRef> inputs;
    BackwardFn fn;  // empty for leaves
    std::shared_ptr<typename Tensor<T>::Payload> leaf;
  };

 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // True when at least one input is either tracked on this tape or a leaf
  // that requires grad; ops skip recording otherwise, which is what makes
  // frozen-encoder passes over constant inputs cost no graph memory.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) {
    for (const Tensor<T>* t : inputs)
      if (tracked(*t)) return true;
    return false;
  }

  void record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
              BackwardFn fn) {
    Node node;
    node.fn = std::move(fn);
    node.inputs.reserve(inputs.size());
    for (const Tensor<T>* t : inputs) {
      InputRef ref;
      ref.id = intern(*t);
      ref.numel = t->numel();
      ref.needs = tracked(*t);
      node.inputs.push_back(ref);
    }
    out.tape_ = this;
    out.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
  }

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Flushes leaf gradients with scale 1.
  void backward(const Tensor<T>& loss) {
    backward_no_flush(loss);
    apply_leaf_grads(T(1));
  }

  // Reverse sweep only; leaf gradients stay in tape-local buffers. Used for
  // ordered batch reduction: sweep each sample's tape, then flush all tapes
  // in a fixed order with scale 1/batch.
  void backward_no_flush(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      fail_validation("backward: loss must be a defined scalar");
    if (loss.tape_ != this || loss.node_ < 0)
      fail_validation("backward: loss was not produced on this tape");
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(loss.node_)] = {T(1)};
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      Node& node = nodes_[static_cast<std::size_t>(id)];
      std::vector<T>& g = grads_[static_cast<std::size_t>(id)];
      if (g.empty()) continue;  // not on the path from the loss
      if (!node.fn) continue;   // leaf: keep buffer for the flush
      NodeCtx ctx(*this, node, g);
      node.fn(ctx);
      std::vector<T>().swap(g);  // free as the sweep retreats
    }
    swept_ = true;
  }

  // Accumulates tape-local leaf buffers into the leaves' grad storage.
  void apply_leaf_grads(T scale) {
    if (!swept_) fail_validation("apply_leaf_grads: no backward sweep recorded");
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      Node& node = nodes_[id];
      if (!node.leaf || !node.leaf->requires_grad) continue;
      const std::vector<T>& g = grads_[id];
      if (g.empty()) continue;
      std::vector<T>& acc = node.leaf->grad;
      if (acc.empty()) acc.assign(node.leaf->data.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += scale * g[i];
    }
  }

  // Gradient buffer of a tracked tensor after backward_no_flush; empty vector
  // means the tensor did not influence the loss.
  std::vector<T> grad_of(const Tensor<T>& t) const {
    int id = -1;
    if (t.tape_ == this && t.node_ >= 0) {
      id = t.node_;
    } else {
      auto it = leaf_ids_.find(static_cast<const void*>(t.p_.get()));
      if (it != leaf_ids_.end()) id = it->second;
    }
    if (id < 0 || static_cast<std::size_t>(id) >= grads_.size()) return {};
    return grads_[static_cast<std::size_t>(id)];
  }

  class NodeCtx {
   public:
    const std::vector<T>& out_grad() const { return out_grad_; }

    // Buffer to accumulate the j-th input's gradient into, or nullptr when
    // that input does not need one. Lazily zero-initialized.
    std::vector<T>* in_grad(std::size_t j) {
      const InputRef& ref = node_.inputs.at(j);
      if (!ref.needs) return nullptr;
      std::vector<T>& buf = tape_.grads_[static_cast<std::size_t>(ref.id)];
      if (buf.empty()) buf.assign(static_cast<std::size_t>(ref.numel), T(0));
      return &buf;
    }

   private:
    NodeCtx(Tape& tape, Node& node, const std::vector<T>& out_grad)
        : tape_(tape), node_(node), out_grad_(out_grad) {}
    Tape& tape_;
    Node& node_;
    const std::vector<T>& out_grad_;
    friend class Tape;
  };

 private:
  bool tracked(const Tensor<T>& t) {
    if (t.tape_ == this && t.node_ >= 0) return true;
    if (t.tape_ != nullptr && t.tape_ != this)
      fail_validation("tape: input tensor belongs to a different tape");
    return t.requires_grad();
  }

  // Node id for an input: its own node when produced here, otherwise a leaf
  // node keyed by payload identity so repeated uses share one buffer.
  int intern(const Tensor<T>& t) {
    if (t.tape_ == this && t.node_ >= 0) return t.node_;
    const void* key = static_cast<const void*>(t.p_.get());
    auto it = leaf_ids_.find(key);
    if (it != leaf_ids_.end()) return it->second;
    Node node;
    node.leaf = t.p_;
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    leaf_ids_.emplace(key, id);
    return id;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> leaf_ids_;
  std::vector<std::vector<T>> grads_;
  bool swept_ = false;
};

}  // namespace propih
