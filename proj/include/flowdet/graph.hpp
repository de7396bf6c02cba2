#pragma once

#include <atomic>
#include <functional>

#include "flowdet/tensor.hpp"

namespace flowdet {

namespace detail {
inline std::atomic<uint64_t> g_graph_epoch{0};
}

// Define-by-run tape. While a Graph is alive on a thread, differentiable ops
// append a node per call; nodes are therefore already in topological order
// and backward() is a single reverse sweep that visits each node once.
// Gradients accumulate into the storage-level grad buffers, which are zeroed
// lazily the first time a tensor participates in a given graph (epoch check),
// so parameters can be reused across training steps without explicit zeroing.
template <typename T>
class Graph {
public:
  Graph() : epoch_(++detail::g_graph_epoch), prev_(current_) { current_ = this; }
  ~Graph() { current_ = prev_; }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current() { return current_; }

  uint64_t epoch() const { return epoch_; }
  size_t node_count() const { return tape_.size(); }

  void add_node(const char* name, std::function<void()> fn) {
    tape_.push_back(Node{name, std::move(fn)});
  }

  // Zero-initialize (once per graph) the grad buffer behind `t`.
  void prepare(const Tensor<T>& t) {
    auto* st = t.storage();
    if (st->grad_epoch != epoch_) {
      st->grad.assign(st->data.size(), T(0));
      st->grad_epoch = epoch_;
    }
  }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ValueError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw ValueError("backward: loss does not depend on any tensor with requires_grad");
    prepare(loss);
    loss.storage()->grad[0] = T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) it->fn();
  }

private:
  struct Node {
    const char* name;
    std::function<void()> fn;
  };

  std::vector<Node> tape_;
  uint64_t epoch_;
  Graph* prev_;
  inline static thread_local Graph* current_ = nullptr;
};

namespace detail {

// Common recording prologue: decide whether to record, propagate the
// requires_grad flag to the output and make sure every participating grad
// buffer exists. Returns the graph to record on, or nullptr.
template <typename T>
inline Graph<T>* begin_record(std::initializer_list<const Tensor<T>*> inputs, Tensor<T>& out) {
  Graph<T>* g = Graph<T>::current();
  if (!g) return nullptr;
  bool any = false;
  for (const Tensor<T>* in : inputs)
    if (in->requires_grad()) any = true;
  if (!any) return nullptr;
  out.set_requires_grad(true);
  g->prepare(out);
  for (const Tensor<T>* in : inputs)
    if (in->requires_grad()) g->prepare(*in);
  return g;
}

}  // namespace detail

}  // namespace flowdet
