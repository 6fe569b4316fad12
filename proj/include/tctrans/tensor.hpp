#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "tctrans/common.hpp"
#include "tctrans/rng.hpp"

namespace tct {

template <typename T>
class Tensor;

// One record in the define-by-run graph. Holds the op output, the incoming
// edges, and the closure that pushes this node's gradient into its parents.
template <typename T>
struct Node {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  bool retain_grad = false;  // keep grad after backward (leaves always keep it)
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;

  int64_t numel() const {
    int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
  }
  bool is_leaf() const { return !backward; }
  std::vector<T>& grad_buf() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Value-semantics handle onto a graph node.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, T value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                          bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  // Gaussian init, N(0, stddev^2).
  static Tensor randn(std::vector<int> shape, Rng& rng, T stddev,
                      bool requires_grad = false);
  static Tensor uniform(std::vector<int> shape, Rng& rng, T lo, T hi,
                        bool requires_grad = false);
  // Fresh op node whose requires_grad is inherited from the parents.
  static Tensor op_node(std::vector<int> shape, const char* op,
                        std::vector<Tensor> parents);

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return int(n_->shape.size()); }
  int dim(int i) const { return n_->shape[size_t(i)]; }
  int64_t numel() const { return n_->numel(); }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }
  T item() const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }
  void retain_grad() { n_->retain_grad = true; }

  bool has_grad() const { return !n_->grad.empty(); }
  std::vector<T>& grad() { return n_->grad_buf(); }
  const std::vector<T>& grad() const { return n_->grad; }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  // Value copy detached from the graph.
  Tensor detached() const { return from_data(n_->shape, n_->value); }

  std::shared_ptr<Node<T>> node() const { return n_; }
  Node<T>& raw() { return *n_; }
  const Node<T>& raw() const { return *n_; }

 private:
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}
  std::shared_ptr<Node<T>> n_;
};

// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
// once in reverse topological order; leaf gradients accumulate additively
// across calls until zeroed. Gradients of non-retained interior nodes are
// released as soon as they have been consumed.
template <typename T>
void backward(const Tensor<T>& loss);

// Throws NumericError if the tensor holds NaN/Inf. Compiled to a no-op scan
// guard in release via the NDEBUG check at call sites in ops.
template <typename T>
void check_finite(const Tensor<T>& t, const char* where);

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;
extern template void backward<float>(const Tensor<float>&);
extern template void backward<double>(const Tensor<double>&);
extern template void check_finite<float>(const Tensor<float>&, const char*);
extern template void check_finite<double>(const Tensor<double>&, const char*);

}  // namespace tct
