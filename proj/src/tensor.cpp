#include "tctrans/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace tct {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  int64_t count = shape_numel(shape);
  n->shape = std::move(shape);
  n->value.assign(size_t(count), T(0));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<int> shape, T value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from_data(std::vector<int> shape, std::vector<T> data,
                               bool requires_grad) {
  int64_t count = shape_numel(shape);
  if (int64_t(data.size()) != count) {
    throw ShapeError("data size " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::randn(std::vector<int> shape, Rng& rng, T stddev,
                           bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& x : t.data()) x = T(rng.normal()) * stddev;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::uniform(std::vector<int> shape, Rng& rng, T lo, T hi,
                             bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& x : t.data()) x = T(rng.uniform(double(lo), double(hi)));
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::op_node(std::vector<int> shape, const char* op,
                             std::vector<Tensor> parents) {
  auto n = std::make_shared<Node<T>>();
  int64_t count = shape_numel(shape);
  n->shape = std::move(shape);
  n->value.assign(size_t(count), T(0));
  n->op = op;
  n->parents.reserve(parents.size());
  for (auto& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.node());
  }
  return Tensor(std::move(n));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a scalar tensor, got shape " + shape_str(shape()));
  }
  return n_->value[0];
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss tensor");
  }
  Node<T>* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS over requires-grad nodes: parents first, so the
  // reversed list processes every consumer before its producers.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    bool descended = false;
    while (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (descended) continue;
    order.push_back(node);
    stack.pop_back();
  }

  root->grad_buf()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward) continue;  // leaf: gradient stays for the caller
    if (!n->grad.empty()) n->backward(*n);
    if (!n->retain_grad) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* where) {
  for (const T& x : t.data()) {
    if (!std::isfinite(double(x))) {
      throw NumericError(std::string("non-finite value produced by ") + where);
    }
  }
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template void check_finite<float>(const Tensor<float>&, const char*);
template void check_finite<double>(const Tensor<double>&, const char*);

}  // namespace tct
