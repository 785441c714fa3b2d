#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "deeptopo/common.hpp"
#include "deeptopo/rng.hpp"

namespace deeptopo {

// A dense row-major tensor that doubles as a node of the reverse-mode graph.
// Leaves have an empty op record; every produced tensor remembers the op
// name, its input tensors and a backward step that scatters the output
// cotangent into the inputs' grad buffers.
template <typename T>
struct TensorNode {
  std::vector<i64> shape;
  std::vector<T> v;
  std::vector<T> g;
  bool requires_grad = false;

  // op record
  const char* op = "";
  std::vector<std::shared_ptr<TensorNode<T>>> inputs;
  std::function<void(TensorNode<T>&)> backward_step;

  i64 numel() const {
    i64 n = 1;
    for (i64 d : shape) n *= d;
    return n;
  }

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), T(0));
  }

  void zero_grad() { g.assign(v.size(), T(0)); }

  T scalar() const {
    DT_CHECK(v.size() == 1, "scalar(): tensor has ", v.size(), " elements");
    return v[0];
  }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }
  T* grad() { return g.data(); }
  const T* grad() const { return g.data(); }
};

template <typename T>
using Var = std::shared_ptr<TensorNode<T>>;

template <typename T>
Var<T> tensor(std::vector<i64> shape, bool requires_grad = false) {
  auto t = std::make_shared<TensorNode<T>>();
  t->shape = std::move(shape);
  t->v.assign(static_cast<std::size_t>(t->numel()), T(0));
  t->requires_grad = requires_grad;
  return t;
}

template <typename T>
Var<T> tensor(std::vector<i64> shape, std::vector<T> values,
              bool requires_grad = false) {
  auto t = std::make_shared<TensorNode<T>>();
  t->shape = std::move(shape);
  DT_CHECK(static_cast<i64>(values.size()) == t->numel(),
           "tensor(): ", values.size(), " values for shape of ", t->numel());
  t->v = std::move(values);
  t->requires_grad = requires_grad;
  return t;
}

template <typename T>
Var<T> scalar_of(T value) {
  return tensor<T>({1}, {value});
}

template <typename T>
Var<T> randn(Rng& rng, std::vector<i64> shape, double stddev,
             bool requires_grad = false) {
  auto t = tensor<T>(std::move(shape), requires_grad);
  for (auto& x : t->v) x = static_cast<T>(rng.normal() * stddev);
  return t;
}

// Reverse topological order of the recorded graph below root. Every
// recorded op appears exactly once; the graph is acyclic by construction
// (ops only reference already-built tensors).
template <typename T>
std::vector<TensorNode<T>*> topo_order(const Var<T>& root);

// Reverse-mode sweep from a scalar root. Grad buffers of all reachable
// tensors that require grad are accumulated into (callers zero parameter
// grads between optimizer steps).
template <typename T>
void backward(const Var<T>& root);

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "input#k[i]" of the worst coordinate
  i64 coords_checked = 0;
};

// Central-difference check of the reverse-mode gradients of a scalar-valued
// closure. Relative error is |analytic - fd| / (|analytic| + 1e-8). When
// max_coords_per_input > 0 a seeded subset of coordinates per input is
// probed instead of every element.
template <typename T>
GradCheckResult grad_check(
    const std::function<Var<T>(const std::vector<Var<T>>&)>& closure,
    std::vector<Var<T>> inputs, double step, i64 max_coords_per_input = 0,
    std::uint64_t coord_seed = 0);

}  // namespace deeptopo
