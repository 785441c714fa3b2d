#include "deeptopo/tensor.hpp"

#include <cmath>
#include <unordered_set>

namespace deeptopo {

template <typename T>
std::vector<TensorNode<T>*> topo_order(const Var<T>& root) {
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> done;
  // Iterative DFS; a node is emitted after all of its inputs.
  struct Frame {
    TensorNode<T>* node;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  std::unordered_set<TensorNode<T>*> on_stack;
  stack.push_back({root.get(), 0});
  on_stack.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_input < f.node->inputs.size()) {
      TensorNode<T>* child = f.node->inputs[f.next_input++].get();
      if (!done.count(child) && !on_stack.count(child)) {
        stack.push_back({child, 0});
        on_stack.insert(child);
      }
    } else {
      done.insert(f.node);
      on_stack.erase(f.node);
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void backward(const Var<T>& root) {
  DT_CHECK(root->numel() == 1, "backward(): root must be scalar, has ",
           root->numel(), " elements");
  auto order = topo_order(root);
  for (auto* n : order) n->ensure_grad();
  root->g[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward_step) n->backward_step(*n);
  }
}

template <typename T>
GradCheckResult grad_check(
    const std::function<Var<T>(const std::vector<Var<T>>&)>& closure,
    std::vector<Var<T>> inputs, double step, i64 max_coords_per_input,
    std::uint64_t coord_seed) {
  DT_CHECK(step > 0, "grad_check: step must be positive, got ", step);
  for (auto& in : inputs) {
    in->requires_grad = true;
    in->zero_grad();
  }
  Var<T> out = closure(inputs);
  DT_CHECK(out->numel() == 1,
           "grad_check: closure output must be a scalar, has ", out->numel(),
           " elements");
  backward(out);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    in->ensure_grad();
    analytic.push_back(in->g);
  }

  GradCheckResult res;
  Rng pick(coord_seed ? coord_seed : 0x9d1f2c3b4a5e6f70ULL);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    const i64 n = in->numel();
    std::vector<i64> coords;
    if (max_coords_per_input > 0 && n > max_coords_per_input) {
      std::unordered_set<i64> seen;
      while (static_cast<i64>(coords.size()) < max_coords_per_input) {
        i64 c = pick.randint(n);
        if (seen.insert(c).second) coords.push_back(c);
      }
    } else {
      coords.resize(static_cast<std::size_t>(n));
      for (i64 i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    }
    for (i64 c : coords) {
      const T saved = in->v[static_cast<std::size_t>(c)];
      in->v[static_cast<std::size_t>(c)] = saved + static_cast<T>(step);
      const double fp = static_cast<double>(closure(inputs)->scalar());
      in->v[static_cast<std::size_t>(c)] = saved - static_cast<T>(step);
      const double fm = static_cast<double>(closure(inputs)->scalar());
      in->v[static_cast<std::size_t>(c)] = saved;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = static_cast<double>(analytic[k][static_cast<std::size_t>(c)]);
      const double rel = std::abs(an - fd) / (std::abs(an) + 1e-8);
      ++res.coords_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input#" + std::to_string(k) + "[" + std::to_string(c) +
                    "] analytic=" + std::to_string(an) +
                    " fd=" + std::to_string(fd);
      }
    }
  }
  return res;
}

template std::vector<TensorNode<float>*> topo_order<float>(const Var<float>&);
template std::vector<TensorNode<double>*> topo_order<double>(
    const Var<double>&);
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);
template GradCheckResult grad_check<float>(
    const std::function<Var<float>(const std::vector<Var<float>>&)>&,
    std::vector<Var<float>>, double, i64, std::uint64_t);
template GradCheckResult grad_check<double>(
    const std::function<Var<double>(const std::vector<Var<double>>&)>&,
    std::vector<Var<double>>, double, i64, std::uint64_t);

}  // namespace deeptopo
