#include "deeptopo/ops.hpp"

#include <cmath>
#include <cstring>

#include "deeptopo/kernels.hpp"

namespace deeptopo {

namespace {

template <typename T>
Var<T> make_out(std::vector<i64> shape, const char* op,
                std::vector<Var<T>> inputs) {
  auto out = tensor<T>(std::move(shape));
  out->op = op;
  for (const auto& in : inputs) {
    if (in && in->requires_grad) out->requires_grad = true;
  }
  out->inputs = std::move(inputs);
  return out;
}

template <typename T>
bool wants(const Var<T>& in) {
  return in && in->requires_grad;
}

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  DT_CHECK(a->shape == b->shape, op, ": shape mismatch, lhs has ",
           a->numel(), " elements vs rhs ", b->numel());
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "add");
  auto out = make_out<T>(a->shape, "add", {a, b});
  const i64 n = out->numel();
  for (i64 i = 0; i < n; ++i) out->v[i] = a->v[i] + b->v[i];
  out->backward_step = [a, b](TensorNode<T>& o) {
    const i64 n = o.numel();
    if (wants(a)) for (i64 i = 0; i < n; ++i) a->g[i] += o.g[i];
    if (wants(b)) for (i64 i = 0; i < n; ++i) b->g[i] += o.g[i];
  };
  return out;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "sub");
  auto out = make_out<T>(a->shape, "sub", {a, b});
  const i64 n = out->numel();
  for (i64 i = 0; i < n; ++i) out->v[i] = a->v[i] - b->v[i];
  out->backward_step = [a, b](TensorNode<T>& o) {
    const i64 n = o.numel();
    if (wants(a)) for (i64 i = 0; i < n; ++i) a->g[i] += o.g[i];
    if (wants(b)) for (i64 i = 0; i < n; ++i) b->g[i] -= o.g[i];
  };
  return out;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mul");
  auto out = make_out<T>(a->shape, "mul", {a, b});
  const i64 n = out->numel();
  for (i64 i = 0; i < n; ++i) out->v[i] = a->v[i] * b->v[i];
  out->backward_step = [a, b](TensorNode<T>& o) {
    const i64 n = o.numel();
    if (wants(a)) for (i64 i = 0; i < n; ++i) a->g[i] += o.g[i] * b->v[i];
    if (wants(b)) for (i64 i = 0; i < n; ++i) b->g[i] += o.g[i] * a->v[i];
  };
  return out;
}

template <typename T>
Var<T> div_ew(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "div");
  auto out = make_out<T>(a->shape, "div", {a, b});
  const i64 n = out->numel();
  for (i64 i = 0; i < n; ++i) out->v[i] = a->v[i] / b->v[i];
  out->backward_step = [a, b](TensorNode<T>& o) {
    const i64 n = o.numel();
    if (wants(a)) for (i64 i = 0; i < n; ++i) a->g[i] += o.g[i] / b->v[i];
    if (wants(b)) {
      for (i64 i = 0; i < n; ++i) {
        b->g[i] -= o.g[i] * a->v[i] / (b->v[i] * b->v[i]);
      }
    }
  };
  return out;
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  auto out = make_out<T>(a->shape, "scale", {a});
  const i64 n = out->numel();
  for (i64 i = 0; i < n; ++i) out->v[i] = a->v[i] * s;
  out->backward_step = [a, s](TensorNode<T>& o) {
    if (!wants(a)) return;
    const i64 n = o.numel();
    for (i64 i = 0; i < n; ++i) a->g[i] += o.g[i] * s;
  };
  return out;
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  auto out = make_out<T>(a->shape, "relu", {a});
  const i64 n = out->numel();
  for (i64 i = 0; i < n; ++i) out->v[i] = a->v[i] > T(0) ? a->v[i] : T(0);
  out->backward_step = [a](TensorNode<T>& o) {
    if (!wants(a)) return;
    const i64 n = o.numel();
    for (i64 i = 0; i < n; ++i) {
      if (a->v[i] > T(0)) a->g[i] += o.g[i];
    }
  };
  return out;
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  auto out = make_out<T>(a->shape, "sigmoid", {a});
  const i64 n = out->numel();
  for (i64 i = 0; i < n; ++i) out->v[i] = stable_sigmoid(a->v[i]);
  out->backward_step = [a](TensorNode<T>& o) {
    if (!wants(a)) return;
    const i64 n = o.numel();
    for (i64 i = 0; i < n; ++i) a->g[i] += o.g[i] * o.v[i] * (T(1) - o.v[i]);
  };
  return out;
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
  auto out = make_out<T>(a->shape, "softplus", {a});
  const i64 n = out->numel();
  for (i64 i = 0; i < n; ++i) {
    const T x = a->v[i];
    out->v[i] = x > T(0) ? x + std::log1p(std::exp(-x))
                         : std::log1p(std::exp(x));
  }
  out->backward_step = [a](TensorNode<T>& o) {
    if (!wants(a)) return;
    const i64 n = o.numel();
    for (i64 i = 0; i < n; ++i) a->g[i] += o.g[i] * stable_sigmoid(a->v[i]);
  };
  return out;
}

template <typename T>
Var<T> sqrt_op(const Var<T>& a) {
  auto out = make_out<T>(a->shape, "sqrt", {a});
  const i64 n = out->numel();
  for (i64 i = 0; i < n; ++i) {
    DT_CHECK(a->v[i] >= T(0), "sqrt: negative operand at element ", i);
    out->v[i] = std::sqrt(a->v[i]);
  }
  out->backward_step = [a](TensorNode<T>& o) {
    if (!wants(a)) return;
    const i64 n = o.numel();
    for (i64 i = 0; i < n; ++i) {
      if (o.v[i] > T(0)) a->g[i] += o.g[i] * T(0.5) / o.v[i];
    }
  };
  return out;
}

// ----------------------------------------------------------------- reductions

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  auto out = make_out<T>({1}, "sum", {a});
  T acc = T(0);
  const i64 n = a->numel();
  for (i64 i = 0; i < n; ++i) acc += a->v[i];
  out->v[0] = acc;
  out->backward_step = [a](TensorNode<T>& o) {
    if (!wants(a)) return;
    const T gv = o.g[0];
    const i64 n = a->numel();
    for (i64 i = 0; i < n; ++i) a->g[i] += gv;
  };
  return out;
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  DT_CHECK(a->numel() > 0, "mean: empty tensor");
  return scale(sum_all(a), T(1) / static_cast<T>(a->numel()));
}

template <typename T>
Var<T> weighted_sum(const Var<T>& a, const std::vector<T>& w) {
  DT_CHECK(static_cast<i64>(w.size()) == a->numel(),
           "weighted_sum: ", w.size(), " weights for ", a->numel(),
           " elements");
  auto out = make_out<T>({1}, "weighted_sum", {a});
  T acc = T(0);
  const i64 n = a->numel();
  for (i64 i = 0; i < n; ++i) acc += a->v[i] * w[i];
  out->v[0] = acc;
  out->backward_step = [a, w](TensorNode<T>& o) {
    if (!wants(a)) return;
    const T gv = o.g[0];
    const i64 n = a->numel();
    for (i64 i = 0; i < n; ++i) a->g[i] += gv * w[i];
  };
  return out;
}

// ---------------------------------------------------------------------- shape

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<i64> shape) {
  auto out = make_out<T>(std::move(shape), "reshape", {a});
  DT_CHECK(out->numel() == a->numel(), "reshape: ", a->numel(),
           " elements cannot form the requested ", out->numel());
  out->v = a->v;
  out->backward_step = [a](TensorNode<T>& o) {
    if (!wants(a)) return;
    const i64 n = o.numel();
    for (i64 i = 0; i < n; ++i) a->g[i] += o.g[i];
  };
  return out;
}

template <typename T>
Var<T> concat0(const std::vector<Var<T>>& parts) {
  DT_CHECK(!parts.empty(), "concat: no inputs");
  std::vector<i64> shape = parts[0]->shape;
  i64 trailing = 1;
  for (std::size_t d = 1; d < shape.size(); ++d) trailing *= shape[d];
  i64 total0 = 0;
  for (const auto& p : parts) {
    DT_CHECK(p->shape.size() == shape.size(),
             "concat: rank mismatch between inputs");
    i64 t = 1;
    for (std::size_t d = 1; d < p->shape.size(); ++d) t *= p->shape[d];
    DT_CHECK(t == trailing, "concat: trailing extent ", t,
             " does not match ", trailing);
    total0 += p->shape[0];
  }
  shape[0] = total0;
  auto out = make_out<T>(shape, "concat", parts);
  i64 off = 0;
  for (const auto& p : parts) {
    std::memcpy(out->v.data() + off, p->v.data(), p->v.size() * sizeof(T));
    off += p->numel();
  }
  out->backward_step = [parts](TensorNode<T>& o) {
    i64 off = 0;
    for (const auto& p : parts) {
      const i64 n = p->numel();
      if (wants(p)) {
        for (i64 i = 0; i < n; ++i) p->g[i] += o.g[off + i];
      }
      off += n;
    }
  };
  return out;
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, i64 c0, i64 c1) {
  DT_CHECK(a->shape.size() == 2, "slice_cols: expected a matrix");
  const i64 n = a->shape[0], d = a->shape[1];
  DT_CHECK(c0 >= 0 && c1 <= d && c0 < c1, "slice_cols: [", c0, ",", c1,
           ") out of range for ", d, " columns");
  auto out = make_out<T>({n, c1 - c0}, "slice_cols", {a});
  const i64 m = c1 - c0;
  for (i64 i = 0; i < n; ++i) {
    std::memcpy(out->v.data() + i * m, a->v.data() + i * d + c0,
                m * sizeof(T));
  }
  out->backward_step = [a, c0, m](TensorNode<T>& o) {
    if (!wants(a)) return;
    const i64 n = o.shape[0], d = a->shape[1];
    for (i64 i = 0; i < n; ++i) {
      for (i64 j = 0; j < m; ++j) a->g[i * d + c0 + j] += o.g[i * m + j];
    }
  };
  return out;
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, const std::vector<i64>& idx) {
  DT_CHECK(a->shape.size() == 2, "gather_rows: expected a matrix");
  const i64 n = a->shape[0], d = a->shape[1];
  for (i64 i : idx) {
    DT_CHECK(i >= 0 && i < n, "gather_rows: row ", i, " out of range ", n);
  }
  auto out = make_out<T>({static_cast<i64>(idx.size()), d}, "gather_rows", {a});
  for (std::size_t m = 0; m < idx.size(); ++m) {
    std::memcpy(out->v.data() + static_cast<i64>(m) * d,
                a->v.data() + idx[m] * d, d * sizeof(T));
  }
  out->backward_step = [a, idx](TensorNode<T>& o) {
    if (!wants(a)) return;
    const i64 d = a->shape[1];
    for (std::size_t m = 0; m < idx.size(); ++m) {
      for (i64 j = 0; j < d; ++j) {
        a->g[idx[m] * d + j] += o.g[static_cast<i64>(m) * d + j];
      }
    }
  };
  return out;
}

template <typename T>
Var<T> scatter_rows_fill(const Var<T>& rows, const std::vector<i64>& idx,
                         const Var<T>& fill, i64 n) {
  DT_CHECK(rows->shape.size() == 2, "scatter_rows: expected a matrix");
  const i64 m = rows->shape[0], d = rows->shape[1];
  DT_CHECK(static_cast<i64>(idx.size()) == m, "scatter_rows: ", idx.size(),
           " indices for ", m, " rows");
  DT_CHECK(fill->numel() == d, "scatter_rows: fill has ", fill->numel(),
           " elements, expected ", d);
  auto out = make_out<T>({n, d}, "scatter_rows_fill", {rows, fill});
  std::vector<char> from_rows(static_cast<std::size_t>(n), 0);
  for (i64 r = 0; r < n; ++r) {
    std::memcpy(out->v.data() + r * d, fill->v.data(), d * sizeof(T));
  }
  for (i64 i = 0; i < m; ++i) {
    DT_CHECK(idx[i] >= 0 && idx[i] < n, "scatter_rows: row ", idx[i],
             " out of range ", n);
    std::memcpy(out->v.data() + idx[i] * d, rows->v.data() + i * d,
                d * sizeof(T));
    from_rows[static_cast<std::size_t>(idx[i])] = 1;
  }
  out->backward_step = [rows, fill, idx, from_rows, n, d](TensorNode<T>& o) {
    if (wants(rows)) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (i64 j = 0; j < d; ++j) {
          rows->g[static_cast<i64>(i) * d + j] += o.g[idx[i] * d + j];
        }
      }
    }
    if (wants(fill)) {
      for (i64 r = 0; r < n; ++r) {
        if (from_rows[static_cast<std::size_t>(r)]) continue;
        for (i64 j = 0; j < d; ++j) fill->g[j] += o.g[r * d + j];
      }
    }
  };
  return out;
}

template <typename T>
Var<T> transpose2d(const Var<T>& a) {
  DT_CHECK(a->shape.size() == 2, "transpose: expected a matrix");
  const i64 n = a->shape[0], d = a->shape[1];
  auto out = make_out<T>({d, n}, "transpose", {a});
  for (i64 i = 0; i < n; ++i) {
    for (i64 j = 0; j < d; ++j) out->v[j * n + i] = a->v[i * d + j];
  }
  out->backward_step = [a, n, d](TensorNode<T>& o) {
    if (!wants(a)) return;
    for (i64 i = 0; i < n; ++i) {
      for (i64 j = 0; j < d; ++j) a->g[i * d + j] += o.g[j * n + i];
    }
  };
  return out;
}

template <typename T>
Var<T> transpose_12(const Var<T>& a) {
  DT_CHECK(a->shape.size() == 3, "transpose_12: expected rank 3");
  const i64 A = a->shape[0], B = a->shape[1], C = a->shape[2];
  auto out = make_out<T>({A, C, B}, "transpose_12", {a});
  for (i64 x = 0; x < A; ++x) {
    for (i64 y = 0; y < B; ++y) {
      for (i64 z = 0; z < C; ++z) {
        out->v[(x * C + z) * B + y] = a->v[(x * B + y) * C + z];
      }
    }
  }
  out->backward_step = [a, A, B, C](TensorNode<T>& o) {
    if (!wants(a)) return;
    for (i64 x = 0; x < A; ++x) {
      for (i64 y = 0; y < B; ++y) {
        for (i64 z = 0; z < C; ++z) {
          a->g[(x * B + y) * C + z] += o.g[(x * C + z) * B + y];
        }
      }
    }
  };
  return out;
}

template <typename T>
Var<T> tokens_to_grid(const Var<T>& a, i64 grid) {
  DT_CHECK(a->shape.size() == 2, "tokens_to_grid: expected a matrix");
  const i64 n = a->shape[0], d = a->shape[1];
  DT_CHECK(n == grid * grid, "tokens_to_grid: ", n,
           " tokens do not tile a ", grid, "x", grid, " grid");
  auto out = make_out<T>({d, grid, grid}, "tokens_to_grid", {a});
  for (i64 t = 0; t < n; ++t) {
    for (i64 c = 0; c < d; ++c) out->v[c * n + t] = a->v[t * d + c];
  }
  out->backward_step = [a, n, d](TensorNode<T>& o) {
    if (!wants(a)) return;
    for (i64 t = 0; t < n; ++t) {
      for (i64 c = 0; c < d; ++c) a->g[t * d + c] += o.g[c * n + t];
    }
  };
  return out;
}

template <typename T>
Var<T> grid_to_tokens(const Var<T>& a) {
  DT_CHECK(a->shape.size() == 3, "grid_to_tokens: expected C x H x W");
  const i64 d = a->shape[0], n = a->shape[1] * a->shape[2];
  auto out = make_out<T>({n, d}, "grid_to_tokens", {a});
  for (i64 t = 0; t < n; ++t) {
    for (i64 c = 0; c < d; ++c) out->v[t * d + c] = a->v[c * n + t];
  }
  out->backward_step = [a, n, d](TensorNode<T>& o) {
    if (!wants(a)) return;
    for (i64 t = 0; t < n; ++t) {
      for (i64 c = 0; c < d; ++c) a->g[c * n + t] += o.g[t * d + c];
    }
  };
  return out;
}

template <typename T>
Var<T> add_bias_rows(const Var<T>& x, const Var<T>& b) {
  DT_CHECK(x->shape.size() >= 2, "add_bias_rows: expected rank >= 2");
  const i64 c = x->shape[0];
  const i64 m = x->numel() / c;
  DT_CHECK(b->numel() == c, "add_bias_rows: bias has ", b->numel(),
           " entries for ", c, " rows");
  auto out = make_out<T>(x->shape, "add_bias_rows", {x, b});
  for (i64 i = 0; i < c; ++i) {
    const T bv = b->v[i];
    for (i64 j = 0; j < m; ++j) out->v[i * m + j] = x->v[i * m + j] + bv;
  }
  out->backward_step = [x, b, c, m](TensorNode<T>& o) {
    if (wants(x)) {
      const i64 n = o.numel();
      for (i64 i = 0; i < n; ++i) x->g[i] += o.g[i];
    }
    if (wants(b)) {
      for (i64 i = 0; i < c; ++i) {
        T acc = T(0);
        for (i64 j = 0; j < m; ++j) acc += o.g[i * m + j];
        b->g[i] += acc;
      }
    }
  };
  return out;
}

template <typename T>
Var<T> channel_scale(const Var<T>& map, const Var<T>& gate) {
  DT_CHECK(map->shape.size() == 3, "channel_scale: expected C x H x W");
  const i64 c = map->shape[0];
  const i64 m = map->numel() / c;
  DT_CHECK(gate->numel() == c, "channel_scale: gate has ", gate->numel(),
           " entries for ", c, " channels");
  auto out = make_out<T>(map->shape, "channel_scale", {map, gate});
  for (i64 i = 0; i < c; ++i) {
    const T s = gate->v[i];
    for (i64 j = 0; j < m; ++j) out->v[i * m + j] = map->v[i * m + j] * s;
  }
  out->backward_step = [map, gate, c, m](TensorNode<T>& o) {
    if (wants(map)) {
      for (i64 i = 0; i < c; ++i) {
        const T s = gate->v[i];
        for (i64 j = 0; j < m; ++j) map->g[i * m + j] += o.g[i * m + j] * s;
      }
    }
    if (wants(gate)) {
      for (i64 i = 0; i < c; ++i) {
        T acc = T(0);
        for (i64 j = 0; j < m; ++j) acc += o.g[i * m + j] * map->v[i * m + j];
        gate->g[i] += acc;
      }
    }
  };
  return out;
}

// ------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  DT_CHECK(a->shape.size() == 2 && b->shape.size() == 2,
           "matmul: expected matrices");
  const i64 m = a->shape[0], k = a->shape[1];
  DT_CHECK(b->shape[0] == k, "matmul: inner dimensions ", k, " vs ",
           b->shape[0]);
  const i64 n = b->shape[1];
  auto out = make_out<T>({m, n}, "matmul", {a, b});
  kernels::gemm_nn(a->data(), b->data(), out->data(), m, k, n);
  out->backward_step = [a, b, m, k, n](TensorNode<T>& o) {
    if (wants(a)) kernels::gemm_nt(o.grad(), b->data(), a->grad(), m, n, k, true);
    if (wants(b)) kernels::gemm_tn(a->data(), o.grad(), b->grad(), k, m, n, true);
  };
  return out;
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  DT_CHECK(x->shape.size() == 2 && w->shape.size() == 2,
           "linear: expected matrices");
  const i64 n = x->shape[0], din = x->shape[1];
  DT_CHECK(w->shape[1] == din, "linear: input feature dim ", din,
           " does not match weight inner dim ", w->shape[1]);
  const i64 dout = w->shape[0];
  if (b) {
    DT_CHECK(b->numel() == dout, "linear: bias has ", b->numel(),
             " entries, expected ", dout);
  }
  std::vector<Var<T>> ins = {x, w};
  if (b) ins.push_back(b);
  auto out = make_out<T>({n, dout}, "linear", std::move(ins));
  kernels::gemm_nt(x->data(), w->data(), out->data(), n, din, dout);
  if (b) {
    for (i64 i = 0; i < n; ++i) {
      for (i64 j = 0; j < dout; ++j) out->v[i * dout + j] += b->v[j];
    }
  }
  out->backward_step = [x, w, b, n, din, dout](TensorNode<T>& o) {
    if (wants(x)) kernels::gemm_nn(o.grad(), w->data(), x->grad(), n, dout, din, true);
    if (wants(w)) kernels::gemm_tn(o.grad(), x->data(), w->grad(), dout, n, din, true);
    if (b && wants(b)) {
      for (i64 i = 0; i < n; ++i) {
        for (i64 j = 0; j < dout; ++j) b->g[j] += o.g[i * dout + j];
      }
    }
  };
  return out;
}

// --------------------------------------------------- normalization, attention

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps) {
  DT_CHECK(x->shape.size() == 2, "layer_norm: expected N x D");
  const i64 n = x->shape[0], d = x->shape[1];
  DT_CHECK(gamma->numel() == d && beta->numel() == d,
           "layer_norm: gamma/beta must have ", d, " entries");
  auto out = make_out<T>(x->shape, "layer_norm", {x, gamma, beta});
  auto mu = std::make_shared<std::vector<T>>(n);
  auto rstd = std::make_shared<std::vector<T>>(n);
  kernels::parallel_for(n, [&](i64 i) {
    const T* row = x->data() + i * d;
    T m = T(0);
    for (i64 j = 0; j < d; ++j) m += row[j];
    m /= static_cast<T>(d);
    T var = T(0);
    for (i64 j = 0; j < d; ++j) {
      const T c = row[j] - m;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*mu)[i] = m;
    (*rstd)[i] = rs;
    T* orow = out->data() + i * d;
    for (i64 j = 0; j < d; ++j) {
      orow[j] = (row[j] - m) * rs * gamma->v[j] + beta->v[j];
    }
  });
  out->backward_step = [x, gamma, beta, mu, rstd, n, d](TensorNode<T>& o) {
    std::vector<T> dgamma(wants(gamma) ? d : 0, T(0));
    std::vector<T> dbeta(wants(beta) ? d : 0, T(0));
    for (i64 i = 0; i < n; ++i) {
      const T* row = x->data() + i * d;
      const T* go = o.g.data() + i * d;
      const T m = (*mu)[i], rs = (*rstd)[i];
      if (wants(x)) {
        T m1 = T(0), m2 = T(0);
        for (i64 j = 0; j < d; ++j) {
          const T xh = (row[j] - m) * rs;
          const T dxh = go[j] * gamma->v[j];
          m1 += dxh;
          m2 += dxh * xh;
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        T* gx = x->g.data() + i * d;
        for (i64 j = 0; j < d; ++j) {
          const T xh = (row[j] - m) * rs;
          const T dxh = go[j] * gamma->v[j];
          gx[j] += rs * (dxh - m1 - xh * m2);
        }
      }
      if (wants(gamma)) {
        for (i64 j = 0; j < d; ++j) {
          dgamma[j] += go[j] * (row[j] - m) * rs;
        }
      }
      if (wants(beta)) {
        for (i64 j = 0; j < d; ++j) dbeta[j] += go[j];
      }
    }
    if (wants(gamma)) for (i64 j = 0; j < d; ++j) gamma->g[j] += dgamma[j];
    if (wants(beta)) for (i64 j = 0; j < d; ++j) beta->g[j] += dbeta[j];
  };
  return out;
}

template <typename T>
Var<T> batch_norm_2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                     const Var<T>& running_mean, const Var<T>& running_var,
                     bool train, bool update_running, T momentum, T eps) {
  DT_CHECK(x->shape.size() == 3, "batch_norm: expected C x H x W");
  const i64 c = x->shape[0];
  const i64 m = x->numel() / c;
  DT_CHECK(gamma->numel() == c && beta->numel() == c,
           "batch_norm: gamma/beta must have ", c, " entries");
  DT_CHECK(running_mean->numel() == c && running_var->numel() == c,
           "batch_norm: running stats must have ", c, " entries");
  auto out = make_out<T>(x->shape, "batch_norm_2d", {x, gamma, beta});
  auto mu = std::make_shared<std::vector<T>>(c);
  auto rstd = std::make_shared<std::vector<T>>(c);
  if (train) {
    kernels::parallel_for(c, [&](i64 i) {
      const T* plane = x->data() + i * m;
      T mean = T(0);
      for (i64 j = 0; j < m; ++j) mean += plane[j];
      mean /= static_cast<T>(m);
      T var = T(0);
      for (i64 j = 0; j < m; ++j) {
        const T d = plane[j] - mean;
        var += d * d;
      }
      var /= static_cast<T>(m);
      (*mu)[i] = mean;
      (*rstd)[i] = T(1) / std::sqrt(var + eps);
      T* oplane = out->data() + i * m;
      const T gm = gamma->v[i], bt = beta->v[i], rs = (*rstd)[i];
      for (i64 j = 0; j < m; ++j) oplane[j] = (plane[j] - mean) * rs * gm + bt;
    });
    if (update_running) {
      for (i64 i = 0; i < c; ++i) {
        const T var = T(1) / ((*rstd)[i] * (*rstd)[i]) - eps;
        running_mean->v[i] =
            (T(1) - momentum) * running_mean->v[i] + momentum * (*mu)[i];
        running_var->v[i] =
            (T(1) - momentum) * running_var->v[i] + momentum * var;
      }
    }
  } else {
    kernels::parallel_for(c, [&](i64 i) {
      const T mean = running_mean->v[i];
      const T rs = T(1) / std::sqrt(running_var->v[i] + eps);
      (*mu)[i] = mean;
      (*rstd)[i] = rs;
      const T* plane = x->data() + i * m;
      T* oplane = out->data() + i * m;
      const T gm = gamma->v[i], bt = beta->v[i];
      for (i64 j = 0; j < m; ++j) oplane[j] = (plane[j] - mean) * rs * gm + bt;
    });
  }
  out->backward_step = [x, gamma, beta, mu, rstd, c, m, train](TensorNode<T>& o) {
    for (i64 i = 0; i < c; ++i) {
      const T* plane = x->data() + i * m;
      const T* go = o.g.data() + i * m;
      const T mean = (*mu)[i], rs = (*rstd)[i], gm = gamma->v[i];
      if (wants(x)) {
        T* gx = x->g.data() + i * m;
        if (train) {
          T m1 = T(0), m2 = T(0);
          for (i64 j = 0; j < m; ++j) {
            const T xh = (plane[j] - mean) * rs;
            const T dxh = go[j] * gm;
            m1 += dxh;
            m2 += dxh * xh;
          }
          m1 /= static_cast<T>(m);
          m2 /= static_cast<T>(m);
          for (i64 j = 0; j < m; ++j) {
            const T xh = (plane[j] - mean) * rs;
            const T dxh = go[j] * gm;
            gx[j] += rs * (dxh - m1 - xh * m2);
          }
        } else {
          for (i64 j = 0; j < m; ++j) gx[j] += go[j] * gm * rs;
        }
      }
      if (wants(gamma)) {
        T acc = T(0);
        for (i64 j = 0; j < m; ++j) acc += go[j] * (plane[j] - mean) * rs;
        gamma->g[i] += acc;
      }
      if (wants(beta)) {
        T acc = T(0);
        for (i64 j = 0; j < m; ++j) acc += go[j];
        beta->g[i] += acc;
      }
    }
  };
  return out;
}

template <typename T>
Var<T> multi_head_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            i64 heads) {
  DT_CHECK(q->shape.size() == 2, "attention: expected N x D tokens");
  check_same_shape(q, k, "attention");
  check_same_shape(q, v, "attention");
  const i64 n = q->shape[0], d = q->shape[1];
  DT_CHECK(heads > 0 && d % heads == 0, "attention: token dim ", d,
           " not divisible by ", heads, " heads");
  const i64 dh = d / heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  auto out = make_out<T>({n, d}, "multi_head_attention", {q, k, v});
  // Contiguous per-head copies plus the softmax probabilities are kept
  // for the backward pass.
  auto qh = std::make_shared<std::vector<T>>(heads * n * dh);
  auto kh = std::make_shared<std::vector<T>>(heads * n * dh);
  auto vh = std::make_shared<std::vector<T>>(heads * n * dh);
  auto probs = std::make_shared<std::vector<T>>(heads * n * n);
  for (i64 h = 0; h < heads; ++h) {
    for (i64 i = 0; i < n; ++i) {
      for (i64 j = 0; j < dh; ++j) {
        (*qh)[(h * n + i) * dh + j] = q->v[i * d + h * dh + j] * inv_sqrt;
        (*kh)[(h * n + i) * dh + j] = k->v[i * d + h * dh + j];
        (*vh)[(h * n + i) * dh + j] = v->v[i * d + h * dh + j];
      }
    }
  }
  std::vector<T> oh(heads * n * dh);
  for (i64 h = 0; h < heads; ++h) {
    T* p = probs->data() + h * n * n;
    kernels::gemm_nt(qh->data() + h * n * dh, kh->data() + h * n * dh, p, n,
                     dh, n);
    kernels::softmax_rows(p, n, n);
    kernels::gemm_nn(p, vh->data() + h * n * dh, oh.data() + h * n * dh, n, n,
                     dh);
  }
  for (i64 h = 0; h < heads; ++h) {
    for (i64 i = 0; i < n; ++i) {
      for (i64 j = 0; j < dh; ++j) {
        out->v[i * d + h * dh + j] = oh[(h * n + i) * dh + j];
      }
    }
  }
  out->backward_step = [q, k, v, qh, kh, vh, probs, heads, n, d, dh,
                        inv_sqrt](TensorNode<T>& o) {
    std::vector<T> goh(n * dh), dp(n * n), ds(n * n);
    std::vector<T> gq1(n * dh), gk1(n * dh), gv1(n * dh);
    for (i64 h = 0; h < heads; ++h) {
      for (i64 i = 0; i < n; ++i) {
        for (i64 j = 0; j < dh; ++j) {
          goh[i * dh + j] = o.g[i * d + h * dh + j];
        }
      }
      const T* p = probs->data() + h * n * n;
      // dV = P^T dO ; dP = dO V^T ; dS = P*(dP - rowsum(dP*P))
      kernels::gemm_tn(p, goh.data(), gv1.data(), n, n, dh);
      kernels::gemm_nt(goh.data(), vh->data() + h * n * dh, dp.data(), n, dh,
                       n);
      for (i64 i = 0; i < n; ++i) {
        T dot = T(0);
        for (i64 j = 0; j < n; ++j) dot += dp[i * n + j] * p[i * n + j];
        for (i64 j = 0; j < n; ++j) {
          ds[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot);
        }
      }
      kernels::gemm_nn(ds.data(), kh->data() + h * n * dh, gq1.data(), n, n,
                       dh);
      kernels::gemm_tn(ds.data(), qh->data() + h * n * dh, gk1.data(), n, n,
                       dh);
      for (i64 i = 0; i < n; ++i) {
        for (i64 j = 0; j < dh; ++j) {
          if (wants(q)) q->g[i * d + h * dh + j] += gq1[i * dh + j] * inv_sqrt;
          if (wants(k)) k->g[i * d + h * dh + j] += gk1[i * dh + j];
          if (wants(v)) v->g[i * d + h * dh + j] += gv1[i * dh + j];
        }
      }
    }
  };
  return out;
}

// -------------------------------------------------------- convolution family

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, i64 stride,
              i64 pad) {
  DT_CHECK(x->shape.size() == 3, "conv2d: input must be C x H x W");
  DT_CHECK(w->shape.size() == 4, "conv2d: weight must be C' x C x k x k");
  const i64 c = x->shape[0], h = x->shape[1], ww = x->shape[2];
  const i64 cout = w->shape[0], cin = w->shape[1], kk = w->shape[2];
  DT_CHECK(w->shape[3] == kk, "conv2d: kernel must be square, got ", kk, "x",
           w->shape[3]);
  DT_CHECK(kk % 2 == 1, "conv2d: kernel size ", kk, " must be odd");
  DT_CHECK(cin == c, "conv2d: input channels ", c,
           " do not match weight channels ", cin);
  DT_CHECK(pad >= 0, "conv2d: negative padding ", pad);
  DT_CHECK(stride >= 1, "conv2d: stride ", stride, " must be >= 1");
  const i64 ho = (h + 2 * pad - kk) / stride + 1;
  const i64 wo = (ww + 2 * pad - kk) / stride + 1;
  DT_CHECK(ho >= 1 && wo >= 1, "conv2d: output would be empty (", ho, "x", wo,
           ")");
  if (b) {
    DT_CHECK(b->numel() == cout, "conv2d: bias has ", b->numel(),
             " entries, expected ", cout);
  }
  std::vector<Var<T>> ins = {x, w};
  if (b) ins.push_back(b);
  auto out = make_out<T>({cout, ho, wo}, "conv2d", std::move(ins));

  const i64 krows = c * kk * kk;
  const i64 plane = ho * wo;
  std::vector<T> cols(krows * plane);
  kernels::im2col(x->data(), c, h, ww, kk, stride, pad, cols.data(), ho, wo);
  kernels::gemm_nn(w->data(), cols.data(), out->data(), cout, krows, plane);
  if (b) {
    for (i64 i = 0; i < cout; ++i) {
      const T bv = b->v[i];
      for (i64 j = 0; j < plane; ++j) out->v[i * plane + j] += bv;
    }
  }
  out->backward_step = [x, w, b, stride, pad, c, h, ww, cout, kk, ho,
                        wo](TensorNode<T>& o) {
    const i64 krows = c * kk * kk;
    const i64 plane = ho * wo;
    std::vector<T> cols(krows * plane);
    kernels::im2col(x->data(), c, h, ww, kk, stride, pad, cols.data(), ho, wo);
    if (wants(w)) {
      kernels::gemm_nt(o.grad(), cols.data(), w->grad(), cout, plane, krows,
                       true);
    }
    if (wants(x)) {
      std::vector<T> dcols(krows * plane);
      kernels::gemm_tn(w->data(), o.grad(), dcols.data(), krows, cout, plane);
      kernels::col2im_acc(dcols.data(), c, h, ww, kk, stride, pad, x->grad(),
                          ho, wo);
    }
    if (b && wants(b)) {
      for (i64 i = 0; i < cout; ++i) {
        T acc = T(0);
        for (i64 j = 0; j < plane; ++j) acc += o.g[i * plane + j];
        b->g[i] += acc;
      }
    }
  };
  return out;
}

template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, i64 pad) {
  DT_CHECK(x->shape.size() == 3, "depthwise_conv2d: input must be C x H x W");
  DT_CHECK(w->shape.size() == 3, "depthwise_conv2d: weight must be C x k x k");
  const i64 c = x->shape[0], h = x->shape[1], ww = x->shape[2];
  const i64 kk = w->shape[1];
  DT_CHECK(w->shape[2] == kk, "depthwise_conv2d: kernel must be square");
  DT_CHECK(kk % 2 == 1, "depthwise_conv2d: kernel size ", kk, " must be odd");
  DT_CHECK(w->shape[0] == c, "depthwise_conv2d: weight channels ",
           w->shape[0], " do not match input channels ", c);
  DT_CHECK(pad == (kk - 1) / 2,
           "depthwise_conv2d: padding must be (k-1)/2 = ", (kk - 1) / 2,
           ", got ", pad);
  auto out = make_out<T>(x->shape, "depthwise_conv2d", {x, w});
  kernels::parallel_for(c, [&](i64 ch) {
    const T* xp = x->data() + ch * h * ww;
    const T* wp = w->data() + ch * kk * kk;
    T* op = out->data() + ch * h * ww;
    for (i64 y = 0; y < h; ++y) {
      for (i64 xcol = 0; xcol < ww; ++xcol) {
        T acc = T(0);
        for (i64 ky = 0; ky < kk; ++ky) {
          const i64 iy = y - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (i64 kx = 0; kx < kk; ++kx) {
            const i64 ix = xcol - pad + kx;
            if (ix < 0 || ix >= ww) continue;
            acc += wp[ky * kk + kx] * xp[iy * ww + ix];
          }
        }
        op[y * ww + xcol] = acc;
      }
    }
  });
  out->backward_step = [x, w, c, h, ww, kk, pad](TensorNode<T>& o) {
    if (wants(x)) {
      kernels::parallel_for(c, [&](i64 ch) {
        const T* wp = w->data() + ch * kk * kk;
        const T* gp = o.g.data() + ch * h * ww;
        T* gx = x->g.data() + ch * h * ww;
        for (i64 y = 0; y < h; ++y) {
          for (i64 xcol = 0; xcol < ww; ++xcol) {
            T acc = T(0);
            for (i64 ky = 0; ky < kk; ++ky) {
              const i64 oy = y + pad - ky;
              if (oy < 0 || oy >= h) continue;
              for (i64 kx = 0; kx < kk; ++kx) {
                const i64 ox = xcol + pad - kx;
                if (ox < 0 || ox >= ww) continue;
                acc += wp[ky * kk + kx] * gp[oy * ww + ox];
              }
            }
            gx[y * ww + xcol] += acc;
          }
        }
      });
    }
    if (wants(w)) {
      kernels::parallel_for(c, [&](i64 ch) {
        const T* xp = x->data() + ch * h * ww;
        const T* gp = o.g.data() + ch * h * ww;
        T* gw = w->g.data() + ch * kk * kk;
        for (i64 ky = 0; ky < kk; ++ky) {
          for (i64 kx = 0; kx < kk; ++kx) {
            T acc = T(0);
            for (i64 y = 0; y < h; ++y) {
              const i64 iy = y - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (i64 xcol = 0; xcol < ww; ++xcol) {
                const i64 ix = xcol - pad + kx;
                if (ix < 0 || ix >= ww) continue;
                acc += xp[iy * ww + ix] * gp[y * ww + xcol];
              }
            }
            gw[ky * kk + kx] += acc;
          }
        }
      });
    }
  };
  return out;
}

template <typename T>
Var<T> laplacian3x3(const Var<T>& x) {
  DT_CHECK(x->shape.size() == 3, "laplacian: input must be C x H x W");
  const i64 c = x->shape[0], h = x->shape[1], w = x->shape[2];
  auto out = make_out<T>(x->shape, "laplacian3x3", {x});
  auto stencil = [h, w](const T* p, i64 y, i64 xc) {
    T acc = T(-4) * p[y * w + xc];
    if (y > 0) acc += p[(y - 1) * w + xc];
    if (y + 1 < h) acc += p[(y + 1) * w + xc];
    if (xc > 0) acc += p[y * w + xc - 1];
    if (xc + 1 < w) acc += p[y * w + xc + 1];
    return acc;
  };
  kernels::parallel_for(c, [&](i64 ch) {
    const T* xp = x->data() + ch * h * w;
    T* op = out->data() + ch * h * w;
    for (i64 y = 0; y < h; ++y) {
      for (i64 xc = 0; xc < w; ++xc) op[y * w + xc] = stencil(xp, y, xc);
    }
  });
  // The kernel is symmetric, so the adjoint is the same stencil.
  out->backward_step = [x, stencil, c, h, w](TensorNode<T>& o) {
    if (!wants(x)) return;
    kernels::parallel_for(c, [&](i64 ch) {
      const T* gp = o.g.data() + ch * h * w;
      T* gx = x->g.data() + ch * h * w;
      for (i64 y = 0; y < h; ++y) {
        for (i64 xc = 0; xc < w; ++xc) gx[y * w + xc] += stencil(gp, y, xc);
      }
    });
  };
  return out;
}

template <typename T>
Var<T> bilinear_sample(const Var<T>& x, const Var<T>& coords) {
  DT_CHECK(x->shape.size() == 3, "bilinear_sample: input must be C x H x W");
  DT_CHECK(coords->shape.size() == 2 && coords->shape[1] == 2,
           "bilinear_sample: coords must be M x 2");
  const i64 c = x->shape[0], h = x->shape[1], w = x->shape[2];
  const i64 m = coords->shape[0];
  for (i64 i = 0; i < 2 * m; ++i) {
    DT_CHECK(std::isfinite(static_cast<double>(coords->v[i])),
             "bilinear_sample: non-finite coordinate at entry ", i);
  }
  auto out = make_out<T>({c, m}, "bilinear_sample", {x, coords});
  kernels::bilinear_gather(x->data(), c, h, w, coords->data(), m, out->data());
  out->backward_step = [x, coords, c, h, w, m](TensorNode<T>& o) {
    const bool gx = wants(x), gc = wants(coords);
    if (!gx && !gc) return;
    for (i64 i = 0; i < m; ++i) {
      const T r = coords->v[2 * i];
      const T cc = coords->v[2 * i + 1];
      const i64 r0 = static_cast<i64>(std::floor(r));
      const i64 c0 = static_cast<i64>(std::floor(cc));
      const T fr = r - static_cast<T>(r0);
      const T fc = cc - static_cast<T>(c0);
      const bool inr0 = r0 >= 0 && r0 < h, inr1 = r0 + 1 >= 0 && r0 + 1 < h;
      const bool inc0 = c0 >= 0 && c0 < w, inc1 = c0 + 1 >= 0 && c0 + 1 < w;
      T dr = T(0), dc = T(0);
      for (i64 ch = 0; ch < c; ++ch) {
        const T go = o.g[ch * m + i];
        if (go == T(0) && !gc) continue;
        const T* xp = x->data() + ch * h * w;
        T* gxp = gx ? x->g.data() + ch * h * w : nullptr;
        const T v00 = (inr0 && inc0) ? xp[r0 * w + c0] : T(0);
        const T v01 = (inr0 && inc1) ? xp[r0 * w + c0 + 1] : T(0);
        const T v10 = (inr1 && inc0) ? xp[(r0 + 1) * w + c0] : T(0);
        const T v11 = (inr1 && inc1) ? xp[(r0 + 1) * w + c0 + 1] : T(0);
        if (gx) {
          if (inr0 && inc0) gxp[r0 * w + c0] += go * (T(1) - fr) * (T(1) - fc);
          if (inr0 && inc1) gxp[r0 * w + c0 + 1] += go * (T(1) - fr) * fc;
          if (inr1 && inc0) gxp[(r0 + 1) * w + c0] += go * fr * (T(1) - fc);
          if (inr1 && inc1) gxp[(r0 + 1) * w + c0 + 1] += go * fr * fc;
        }
        if (gc) {
          dr += go * ((v10 - v00) * (T(1) - fc) + (v11 - v01) * fc);
          dc += go * ((v01 - v00) * (T(1) - fr) + (v11 - v10) * fr);
        }
      }
      if (gc) {
        coords->g[2 * i] += dr;
        coords->g[2 * i + 1] += dc;
      }
    }
  };
  return out;
}

template <typename T>
Var<T> bilinear_upsample_x2(const Var<T>& x) {
  DT_CHECK(x->shape.size() == 3, "upsample: input must be C x H x W");
  const i64 c = x->shape[0], h = x->shape[1], w = x->shape[2];
  const i64 h2 = 2 * h, w2 = 2 * w;
  auto out = make_out<T>({c, h2, w2}, "bilinear_upsample_x2", {x});
  // Center-aligned: output j reads input j/2 with edge clamp, so even
  // outputs are exact copies.
  auto src = [](i64 j, i64 n, i64& a, i64& b) {
    a = j / 2;
    b = (j % 2 == 0) ? a : (a + 1 < n ? a + 1 : n - 1);
  };
  kernels::parallel_for(c * h2, [&](i64 row) {
    const i64 ch = row / h2;
    const i64 j = row % h2;
    i64 r0, r1;
    src(j, h, r0, r1);
    const T* xp = x->data() + ch * h * w;
    T* op = out->data() + (ch * h2 + j) * w2;
    for (i64 i = 0; i < w2; ++i) {
      i64 c0, c1;
      src(i, w, c0, c1);
      if (r0 == r1 && c0 == c1) {
        op[i] = xp[r0 * w + c0];
      } else if (r0 == r1) {
        op[i] = (xp[r0 * w + c0] + xp[r0 * w + c1]) * T(0.5);
      } else if (c0 == c1) {
        op[i] = (xp[r0 * w + c0] + xp[r1 * w + c0]) * T(0.5);
      } else {
        op[i] = (xp[r0 * w + c0] + xp[r0 * w + c1] + xp[r1 * w + c0] +
                 xp[r1 * w + c1]) * T(0.25);
      }
    }
  });
  out->backward_step = [x, c, h, w, h2, w2, src](TensorNode<T>& o) {
    if (!wants(x)) return;
    // Gather form: each input cell collects the weights of the <=9 output
    // cells that reference it.
    kernels::parallel_for(c * h, [&](i64 row) {
      const i64 ch = row / h;
      const i64 r = row % h;
      const T* gp = o.g.data() + ch * h2 * w2;
      T* gx = x->g.data() + (ch * h + r) * w;
      for (i64 cc = 0; cc < w; ++cc) {
        T acc = T(0);
        for (i64 j = 2 * r - 1; j <= 2 * r + 1; ++j) {
          if (j < 0 || j >= h2) continue;
          i64 r0, r1;
          src(j, h, r0, r1);
          T wr = T(0);
          if (r0 == r1) {
            if (r0 == r) wr = T(1);
          } else {
            if (r0 == r) wr += T(0.5);
            if (r1 == r) wr += T(0.5);
          }
          if (wr == T(0)) continue;
          for (i64 i = 2 * cc - 1; i <= 2 * cc + 1; ++i) {
            if (i < 0 || i >= w2) continue;
            i64 c0, c1;
            src(i, w, c0, c1);
            T wc = T(0);
            if (c0 == c1) {
              if (c0 == cc) wc = T(1);
            } else {
              if (c0 == cc) wc += T(0.5);
              if (c1 == cc) wc += T(0.5);
            }
            if (wc == T(0)) continue;
            acc += wr * wc * gp[j * w2 + i];
          }
        }
        gx[cc] += acc;
      }
    });
  };
  return out;
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  DT_CHECK(x->shape.size() == 3, "global_avg_pool: input must be C x H x W");
  const i64 c = x->shape[0];
  const i64 m = x->numel() / c;
  auto out = make_out<T>({c}, "global_avg_pool", {x});
  for (i64 i = 0; i < c; ++i) {
    T acc = T(0);
    for (i64 j = 0; j < m; ++j) acc += x->v[i * m + j];
    out->v[i] = acc / static_cast<T>(m);
  }
  out->backward_step = [x, c, m](TensorNode<T>& o) {
    if (!wants(x)) return;
    for (i64 i = 0; i < c; ++i) {
      const T gv = o.g[i] / static_cast<T>(m);
      for (i64 j = 0; j < m; ++j) x->g[i * m + j] += gv;
    }
  };
  return out;
}

template <typename T>
Var<T> mean_axis0(const Var<T>& x) {
  DT_CHECK(x->shape.size() == 2, "mean_axis0: expected N x D");
  const i64 n = x->shape[0], d = x->shape[1];
  DT_CHECK(n > 0, "mean_axis0: empty token set");
  auto out = make_out<T>({d}, "mean_axis0", {x});
  for (i64 j = 0; j < d; ++j) {
    T acc = T(0);
    for (i64 i = 0; i < n; ++i) acc += x->v[i * d + j];
    out->v[j] = acc / static_cast<T>(n);
  }
  out->backward_step = [x, n, d](TensorNode<T>& o) {
    if (!wants(x)) return;
    for (i64 j = 0; j < d; ++j) {
      const T gv = o.g[j] / static_cast<T>(n);
      for (i64 i = 0; i < n; ++i) x->g[i * d + j] += gv;
    }
  };
  return out;
}

template <typename T>
Var<T> shift_lattice(const Var<T>& offsets, i64 j, i64 h, i64 w) {
  DT_CHECK(offsets->shape.size() == 2 && offsets->shape[1] == 2,
           "shift_lattice: offsets must be K x 2");
  DT_CHECK(j >= 0 && j < offsets->shape[0], "shift_lattice: offset row ", j,
           " out of range ", offsets->shape[0]);
  const i64 m = h * w;
  auto out = make_out<T>({m, 2}, "shift_lattice", {offsets});
  const T dr = offsets->v[2 * j], dc = offsets->v[2 * j + 1];
  for (i64 y = 0; y < h; ++y) {
    for (i64 x = 0; x < w; ++x) {
      out->v[2 * (y * w + x)] = static_cast<T>(y) + dr;
      out->v[2 * (y * w + x) + 1] = static_cast<T>(x) + dc;
    }
  }
  out->backward_step = [offsets, j, m](TensorNode<T>& o) {
    if (!wants(offsets)) return;
    T ar = T(0), ac = T(0);
    for (i64 i = 0; i < m; ++i) {
      ar += o.g[2 * i];
      ac += o.g[2 * i + 1];
    }
    offsets->g[2 * j] += ar;
    offsets->g[2 * j + 1] += ac;
  };
  return out;
}

// --------------------------------------------------------------------- metric

template <typename T>
Var<T> assemble_cholesky(const Var<T>& raw, T delta) {
  DT_CHECK(raw->numel() == 3, "assemble_cholesky: expected 3 parameters, got ",
           raw->numel());
  for (i64 i = 0; i < 3; ++i) {
    DT_CHECK(std::isfinite(static_cast<double>(raw->v[i])),
             "assemble_cholesky: non-finite parameter at entry ", i);
  }
  auto out = make_out<T>({2, 2}, "assemble_cholesky", {raw});
  auto sp = [](T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  };
  out->v[0] = sp(raw->v[0]) + delta;
  out->v[1] = T(0);
  out->v[2] = raw->v[1];
  out->v[3] = sp(raw->v[2]) + delta;
  out->backward_step = [raw](TensorNode<T>& o) {
    if (!wants(raw)) return;
    raw->g[0] += o.g[0] * stable_sigmoid(raw->v[0]);
    raw->g[1] += o.g[2];
    raw->g[2] += o.g[3] * stable_sigmoid(raw->v[2]);
  };
  return out;
}

template <typename T>
Var<T> warp_offsets_op(const Var<T>& L, i64 k) {
  DT_CHECK(L->shape.size() == 2 && L->shape[0] == 2 && L->shape[1] == 2,
           "warp_offsets: L must be 2 x 2");
  DT_CHECK(k >= 1 && k % 2 == 1, "warp_offsets: kernel size ", k,
           " must be odd");
  const T l11 = L->v[0], l21 = L->v[2], l22 = L->v[3];
  DT_CHECK(l11 != T(0) && l22 != T(0),
           "warp_offsets: singular factor (zero diagonal)");
  // A = L^T (upper); closed-form inverse of the 2x2 triangle.
  const T a00 = T(1) / l11;
  const T a01 = -l21 / (l11 * l22);
  const T a11 = T(1) / l22;
  const i64 half = k / 2;
  auto out = make_out<T>({k * k, 2}, "warp_offsets", {L});
  i64 row = 0;
  for (i64 dy = -half; dy <= half; ++dy) {
    for (i64 dx = -half; dx <= half; ++dx, ++row) {
      const T pr = static_cast<T>(dy), pc = static_cast<T>(dx);
      out->v[2 * row] = a00 * pr + a01 * pc;
      out->v[2 * row + 1] = a11 * pc;
    }
  }
  out->backward_step = [L, k, a00, a01, a11](TensorNode<T>& o) {
    if (!wants(L)) return;
    // y = A^-1 p with A = L^T  =>  dA = -(A^-T g) y^T, dL = dA^T.
    const i64 kk = k * k;
    T dA00 = T(0), dA01 = T(0), dA11 = T(0);
    for (i64 j = 0; j < kk; ++j) {
      const T y0 = o.v[2 * j], y1 = o.v[2 * j + 1];
      const T g0 = o.g[2 * j], g1 = o.g[2 * j + 1];
      // A^-T g (A^-T is lower): (a00*g0, a01*g0 + a11*g1)
      const T t0 = a00 * g0;
      const T t1 = a01 * g0 + a11 * g1;
      dA00 -= t0 * y0;
      dA01 -= t0 * y1;
      dA11 -= t1 * y1;
    }
    L->g[0] += dA00;  // dL11 = dA00
    L->g[2] += dA01;  // dL21 = dA01
    L->g[3] += dA11;  // dL22 = dA11
  };
  return out;
}

template <typename T>
Var<T> quad_form_sqrt(const Var<T>& G, T dr, T dc) {
  DT_CHECK(G->shape.size() == 2 && G->shape[0] == 2 && G->shape[1] == 2,
           "quad_form_sqrt: G must be 2 x 2");
  auto out = make_out<T>({1}, "quad_form_sqrt", {G});
  const T q = G->v[0] * dr * dr + (G->v[1] + G->v[2]) * dr * dc +
              G->v[3] * dc * dc;
  out->v[0] = q > T(0) ? std::sqrt(q) : T(0);
  out->backward_step = [G, dr, dc](TensorNode<T>& o) {
    if (!wants(G) || o.v[0] == T(0)) return;
    const T s = o.g[0] / (T(2) * o.v[0]);
    G->g[0] += s * dr * dr;
    G->g[1] += s * dr * dc;
    G->g[2] += s * dr * dc;
    G->g[3] += s * dc * dc;
  };
  return out;
}

// ---------------------------------------------------------------- directional

template <typename T>
Var<T> directional_responses(const Var<T>& x, const Var<T>& bank,
                             const std::vector<DirTaps>& taps) {
  DT_CHECK(x->shape.size() == 3, "directional: input must be C x H x W");
  DT_CHECK(bank->shape.size() == 4 && bank->shape[0] == 8,
           "directional: bank must be 8 x C x L x L");
  const i64 c = x->shape[0], h = x->shape[1], w = x->shape[2];
  DT_CHECK(bank->shape[1] == c, "directional: bank channels ", bank->shape[1],
           " do not match input channels ", c);
  const i64 L = bank->shape[2];
  DT_CHECK(bank->shape[3] == L, "directional: bank kernels must be square");
  DT_CHECK(taps.size() == 8, "directional: expected 8 tap sets, got ",
           taps.size());
  const i64 half = L / 2;
  auto out = make_out<T>({8 * c, h, w}, "directional_responses", {x, bank});
  kernels::parallel_for(8 * c, [&](i64 plane) {
    const i64 a = plane / c;
    const i64 ch = plane % c;
    const T* xp = x->data() + ch * h * w;
    const T* wp = bank->data() + (a * c + ch) * L * L;
    T* op = out->data() + plane * h * w;
    const auto& tv = taps[static_cast<std::size_t>(a)].taps;
    for (i64 y = 0; y < h; ++y) {
      for (i64 xc = 0; xc < w; ++xc) {
        T acc = T(0);
        for (const auto& t : tv) {
          const i64 iy = y + t[0];
          const i64 ix = xc + t[1];
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
          acc += wp[(half + t[0]) * L + (half + t[1])] * xp[iy * w + ix];
        }
        op[y * w + xc] = acc;
      }
    }
  });
  out->backward_step = [x, bank, taps, c, h, w, L, half](TensorNode<T>& o) {
    if (wants(x)) {
      kernels::parallel_for(c, [&](i64 ch) {
        T* gx = x->g.data() + ch * h * w;
        for (i64 y = 0; y < h; ++y) {
          for (i64 xc = 0; xc < w; ++xc) {
            T acc = T(0);
            for (i64 a = 0; a < 8; ++a) {
              const T* wp = bank->data() + (a * c + ch) * L * L;
              const T* gp = o.g.data() + (a * c + ch) * h * w;
              for (const auto& t : taps[static_cast<std::size_t>(a)].taps) {
                const i64 oy = y - t[0];
                const i64 ox = xc - t[1];
                if (oy < 0 || oy >= h || ox < 0 || ox >= w) continue;
                acc += wp[(half + t[0]) * L + (half + t[1])] * gp[oy * w + ox];
              }
            }
            gx[y * w + xc] += acc;
          }
        }
      });
    }
    if (wants(bank)) {
      // Off-support cells are never touched, so they keep exact zeros.
      kernels::parallel_for(8 * c, [&](i64 plane) {
        const i64 a = plane / c;
        const i64 ch = plane % c;
        const T* xp = x->data() + ch * h * w;
        const T* gp = o.g.data() + plane * h * w;
        T* gw = bank->g.data() + plane * L * L;
        for (const auto& t : taps[static_cast<std::size_t>(a)].taps) {
          T acc = T(0);
          for (i64 y = 0; y < h; ++y) {
            const i64 iy = y + t[0];
            if (iy < 0 || iy >= h) continue;
            for (i64 xc = 0; xc < w; ++xc) {
              const i64 ix = xc + t[1];
              if (ix < 0 || ix >= w) continue;
              acc += xp[iy * w + ix] * gp[y * w + xc];
            }
          }
          gw[(half + t[0]) * L + (half + t[1])] += acc;
        }
      });
    }
  };
  return out;
}

template <typename T>
Var<T> directional_fusion(const Var<T>& resp, const Var<T>& w,
                          const Var<T>& b) {
  DT_CHECK(resp->shape.size() == 3 && resp->shape[0] % 8 == 0,
           "fusion: responses must be 8C x H x W");
  const i64 c8 = resp->shape[0];
  const i64 c = c8 / 8;
  const i64 h = resp->shape[1], ww = resp->shape[2];
  DT_CHECK(w->shape.size() == 2 && w->shape[1] == c8,
           "fusion: weight must be Cout x ", c8, ", got inner dim ",
           w->shape.size() == 2 ? w->shape[1] : -1);
  const i64 cout = w->shape[0];
  DT_CHECK(b->numel() == cout, "fusion: bias has ", b->numel(),
           " entries, expected ", cout);
  const i64 plane = h * ww;
  auto out = make_out<T>({cout, h, ww}, "directional_fusion", {resp, w, b});
  kernels::parallel_for(cout, [&](i64 o) {
    // Direction partials first, then a butterfly combine. Pairs (d, d+4),
    // then (j, j+2): each level is preserved (up to FP commutativity) by a
    // cyclic shift of 2, which keeps the block exactly rotation-equivariant.
    std::vector<T> part(8 * plane);
    for (i64 d = 0; d < 8; ++d) {
      T* pp = part.data() + d * plane;
      for (i64 p = 0; p < plane; ++p) pp[p] = T(0);
      for (i64 cc = 0; cc < c; ++cc) {
        const T wv = w->v[o * c8 + d * c + cc];
        const T* rp = resp->data() + (d * c + cc) * plane;
        for (i64 p = 0; p < plane; ++p) pp[p] += wv * rp[p];
      }
    }
    T* op = out->data() + o * plane;
    const T bv = b->v[o];
    for (i64 p = 0; p < plane; ++p) {
      const T p04 = part[0 * plane + p] + part[4 * plane + p];
      const T p15 = part[1 * plane + p] + part[5 * plane + p];
      const T p26 = part[2 * plane + p] + part[6 * plane + p];
      const T p37 = part[3 * plane + p] + part[7 * plane + p];
      op[p] = bv + ((p04 + p26) + (p15 + p37));
    }
  });
  out->backward_step = [resp, w, b, c8, cout, plane](TensorNode<T>& o) {
    if (wants(resp)) {
      kernels::gemm_tn(w->data(), o.grad(), resp->grad(), c8, cout, plane,
                       true);
    }
    if (wants(w)) {
      kernels::gemm_nt(o.grad(), resp->data(), w->grad(), cout, plane, c8,
                       true);
    }
    if (wants(b)) {
      for (i64 i = 0; i < cout; ++i) {
        T acc = T(0);
        for (i64 p = 0; p < plane; ++p) acc += o.g[i * plane + p];
        b->g[i] += acc;
      }
    }
  };
  return out;
}

// --------------------------------------------------------------------- patch

template <typename T>
Var<T> patchify_op(const Var<T>& img, i64 patch) {
  DT_CHECK(img->shape.size() == 3 && img->shape[0] == 3,
           "patchify: image must be 3 x H x W");
  const i64 h = img->shape[1], w = img->shape[2];
  DT_CHECK(patch > 0 && h % patch == 0, "patchify: height ", h,
           " not divisible by patch ", patch);
  DT_CHECK(w % patch == 0, "patchify: width ", w, " not divisible by patch ",
           patch);
  const i64 gh = h / patch, gw = w / patch;
  const i64 n = gh * gw, d = 3 * patch * patch;
  auto out = make_out<T>({n, d}, "patchify", {img});
  for (i64 t = 0; t < n; ++t) {
    const i64 py = (t / gw) * patch, px = (t % gw) * patch;
    T* orow = out->data() + t * d;
    for (i64 c = 0; c < 3; ++c) {
      for (i64 dy = 0; dy < patch; ++dy) {
        for (i64 dx = 0; dx < patch; ++dx) {
          orow[(c * patch + dy) * patch + dx] =
              img->v[(c * h + py + dy) * w + px + dx];
        }
      }
    }
  }
  out->backward_step = [img, patch, h, w, gw, n, d](TensorNode<T>& o) {
    if (!wants(img)) return;
    for (i64 t = 0; t < n; ++t) {
      const i64 py = (t / gw) * patch, px = (t % gw) * patch;
      const T* grow = o.g.data() + t * d;
      for (i64 c = 0; c < 3; ++c) {
        for (i64 dy = 0; dy < patch; ++dy) {
          for (i64 dx = 0; dx < patch; ++dx) {
            img->g[(c * h + py + dy) * w + px + dx] +=
                grow[(c * patch + dy) * patch + dx];
          }
        }
      }
    }
  };
  return out;
}

template <typename T>
Var<T> unpatchify_op(const Var<T>& tokens, i64 patch, i64 h, i64 w) {
  DT_CHECK(tokens->shape.size() == 2, "unpatchify: expected N x D tokens");
  const i64 gh = h / patch, gw = w / patch;
  DT_CHECK(gh * patch == h && gw * patch == w,
           "unpatchify: image ", h, "x", w, " not tiled by patch ", patch);
  DT_CHECK(tokens->shape[0] == gh * gw, "unpatchify: ", tokens->shape[0],
           " tokens for a ", gh, "x", gw, " grid");
  const i64 d = 3 * patch * patch;
  DT_CHECK(tokens->shape[1] == d, "unpatchify: token dim ", tokens->shape[1],
           " != 3*patch^2 = ", d);
  auto out = make_out<T>({3, h, w}, "unpatchify", {tokens});
  const i64 n = gh * gw;
  for (i64 t = 0; t < n; ++t) {
    const i64 py = (t / gw) * patch, px = (t % gw) * patch;
    const T* row = tokens->data() + t * d;
    for (i64 c = 0; c < 3; ++c) {
      for (i64 dy = 0; dy < patch; ++dy) {
        for (i64 dx = 0; dx < patch; ++dx) {
          out->v[(c * h + py + dy) * w + px + dx] =
              row[(c * patch + dy) * patch + dx];
        }
      }
    }
  }
  out->backward_step = [tokens, patch, h, w, gw, n, d](TensorNode<T>& o) {
    if (!wants(tokens)) return;
    for (i64 t = 0; t < n; ++t) {
      const i64 py = (t / gw) * patch, px = (t % gw) * patch;
      T* grow = tokens->g.data() + t * d;
      for (i64 c = 0; c < 3; ++c) {
        for (i64 dy = 0; dy < patch; ++dy) {
          for (i64 dx = 0; dx < patch; ++dx) {
            grow[(c * patch + dy) * patch + dx] +=
                o.g[(c * h + py + dy) * w + px + dx];
          }
        }
      }
    }
  };
  return out;
}

// ----------------------------------------------------------------------- loss

template <typename T>
Var<T> bce_logits_map(const Var<T>& logits, const Var<T>& targets) {
  check_same_shape(logits, targets, "bce_logits");
  auto out = make_out<T>(logits->shape, "bce_logits", {logits, targets});
  const i64 n = out->numel();
  for (i64 i = 0; i < n; ++i) {
    const T x = logits->v[i];
    const T t = targets->v[i];
    const T mx = x > T(0) ? x : T(0);
    out->v[i] = mx - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  out->backward_step = [logits, targets](TensorNode<T>& o) {
    if (!wants(logits)) return;
    const i64 n = o.numel();
    for (i64 i = 0; i < n; ++i) {
      logits->g[i] += o.g[i] * (stable_sigmoid(logits->v[i]) - targets->v[i]);
    }
  };
  return out;
}

// ------------------------------------------------------------ instantiations

#define DT_INSTANTIATE(T)                                                      \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                        \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                        \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                        \
  template Var<T> div_ew<T>(const Var<T>&, const Var<T>&);                     \
  template Var<T> scale<T>(const Var<T>&, T);                                  \
  template Var<T> relu<T>(const Var<T>&);                                      \
  template Var<T> sigmoid<T>(const Var<T>&);                                   \
  template Var<T> softplus<T>(const Var<T>&);                                  \
  template Var<T> sqrt_op<T>(const Var<T>&);                                   \
  template Var<T> sum_all<T>(const Var<T>&);                                   \
  template Var<T> mean_all<T>(const Var<T>&);                                  \
  template Var<T> weighted_sum<T>(const Var<T>&, const std::vector<T>&);       \
  template Var<T> reshape<T>(const Var<T>&, std::vector<i64>);                 \
  template Var<T> concat0<T>(const std::vector<Var<T>>&);                      \
  template Var<T> slice_cols<T>(const Var<T>&, i64, i64);                      \
  template Var<T> gather_rows<T>(const Var<T>&, const std::vector<i64>&);      \
  template Var<T> scatter_rows_fill<T>(const Var<T>&, const std::vector<i64>&, \
                                       const Var<T>&, i64);                    \
  template Var<T> transpose2d<T>(const Var<T>&);                               \
  template Var<T> transpose_12<T>(const Var<T>&);                              \
  template Var<T> tokens_to_grid<T>(const Var<T>&, i64);                       \
  template Var<T> grid_to_tokens<T>(const Var<T>&);                            \
  template Var<T> add_bias_rows<T>(const Var<T>&, const Var<T>&);              \
  template Var<T> channel_scale<T>(const Var<T>&, const Var<T>&);              \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                     \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);      \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&,   \
                                T);                                            \
  template Var<T> batch_norm_2d<T>(const Var<T>&, const Var<T>&,               \
                                   const Var<T>&, const Var<T>&,               \
                                   const Var<T>&, bool, bool, T, T);           \
  template Var<T> multi_head_attention<T>(const Var<T>&, const Var<T>&,        \
                                          const Var<T>&, i64);                 \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, i64,  \
                            i64);                                              \
  template Var<T> depthwise_conv2d<T>(const Var<T>&, const Var<T>&, i64);      \
  template Var<T> laplacian3x3<T>(const Var<T>&);                              \
  template Var<T> bilinear_sample<T>(const Var<T>&, const Var<T>&);            \
  template Var<T> bilinear_upsample_x2<T>(const Var<T>&);                      \
  template Var<T> global_avg_pool<T>(const Var<T>&);                           \
  template Var<T> mean_axis0<T>(const Var<T>&);                                \
  template Var<T> shift_lattice<T>(const Var<T>&, i64, i64, i64);              \
  template Var<T> assemble_cholesky<T>(const Var<T>&, T);                      \
  template Var<T> warp_offsets_op<T>(const Var<T>&, i64);                      \
  template Var<T> quad_form_sqrt<T>(const Var<T>&, T, T);                      \
  template Var<T> directional_responses<T>(const Var<T>&, const Var<T>&,       \
                                           const std::vector<DirTaps>&);       \
  template Var<T> directional_fusion<T>(const Var<T>&, const Var<T>&,          \
                                        const Var<T>&);                        \
  template Var<T> patchify_op<T>(const Var<T>&, i64);                          \
  template Var<T> unpatchify_op<T>(const Var<T>&, i64, i64, i64);              \
  template Var<T> bce_logits_map<T>(const Var<T>&, const Var<T>&);

DT_INSTANTIATE(float)
DT_INSTANTIATE(double)

#undef DT_INSTANTIATE

}  // namespace deeptopo
