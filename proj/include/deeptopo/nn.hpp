#pragma once

#include <string>
#include <vector>

#include "deeptopo/ops.hpp"

namespace deeptopo {

// Ordered, named parameter set. Entry order defines the checkpoint layout.
// Buffers (running statistics) are entries with trainable=false.
template <typename T>
struct ParamStore {
  struct Entry {
    std::string name;
    Var<T> t;
    bool trainable;
  };
  std::vector<Entry> entries;
  std::uint64_t seed = 0;

  enum class Init { kZeros, kOnes, kTruncNormal };

  Var<T> param(const std::string& name, std::vector<i64> shape, Init init,
               double stddev = 0.02, bool trainable = true) {
    auto t = tensor<T>(std::move(shape), trainable);
    switch (init) {
      case Init::kZeros:
        break;
      case Init::kOnes:
        for (auto& x : t->v) x = T(1);
        break;
      case Init::kTruncNormal: {
        Rng rng = Rng::stream(seed, fnv1a64(name));
        for (auto& x : t->v) x = static_cast<T>(rng.trunc_normal(stddev));
        break;
      }
    }
    entries.push_back({name, t, trainable});
    return t;
  }

  Var<T> param_values(const std::string& name, std::vector<i64> shape,
                      std::vector<T> values, bool trainable = true) {
    auto t = tensor<T>(std::move(shape), std::move(values), trainable);
    entries.push_back({name, t, trainable});
    return t;
  }

  void zero_grad() {
    for (auto& e : entries) {
      if (e.trainable) e.t->zero_grad();
    }
  }

  i64 total_elems() const {
    i64 n = 0;
    for (const auto& e : entries) n += e.t->numel();
    return n;
  }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }
};

// Decoupled weight decay variant of Adam. Moment buffers are kept in double
// so float training updates stay well conditioned; updates are elementwise
// and deterministic.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, double lr, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01);

  void step();
  void zero_grad() { store_->zero_grad(); }
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  ParamStore<T>* store_;
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  i64 t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Pre-norm transformer block: LN -> multi-head self-attention -> residual,
// LN -> 2-layer feed-forward (relu) -> residual.
template <typename T>
struct AttnBlock {
  i64 dim = 0;
  i64 heads = 0;
  Var<T> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  Var<T> ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;

  Var<T> forward(const Var<T>& x) const;
};

template <typename T>
AttnBlock<T> make_attn_block(ParamStore<T>& store, const std::string& prefix,
                             i64 dim, i64 heads);

// Fixed 2-D sine/cosine position embeddings for a square token grid,
// row-major token order. dim must be divisible by 4.
std::vector<double> sincos_pos_embed_2d(i64 dim, i64 grid);

template <typename T>
Var<T> pos_embed_const(i64 dim, i64 grid) {
  auto pe = sincos_pos_embed_2d(dim, grid);
  std::vector<T> v(pe.size());
  for (std::size_t i = 0; i < pe.size(); ++i) v[i] = static_cast<T>(pe[i]);
  return tensor<T>({grid * grid, dim}, std::move(v));
}

}  // namespace deeptopo
