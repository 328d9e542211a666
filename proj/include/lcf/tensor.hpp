#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "lcf/rng.hpp"

namespace lcf {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense row-major float32 tensor. The data buffer is shared and treated as
// immutable once the tensor has been produced by an op; only the optimizer
// writes through it, between tapes. A tensor recorded on a tape carries the
// tape pointer and its node id.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<float>> data;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, float v);
  static Tensor from(Shape s, std::vector<float> v);
  static Tensor scalar_of(float v) { return full({1}, v); }

  bool defined() const { return data != nullptr; }
  int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const;  // negative indices count from the back
  float* ptr() { return data->data(); }
  const float* ptr() const { return data->data(); }
  float scalar() const;  // requires numel() == 1
  bool requires_grad() const { return tape != nullptr; }
  Tensor detached() const {
    Tensor t = *this;
    t.tape = nullptr;
    t.node = -1;
    return t;
  }
  bool all_finite() const;
};

// Reverse-mode tape. Ops push one node per result; each node's backward
// closure reads the node's accumulated output gradient and adds the chain
// rule contribution into its parents' buffers. A tape belongs to a single
// logical thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const float* out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a grad-requiring leaf. The returned tensor shares the data
  // buffer of `t`, so optimizer updates through either handle agree.
  Tensor leaf(const Tensor& t);

  // Replays the chain rule from a scalar loss back to every leaf.
  // Returns one gradient per leaf, keyed by leaf node id, with the leaf's
  // shape (zeros for leaves the loss does not reach).
  std::unordered_map<int, Tensor> gradients(const Tensor& loss);

  // Op internals.
  int push(const Shape& shape, BackwardFn fn, bool is_leaf = false);
  void accumulate(int node, const float* g, int64_t n);
  float* grad_buf(int node, int64_t n);  // lazily allocated, zero-filled
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    int64_t size = 0;
    BackwardFn backward;
    std::vector<float> grad;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, float c);
Tensor mul_scalar(const Tensor& x, float c);
// out = s * x with s a 1-element tensor (gate scaling).
Tensor scale_by(const Tensor& x, const Tensor& s);
// x shape (..., D), s shape (...) — multiplies each last-dim row by a scalar.
Tensor mul_lastdim(const Tensor& x, const Tensor& s);
Tensor silu(const Tensor& x);
Tensor sigmoid_t(const Tensor& x);

// ---- matmul family ----
// a (..., m, k) @ b (..., k, n); batch dims must match, or b may be rank-2
// and is then shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
// a (..., m, k) @ b^T where b is (..., n, k).
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x (..., in) with weight (out, in) and optional bias (out).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());

// ---- normalization and attention pieces ----
Tensor softmax_lastdim(const Tensor& x);
Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps);
// scores (B, H, T, S) += mask (T, S); mask is a constant.
Tensor add_mask(const Tensor& scores, const Tensor& mask);

// ---- layout ----
Tensor reshape(const Tensor& x, Shape s);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// (1, H, N, D) -> (N, H*D)
Tensor heads_to_seq(const Tensor& x);
// (N, H*D) -> (1, H, N, D)
Tensor seq_to_heads(const Tensor& x, int heads);
// (1, W) -> (n, W)
Tensor broadcast_rows(const Tensor& x, int n);
// (1, H, N, D) -> (1, H*r, N, D), each head repeated r times consecutively
// (query head q therefore reads source head q / r).
Tensor repeat_heads(const Tensor& x, int r);
// Rotary positions on (1, H, N, D): sequence index n gets position pos0+n.
Tensor rope(const Tensor& x, int pos0, float theta);

// ---- reductions and losses ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// logits (T, V), one target id per row; mean cross-entropy over rows.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets);

// ---- misc ----
Tensor dropout(const Tensor& x, float rate, Rng& rng, bool train);
// table (V, h) gathered at ids; differentiable w.r.t. the table.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// Zero-mean normal with std = scale * sqrt(2 / fan_in), deterministic per rng
// state. scale = 0 gives an all-zero tensor.
Tensor init_kaiming_scaled(Shape shape, int64_t fan_in, float scale, Rng& rng);

}  // namespace lcf
