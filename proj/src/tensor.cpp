#include "lcf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "lcf/errors.hpp"

namespace lcf {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

Tensor Tensor::zeros(Shape s) {
  Tensor t;
  int64_t n = shape_numel(s);
  t.shape = std::move(s);
  t.data = std::make_shared<std::vector<float>>(static_cast<size_t>(n), 0.0f);
  return t;
}

Tensor Tensor::full(Shape s, float v) {
  Tensor t = zeros(std::move(s));
  std::fill(t.data->begin(), t.data->end(), v);
  return t;
}

Tensor Tensor::from(Shape s, std::vector<float> v) {
  if (shape_numel(s) != static_cast<int64_t>(v.size()))
    throw ShapeError("Tensor::from: shape " + shape_str(s) + " does not hold " +
                     std::to_string(v.size()) + " values");
  Tensor t;
  t.shape = std::move(s);
  t.data = std::make_shared<std::vector<float>>(std::move(v));
  return t;
}

int Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("Tensor::dim: axis out of range");
  return shape[static_cast<size_t>(i)];
}

float Tensor::scalar() const {
  if (numel() != 1) throw ContractError("scalar(): tensor has " + std::to_string(numel()) + " elements");
  return (*data)[0];
}

bool Tensor::all_finite() const {
  for (float v : *data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& t) {
  if (!t.defined()) throw ContractError("Tape::leaf: undefined tensor");
  Tensor out = t;
  out.tape = this;
  out.node = push(t.shape, BackwardFn(), /*is_leaf=*/true);
  return out;
}

int Tape::push(const Shape& shape, BackwardFn fn, bool is_leaf) {
  Node n;
  n.shape = shape;
  n.size = shape_numel(shape);
  n.backward = std::move(fn);
  n.is_leaf = is_leaf;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

float* Tape::grad_buf(int node, int64_t n) {
  Node& nd = nodes_[static_cast<size_t>(node)];
  if (nd.grad.empty()) nd.grad.assign(static_cast<size_t>(n), 0.0f);
  return nd.grad.data();
}

void Tape::accumulate(int node, const float* g, int64_t n) {
  if (node < 0) return;
  float* buf = grad_buf(node, n);
  for (int64_t i = 0; i < n; ++i) buf[i] += g[i];
}

std::unordered_map<int, Tensor> Tape::gradients(const Tensor& loss) {
  if (loss.tape != this) throw ContractError("reverse_gradients: loss was not recorded on this tape");
  if (loss.numel() != 1) throw ContractError("reverse_gradients: loss must be a scalar");
  if (consumed_) throw ContractError("reverse_gradients: tape already consumed");
  consumed_ = true;

  grad_buf(loss.node, 1)[0] = 1.0f;
  for (int i = loss.node; i >= 0; --i) {
    Node& nd = nodes_[static_cast<size_t>(i)];
    if (!nd.grad.empty() && nd.backward) nd.backward(*this, nd.grad.data());
  }

  std::unordered_map<int, Tensor> out;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    Node& nd = nodes_[i];
    if (!nd.is_leaf) continue;
    if (nd.grad.empty())
      out.emplace(static_cast<int>(i), Tensor::zeros(nd.shape));
    else
      out.emplace(static_cast<int>(i), Tensor::from(nd.shape, std::move(nd.grad)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

namespace {

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tp = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tape) continue;
    if (tp && tp != t->tape) throw ContractError("op mixes tensors from two different tapes");
    tp = t->tape;
  }
  return tp;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// C (m,n) += or = A (m,k) @ B (k,n)
void mm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool accum) {
  if (!accum) std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const float* ai = a + static_cast<int64_t>(i) * k;
    float* ci = c + static_cast<int64_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      float av = ai[l];
      if (av == 0.0f) continue;
      const float* bl = b + static_cast<int64_t>(l) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// C (m,n) += or = A (m,k) @ B^T, B stored (n,k)
void mm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool accum) {
  for (int i = 0; i < m; ++i) {
    const float* ai = a + static_cast<int64_t>(i) * k;
    float* ci = c + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* bj = b + static_cast<int64_t>(j) * k;
      float acc = 0.0f;
      for (int l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] = accum ? ci[j] + acc : acc;
    }
  }
}

// C (k,n) += A^T @ G, A stored (m,k), G stored (m,n)
void mm_tn(const float* a, const float* g, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* ai = a + static_cast<int64_t>(i) * k;
    const float* gi = g + static_cast<int64_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      float av = ai[l];
      if (av == 0.0f) continue;
      float* cl = c + static_cast<int64_t>(l) * n;
      for (int j = 0; j < n; ++j) cl[j] += av * gi[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape);
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.ptr();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (Tape* tp = common_tape({&a, &b})) {
    int na = a.node, nb = b.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [na, nb, n](Tape& t, const float* g) {
      t.accumulate(na, g, n);
      t.accumulate(nb, g, n);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out = Tensor::zeros(a.shape);
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.ptr();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (Tape* tp = common_tape({&a, &b})) {
    int na = a.node, nb = b.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [na, nb, n](Tape& t, const float* g) {
      t.accumulate(na, g, n);
      if (nb >= 0) {
        float* buf = t.grad_buf(nb, n);
        for (int64_t i = 0; i < n; ++i) buf[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape);
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.ptr();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (Tape* tp = common_tape({&a, &b})) {
    int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    out.tape = tp;
    out.node = tp->push(out.shape, [na, nb, n, da, db](Tape& t, const float* g) {
      if (na >= 0) {
        float* buf = t.grad_buf(na, n);
        const float* pb2 = db->data();
        for (int64_t i = 0; i < n; ++i) buf[i] += g[i] * pb2[i];
      }
      if (nb >= 0) {
        float* buf = t.grad_buf(nb, n);
        const float* pa2 = da->data();
        for (int64_t i = 0; i < n; ++i) buf[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& x, float c) {
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] + c;
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, n](Tape& t, const float* g) { t.accumulate(nx, g, n); });
  }
  return out;
}

Tensor mul_scalar(const Tensor& x, float c) {
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] * c;
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, n, c](Tape& t, const float* g) {
      if (nx >= 0) {
        float* buf = t.grad_buf(nx, n);
        for (int64_t i = 0; i < n; ++i) buf[i] += g[i] * c;
      }
    });
  }
  return out;
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: scale must have a single element");
  float sv = (*s.data)[0];
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] * sv;
  if (Tape* tp = common_tape({&x, &s})) {
    int nx = x.node, ns = s.node;
    auto dx = x.data;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, ns, n, sv, dx](Tape& t, const float* g) {
      if (nx >= 0) {
        float* buf = t.grad_buf(nx, n);
        for (int64_t i = 0; i < n; ++i) buf[i] += g[i] * sv;
      }
      if (ns >= 0) {
        const float* px2 = dx->data();
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(g[i]) * px2[i];
        float gs = static_cast<float>(acc);
        t.accumulate(ns, &gs, 1);
      }
    });
  }
  return out;
}

Tensor mul_lastdim(const Tensor& x, const Tensor& s) {
  if (x.rank() < 1) throw ShapeError("mul_lastdim: x must have rank >= 1");
  Shape want(x.shape.begin(), x.shape.end() - 1);
  if (s.shape != want)
    throw ShapeError("mul_lastdim: scale shape " + shape_str(s.shape) + " vs rows " + shape_str(want));
  int d = x.dim(-1);
  int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  const float* ps = s.ptr();
  float* po = out.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    float sv = ps[r];
    for (int j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] * sv;
  }
  if (Tape* tp = common_tape({&x, &s})) {
    int nx = x.node, ns = s.node;
    auto dx = x.data, ds = s.data;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, ns, rows, d, dx, ds](Tape& t, const float* g) {
      if (nx >= 0) {
        float* buf = t.grad_buf(nx, rows * d);
        const float* ps2 = ds->data();
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j) buf[r * d + j] += g[r * d + j] * ps2[r];
      }
      if (ns >= 0) {
        float* buf = t.grad_buf(ns, rows);
        const float* px2 = dx->data();
        for (int64_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (int j = 0; j < d; ++j) acc += static_cast<double>(g[r * d + j]) * px2[r * d + j];
          buf[r] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    float sg = 1.0f / (1.0f + std::exp(-px[i]));
    po[i] = px[i] * sg;
  }
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    auto dx = x.data;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, n, dx](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, n);
      const float* px2 = dx->data();
      for (int64_t i = 0; i < n; ++i) {
        float sg = 1.0f / (1.0f + std::exp(-px2[i]));
        buf[i] += g[i] * sg * (1.0f + px2[i] * (1.0f - sg));
      }
    });
  }
  return out;
}

Tensor sigmoid_t(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = 1.0f / (1.0f + std::exp(-px[i]));
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    auto dy = out.data;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, n, dy](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, n);
      const float* py = dy->data();
      for (int64_t i = 0; i < n; ++i) buf[i] += g[i] * py[i] * (1.0f - py[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

namespace {

struct MatmulDims {
  int64_t batch;
  int m, k, n;
  bool b_shared;
};

MatmulDims matmul_dims(const char* op, const Tensor& a, const Tensor& b, bool b_transposed) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError(std::string(op) + ": operands must have rank >= 2, got " + shape_str(a.shape) +
                     " and " + shape_str(b.shape));
  MatmulDims d{};
  d.m = a.dim(-2);
  d.k = a.dim(-1);
  int bk = b_transposed ? b.dim(-1) : b.dim(-2);
  d.n = b_transposed ? b.dim(-2) : b.dim(-1);
  if (bk != d.k)
    throw ShapeError(std::string(op) + ": inner dimensions disagree, " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  d.batch = a.numel() / (static_cast<int64_t>(d.m) * d.k);
  d.b_shared = (b.rank() == 2 && a.rank() > 2);
  if (!d.b_shared) {
    Shape ab(a.shape.begin(), a.shape.end() - 2);
    Shape bb(b.shape.begin(), b.shape.end() - 2);
    if (ab != bb)
      throw ShapeError(std::string(op) + ": batch dimensions disagree, " + shape_str(a.shape) + " vs " +
                       shape_str(b.shape));
  }
  return d;
}

Shape matmul_out_shape(const Tensor& a, int m, int n) {
  Shape s(a.shape.begin(), a.shape.end() - 2);
  s.push_back(m);
  s.push_back(n);
  return s;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MatmulDims dm = matmul_dims("matmul", a, b, false);
  Tensor out = Tensor::zeros(matmul_out_shape(a, dm.m, dm.n));
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.ptr();
  int64_t as = static_cast<int64_t>(dm.m) * dm.k;
  int64_t bs = dm.b_shared ? 0 : static_cast<int64_t>(dm.k) * dm.n;
  int64_t os = static_cast<int64_t>(dm.m) * dm.n;
  for (int64_t t = 0; t < dm.batch; ++t)
    mm_nn(pa + t * as, pb + t * bs, po + t * os, dm.m, dm.k, dm.n, false);
  if (Tape* tp = common_tape({&a, &b})) {
    int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    out.tape = tp;
    out.node = tp->push(out.shape, [na, nb, dm, as, bs, os, da, db](Tape& t, const float* g) {
      if (na >= 0) {
        float* buf = t.grad_buf(na, dm.batch * as);
        const float* pb2 = db->data();
        for (int64_t i = 0; i < dm.batch; ++i)
          mm_nt(g + i * os, pb2 + i * bs, buf + i * as, dm.m, dm.n, dm.k, true);
      }
      if (nb >= 0) {
        int64_t bn = static_cast<int64_t>(dm.k) * dm.n;
        float* buf = t.grad_buf(nb, dm.b_shared ? bn : dm.batch * bn);
        const float* pa2 = da->data();
        for (int64_t i = 0; i < dm.batch; ++i)
          mm_tn(pa2 + i * as, g + i * os, buf + (dm.b_shared ? 0 : i * bn), dm.m, dm.k, dm.n);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  MatmulDims dm = matmul_dims("matmul_nt", a, b, true);
  Tensor out = Tensor::zeros(matmul_out_shape(a, dm.m, dm.n));
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.ptr();
  int64_t as = static_cast<int64_t>(dm.m) * dm.k;
  int64_t bs = dm.b_shared ? 0 : static_cast<int64_t>(dm.n) * dm.k;
  int64_t os = static_cast<int64_t>(dm.m) * dm.n;
  for (int64_t t = 0; t < dm.batch; ++t)
    mm_nt(pa + t * as, pb + t * bs, po + t * os, dm.m, dm.k, dm.n, false);
  if (Tape* tp = common_tape({&a, &b})) {
    int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    out.tape = tp;
    out.node = tp->push(out.shape, [na, nb, dm, as, bs, os, da, db](Tape& t, const float* g) {
      if (na >= 0) {
        float* buf = t.grad_buf(na, dm.batch * as);
        const float* pb2 = db->data();
        for (int64_t i = 0; i < dm.batch; ++i)
          mm_nn(g + i * os, pb2 + i * bs, buf + i * as, dm.m, dm.n, dm.k, true);
      }
      if (nb >= 0) {
        int64_t bn = static_cast<int64_t>(dm.n) * dm.k;
        float* buf = t.grad_buf(nb, dm.b_shared ? bn : dm.batch * bn);
        const float* pa2 = da->data();
        for (int64_t i = 0; i < dm.batch; ++i)
          mm_tn(g + i * os, pa2 + i * as, buf + (dm.b_shared ? 0 : i * bn), dm.m, dm.n, dm.k);
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_str(w.shape));
  int in = w.dim(1), outw = w.dim(0);
  if (x.dim(-1) != in)
    throw ShapeError("linear: input " + shape_str(x.shape) + " vs weight " + shape_str(w.shape));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != outw))
    throw ShapeError("linear: bias " + shape_str(b.shape) + " vs weight " + shape_str(w.shape));
  int64_t rows = x.numel() / in;
  Shape os = x.shape;
  os.back() = outw;
  Tensor out = Tensor::zeros(os);
  mm_nt(x.ptr(), w.ptr(), out.ptr(), static_cast<int>(rows), in, outw, false);
  if (b.defined()) {
    const float* pb = b.ptr();
    float* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < outw; ++j) po[r * outw + j] += pb[j];
  }
  Tape* tp = b.defined() ? common_tape({&x, &w, &b}) : common_tape({&x, &w});
  if (tp) {
    int nx = x.node, nw = w.node, nb = b.defined() ? b.node : -1;
    auto dx = x.data, dw = w.data;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, nw, nb, rows, in, outw, dx, dw](Tape& t, const float* g) {
      int m = static_cast<int>(rows);
      if (nx >= 0) {
        float* buf = t.grad_buf(nx, rows * in);
        mm_nn(g, dw->data(), buf, m, outw, in, true);
      }
      if (nw >= 0) {
        float* buf = t.grad_buf(nw, static_cast<int64_t>(outw) * in);
        mm_tn(g, dx->data(), buf, m, outw, in);
      }
      if (nb >= 0) {
        float* buf = t.grad_buf(nb, outw);
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < outw; ++j) buf[j] += g[r * outw + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization / attention pieces
// ---------------------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  int d = x.dim(-1);
  if (d < 1) throw ShapeError("softmax_lastdim: empty last dimension");
  int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = px + r * d;
    float* yr = po + r * d;
    float mx = xr[0];
    for (int j = 0; j < d; ++j) {
      if (std::isnan(xr[j])) throw NumericError("softmax_lastdim: non-finite input");
      mx = std::max(mx, xr[j]);
    }
    double denom = 0.0;
    for (int j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      denom += yr[j];
    }
    float inv = static_cast<float>(1.0 / denom);
    for (int j = 0; j < d; ++j) yr[j] *= inv;
  }
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    auto dy = out.data;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, rows, d, dy](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, rows * d);
      const float* py = dy->data();
      for (int64_t r = 0; r < rows; ++r) {
        const float* yr = py + r * d;
        const float* gr = g + r * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += static_cast<double>(gr[j]) * yr[j];
        for (int j = 0; j < d; ++j) buf[r * d + j] += yr[j] * (gr[j] - static_cast<float>(dot));
      }
    });
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps) {
  int d = x.dim(-1);
  if (weight.rank() != 1 || weight.dim(0) != d)
    throw ShapeError("rms_norm: weight " + shape_str(weight.shape) + " vs input " + shape_str(x.shape));
  int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  const float* pw = weight.ptr();
  float* po = out.ptr();
  std::vector<float> rinv(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = px + r * d;
    double ms = 0.0;
    for (int j = 0; j < d; ++j) ms += static_cast<double>(xr[j]) * xr[j];
    float rv = static_cast<float>(1.0 / std::sqrt(ms / d + eps));
    rinv[static_cast<size_t>(r)] = rv;
    for (int j = 0; j < d; ++j) po[r * d + j] = xr[j] * rv * pw[j];
  }
  Tape* tp = common_tape({&x, &weight});
  if (tp) {
    int nx = x.node, nw = weight.node;
    auto dx = x.data, dw = weight.data;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, nw, rows, d, dx, dw, rinv](Tape& t, const float* g) {
      const float* px2 = dx->data();
      const float* pw2 = dw->data();
      if (nx >= 0) {
        float* buf = t.grad_buf(nx, rows * d);
        for (int64_t r = 0; r < rows; ++r) {
          const float* xr = px2 + r * d;
          const float* gr = g + r * d;
          float rv = rinv[static_cast<size_t>(r)];
          double dot = 0.0;
          for (int j = 0; j < d; ++j) dot += static_cast<double>(gr[j]) * pw2[j] * xr[j];
          float coef = static_cast<float>(dot) * rv * rv * rv / d;
          for (int j = 0; j < d; ++j) buf[r * d + j] += gr[j] * pw2[j] * rv - xr[j] * coef;
        }
      }
      if (nw >= 0) {
        float* buf = t.grad_buf(nw, d);
        for (int64_t r = 0; r < rows; ++r) {
          const float* xr = px2 + r * d;
          const float* gr = g + r * d;
          float rv = rinv[static_cast<size_t>(r)];
          for (int j = 0; j < d; ++j) buf[j] += gr[j] * xr[j] * rv;
        }
      }
    });
  }
  return out;
}

Tensor add_mask(const Tensor& scores, const Tensor& mask) {
  if (scores.rank() < 2 || mask.rank() != 2 || scores.dim(-2) != mask.dim(0) ||
      scores.dim(-1) != mask.dim(1))
    throw ShapeError("add_mask: scores " + shape_str(scores.shape) + " vs mask " + shape_str(mask.shape));
  Tensor out = Tensor::zeros(scores.shape);
  int64_t plane = static_cast<int64_t>(mask.dim(0)) * mask.dim(1);
  int64_t reps = scores.numel() / plane;
  const float* ps = scores.ptr();
  const float* pm = mask.ptr();
  float* po = out.ptr();
  for (int64_t r = 0; r < reps; ++r)
    for (int64_t i = 0; i < plane; ++i) po[r * plane + i] = ps[r * plane + i] + pm[i];
  if (Tape* tp = common_tape({&scores})) {
    int ns = scores.node;
    int64_t n = out.numel();
    out.tape = tp;
    out.node = tp->push(out.shape, [ns, n](Tape& t, const float* g) { t.accumulate(ns, g, n); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape s) {
  if (shape_numel(s) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape) + " -> " + shape_str(s) + " changes element count");
  Tensor out;
  out.shape = std::move(s);
  out.data = x.data;  // row-major view, no copy
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    int64_t n = x.numel();
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, n](Tape& t, const float* g) { t.accumulate(nx, g, n); });
  }
  return out;
}

namespace {

// Axis blocks for slice/concat: outer repeats, axis length, inner stride.
void axis_blocks(const Shape& s, int axis, int64_t& outer, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

Tensor slice(const Tensor& x, int axis, int start, int len) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ShapeError("slice: bad axis");
  int ax = x.shape[static_cast<size_t>(axis)];
  if (start < 0 || len < 0 || start + len > ax)
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") outside axis of size " + std::to_string(ax));
  Shape os = x.shape;
  os[static_cast<size_t>(axis)] = len;
  Tensor out = Tensor::zeros(os);
  int64_t outer, inner;
  axis_blocks(x.shape, axis, outer, inner);
  const float* px = x.ptr();
  float* po = out.ptr();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(po + o * len * inner, px + (o * ax + start) * inner,
                sizeof(float) * static_cast<size_t>(len) * inner);
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    int64_t xn = x.numel();
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, outer, inner, ax, start, len, xn](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, xn);
      for (int64_t o = 0; o < outer; ++o) {
        float* dst = buf + (o * ax + start) * inner;
        const float* src = g + o * len * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no parts");
  int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat: bad axis");
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && p.shape[static_cast<size_t>(i)] != parts[0].shape[static_cast<size_t>(i)])
        throw ShapeError("concat: shapes " + shape_str(parts[0].shape) + " vs " + shape_str(p.shape));
    total += p.shape[static_cast<size_t>(axis)];
  }
  Shape os = parts[0].shape;
  os[static_cast<size_t>(axis)] = total;
  Tensor out = Tensor::zeros(os);
  int64_t outer, inner;
  axis_blocks(os, axis, outer, inner);
  float* po = out.ptr();
  int64_t off = 0;
  for (const Tensor& p : parts) {
    int plen = p.shape[static_cast<size_t>(axis)];
    const float* pp = p.ptr();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(po + (o * total + off) * inner, pp + o * plen * inner,
                  sizeof(float) * static_cast<size_t>(plen) * inner);
    off += plen;
  }
  Tape* tp = nullptr;
  for (const Tensor& p : parts)
    if (p.tape) {
      if (tp && tp != p.tape) throw ContractError("concat mixes tapes");
      tp = p.tape;
    }
  if (tp) {
    struct Piece {
      int node;
      int len;
      int64_t numel;
    };
    std::vector<Piece> pieces;
    pieces.reserve(parts.size());
    for (const Tensor& p : parts)
      pieces.push_back({p.node, p.shape[static_cast<size_t>(axis)], p.numel()});
    out.tape = tp;
    out.node = tp->push(out.shape, [pieces, outer, inner, total](Tape& t, const float* g) {
      int64_t off2 = 0;
      for (const Piece& pc : pieces) {
        if (pc.node >= 0) {
          float* buf = t.grad_buf(pc.node, pc.numel);
          for (int64_t o = 0; o < outer; ++o) {
            const float* src = g + (o * total + off2) * inner;
            float* dst = buf + o * pc.len * inner;
            for (int64_t i = 0; i < pc.len * inner; ++i) dst[i] += src[i];
          }
        }
        off2 += pc.len;
      }
    });
  }
  return out;
}

Tensor heads_to_seq(const Tensor& x) {
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("heads_to_seq: want (1,H,N,D), got " + shape_str(x.shape));
  int h = x.dim(1), n = x.dim(2), d = x.dim(3);
  Tensor out = Tensor::zeros({n, h * d});
  const float* px = x.ptr();
  float* po = out.ptr();
  for (int hh = 0; hh < h; ++hh)
    for (int nn = 0; nn < n; ++nn)
      std::memcpy(po + (static_cast<int64_t>(nn) * h + hh) * d,
                  px + (static_cast<int64_t>(hh) * n + nn) * d, sizeof(float) * static_cast<size_t>(d));
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, h, n, d](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, static_cast<int64_t>(h) * n * d);
      for (int hh = 0; hh < h; ++hh)
        for (int nn = 0; nn < n; ++nn) {
          float* dst = buf + (static_cast<int64_t>(hh) * n + nn) * d;
          const float* src = g + (static_cast<int64_t>(nn) * h + hh) * d;
          for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
  }
  return out;
}

Tensor seq_to_heads(const Tensor& x, int heads) {
  if (x.rank() != 2 || x.dim(1) % heads != 0)
    throw ShapeError("seq_to_heads: want (N, H*D) divisible by H, got " + shape_str(x.shape));
  int n = x.dim(0), d = x.dim(1) / heads;
  Tensor out = Tensor::zeros({1, heads, n, d});
  const float* px = x.ptr();
  float* po = out.ptr();
  for (int hh = 0; hh < heads; ++hh)
    for (int nn = 0; nn < n; ++nn)
      std::memcpy(po + (static_cast<int64_t>(hh) * n + nn) * d,
                  px + (static_cast<int64_t>(nn) * heads + hh) * d,
                  sizeof(float) * static_cast<size_t>(d));
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, heads, n, d](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, static_cast<int64_t>(heads) * n * d);
      for (int hh = 0; hh < heads; ++hh)
        for (int nn = 0; nn < n; ++nn) {
          float* dst = buf + (static_cast<int64_t>(nn) * heads + hh) * d;
          const float* src = g + (static_cast<int64_t>(hh) * n + nn) * d;
          for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
  }
  return out;
}

Tensor broadcast_rows(const Tensor& x, int n) {
  if (x.rank() != 2 || x.dim(0) != 1) throw ShapeError("broadcast_rows: want (1, W), got " + shape_str(x.shape));
  int w = x.dim(1);
  Tensor out = Tensor::zeros({n, w});
  const float* px = x.ptr();
  float* po = out.ptr();
  for (int r = 0; r < n; ++r) std::memcpy(po + static_cast<int64_t>(r) * w, px, sizeof(float) * static_cast<size_t>(w));
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, n, w](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, w);
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < w; ++j) buf[j] += g[static_cast<int64_t>(r) * w + j];
    });
  }
  return out;
}

Tensor repeat_heads(const Tensor& x, int r) {
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("repeat_heads: want (1,H,N,D), got " + shape_str(x.shape));
  if (r < 1) throw ContractError("repeat_heads: repeat count must be >= 1");
  int h = x.dim(1), n = x.dim(2), d = x.dim(3);
  int64_t plane = static_cast<int64_t>(n) * d;
  Tensor out = Tensor::zeros({1, h * r, n, d});
  const float* px = x.ptr();
  float* po = out.ptr();
  for (int hh = 0; hh < h; ++hh)
    for (int rep = 0; rep < r; ++rep)
      std::memcpy(po + (static_cast<int64_t>(hh) * r + rep) * plane, px + hh * plane,
                  sizeof(float) * static_cast<size_t>(plane));
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, h, r, plane](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, h * plane);
      for (int hh = 0; hh < h; ++hh)
        for (int rep = 0; rep < r; ++rep) {
          const float* src = g + (static_cast<int64_t>(hh) * r + rep) * plane;
          float* dst = buf + hh * plane;
          for (int64_t i = 0; i < plane; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

Tensor rope(const Tensor& x, int pos0, float theta) {
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("rope: want (1,H,N,D), got " + shape_str(x.shape));
  int h = x.dim(1), n = x.dim(2), d = x.dim(3);
  if (d % 2 != 0) throw ContractError("rope: head dim must be even");
  int half = d / 2;
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  // cos/sin table shared across heads
  std::vector<float> cs(static_cast<size_t>(n) * half), sn(static_cast<size_t>(n) * half);
  for (int nn = 0; nn < n; ++nn)
    for (int j = 0; j < half; ++j) {
      double freq = std::pow(static_cast<double>(theta), -2.0 * j / d);
      double a = (pos0 + nn) * freq;
      cs[static_cast<size_t>(nn) * half + j] = static_cast<float>(std::cos(a));
      sn[static_cast<size_t>(nn) * half + j] = static_cast<float>(std::sin(a));
    }
  for (int hh = 0; hh < h; ++hh)
    for (int nn = 0; nn < n; ++nn) {
      const float* xr = px + (static_cast<int64_t>(hh) * n + nn) * d;
      float* yr = po + (static_cast<int64_t>(hh) * n + nn) * d;
      const float* c = cs.data() + static_cast<size_t>(nn) * half;
      const float* s = sn.data() + static_cast<size_t>(nn) * half;
      for (int j = 0; j < half; ++j) {
        yr[j] = xr[j] * c[j] - xr[j + half] * s[j];
        yr[j + half] = xr[j] * s[j] + xr[j + half] * c[j];
      }
    }
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, h, n, d, half, cs, sn](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, static_cast<int64_t>(h) * n * d);
      for (int hh = 0; hh < h; ++hh)
        for (int nn = 0; nn < n; ++nn) {
          const float* gr = g + (static_cast<int64_t>(hh) * n + nn) * d;
          float* dr = buf + (static_cast<int64_t>(hh) * n + nn) * d;
          const float* c = cs.data() + static_cast<size_t>(nn) * half;
          const float* s = sn.data() + static_cast<size_t>(nn) * half;
          for (int j = 0; j < half; ++j) {
            dr[j] += gr[j] * c[j] + gr[j + half] * s[j];
            dr[j + half] += -gr[j] * s[j] + gr[j + half] * c[j];
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  const float* px = x.ptr();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor out = Tensor::from({1}, {static_cast<float>(acc)});
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, n](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, n);
      for (int64_t i = 0; i < n; ++i) buf[i] += g[0];
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  int64_t n = x.numel();
  double acc = 0.0;
  const float* px = x.ptr();
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor out = Tensor::from({1}, {static_cast<float>(acc / n)});
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, n](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, n);
      float gv = g[0] / n;
      for (int64_t i = 0; i < n; ++i) buf[i] += gv;
    });
  }
  return out;
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy_mean: want (T, V), got " + shape_str(logits.shape));
  int t = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != t)
    throw ContractError("cross_entropy_mean: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(t) + " rows");
  if (t == 0) throw ContractError("cross_entropy_mean: empty target span");
  const float* px = logits.ptr();
  double loss = 0.0;
  for (int i = 0; i < t; ++i) {
    int tid = targets[static_cast<size_t>(i)];
    if (tid < 0 || tid >= v) throw InputError("cross_entropy_mean: target id out of vocabulary");
    const float* row = px + static_cast<int64_t>(i) * v;
    float mx = row[0];
    for (int j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    loss += mx + std::log(denom) - row[tid];
  }
  Tensor out = Tensor::from({1}, {static_cast<float>(loss / t)});
  if (Tape* tp = common_tape({&logits})) {
    int nx = logits.node;
    auto dl = logits.data;
    std::vector<int> tg = targets;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, t, v, dl, tg](Tape& tape, const float* g) {
      if (nx < 0) return;
      float* buf = tape.grad_buf(nx, static_cast<int64_t>(t) * v);
      const float* px2 = dl->data();
      float gv = g[0] / t;
      for (int i = 0; i < t; ++i) {
        const float* row = px2 + static_cast<int64_t>(i) * v;
        float* br = buf + static_cast<int64_t>(i) * v;
        float mx = row[0];
        for (int j = 0; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        for (int j = 0; j < v; ++j) {
          float p = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / denom);
          br[j] += gv * (p - (j == tg[static_cast<size_t>(i)] ? 1.0f : 0.0f));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// misc
// ---------------------------------------------------------------------------

Tensor dropout(const Tensor& x, float rate, Rng& rng, bool train) {
  if (rate < 0.0f || rate >= 1.0f) throw ContractError("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0f) return x;
  int64_t n = x.numel();
  auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n));
  float keep = 1.0f - rate;
  float inv = 1.0f / keep;
  Tensor out = Tensor::zeros(x.shape);
  const float* px = x.ptr();
  float* po = out.ptr();
  for (int64_t i = 0; i < n; ++i) {
    uint8_t m = rng.bernoulli(keep) ? 1 : 0;
    (*mask)[static_cast<size_t>(i)] = m;
    po[i] = m ? px[i] * inv : 0.0f;
  }
  if (Tape* tp = common_tape({&x})) {
    int nx = x.node;
    out.tape = tp;
    out.node = tp->push(out.shape, [nx, n, mask, inv](Tape& t, const float* g) {
      if (nx < 0) return;
      float* buf = t.grad_buf(nx, n);
      for (int64_t i = 0; i < n; ++i)
        if ((*mask)[static_cast<size_t>(i)]) buf[i] += g[i] * inv;
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2");
  int v = table.dim(0), h = table.dim(1);
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), h});
  const float* pt = table.ptr();
  float* po = out.ptr();
  for (size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id >= v) throw InputError("gather_rows: id " + std::to_string(id) + " out of range");
    std::memcpy(po + i * static_cast<size_t>(h), pt + static_cast<int64_t>(id) * h,
                sizeof(float) * static_cast<size_t>(h));
  }
  if (Tape* tp = common_tape({&table})) {
    int nt = table.node;
    std::vector<int> idc = ids;
    out.tape = tp;
    out.node = tp->push(out.shape, [nt, idc, v, h](Tape& t, const float* g) {
      if (nt < 0) return;
      float* buf = t.grad_buf(nt, static_cast<int64_t>(v) * h);
      for (size_t i = 0; i < idc.size(); ++i) {
        float* dst = buf + static_cast<int64_t>(idc[i]) * h;
        const float* src = g + i * static_cast<size_t>(h);
        for (int j = 0; j < h; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor init_kaiming_scaled(Shape shape, int64_t fan_in, float scale, Rng& rng) {
  if (fan_in < 1) throw ContractError("init_kaiming_scaled: fan_in must be >= 1");
  if (scale < 0.0f) throw ContractError("init_kaiming_scaled: scale must be >= 0");
  Tensor t = Tensor::zeros(std::move(shape));
  float std = scale * std::sqrt(2.0f / static_cast<float>(fan_in));
  if (std == 0.0f) return t;
  float* p = t.ptr();
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) p[i] = std * rng.normal();
  return t;
}

}  // namespace lcf
