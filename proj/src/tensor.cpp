#include "rfad/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace rfad {

namespace {

using detail::TensorNode;

std::atomic<std::uint64_t> g_seq{1};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = g_seq.fetch_add(1);
  return node;
}

// Builds an op node; graph edges are recorded only when a parent needs
// gradients, so stop-gradient inputs prune the tape automatically.
Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward_fn) {
  auto node = make_node(std::move(shape), std::move(data));
  node->op = op;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void accumulate(TensorNode& target, const double* values, std::size_t n) {
  target.ensure_grad();
  for (std::size_t i = 0; i < n; ++i) target.grad[i] += values[i];
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

void require_ndim(const Tensor& t, int nd, const char* what) {
  if (t.ndim() != nd) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(nd) +
                     "-d tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace

// ---- Tensor basics ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  auto node = make_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  auto node = make_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  if (n != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("from_data: buffer length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

double* Tensor::mutable_data() {
  if (!is_leaf()) throw UsageError("mutable_data: in-place writes are restricted to leaf tensors");
  return node_->data.data();
}

double Tensor::value() const {
  if (numel() != 1) throw ShapeError("value: tensor has " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != ndim()) {
    throw ShapeError("at: rank mismatch for shape " + shape_str(shape()));
  }
  std::int64_t flat = 0;
  int axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= node_->shape[axis]) {
      throw ShapeError("at: index out of range on axis " + std::to_string(axis));
    }
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[static_cast<std::size_t>(flat)];
}

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw UsageError("set_requires_grad: only valid on leaf tensors");
  node_->requires_grad = flag;
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) {
    throw UsageError("grad: no gradient recorded for this tensor (op " + std::string(node_->op) + ")");
  }
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  auto node = make_node(node_->shape, node_->data);
  return Tensor(std::move(node));
}

// ---- backward ----

void backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward: undefined tensor");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) {
    throw UsageError("backward: tensor is not tracked by any tape (requires_grad is false)");
  }

  // Collect the subgraph reachable through grad-requiring edges.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> stack{loss.node()};
  seen.insert(loss.node());
  while (!stack.empty()) {
    TensorNode* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // Reverse creation order is a reverse topological order: every op's
  // inputs were created before it.
  std::sort(order.begin(), order.end(),
            [](const TensorNode* a, const TensorNode* b) { return a->seq > b->seq; });

  for (TensorNode* n : order) n->grad.assign(n->data.size(), 0.0);
  loss.node()->grad[0] = 1.0;

  for (TensorNode* n : order) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---- elementwise and structural ops ----

Tensor relu(const Tensor& input) {
  std::vector<double> out(input.values());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  Tensor x = input;
  return make_op("relu", input.shape(), std::move(out), {input}, [x](TensorNode& self) {
    const double* xv = x.data();
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = xv[i] > 0.0 ? self.grad[i] : 0.0;
    accumulate(*x.node(), g.data(), g.size());
  });
}

Tensor exp(const Tensor& t) {
  std::vector<double> out(t.values());
  for (auto& v : out) v = std::exp(v);
  Tensor saved_out;  // filled after construction
  Tensor x = t;
  Tensor r = make_op("exp", t.shape(), std::move(out), {t}, [x](TensorNode& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * self.data[i];
    accumulate(*x.node(), g.data(), g.size());
  });
  return r;
}

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.values());
  const double* bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Tensor ta = a, tb = b;
  return make_op("add", a.shape(), std::move(out), {a, b}, [ta, tb](TensorNode& self) {
    if (ta.requires_grad()) accumulate(*ta.node(), self.grad.data(), self.grad.size());
    if (tb.requires_grad()) accumulate(*tb.node(), self.grad.data(), self.grad.size());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.values());
  const double* bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  Tensor ta = a, tb = b;
  return make_op("sub", a.shape(), std::move(out), {a, b}, [ta, tb](TensorNode& self) {
    if (ta.requires_grad()) accumulate(*ta.node(), self.grad.data(), self.grad.size());
    if (tb.requires_grad()) {
      std::vector<double> g(self.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
      accumulate(*tb.node(), g.data(), g.size());
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.values());
  const double* bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  Tensor ta = a, tb = b;
  return make_op("mul", a.shape(), std::move(out), {a, b}, [ta, tb](TensorNode& self) {
    if (ta.requires_grad()) {
      std::vector<double> g(self.grad.size());
      const double* bv2 = tb.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * bv2[i];
      accumulate(*ta.node(), g.data(), g.size());
    }
    if (tb.requires_grad()) {
      std::vector<double> g(self.grad.size());
      const double* av2 = ta.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * av2[i];
      accumulate(*tb.node(), g.data(), g.size());
    }
  });
}

Tensor scale(const Tensor& t, double c) {
  std::vector<double> out(t.values());
  for (auto& v : out) v *= c;
  Tensor x = t;
  return make_op("scale", t.shape(), std::move(out), {t}, [x, c](TensorNode& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = c * self.grad[i];
    accumulate(*x.node(), g.data(), g.size());
  });
}

Tensor mul_scalar(const Tensor& t, const Tensor& scalar) {
  if (scalar.numel() != 1) throw ShapeError("mul_scalar: scale factor must be a 1-element tensor");
  double s = scalar.data()[0];
  std::vector<double> out(t.values());
  for (auto& v : out) v *= s;
  Tensor x = t, sc = scalar;
  return make_op("mul_scalar", t.shape(), std::move(out), {t, scalar}, [x, sc, s](TensorNode& self) {
    if (x.requires_grad()) {
      std::vector<double> g(self.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = s * self.grad[i];
      accumulate(*x.node(), g.data(), g.size());
    }
    if (sc.requires_grad()) {
      double acc = 0.0;
      const double* xv = x.data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xv[i];
      accumulate(*sc.node(), &acc, 1);
    }
  });
}

Tensor sum(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  Tensor x = t;
  return make_op("sum", Shape{}, {acc}, {t}, [x](TensorNode& self) {
    std::vector<double> g(x.numel(), self.grad[0]);
    accumulate(*x.node(), g.data(), g.size());
  });
}

Tensor mean(const Tensor& t) {
  if (t.numel() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  double inv = 1.0 / static_cast<double>(t.numel());
  Tensor x = t;
  return make_op("mean", Shape{}, {acc * inv}, {t}, [x, inv](TensorNode& self) {
    std::vector<double> g(x.numel(), self.grad[0] * inv);
    accumulate(*x.node(), g.data(), g.size());
  });
}

Tensor transpose(const Tensor& t) {
  require_ndim(t, 2, "transpose");
  std::int64_t r = t.dim(0), c = t.dim(1);
  std::vector<double> out(static_cast<std::size_t>(r * c));
  ConstMapMat src(t.data(), r, c);
  MapMat dst(out.data(), c, r);
  dst = src.transpose();
  Tensor x = t;
  return make_op("transpose", Shape{c, r}, std::move(out), {t}, [x, r, c](TensorNode& self) {
    std::vector<double> g(static_cast<std::size_t>(r * c));
    ConstMapMat gs(self.grad.data(), c, r);
    MapMat gd(g.data(), r, c);
    gd = gs.transpose();
    accumulate(*x.node(), g.data(), g.size());
  });
}

Tensor reshape(const Tensor& t, Shape shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  if (n != t.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
  }
  Tensor x = t;
  return make_op("reshape", std::move(shape), t.values(), {t}, [x](TensorNode& self) {
    accumulate(*x.node(), self.grad.data(), self.grad.size());
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  std::int64_t cols = -1, rows = 0;
  for (const auto& p : parts) {
    require_ndim(p, 2, "concat_rows");
    if (cols < 0) cols = p.dim(1);
    if (p.dim(1) != cols) {
      throw ShapeError("concat_rows: column count mismatch on axis 1 (" + std::to_string(p.dim(1)) +
                       " vs " + std::to_string(cols) + ")");
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rows * cols));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<Tensor> saved = parts;
  return make_op("concat_rows", Shape{rows, cols}, std::move(out), parts, [saved](TensorNode& self) {
    std::size_t offset = 0;
    for (const auto& p : saved) {
      std::size_t n = static_cast<std::size_t>(p.numel());
      if (p.requires_grad()) accumulate(*p.node(), self.grad.data() + offset, n);
      offset += n;
    }
  });
}

Tensor add_diag(const Tensor& A, double lambda) {
  require_ndim(A, 2, "add_diag");
  if (A.dim(0) != A.dim(1)) throw ShapeError("add_diag: matrix must be square, got " + shape_str(A.shape()));
  std::int64_t n = A.dim(0);
  std::vector<double> out(A.values());
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i * n + i)] += lambda;
  Tensor x = A;
  return make_op("add_diag", A.shape(), std::move(out), {A}, [x](TensorNode& self) {
    accumulate(*x.node(), self.grad.data(), self.grad.size());
  });
}

Tensor add_colvec(const Tensor& m, const Tensor& v) {
  require_ndim(m, 2, "add_colvec");
  require_ndim(v, 1, "add_colvec");
  if (v.dim(0) != m.dim(0)) {
    throw ShapeError("add_colvec: bias length " + std::to_string(v.dim(0)) +
                     " does not match rows on axis 0 (" + std::to_string(m.dim(0)) + ")");
  }
  std::int64_t r = m.dim(0), c = m.dim(1);
  std::vector<double> out(m.values());
  const double* bv = v.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(i * c + j)] += bv[i];
  Tensor tm = m, tv = v;
  return make_op("add_colvec", m.shape(), std::move(out), {m, v}, [tm, tv, r, c](TensorNode& self) {
    if (tm.requires_grad()) accumulate(*tm.node(), self.grad.data(), self.grad.size());
    if (tv.requires_grad()) {
      std::vector<double> g(static_cast<std::size_t>(r), 0.0);
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) g[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(i * c + j)];
      accumulate(*tv.node(), g.data(), g.size());
    }
  });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  require_ndim(m, 2, "add_rowvec");
  require_ndim(v, 1, "add_rowvec");
  if (v.dim(0) != m.dim(1)) {
    throw ShapeError("add_rowvec: bias length " + std::to_string(v.dim(0)) +
                     " does not match columns on axis 1 (" + std::to_string(m.dim(1)) + ")");
  }
  std::int64_t r = m.dim(0), c = m.dim(1);
  std::vector<double> out(m.values());
  const double* bv = v.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(i * c + j)] += bv[j];
  Tensor tm = m, tv = v;
  return make_op("add_rowvec", m.shape(), std::move(out), {m, v}, [tm, tv, r, c](TensorNode& self) {
    if (tm.requires_grad()) accumulate(*tm.node(), self.grad.data(), self.grad.size());
    if (tv.requires_grad()) {
      std::vector<double> g(static_cast<std::size_t>(c), 0.0);
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) g[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i * c + j)];
      accumulate(*tv.node(), g.data(), g.size());
    }
  });
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_ndim(a, 2, "matmul");
  require_ndim(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimension mismatch, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  {
    ConstMapMat ma(a.data(), m, k), mb(b.data(), k, n);
    MapMat mo(out.data(), m, n);
    mo.noalias() = ma * mb;
  }
  Tensor ta = a, tb = b;
  return make_op("matmul", Shape{m, n}, std::move(out), {a, b}, [ta, tb, m, k, n](TensorNode& self) {
    ConstMapMat g(self.grad.data(), m, n);
    if (ta.requires_grad()) {
      std::vector<double> ga(static_cast<std::size_t>(m * k));
      ConstMapMat mb(tb.data(), k, n);
      MapMat mga(ga.data(), m, k);
      mga.noalias() = g * mb.transpose();
      accumulate(*ta.node(), ga.data(), ga.size());
    }
    if (tb.requires_grad()) {
      std::vector<double> gb(static_cast<std::size_t>(k * n));
      ConstMapMat ma(ta.data(), m, k);
      MapMat mgb(gb.data(), k, n);
      mgb.noalias() = ma.transpose() * g;
      accumulate(*tb.node(), gb.data(), gb.size());
    }
  });
}

// ---- conv2d ----

namespace {

// Gathers the 3x3 zero-padded neighborhood of every output pixel:
// col is (Cin*9) x (H*W), row index ci*9 + ky*3 + kx matches the
// flattened weight layout.
void im2col_3x3(const double* img, std::int64_t cin, std::int64_t h, std::int64_t w, double* col) {
  std::int64_t hw = h * w;
  for (std::int64_t ci = 0; ci < cin; ++ci) {
    const double* plane = img + ci * hw;
    for (std::int64_t ky = 0; ky < 3; ++ky) {
      for (std::int64_t kx = 0; kx < 3; ++kx) {
        double* dst = col + (ci * 9 + ky * 3 + kx) * hw;
        for (std::int64_t y = 0; y < h; ++y) {
          std::int64_t sy = y + ky - 1;
          if (sy < 0 || sy >= h) {
            std::fill(dst + y * w, dst + (y + 1) * w, 0.0);
            continue;
          }
          const double* srow = plane + sy * w;
          double* drow = dst + y * w;
          for (std::int64_t x = 0; x < w; ++x) {
            std::int64_t sx = x + kx - 1;
            drow[x] = (sx < 0 || sx >= w) ? 0.0 : srow[sx];
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col_3x3.
void col2im_3x3(const double* col, std::int64_t cin, std::int64_t h, std::int64_t w, double* img) {
  std::int64_t hw = h * w;
  for (std::int64_t ci = 0; ci < cin; ++ci) {
    double* plane = img + ci * hw;
    for (std::int64_t ky = 0; ky < 3; ++ky) {
      for (std::int64_t kx = 0; kx < 3; ++kx) {
        const double* src = col + (ci * 9 + ky * 3 + kx) * hw;
        for (std::int64_t y = 0; y < h; ++y) {
          std::int64_t sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          double* drow = plane + sy * w;
          const double* srow = src + y * w;
          for (std::int64_t x = 0; x < w; ++x) {
            std::int64_t sx = x + kx - 1;
            if (sx >= 0 && sx < w) drow[sx] += srow[x];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_ndim(input, 4, "conv2d input");
  require_ndim(weight, 4, "conv2d weight");
  require_ndim(bias, 1, "conv2d bias");
  std::int64_t B = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  std::int64_t cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: weight input-channel axis 1 is " + std::to_string(weight.dim(1)) +
                     ", input has " + std::to_string(cin) + " channels");
  }
  if (weight.dim(2) != 3 || weight.dim(3) != 3) {
    throw ShapeError("conv2d: kernel must be 3x3, got " + shape_str(weight.shape()));
  }
  if (bias.dim(0) != cout) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.dim(0)) +
                     " does not match output channels (" + std::to_string(cout) + ")");
  }

  std::int64_t hw = h * w;
  std::int64_t kdim = cin * 9;
  std::vector<double> out(static_cast<std::size_t>(B * cout * hw));
  {
    ConstMapMat wmat(weight.data(), cout, kdim);
    ConstMapVec bvec(bias.data(), cout);
    const double* in = input.data();
    double* op = out.data();
    parallel_for(B, [&](std::int64_t b0, std::int64_t b1) {
      std::vector<double> col(static_cast<std::size_t>(kdim * hw));
      for (std::int64_t b = b0; b < b1; ++b) {
        im2col_3x3(in + b * cin * hw, cin, h, w, col.data());
        MapMat y(op + b * cout * hw, cout, hw);
        ConstMapMat c(col.data(), kdim, hw);
        y.noalias() = wmat * c;
        y.colwise() += bvec;
      }
    });
  }

  Tensor tx = input, tw = weight, tb = bias;
  return make_op("conv2d", Shape{B, cout, h, w}, std::move(out), {input, weight, bias},
                 [tx, tw, tb, B, cin, cout, h, w](TensorNode& self) {
    std::int64_t hw = h * w, kdim = cin * 9;
    ConstMapMat wmat(tw.data(), cout, kdim);
    bool need_x = tx.requires_grad(), need_w = tw.requires_grad(), need_b = tb.requires_grad();
    std::vector<double> gx(need_x ? static_cast<std::size_t>(B * cin * hw) : 0, 0.0);
    Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(cout, kdim);
    Eigen::VectorXd gb = Eigen::VectorXd::Zero(cout);
    std::vector<double> col(static_cast<std::size_t>(kdim * hw));
    std::vector<double> gcol(static_cast<std::size_t>(kdim * hw));
    // Sequential over images: dW and db accumulate in a fixed order.
    for (std::int64_t b = 0; b < B; ++b) {
      ConstMapMat gy(self.grad.data() + b * cout * hw, cout, hw);
      if (need_w) {
        im2col_3x3(tx.data() + b * cin * hw, cin, h, w, col.data());
        ConstMapMat c(col.data(), kdim, hw);
        gw.noalias() += gy * c.transpose();
      }
      if (need_b) gb += gy.rowwise().sum();
      if (need_x) {
        MapMat gc(gcol.data(), kdim, hw);
        gc.noalias() = wmat.transpose() * gy;
        col2im_3x3(gcol.data(), cin, h, w, gx.data() + b * cin * hw);
      }
    }
    if (need_x) accumulate(*tx.node(), gx.data(), gx.size());
    if (need_w) {
      std::vector<double> gwr(static_cast<std::size_t>(cout * kdim));
      MapMat(gwr.data(), cout, kdim) = gw;
      accumulate(*tw.node(), gwr.data(), gwr.size());
    }
    if (need_b) accumulate(*tb.node(), gb.data(), static_cast<std::size_t>(cout));
  });
}

// ---- avgpool2 ----

Tensor avgpool2(const Tensor& input) {
  require_ndim(input, 4, "avgpool2");
  std::int64_t B = input.dim(0), C = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < 2) throw ShapeError("avgpool2: spatial axis 2 must be >= 2, got " + std::to_string(h));
  if (w < 2) throw ShapeError("avgpool2: spatial axis 3 must be >= 2, got " + std::to_string(w));
  std::int64_t ho = h / 2, wo = w / 2;
  std::vector<double> out(static_cast<std::size_t>(B * C * ho * wo));
  const double* in = input.data();
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* plane = in + bc * h * w;
    double* dst = out.data() + bc * ho * wo;
    for (std::int64_t y = 0; y < ho; ++y)
      for (std::int64_t x = 0; x < wo; ++x) {
        const double* p = plane + (2 * y) * w + 2 * x;
        dst[y * wo + x] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  }
  Tensor tx = input;
  return make_op("avgpool2", Shape{B, C, ho, wo}, std::move(out), {input},
                 [tx, B, C, h, w, ho, wo](TensorNode& self) {
    std::vector<double> gx(static_cast<std::size_t>(B * C * h * w), 0.0);
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      const double* gs = self.grad.data() + bc * ho * wo;
      double* gp = gx.data() + bc * h * w;
      for (std::int64_t y = 0; y < ho; ++y)
        for (std::int64_t x = 0; x < wo; ++x) {
          double g = 0.25 * gs[y * wo + x];
          double* p = gp + (2 * y) * w + 2 * x;
          p[0] += g;
          p[1] += g;
          p[w] += g;
          p[w + 1] += g;
        }
    }
    accumulate(*tx.node(), gx.data(), gx.size());
  });
}

// ---- solve_spd ----

namespace {

// Unblocked lower Cholesky that reports the failing pivot. Reads only the
// lower triangle of A.
Eigen::MatrixXd cholesky_lower(const Eigen::MatrixXd& A) {
  std::int64_t n = A.rows();
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
  for (std::int64_t j = 0; j < n; ++j) {
    double d = A(j, j) - L.row(j).head(j).squaredNorm();
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw NumericError("solve_spd: matrix is not positive definite at pivot " + std::to_string(j),
                         static_cast<int>(j));
    }
    L(j, j) = std::sqrt(d);
    for (std::int64_t i = j + 1; i < n; ++i) {
      double v = A(i, j) - L.row(i).head(j).dot(L.row(j).head(j));
      L(i, j) = v / L(j, j);
    }
  }
  return L;
}

Eigen::MatrixXd chol_solve(const Eigen::MatrixXd& L, const Eigen::MatrixXd& B) {
  Eigen::MatrixXd X = L.triangularView<Eigen::Lower>().solve(B);
  L.transpose().triangularView<Eigen::Upper>().solveInPlace(X);
  return X;
}

}  // namespace

Tensor solve_spd(const Tensor& A, const Tensor& B) {
  require_ndim(A, 2, "solve_spd A");
  require_ndim(B, 2, "solve_spd B");
  if (A.dim(0) != A.dim(1)) throw ShapeError("solve_spd: A must be square, got " + shape_str(A.shape()));
  if (B.dim(0) != A.dim(0)) {
    throw ShapeError("solve_spd: B has " + std::to_string(B.dim(0)) + " rows on axis 0, expected " +
                     std::to_string(A.dim(0)));
  }
  std::int64_t n = A.dim(0), m = B.dim(1);
  Eigen::MatrixXd Am = ConstMapMat(A.data(), n, n);
  Eigen::MatrixXd Bm = ConstMapMat(B.data(), n, m);
  auto L = std::make_shared<Eigen::MatrixXd>(cholesky_lower(Am));
  Eigen::MatrixXd X = chol_solve(*L, Bm);
  std::vector<double> out(static_cast<std::size_t>(n * m));
  MapMat(out.data(), n, m) = X;

  Tensor ta = A, tb = B;
  auto Xs = std::make_shared<Eigen::MatrixXd>(std::move(X));
  return make_op("solve_spd", Shape{n, m}, std::move(out), {A, B}, [ta, tb, L, Xs, n, m](TensorNode& self) {
    ConstMapMat g(self.grad.data(), n, m);
    // dB = A^{-1} G; dA = -sym(dB X^T). A is constrained symmetric, so the
    // gradient is reported in symmetrized form.
    Eigen::MatrixXd dB = chol_solve(*L, g);
    if (tb.requires_grad()) {
      std::vector<double> gb(static_cast<std::size_t>(n * m));
      MapMat(gb.data(), n, m) = dB;
      accumulate(*tb.node(), gb.data(), gb.size());
    }
    if (ta.requires_grad()) {
      Eigen::MatrixXd M = -dB * Xs->transpose();
      Eigen::MatrixXd dA = 0.5 * (M + M.transpose());
      std::vector<double> ga(static_cast<std::size_t>(n * n));
      MapMat(ga.data(), n, n) = dA;
      accumulate(*ta.node(), ga.data(), ga.size());
    }
  });
}

// ---- softmax cross entropy ----

Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& targets) {
  require_ndim(logits, 2, "softmax_cross_entropy logits");
  check_same_shape(logits, targets, "softmax_cross_entropy");
  std::int64_t B = logits.dim(0), C = logits.dim(1);
  const double* lv = logits.data();
  const double* tv = targets.data();
  // Save row softmax for the backward rule.
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * C));
  auto logp = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B * C));
  double loss = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    const double* row = lv + b * C;
    double mx = row[0];
    for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    if (!std::isfinite(mx)) throw NumericError("softmax_cross_entropy: non-finite logit in row " + std::to_string(b));
    double lse = 0.0;
    for (std::int64_t c = 0; c < C; ++c) lse += std::exp(row[c] - mx);
    lse = std::log(lse);
    for (std::int64_t c = 0; c < C; ++c) {
      double lp = row[c] - mx - lse;
      (*logp)[static_cast<std::size_t>(b * C + c)] = lp;
      (*probs)[static_cast<std::size_t>(b * C + c)] = std::exp(lp);
      loss -= tv[b * C + c] * lp;
    }
  }
  loss /= static_cast<double>(B);

  Tensor tl = logits, tt = targets;
  return make_op("softmax_cross_entropy", Shape{}, {loss}, {logits, targets},
                 [tl, tt, probs, logp, B, C](TensorNode& self) {
    double g = self.grad[0] / static_cast<double>(B);
    if (tl.requires_grad()) {
      std::vector<double> gl(static_cast<std::size_t>(B * C));
      const double* tv2 = tt.data();
      for (std::int64_t b = 0; b < B; ++b) {
        double tsum = 0.0;
        for (std::int64_t c = 0; c < C; ++c) tsum += tv2[b * C + c];
        for (std::int64_t c = 0; c < C; ++c) {
          std::size_t i = static_cast<std::size_t>(b * C + c);
          gl[i] = g * ((*probs)[i] * tsum - tv2[i]);
        }
      }
      accumulate(*tl.node(), gl.data(), gl.size());
    }
    if (tt.requires_grad()) {
      std::vector<double> gt(static_cast<std::size_t>(B * C));
      for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = -g * (*logp)[i];
      accumulate(*tt.node(), gt.data(), gt.size());
    }
  });
}

}  // namespace rfad
