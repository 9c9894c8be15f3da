#include "nsbert/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace nsbert {

namespace {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

Shape broadcast_rhs(const char* op, const Shape& lhs, const Shape& rhs) {
  if (rhs.size() > lhs.size()) {
    shape_fail(op, "cannot broadcast " + to_string(rhs) + " onto " + to_string(lhs));
  }
  Shape padded(lhs.size() - rhs.size(), 1);
  padded.insert(padded.end(), rhs.begin(), rhs.end());
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    if (padded[i] != lhs[i] && padded[i] != 1) {
      shape_fail(op, "cannot broadcast " + to_string(rhs) + " onto " + to_string(lhs));
    }
  }
  return padded;
}

// Visits the output in contiguous runs along the last axis:
// f(out_offset, rhs_offset, run_length, rhs_step) with rhs_step 0 or 1.
template <class F>
void for_each_run(const Shape& out, const Shape& rhs, F&& f) {
  const std::size_t total = shape_size(out);
  const std::size_t rhs_total = shape_size(rhs);
  if (rhs_total == total) {
    f(std::size_t{0}, std::size_t{0}, total, std::size_t{1});
    return;
  }
  if (rhs_total == 1) {
    f(std::size_t{0}, std::size_t{0}, total, std::size_t{0});
    return;
  }
  const std::size_t rank = out.size();
  const std::size_t inner = out[rank - 1];
  const std::size_t step = rhs[rank - 1] == 1 ? 0 : 1;
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > 0;) {
    stride[i] = rhs[i] == 1 ? 0 : s;
    s *= rhs[i];
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t roff = 0;
  const std::size_t outer = total / inner;
  for (std::size_t o = 0; o < outer; ++o) {
    f(o * inner, roff, inner, step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      roff += stride[d];
      if (idx[d] < out[d]) break;
      roff -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) shape_fail(op, "axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class T>
using VecMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstVecMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <class T>
ConstVecMap<T> as_vec(const Array<T>& a) {
  return ConstVecMap<T>(a.ptr(), static_cast<Eigen::Index>(a.size()));
}
template <class T>
VecMap<T> as_vec(Array<T>& a) {
  return VecMap<T>(a.ptr(), static_cast<Eigen::Index>(a.size()));
}

// fwd(x) and bwd(x, y) map whole arrays to Eigen array expressions; the
// input gradient is grad_out * bwd(x, y).
template <class T, class Fwd, class Bwd>
Var<T> unary(const char* op, Var<T> a, Fwd fwd, Bwd bwd) {
  Tape<T>& tape = a.tape();
  const Array<T>& x = a.value();
  auto y = Array<T>::uninitialized(x.shape());
  as_vec(y) = fwd(as_vec(x));
  const bool rg = tape.requires_grad(a.id());
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    const std::size_t ai = a.id();
    const std::size_t self = tape.size();
    fn = [ai, self, bwd](Tape<T>& t, const Array<T>& g) {
      const Array<T>& xv = t.value(ai);
      const Array<T>& yv = t.value(self);
      auto gx = Array<T>::uninitialized(xv.shape());
      as_vec(gx) = as_vec(g) * bwd(as_vec(xv), as_vec(yv));
      t.accumulate(ai, std::move(gx));
    };
  }
  return tape.record(op, std::move(y), rg, std::move(fn));
}

template <class T>
Tape<T>& same_tape(const char* op, Var<T> a, Var<T> b) {
  if (&a.tape() != &b.tape()) shape_fail(op, "operands live on different tapes");
  return a.tape();
}

// Sums `term(out_index, rhs_index)` into an array shaped like the rhs operand.
template <class T, class Term>
Array<T> reduce_to_rhs(const Shape& out, const Shape& padded, const Shape& rhs_shape, Term term) {
  Array<T> gb(rhs_shape);
  for_each_run(out, padded, [&](std::size_t o, std::size_t r, std::size_t n, std::size_t step) {
    if (step) {
      for (std::size_t i = 0; i < n; ++i) gb[r + i] += term(o + i, r + i);
    } else {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += term(o + i, r);
      gb[r] += acc;
    }
  });
  return gb;
}

enum class BinOp { add, sub, mul, div };

template <class T>
Var<T> binary(const char* op, BinOp kind, Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(op, a, b);
  const Array<T>& x = a.value();
  const Array<T>& z = b.value();
  const Shape padded = broadcast_rhs(op, x.shape(), z.shape());
  auto y = Array<T>::uninitialized(x.shape());
  for_each_run(x.shape(), padded, [&](std::size_t o, std::size_t r, std::size_t n, std::size_t step) {
    T* out = y.ptr() + o;
    const T* lhs = x.ptr() + o;
    const T* rhs = z.ptr() + r;
    switch (kind) {
      case BinOp::add:
        for (std::size_t i = 0; i < n; ++i) out[i] = lhs[i] + rhs[i * step];
        break;
      case BinOp::sub:
        for (std::size_t i = 0; i < n; ++i) out[i] = lhs[i] - rhs[i * step];
        break;
      case BinOp::mul:
        for (std::size_t i = 0; i < n; ++i) out[i] = lhs[i] * rhs[i * step];
        break;
      case BinOp::div:
        for (std::size_t i = 0; i < n; ++i) out[i] = lhs[i] / rhs[i * step];
        break;
    }
  });

  const std::size_t ai = a.id(), bi = b.id();
  const bool rga = tape.requires_grad(ai), rgb = tape.requires_grad(bi);
  typename Tape<T>::BackwardFn fn;
  if (rga || rgb) {
    const std::size_t self = tape.size();
    fn = [=](Tape<T>& t, const Array<T>& g) {
      const Array<T>& xv = t.value(ai);
      const Array<T>& zv = t.value(bi);
      const Shape& out_shape = xv.shape();
      if (rga) {
        if (kind == BinOp::add || kind == BinOp::sub) {
          t.accumulate(ai, g);
        } else {
          auto ga = Array<T>::uninitialized(out_shape);
          for_each_run(out_shape, padded, [&](std::size_t o, std::size_t r, std::size_t n, std::size_t step) {
            if (kind == BinOp::mul) {
              for (std::size_t i = 0; i < n; ++i) ga[o + i] = g[o + i] * zv[r + i * step];
            } else {
              for (std::size_t i = 0; i < n; ++i) ga[o + i] = g[o + i] / zv[r + i * step];
            }
          });
          t.accumulate(ai, std::move(ga));
        }
      }
      if (rgb) {
        Array<T> gb;
        switch (kind) {
          case BinOp::add:
            gb = reduce_to_rhs<T>(out_shape, padded, zv.shape(), [&](std::size_t o, std::size_t) { return g[o]; });
            break;
          case BinOp::sub:
            gb = reduce_to_rhs<T>(out_shape, padded, zv.shape(), [&](std::size_t o, std::size_t) { return -g[o]; });
            break;
          case BinOp::mul:
            gb = reduce_to_rhs<T>(out_shape, padded, zv.shape(),
                                  [&](std::size_t o, std::size_t) { return g[o] * xv[o]; });
            break;
          case BinOp::div: {
            const Array<T>& yv = t.value(self);
            gb = reduce_to_rhs<T>(out_shape, padded, zv.shape(),
                                  [&](std::size_t o, std::size_t r) { return -g[o] * yv[o] / zv[r]; });
            break;
          }
        }
        t.accumulate(bi, std::move(gb));
      }
    };
  }
  return tape.record(op, std::move(y), rga || rgb, std::move(fn));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <class T>
Var<T> Tape<T>::constant(Array<T> value) {
  return record("constant", std::move(value), false, nullptr);
}

template <class T>
Var<T> Tape<T>::variable(Array<T> value) {
  return record("variable", std::move(value), true, nullptr);
}

template <class T>
Var<T> Tape<T>::parameter(const std::string& name, Array<T> value) {
  Var<T> v = record("parameter", std::move(value), true, nullptr);
  params_.emplace_back(name, v.id());
  return v;
}

template <class T>
Var<T> Tape<T>::record(const char* op, Array<T> value, bool requires_grad, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by '") + op + "' (node " +
                       std::to_string(nodes_.size()) + ")");
  }
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
void Tape<T>::accumulate(std::size_t id, const Array<T>& grad) {
  Node& node = nodes_.at(id);
  if (!node.has_grad) {
    node.grad = grad;
    node.has_grad = true;
    return;
  }
  if (node.grad.shape() != grad.shape()) {
    throw ShapeError(std::string("gradient shape mismatch at '") + node.op + "': " + to_string(node.grad.shape()) +
                     " vs " + to_string(grad.shape()));
  }
  for (std::size_t i = 0; i < grad.size(); ++i) node.grad[i] += grad[i];
}

template <class T>
void Tape<T>::accumulate(std::size_t id, Array<T>&& grad) {
  Node& node = nodes_.at(id);
  if (!node.has_grad) {
    if (node.value.shape() != grad.shape()) {
      throw ShapeError(std::string("gradient shape mismatch at '") + node.op + "': " +
                       to_string(node.value.shape()) + " vs " + to_string(grad.shape()));
    }
    node.grad = std::move(grad);
    node.has_grad = true;
    return;
  }
  accumulate(id, static_cast<const Array<T>&>(grad));
}

template <class T>
void Tape<T>::backward(Var<T> output) {
  if (&output.tape() != this) throw Error("backward: output belongs to another tape");
  const Node& out = nodes_.at(output.id());
  if (out.value.size() != 1) {
    throw ShapeError("backward: output must be scalar, got shape " + to_string(out.value.shape()));
  }
  accumulate(output.id(), Array<T>(out.value.shape(), T{1}));
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.has_grad || !node.requires_grad || !node.backward) continue;
    node.backward(*this, node.grad);
    // Interior gradients are not needed once propagated.
    node.grad = Array<T>();
    node.has_grad = false;
  }
}

template <class T>
Array<T> Tape<T>::grad(Var<T> v) const {
  const Node& node = nodes_.at(v.id());
  if (node.has_grad) return node.grad;
  return Array<T>(node.value.shape());
}

template <class T>
std::map<std::string, Array<T>> Tape<T>::parameter_gradients() const {
  std::map<std::string, Array<T>> out;
  for (const auto& [name, id] : params_) out.emplace(name, grad(Var<T>(const_cast<Tape*>(this), id)));
  return out;
}

template <class T>
Var<T> ParamBinder<T>::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  auto p = params_.find(name);
  if (p == params_.end()) throw Error("unknown parameter '" + name + "'");
  Var<T> v = tape_.parameter(name, p->second);
  bound_.emplace(name, v);
  return v;
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary("add", BinOp::add, a, b);
}
template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary("sub", BinOp::sub, a, b);
}
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary("mul", BinOp::mul, a, b);
}
template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary("div", BinOp::div, a, b);
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  return unary(
      "scale", a, [factor](const auto& x) { return x * factor; },
      [factor](const auto& x, const auto&) { return x.Constant(x.size(), factor); });
}

template <class T>
Var<T> add_scalar(Var<T> a, T offset) {
  return unary(
      "add_scalar", a, [offset](const auto& x) { return x + offset; },
      [](const auto& x, const auto&) { return x.Constant(x.size(), T{1}); });
}

template <class T>
Var<T> neg(Var<T> a) {
  return unary(
      "neg", a, [](const auto& x) { return -x; }, [](const auto& x, const auto&) { return x.Constant(x.size(), T{-1}); });
}

template <class T>
Var<T> exp(Var<T> a) {
  return unary(
      "exp", a, [](const auto& x) { return x.exp(); }, [](const auto&, const auto& y) { return y; });
}

template <class T>
Var<T> log(Var<T> a) {
  return unary(
      "log", a, [](const auto& x) { return x.log(); }, [](const auto& x, const auto&) { return x.inverse(); });
}

template <class T>
Var<T> tanh(Var<T> a) {
  return unary(
      "tanh", a, [](const auto& x) { return x.tanh(); }, [](const auto&, const auto& y) { return T{1} - y.square(); });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  return unary(
      "sigmoid", a, [](const auto& x) { return x.logistic(); },
      [](const auto&, const auto& y) { return y * (T{1} - y); });
}

template <class T>
Var<T> sqrt(Var<T> a) {
  return unary(
      "sqrt", a, [](const auto& x) { return x.sqrt(); }, [](const auto&, const auto& y) { return T{0.5} / y; });
}

template <class T>
Var<T> square(Var<T> a) {
  return unary(
      "square", a, [](const auto& x) { return x.square(); }, [](const auto& x, const auto&) { return T{2} * x; });
}

template <class T>
Var<T> gelu(Var<T> a) {
  return unary(
      "gelu", a,
      [](const auto& x) {
        constexpr T c = T(kGeluC), k = T(kGeluK);
        return T{0.5} * x * (T{1} + (c * (x + k * x.cube())).tanh());
      },
      [](const auto& x, const auto&) {
        constexpr T c = T(kGeluC), k = T(kGeluK);
        using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
        const Vec t = (c * (x + k * x.cube())).tanh();
        return Vec(T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t.square()) * c * (T{1} + T{3} * k * x.square()));
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_b) {
  constexpr const char* op = "matmul";
  Tape<T>& tape = same_tape(op, a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2) shape_fail(op, "left operand must have rank >= 2, got " + to_string(sa));
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];

  std::size_t batch = 1;  // number of independent products
  bool shared = false;    // b is one matrix applied to every leading index of a
  std::size_t n = 0;
  if (sb.size() == 2) {
    shared = true;
    const std::size_t bk = transpose_b ? sb[1] : sb[0];
    n = transpose_b ? sb[0] : sb[1];
    if (bk != k) shape_fail(op, "inner dimensions differ: " + to_string(sa) + " x " + to_string(sb));
  } else if (sb.size() == 3 && sa.size() == 3 && sb[0] == sa[0]) {
    batch = sa[0];
    const std::size_t bk = transpose_b ? sb[2] : sb[1];
    n = transpose_b ? sb[1] : sb[2];
    if (bk != k) shape_fail(op, "inner dimensions differ: " + to_string(sa) + " x " + to_string(sb));
  } else {
    shape_fail(op, "unsupported operand shapes " + to_string(sa) + " x " + to_string(sb));
  }

  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  auto y = Array<T>::uninitialized(out_shape);
  const std::size_t rows = shared ? a.value().size() / k : m;
  for (std::size_t bi = 0; bi < batch; ++bi) {
    ConstMatMap<T> A(a.value().ptr() + bi * m * k, rows, k);
    MatMap<T> C(y.ptr() + bi * m * n, rows, n);
    const T* bp = b.value().ptr() + (shared ? 0 : bi * k * n);
    if (transpose_b) {
      C.noalias() = A * ConstMatMap<T>(bp, n, k).transpose();
    } else {
      C.noalias() = A * ConstMatMap<T>(bp, k, n);
    }
  }

  const std::size_t ai = a.id(), bid = b.id();
  const bool rga = tape.requires_grad(ai), rgb = tape.requires_grad(bid);
  typename Tape<T>::BackwardFn fn;
  if (rga || rgb) {
    fn = [=](Tape<T>& t, const Array<T>& g) {
      const Array<T>& av = t.value(ai);
      const Array<T>& bv = t.value(bid);
      Array<T> ga, gb;
      if (rga) ga = Array<T>::uninitialized(av.shape());
      if (rgb) gb = Array<T>(bv.shape());
      for (std::size_t bi = 0; bi < batch; ++bi) {
        ConstMatMap<T> A(av.ptr() + bi * m * k, rows, k);
        ConstMatMap<T> G(g.ptr() + bi * m * n, rows, n);
        const std::size_t boff = shared ? 0 : bi * k * n;
        if (transpose_b) {
          ConstMatMap<T> B(bv.ptr() + boff, n, k);
          if (rga) MatMap<T>(ga.ptr() + bi * m * k, rows, k).noalias() = G * B;
          if (rgb) MatMap<T>(gb.ptr() + boff, n, k).noalias() += G.transpose() * A;
        } else {
          ConstMatMap<T> B(bv.ptr() + boff, k, n);
          if (rga) MatMap<T>(ga.ptr() + bi * m * k, rows, k).noalias() = G * B.transpose();
          if (rgb) MatMap<T>(gb.ptr() + boff, k, n).noalias() += A.transpose() * G;
        }
      }
      if (rga) t.accumulate(ai, std::move(ga));
      if (rgb) t.accumulate(bid, std::move(gb));
    };
  }
  return tape.record(op, std::move(y), rga || rgb, std::move(fn));
}

template <class T>
Var<T> transpose_last(Var<T> a) {
  const Shape& s = a.shape();
  if (s.size() < 2) shape_fail("transpose", "rank must be >= 2, got " + to_string(s));
  const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
  const std::size_t outer = a.value().size() / (m * n);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  auto transpose = [outer, m, n](const Array<T>& src, Array<T>& dst, bool forward) {
    const std::size_t r = forward ? m : n, c = forward ? n : m;
    for (std::size_t o = 0; o < outer; ++o) {
      const T* in = src.ptr() + o * m * n;
      T* out = dst.ptr() + o * m * n;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
    }
  };
  auto y = Array<T>::uninitialized(os);
  transpose(a.value(), y, true);
  Tape<T>& tape = a.tape();
  const std::size_t ai = a.id();
  const bool rg = tape.requires_grad(ai);
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    fn = [ai, transpose](Tape<T>& t, const Array<T>& g) {
      auto ga = Array<T>::uninitialized(t.value(ai).shape());
      transpose(g, ga, false);
      t.accumulate(ai, std::move(ga));
    };
  }
  return tape.record("transpose", std::move(y), rg, std::move(fn));
}

// ---------------------------------------------------------------------------
// Softmax family

template <class T>
Var<T> softmax(Var<T> a) {
  const Array<T>& x = a.value();
  if (x.rank() == 0) shape_fail("softmax", "needs rank >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Array<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * n;
    T* out = y.ptr() + r * n;
    VecMap<T> row(out, static_cast<Eigen::Index>(n));
    const ConstVecMap<T> src(in, static_cast<Eigen::Index>(n));
    row = (src - src.maxCoeff()).exp();
    row *= T{1} / row.sum();
  }
  Tape<T>& tape = a.tape();
  const std::size_t ai = a.id(), self = tape.size();
  const bool rg = tape.requires_grad(ai);
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    fn = [ai, self, n, rows](Tape<T>& t, const Array<T>& g) {
      const Array<T>& yv = t.value(self);
      Array<T> ga(yv.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = yv.ptr() + r * n;
        const T* gr = g.ptr() + r * n;
        T dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += gr[i] * yr[i];
        for (std::size_t i = 0; i < n; ++i) ga[r * n + i] = yr[i] * (gr[i] - dot);
      }
      t.accumulate(ai, std::move(ga));
    };
  }
  return tape.record("softmax", std::move(y), rg, std::move(fn));
}

template <class T>
Var<T> attention_softmax(Var<T> scores, T factor, std::optional<Var<T>> gain, std::optional<Var<T>> shift) {
  const Array<T>& x = scores.value();
  if (x.rank() != 3) shape_fail("attention_softmax", "scores must be [B, m, n], got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), m = x.dim(1), n = x.dim(2);
  if (gain && gain->shape() != Shape{b, 1, 1}) {
    shape_fail("attention_softmax", "gain must be [" + std::to_string(b) + ", 1, 1], got " + to_string(gain->shape()));
  }
  if (shift && shift->shape() != Shape{b, 1, n}) {
    shape_fail("attention_softmax",
               "shift must be [" + std::to_string(b) + ", 1, " + std::to_string(n) + "], got " + to_string(shift->shape()));
  }
  Tape<T>& tape = scores.tape();
  if ((gain && &gain->tape() != &tape) || (shift && &shift->tape() != &tape)) {
    shape_fail("attention_softmax", "operands live on different tapes");
  }
  auto y = Array<T>::uninitialized(x.shape());
  for (std::size_t bi = 0; bi < b; ++bi) {
    const T gv = gain ? gain->value()[bi] : T{1};
    const T* hv = shift ? shift->value().ptr() + bi * n : nullptr;
    for (std::size_t r = 0; r < m; ++r) {
      const T* in = x.ptr() + (bi * m + r) * n;
      T* out = y.ptr() + (bi * m + r) * n;
      VecMap<T> row(out, static_cast<Eigen::Index>(n));
      const ConstVecMap<T> src(in, static_cast<Eigen::Index>(n));
      if (hv) {
        row = factor * (gv * src + ConstVecMap<T>(hv, static_cast<Eigen::Index>(n)));
      } else {
        row = (factor * gv) * src;
      }
      row = (row - row.maxCoeff()).exp();
      row *= T{1} / row.sum();
    }
  }
  const std::size_t si = scores.id(), self = tape.size();
  const std::optional<std::size_t> gi = gain ? std::optional(gain->id()) : std::nullopt;
  const std::optional<std::size_t> hi = shift ? std::optional(shift->id()) : std::nullopt;
  const bool rgs = tape.requires_grad(si);
  const bool rgg = gi && tape.requires_grad(*gi);
  const bool rgh = hi && tape.requires_grad(*hi);
  typename Tape<T>::BackwardFn fn;
  if (rgs || rgg || rgh) {
    fn = [=](Tape<T>& t, const Array<T>& g) {
      const Array<T>& xv = t.value(si);
      const Array<T>& yv = t.value(self);
      Array<T> gs = rgs ? Array<T>::uninitialized(xv.shape()) : Array<T>();
      Array<T> gg = rgg ? Array<T>({b, 1, 1}) : Array<T>();
      Array<T> gh = rgh ? Array<T>({b, 1, n}) : Array<T>();
      std::vector<T> gz(n);
      for (std::size_t bi = 0; bi < b; ++bi) {
        const T gv = gi ? t.value(*gi)[bi] : T{1};
        T gain_acc = 0;
        for (std::size_t r = 0; r < m; ++r) {
          const std::size_t off = (bi * m + r) * n;
          const T* yr = yv.ptr() + off;
          const T* gr = g.ptr() + off;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
          for (std::size_t j = 0; j < n; ++j) gz[j] = factor * yr[j] * (gr[j] - dot);
          if (rgs) {
            for (std::size_t j = 0; j < n; ++j) gs[off + j] = gz[j] * gv;
          }
          if (rgg) {
            const T* xr = xv.ptr() + off;
            for (std::size_t j = 0; j < n; ++j) gain_acc += gz[j] * xr[j];
          }
          if (rgh) {
            T* hr = gh.ptr() + bi * n;
            for (std::size_t j = 0; j < n; ++j) hr[j] += gz[j];
          }
        }
        if (rgg) gg[bi] = gain_acc;
      }
      if (rgs) t.accumulate(si, std::move(gs));
      if (rgg) t.accumulate(*gi, std::move(gg));
      if (rgh) t.accumulate(*hi, std::move(gh));
    };
  }
  return tape.record("attention_softmax", std::move(y), rgs || rgg || rgh, std::move(fn));
}

template <class T>
Var<T> log_softmax(Var<T> a) {
  const Array<T>& x = a.value();
  if (x.rank() == 0) shape_fail("log_softmax", "needs rank >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  auto y = Array<T>::uninitialized(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) total += std::exp(in[i] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] = in[i] - lse;
  }
  Tape<T>& tape = a.tape();
  const std::size_t ai = a.id(), self = tape.size();
  const bool rg = tape.requires_grad(ai);
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    fn = [ai, self, n, rows](Tape<T>& t, const Array<T>& g) {
      const Array<T>& yv = t.value(self);
      auto ga = Array<T>::uninitialized(yv.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        T gsum = 0;
        for (std::size_t i = 0; i < n; ++i) gsum += g[r * n + i];
        for (std::size_t i = 0; i < n; ++i) ga[r * n + i] = g[r * n + i] - std::exp(yv[r * n + i]) * gsum;
      }
      t.accumulate(ai, std::move(ga));
    };
  }
  return tape.record("log_softmax", std::move(y), rg, std::move(fn));
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> mean(Var<T> a, std::size_t axis) {
  const Array<T>& x = a.value();
  const AxisSplit s = split_axis("mean", x.shape(), axis);
  Shape os = x.shape();
  os[axis] = 1;
  Array<T> y(os);
  const T inv = T{1} / static_cast<T>(s.n);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.n; ++j)
      for (std::size_t i = 0; i < s.inner; ++i) y[o * s.inner + i] += x[(o * s.n + j) * s.inner + i];
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= inv;

  Tape<T>& tape = a.tape();
  const std::size_t ai = a.id();
  const bool rg = tape.requires_grad(ai);
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    fn = [ai, s, inv](Tape<T>& t, const Array<T>& g) {
      auto ga = Array<T>::uninitialized(t.value(ai).shape());
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.n; ++j)
          for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.n + j) * s.inner + i] = g[o * s.inner + i] * inv;
      t.accumulate(ai, std::move(ga));
    };
  }
  return tape.record("mean", std::move(y), rg, std::move(fn));
}

template <class T>
Var<T> variance(Var<T> a, std::size_t axis) {
  const Array<T>& x = a.value();
  const AxisSplit s = split_axis("variance", x.shape(), axis);
  Shape os = x.shape();
  os[axis] = 1;
  Array<T> mu(os), y(os);
  const T inv = T{1} / static_cast<T>(s.n);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.n; ++j)
      for (std::size_t i = 0; i < s.inner; ++i) mu[o * s.inner + i] += x[(o * s.n + j) * s.inner + i];
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] *= inv;
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.n; ++j)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const T d = x[(o * s.n + j) * s.inner + i] - mu[o * s.inner + i];
        y[o * s.inner + i] += d * d;
      }
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= inv;

  Tape<T>& tape = a.tape();
  const std::size_t ai = a.id();
  const bool rg = tape.requires_grad(ai);
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    fn = [ai, s, inv, mu = std::move(mu)](Tape<T>& t, const Array<T>& g) {
      const Array<T>& xv = t.value(ai);
      auto ga = Array<T>::uninitialized(xv.shape());
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.n; ++j)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t idx = (o * s.n + j) * s.inner + i;
            ga[idx] = g[o * s.inner + i] * T{2} * (xv[idx] - mu[o * s.inner + i]) * inv;
          }
      t.accumulate(ai, std::move(ga));
    };
  }
  return tape.record("variance", std::move(y), rg, std::move(fn));
}

template <class T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (T v : a.value().data()) total += v;
  Tape<T>& tape = a.tape();
  const std::size_t ai = a.id();
  const bool rg = tape.requires_grad(ai);
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    fn = [ai](Tape<T>& t, const Array<T>& g) { t.accumulate(ai, Array<T>(t.value(ai).shape(), g[0])); };
  }
  return tape.record("sum", Array<T>::scalar(total), rg, std::move(fn));
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length) {
  const Array<T>& x = a.value();
  const AxisSplit s = split_axis("slice", x.shape(), axis);
  if (length == 0 || start + length > s.n) {
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                            ") outside axis of size " + std::to_string(s.n));
  }
  Shape os = x.shape();
  os[axis] = length;
  auto y = Array<T>::uninitialized(os);
  const std::size_t run = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.ptr() + (o * s.n + start) * s.inner, run, y.ptr() + o * run);
  }
  Tape<T>& tape = a.tape();
  const std::size_t ai = a.id();
  const bool rg = tape.requires_grad(ai);
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    fn = [ai, s, start, run](Tape<T>& t, const Array<T>& g) {
      Array<T> ga(t.value(ai).shape());
      for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(g.ptr() + o * run, run, ga.ptr() + (o * s.n + start) * s.inner);
      }
      t.accumulate(ai, std::move(ga));
    };
  }
  return tape.record("slice", std::move(y), rg, std::move(fn));
}

template <class T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no operands");
  Tape<T>& tape = parts[0].tape();
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) shape_fail("concat", "axis out of range for " + to_string(s0));
  std::vector<std::size_t> ids, widths;
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    const Shape& sp = p.shape();
    bool ok = sp.size() == s0.size() && &p.tape() == &tape;
    for (std::size_t i = 0; ok && i < sp.size(); ++i) ok = i == axis || sp[i] == s0[i];
    if (!ok) shape_fail("concat", "incompatible parts " + to_string(s0) + " and " + to_string(sp));
    ids.push_back(p.id());
    widths.push_back(sp[axis]);
    total += sp[axis];
    rg = rg || tape.requires_grad(p.id());
  }
  const AxisSplit s = split_axis("concat", s0, axis);
  Shape os = s0;
  os[axis] = total;
  auto y = Array<T>::uninitialized(os);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::size_t run = widths[p] * s.inner;
    const Array<T>& x = parts[p].value();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(x.ptr() + o * run, run, y.ptr() + (o * total + offset) * s.inner);
    }
    offset += widths[p];
  }
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    fn = [ids, widths, s, total](Tape<T>& t, const Array<T>& g) {
      std::size_t off = 0;
      for (std::size_t p = 0; p < ids.size(); ++p) {
        const std::size_t run = widths[p] * s.inner;
        if (t.requires_grad(ids[p])) {
          auto gp = Array<T>::uninitialized(t.value(ids[p]).shape());
          for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(g.ptr() + (o * total + off) * s.inner, run, gp.ptr() + o * run);
          }
          t.accumulate(ids[p], std::move(gp));
        }
        off += widths[p];
      }
    };
  }
  return tape.record("concat", std::move(y), rg, std::move(fn));
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Array<T> y = a.value().reshaped(std::move(shape));
  Tape<T>& tape = a.tape();
  const std::size_t ai = a.id();
  const bool rg = tape.requires_grad(ai);
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    fn = [ai](Tape<T>& t, const Array<T>& g) { t.accumulate(ai, g.reshaped(t.value(ai).shape())); };
  }
  return tape.record("reshape", std::move(y), rg, std::move(fn));
}

template <class T>
Var<T> gather(Var<T> a, std::span<const std::size_t> index) {
  const Array<T>& x = a.value();
  if (x.rank() != 2 || index.size() != x.dim(0)) {
    shape_fail("gather", "expects [n, c] with n indices, got " + to_string(x.shape()) + " and " +
                             std::to_string(index.size()) + " indices");
  }
  const std::size_t c = x.dim(1);
  std::vector<std::size_t> idx(index.begin(), index.end());
  Array<T> y(Shape{idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= c) shape_fail("gather", "index " + std::to_string(idx[i]) + " >= " + std::to_string(c));
    y[i] = x[i * c + idx[i]];
  }
  Tape<T>& tape = a.tape();
  const std::size_t ai = a.id();
  const bool rg = tape.requires_grad(ai);
  typename Tape<T>::BackwardFn fn;
  if (rg) {
    fn = [ai, c, idx = std::move(idx)](Tape<T>& t, const Array<T>& g) {
      Array<T> ga(t.value(ai).shape());
      for (std::size_t i = 0; i < idx.size(); ++i) ga[i * c + idx[i]] = g[i];
      t.accumulate(ai, std::move(ga));
    };
  }
  return tape.record("gather", std::move(y), rg, std::move(fn));
}

// ---------------------------------------------------------------------------

#define NSBERT_INSTANTIATE(T)                                                         \
  template class Tape<T>;                                                             \
  template class ParamBinder<T>;                                                      \
  template Var<T> add(Var<T>, Var<T>);                                                \
  template Var<T> sub(Var<T>, Var<T>);                                                \
  template Var<T> mul(Var<T>, Var<T>);                                                \
  template Var<T> div(Var<T>, Var<T>);                                                \
  template Var<T> scale(Var<T>, T);                                                   \
  template Var<T> add_scalar(Var<T>, T);                                              \
  template Var<T> neg(Var<T>);                                                        \
  template Var<T> exp(Var<T>);                                                        \
  template Var<T> log(Var<T>);                                                        \
  template Var<T> tanh(Var<T>);                                                       \
  template Var<T> sigmoid(Var<T>);                                                    \
  template Var<T> sqrt(Var<T>);                                                       \
  template Var<T> square(Var<T>);                                                     \
  template Var<T> gelu(Var<T>);                                                       \
  template Var<T> matmul(Var<T>, Var<T>, bool);                                       \
  template Var<T> transpose_last(Var<T>);                                             \
  template Var<T> softmax(Var<T>);                                                    \
  template Var<T> log_softmax(Var<T>);                                                \
  template Var<T> attention_softmax(Var<T>, T, std::optional<Var<T>>, std::optional<Var<T>>); \
  template Var<T> mean(Var<T>, std::size_t);                                          \
  template Var<T> variance(Var<T>, std::size_t);                                      \
  template Var<T> sum(Var<T>);                                                        \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);               \
  template Var<T> concat(std::span<const Var<T>>, std::size_t);                       \
  template Var<T> reshape(Var<T>, Shape);                                             \
  template Var<T> gather(Var<T>, std::span<const std::size_t>);

NSBERT_INSTANTIATE(float)
NSBERT_INSTANTIATE(double)

#undef NSBERT_INSTANTIATE

}  // namespace nsbert
