#include "geniedrive/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "geniedrive/core/errors.hpp"

namespace geniedrive::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
using StridedC = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedM = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

// ---- broadcasting ----------------------------------------------------------

struct BroadcastPlan {
  Shape out;
  std::vector<int64_t> stride_a;
  std::vector<int64_t> stride_b;
  bool same = false;
};

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(r - b.size()));
  p.out.resize(r);
  for (size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    p.out[i] = std::max(pa[i], pb[i]);
  }
  auto sa = contiguous_strides(pa);
  auto sb = contiguous_strides(pb);
  p.stride_a.resize(r);
  p.stride_b.resize(r);
  for (size_t i = 0; i < r; ++i) {
    p.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    p.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const int64_t n = numel(p.out);
  if (p.same) {
    for (int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const int r = static_cast<int>(p.out.size());
  std::vector<int64_t> idx(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class Da, class Db>
Tensor binary(const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  auto plan = plan_broadcast(a.shape(), b.shape());
  std::vector<double> out(static_cast<size_t>(numel(plan.out)));
  const auto av = a.data();
  const auto bv = b.data();
  for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  Shape shape = plan.out;
  return make_result(std::move(shape), std::move(out), {a, b},
                     [plan = std::move(plan), da, db](Node& self) {
                       Node& A = *self.inputs[0];
                       Node& B = *self.inputs[1];
                       const auto& g = self.grad;
                       if (A.requires_grad) {
                         auto& ga = A.grad_buffer();
                         for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) {
                           ga[ia] += g[i] * da(A.value[ia], B.value[ib]);
                         });
                       }
                       if (B.requires_grad) {
                         auto& gb = B.grad_buffer();
                         for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) {
                           gb[ib] += g[i] * db(A.value[ia], B.value[ib]);
                         });
                       }
                     });
}

// df(x, y) -> dy/dx given input x and output y.
template <class Fwd, class Df>
Tensor unary(const Tensor& x, Fwd fwd, Df df) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& X = *self.inputs[0];
    auto& gx = X.grad_buffer();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(X.value[i], self.value[i]);
  });
}

}  // namespace

// ---- shape manipulation ----------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred axis");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) throw ShapeError("reshape: cannot infer axis");
    shape[static_cast<size_t>(infer)] = x.numel() / known;
  }
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  std::vector<double> v(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(v), {x}, [](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  const auto in_strides = contiguous_strides(x.shape());
  Shape out_shape(r);
  std::vector<int64_t> stride(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[perm[i]];
    stride[i] = in_strides[perm[i]];
  }
  // Map from output flat index to input flat index.
  const int64_t n = x.numel();
  auto mapping = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n));
  {
    std::vector<int64_t> idx(r, 0);
    int64_t off = 0;
    for (int64_t i = 0; i < n; ++i) {
      (*mapping)[i] = off;
      for (int d = r - 1; d >= 0; --d) {
        ++idx[d];
        off += stride[d];
        if (idx[d] < out_shape[d]) break;
        off -= stride[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  const auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = xv[(*mapping)[i]];
  return make_result(std::move(out_shape), std::move(out), {x}, [mapping](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const auto& m = *mapping;
    for (size_t i = 0; i < m.size(); ++i) gx[m[i]] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const int r = parts[0].rank();
  axis = normalize_axis(axis, r);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < r; ++d) {
      if (d != axis && p.shape()[d] != parts[0].shape()[d]) {
        throw ShapeError("concat: " + to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int d = axis + 1; d < r; ++d) inner *= out_shape[d];
  const int64_t out_row = out_shape[axis] * inner;
  std::vector<double> out(static_cast<size_t>(numel(out_shape)));
  std::vector<int64_t> chunk(parts.size()), offset(parts.size());
  int64_t acc = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    chunk[k] = parts[k].shape()[axis] * inner;
    offset[k] = acc;
    acc += chunk[k];
    const auto pv = parts[k].data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * chunk[k], chunk[k], out.begin() + o * out_row + offset[k]);
    }
  }
  return make_result(std::move(out_shape), std::move(out), parts,
                     [chunk, offset, outer, out_row](Node& self) {
                       for (size_t k = 0; k < self.inputs.size(); ++k) {
                         Node& in = *self.inputs[k];
                         if (!in.requires_grad) continue;
                         auto& g = in.grad_buffer();
                         for (int64_t o = 0; o < outer; ++o) {
                           const double* src = self.grad.data() + o * out_row + offset[k];
                           double* dst = g.data() + o * chunk[k];
                           for (int64_t i = 0; i < chunk[k]; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
  const int r = x.rank();
  axis = normalize_axis(axis, r);
  if (start < 0 || length < 0 || start + length > x.shape()[axis]) {
    throw ShapeError("slice out of range on " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int d = axis + 1; d < r; ++d) inner *= out_shape[d];
  const int64_t in_row = x.shape()[axis] * inner;
  const int64_t out_row = length * inner;
  const int64_t off = start * inner;
  std::vector<double> out(static_cast<size_t>(outer * out_row));
  const auto xv = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + o * in_row + off, out_row, out.begin() + o * out_row);
  }
  return make_result(std::move(out_shape), std::move(out), {x},
                     [outer, in_row, out_row, off](Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for (int64_t o = 0; o < outer; ++o) {
                         for (int64_t i = 0; i < out_row; ++i) {
                           g[o * in_row + off + i] += self.grad[o * out_row + i];
                         }
                       }
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const int64_t> index) {
  if (table.rank() != 2) throw ShapeError("gather_rows expects a 2-D table");
  const int64_t rows = table.dim(0), cols = table.dim(1);
  std::vector<int64_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size() * static_cast<size_t>(cols));
  const auto tv = table.data();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) throw ShapeError("gather_rows index out of range");
    std::copy_n(tv.begin() + idx[i] * cols, cols, out.begin() + static_cast<long>(i) * cols);
  }
  return make_result({static_cast<int64_t>(idx.size()), cols}, std::move(out), {table},
                     [idx, cols](Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for (size_t i = 0; i < idx.size(); ++i) {
                         for (int64_t c = 0; c < cols; ++c) {
                           g[idx[i] * cols + c] += self.grad[i * cols + c];
                         }
                       }
                     });
}

Tensor repeat_leading(const Tensor& x, int64_t count) {
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin(), count);
  const int64_t n = x.numel();
  std::vector<double> out(static_cast<size_t>(n * count));
  for (int64_t r = 0; r < count; ++r) std::copy_n(x.data().begin(), n, out.begin() + r * n);
  return make_result(std::move(out_shape), std::move(out), {x}, [n, count](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int64_t r = 0; r < count; ++r) {
      for (int64_t i = 0; i < n; ++i) g[i] += self.grad[r * n + i];
    }
  });
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = k * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = k * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  const auto xv = x.data();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  return make_result({}, {s}, {x}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double gs = self.grad[0];
    for (auto& v : g) v += gs;
  });
}

Tensor mean(const Tensor& x) {
  const auto n = static_cast<double>(x.numel());
  return scale(sum(x), 1.0 / n);
}

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
  const int r = x.rank();
  axis = normalize_axis(axis, r);
  int64_t outer = 1, inner = 1;
  const int64_t len = x.shape()[axis];
  for (int d = 0; d < axis; ++d) outer *= x.shape()[d];
  for (int d = axis + 1; d < r; ++d) inner *= x.shape()[d];
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + axis);
  }
  std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
  const auto xv = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t l = 0; l < len; ++l) {
      const double* src = xv.data() + (o * len + l) * inner;
      double* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return make_result(std::move(out_shape), std::move(out), {x}, [outer, len, inner](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t l = 0; l < len; ++l) {
        double* dst = g.data() + (o * len + l) * inner;
        const double* src = self.grad.data() + o * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor mean_axis(const Tensor& x, int axis, bool keepdim) {
  const auto len = static_cast<double>(x.dim(axis));
  return scale(sum_axis(x, axis, keepdim), 1.0 / len);
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  MMap(out.data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    CMap g(self.grad.data(), m, n);
    if (A.requires_grad) {
      MMap(A.grad_buffer().data(), m, k).noalias() += g * CMap(B.value.data(), k, n).transpose();
    }
    if (B.requires_grad) {
      MMap(B.grad_buffer().data(), k, n).noalias() += CMap(A.value.data(), m, k).transpose() * g;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0)) {
    throw ShapeError("linear " + to_string(x.shape()) + " with weight " + to_string(weight.shape()));
  }
  const int64_t in = weight.dim(0), outf = weight.dim(1);
  const int64_t rows = x.numel() / in;
  if (bias.defined() && bias.numel() != outf) throw ShapeError("linear: bias size mismatch");
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  std::vector<double> out(static_cast<size_t>(rows * outf));
  MMap y(out.data(), rows, outf);
  y.noalias() = CMap(x.data().data(), rows, in) * CMap(weight.data().data(), in, outf);
  if (bias.defined()) {
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), outf);
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(out_shape), std::move(out), inputs, [rows, in, outf](Node& self) {
    Node& X = *self.inputs[0];
    Node& W = *self.inputs[1];
    CMap g(self.grad.data(), rows, outf);
    if (X.requires_grad) {
      MMap(X.grad_buffer().data(), rows, in).noalias() += g * CMap(W.value.data(), in, outf).transpose();
    }
    if (W.requires_grad) {
      MMap(W.grad_buffer().data(), in, outf).noalias() += CMap(X.value.data(), rows, in).transpose() * g;
    }
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      Eigen::Map<Eigen::RowVectorXd>(self.inputs[2]->grad_buffer().data(), outf) += g.colwise().sum();
    }
  });
}

// ---- normalization / activation --------------------------------------------

Tensor softmax(const Tensor& x) {
  const int64_t cols = x.dim(-1);
  const int64_t rows = x.numel() / cols;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const auto xv = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double s = 0.0;
    for (int64_t c = 0; c < cols; ++c) s += (o[c] = std::exp(in[c] - mx));
    for (int64_t c = 0; c < cols; ++c) o[c] /= s;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, cols](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (int64_t c = 0; c < cols; ++c) dot += g[c] * y[c];
      for (int64_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const int64_t cols = x.dim(-1);
  const int64_t rows = x.numel() / cols;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const auto xv = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double s = 0.0;
    for (int64_t c = 0; c < cols; ++c) s += std::exp(in[c] - mx);
    const double lse = mx + std::log(s);
    for (int64_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, cols](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double gs = 0.0;
      for (int64_t c = 0; c < cols; ++c) gs += g[c];
      for (int64_t c = 0; c < cols; ++c) gx[r * cols + c] += g[c] - std::exp(y[c]) * gs;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int64_t cols = x.dim(-1);
  const int64_t rows = x.numel() / cols;
  if (gamma.defined() && gamma.numel() != cols) throw ShapeError("layer_norm: gamma size");
  if (beta.defined() && beta.numel() != cols) throw ShapeError("layer_norm: beta size");
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.numel()));
  auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const auto xv = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double mu = 0.0;
    for (int64_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int64_t c = 0; c < cols; ++c) {
      const double h = (in[c] - mu) * rs;
      (*xhat)[r * cols + c] = h;
      double y = h;
      if (gamma.defined()) y *= gamma.data()[c];
      if (beta.defined()) y += beta.data()[c];
      out[r * cols + c] = y;
    }
  }
  std::vector<Tensor> inputs{x};
  const bool has_gamma = gamma.defined();
  const bool has_beta = beta.defined();
  if (has_gamma) inputs.push_back(gamma);
  if (has_beta) inputs.push_back(beta);
  return make_result(x.shape(), std::move(out), inputs,
                     [rows, cols, xhat, rstd, has_gamma, has_beta](Node& self) {
                       Node& X = *self.inputs[0];
                       Node* G = has_gamma ? self.inputs[1].get() : nullptr;
                       Node* B = has_beta ? self.inputs[has_gamma ? 2 : 1].get() : nullptr;
                       std::vector<double> dh(static_cast<size_t>(cols));
                       for (int64_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * cols;
                         const double* h = xhat->data() + r * cols;
                         if (G && G->requires_grad) {
                           auto& gg = G->grad_buffer();
                           for (int64_t c = 0; c < cols; ++c) gg[c] += g[c] * h[c];
                         }
                         if (B && B->requires_grad) {
                           auto& gb = B->grad_buffer();
                           for (int64_t c = 0; c < cols; ++c) gb[c] += g[c];
                         }
                         if (!X.requires_grad) continue;
                         double m1 = 0.0, m2 = 0.0;
                         for (int64_t c = 0; c < cols; ++c) {
                           dh[c] = g[c] * (G ? G->value[c] : 1.0);
                           m1 += dh[c];
                           m2 += dh[c] * h[c];
                         }
                         m1 /= static_cast<double>(cols);
                         m2 /= static_cast<double>(cols);
                         auto& gx = X.grad_buffer();
                         const double rs = (*rstd)[r];
                         for (int64_t c = 0; c < cols; ++c) {
                           gx[r * cols + c] += rs * (dh[c] - m1 - h[c] * m2);
                         }
                       }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw ShapeError("attention expects rank-3");
  const int64_t B = q.dim(0), Lq = q.dim(1), C = q.dim(2), Lk = k.dim(1);
  if (k.dim(0) != B || v.dim(0) != B || k.dim(2) != C || v.dim(2) != C || v.dim(1) != Lk) {
    throw ShapeError("attention: q " + to_string(q.shape()) + " k " + to_string(k.shape()) + " v " +
                     to_string(v.shape()));
  }
  if (heads <= 0 || C % heads != 0) throw ShapeError("attention: channels not divisible by heads");
  const int64_t dh = C / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(B * heads * Lq * Lk));
  std::vector<double> out(static_cast<size_t>(B * Lq * C));
  const double* qv = q.data().data();
  const double* kv = k.data().data();
  const double* vv = v.data().data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      StridedC Q(qv + b * Lq * C + h * dh, Lq, dh, Eigen::OuterStride<>(C));
      StridedC K(kv + b * Lk * C + h * dh, Lk, dh, Eigen::OuterStride<>(C));
      StridedC V(vv + b * Lk * C + h * dh, Lk, dh, Eigen::OuterStride<>(C));
      MMap P(probs->data() + (b * heads + h) * Lq * Lk, Lq, Lk);
      P.noalias() = (Q * K.transpose()) * sc;
      for (int64_t i = 0; i < Lq; ++i) {
        const double mx = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - mx).exp();
        P.row(i) /= P.row(i).sum();
      }
      StridedM O(out.data() + b * Lq * C + h * dh, Lq, dh, Eigen::OuterStride<>(C));
      O.noalias() = P * V;
    }
  }
  return make_result(
      {B, Lq, C}, std::move(out), {q, k, v}, [B, Lq, Lk, C, heads, dh, sc, probs](Node& self) {
        Node& Qn = *self.inputs[0];
        Node& Kn = *self.inputs[1];
        Node& Vn = *self.inputs[2];
        double* gq = Qn.requires_grad ? Qn.grad_buffer().data() : nullptr;
        double* gk = Kn.requires_grad ? Kn.grad_buffer().data() : nullptr;
        double* gv = Vn.requires_grad ? Vn.grad_buffer().data() : nullptr;
        RowMat dP(Lq, Lk);
        for (int64_t b = 0; b < B; ++b) {
          for (int64_t h = 0; h < heads; ++h) {
            const auto qo = b * Lq * C + h * dh;
            const auto ko = b * Lk * C + h * dh;
            StridedC Q(Qn.value.data() + qo, Lq, dh, Eigen::OuterStride<>(C));
            StridedC K(Kn.value.data() + ko, Lk, dh, Eigen::OuterStride<>(C));
            StridedC V(Vn.value.data() + ko, Lk, dh, Eigen::OuterStride<>(C));
            StridedC dO(self.grad.data() + qo, Lq, dh, Eigen::OuterStride<>(C));
            CMap P(probs->data() + (b * heads + h) * Lq * Lk, Lq, Lk);
            if (gv) StridedM(gv + ko, Lk, dh, Eigen::OuterStride<>(C)).noalias() += P.transpose() * dO;
            if (!gq && !gk) continue;
            dP.noalias() = dO * V.transpose();
            // dS = P * (dP - rowsum(dP * P))
            for (int64_t i = 0; i < Lq; ++i) {
              const double dot = dP.row(i).dot(P.row(i));
              dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
            }
            if (gq) StridedM(gq + qo, Lq, dh, Eigen::OuterStride<>(C)).noalias() += (dP * K) * sc;
            if (gk) StridedM(gk + ko, Lk, dh, Eigen::OuterStride<>(C)).noalias() += (dP.transpose() * Q) * sc;
          }
        }
      });
}

// ---- volumetric ------------------------------------------------------------

namespace {

struct ConvGeom {
  int64_t X, Y, Z, cin, Xo, Yo, Zo;
  int k, s, p;
};

void im2col(const ConvGeom& g, const double* x, double* col) {
  const int64_t row = static_cast<int64_t>(g.k) * g.k * g.k * g.cin;
  for (int64_t ox = 0; ox < g.Xo; ++ox) {
    for (int64_t oy = 0; oy < g.Yo; ++oy) {
      for (int64_t oz = 0; oz < g.Zo; ++oz) {
        double* dst = col + ((ox * g.Yo + oy) * g.Zo + oz) * row;
        for (int kx = 0; kx < g.k; ++kx) {
          const int64_t ix = ox * g.s - g.p + kx;
          for (int ky = 0; ky < g.k; ++ky) {
            const int64_t iy = oy * g.s - g.p + ky;
            for (int kz = 0; kz < g.k; ++kz) {
              const int64_t iz = oz * g.s - g.p + kz;
              if (ix < 0 || ix >= g.X || iy < 0 || iy >= g.Y || iz < 0 || iz >= g.Z) {
                std::fill_n(dst, g.cin, 0.0);
              } else {
                std::copy_n(x + ((ix * g.Y + iy) * g.Z + iz) * g.cin, g.cin, dst);
              }
              dst += g.cin;
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeom& g, const double* col, double* gx) {
  const int64_t row = static_cast<int64_t>(g.k) * g.k * g.k * g.cin;
  for (int64_t ox = 0; ox < g.Xo; ++ox) {
    for (int64_t oy = 0; oy < g.Yo; ++oy) {
      for (int64_t oz = 0; oz < g.Zo; ++oz) {
        const double* src = col + ((ox * g.Yo + oy) * g.Zo + oz) * row;
        for (int kx = 0; kx < g.k; ++kx) {
          const int64_t ix = ox * g.s - g.p + kx;
          for (int ky = 0; ky < g.k; ++ky) {
            const int64_t iy = oy * g.s - g.p + ky;
            for (int kz = 0; kz < g.k; ++kz) {
              const int64_t iz = oz * g.s - g.p + kz;
              if (!(ix < 0 || ix >= g.X || iy < 0 || iy >= g.Y || iz < 0 || iz >= g.Z)) {
                double* dst = gx + ((ix * g.Y + iy) * g.Z + iz) * g.cin;
                for (int64_t c = 0; c < g.cin; ++c) dst[c] += src[c];
              }
              src += g.cin;
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, int kernel, int stride,
              int padding) {
  if (x.rank() != 4) throw ShapeError("conv3d expects (X, Y, Z, C), got " + to_string(x.shape()));
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), 0, 0, 0, kernel, stride, padding};
  const int64_t row = static_cast<int64_t>(kernel) * kernel * kernel * g.cin;
  if (weight.rank() != 2 || weight.dim(0) != row) {
    throw ShapeError("conv3d weight " + to_string(weight.shape()) + " for input " + to_string(x.shape()));
  }
  const int64_t cout = weight.dim(1);
  g.Xo = (g.X + 2 * padding - kernel) / stride + 1;
  g.Yo = (g.Y + 2 * padding - kernel) / stride + 1;
  g.Zo = (g.Z + 2 * padding - kernel) / stride + 1;
  if (g.Xo <= 0 || g.Yo <= 0 || g.Zo <= 0) throw ShapeError("conv3d: empty output");
  const int64_t P = g.Xo * g.Yo * g.Zo;
  std::vector<double> col(static_cast<size_t>(P * row));
  im2col(g, x.data().data(), col.data());
  std::vector<double> out(static_cast<size_t>(P * cout));
  MMap y(out.data(), P, cout);
  y.noalias() = CMap(col.data(), P, row) * CMap(weight.data().data(), row, cout);
  if (bias.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), cout);
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result({g.Xo, g.Yo, g.Zo, cout}, std::move(out), inputs, [g, P, row, cout](Node& self) {
    Node& X = *self.inputs[0];
    Node& W = *self.inputs[1];
    CMap G(self.grad.data(), P, cout);
    std::vector<double> col(static_cast<size_t>(P * row));
    if (W.requires_grad) {
      im2col(g, X.value.data(), col.data());
      MMap(W.grad_buffer().data(), row, cout).noalias() += CMap(col.data(), P, row).transpose() * G;
    }
    if (X.requires_grad) {
      MMap dcol(col.data(), P, row);
      dcol.noalias() = G * CMap(W.value.data(), row, cout).transpose();
      col2im(g, col.data(), X.grad_buffer().data());
    }
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      Eigen::Map<Eigen::RowVectorXd>(self.inputs[2]->grad_buffer().data(), cout) += G.colwise().sum();
    }
  });
}

Tensor upconv3d_2x(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 4) throw ShapeError("upconv3d_2x expects (X, Y, Z, C)");
  const int64_t X = x.dim(0), Y = x.dim(1), Z = x.dim(2), cin = x.dim(3);
  if (weight.rank() != 2 || weight.dim(0) != cin || weight.dim(1) % 8 != 0) {
    throw ShapeError("upconv3d_2x weight " + to_string(weight.shape()));
  }
  const int64_t cout = weight.dim(1) / 8;
  const int64_t P = X * Y * Z;
  std::vector<double> patch(static_cast<size_t>(P * 8 * cout));
  MMap(patch.data(), P, 8 * cout).noalias() = CMap(x.data().data(), P, cin) * CMap(weight.data().data(), cin, 8 * cout);
  const int64_t X2 = 2 * X, Y2 = 2 * Y, Z2 = 2 * Z;
  std::vector<double> out(static_cast<size_t>(X2 * Y2 * Z2 * cout));
  auto out_offset = [=](int64_t i, int64_t j, int64_t l, int o) {
    const int dx = o >> 2, dy = (o >> 1) & 1, dz = o & 1;
    return (((2 * i + dx) * Y2 + (2 * j + dy)) * Z2 + (2 * l + dz)) * cout;
  };
  for (int64_t i = 0; i < X; ++i) {
    for (int64_t j = 0; j < Y; ++j) {
      for (int64_t l = 0; l < Z; ++l) {
        const double* src = patch.data() + ((i * Y + j) * Z + l) * 8 * cout;
        for (int o = 0; o < 8; ++o) {
          double* dst = out.data() + out_offset(i, j, l, o);
          for (int64_t c = 0; c < cout; ++c) dst[c] = src[o * cout + c] + (bias.defined() ? bias.data()[c] : 0.0);
        }
      }
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result({X2, Y2, Z2, cout}, std::move(out), inputs,
                     [X, Y, Z, cin, cout, P, out_offset](Node& self) {
                       std::vector<double> gpatch(static_cast<size_t>(P * 8 * cout));
                       for (int64_t i = 0; i < X; ++i) {
                         for (int64_t j = 0; j < Y; ++j) {
                           for (int64_t l = 0; l < Z; ++l) {
                             double* dst = gpatch.data() + ((i * Y + j) * Z + l) * 8 * cout;
                             for (int o = 0; o < 8; ++o) {
                               std::copy_n(self.grad.data() + out_offset(i, j, l, o), cout, dst + o * cout);
                             }
                           }
                         }
                       }
                       CMap G(gpatch.data(), P, 8 * cout);
                       Node& Xn = *self.inputs[0];
                       Node& Wn = *self.inputs[1];
                       if (Xn.requires_grad) {
                         MMap(Xn.grad_buffer().data(), P, cin).noalias() += G * CMap(Wn.value.data(), cin, 8 * cout).transpose();
                       }
                       if (Wn.requires_grad) {
                         MMap(Wn.grad_buffer().data(), cin, 8 * cout).noalias() += CMap(Xn.value.data(), P, cin).transpose() * G;
                       }
                       if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                         auto& gb = self.inputs[2]->grad_buffer();
                         for (int64_t p = 0; p < P * 8; ++p) {
                           for (int64_t c = 0; c < cout; ++c) gb[c] += gpatch[p * cout + c];
                         }
                       }
                     });
}

Tensor triplane_product(const Tensor& xy, const Tensor& yz, const Tensor& xz) {
  if (xy.rank() != 3 || yz.rank() != 3 || xz.rank() != 3) throw ShapeError("triplane_product expects rank-3 planes");
  const int64_t h = xy.dim(0), w = xy.dim(1), C = xy.dim(2), d = yz.dim(1);
  if (yz.dim(0) != w || yz.dim(2) != C || xz.dim(0) != h || xz.dim(1) != d || xz.dim(2) != C) {
    throw ShapeError("triplane_product: xy " + to_string(xy.shape()) + " yz " + to_string(yz.shape()) +
                     " xz " + to_string(xz.shape()));
  }
  std::vector<double> out(static_cast<size_t>(h * w * d * C));
  const double* a = xy.data().data();
  const double* b = yz.data().data();
  const double* c = xz.data().data();
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (int64_t k = 0; k < d; ++k) {
        double* o = out.data() + ((i * w + j) * d + k) * C;
        const double* pa = a + (i * w + j) * C;
        const double* pb = b + (j * d + k) * C;
        const double* pc = c + (i * d + k) * C;
        for (int64_t ch = 0; ch < C; ++ch) o[ch] = pa[ch] * pb[ch] * pc[ch];
      }
  return make_result({h, w, d, C}, std::move(out), {xy, yz, xz}, [h, w, d, C](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    Node& Cn = *self.inputs[2];
    double* ga = A.requires_grad ? A.grad_buffer().data() : nullptr;
    double* gb = B.requires_grad ? B.grad_buffer().data() : nullptr;
    double* gc = Cn.requires_grad ? Cn.grad_buffer().data() : nullptr;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        for (int64_t k = 0; k < d; ++k) {
          const double* g = self.grad.data() + ((i * w + j) * d + k) * C;
          const auto ia = (i * w + j) * C, ib = (j * d + k) * C, ic = (i * d + k) * C;
          for (int64_t ch = 0; ch < C; ++ch) {
            const double va = A.value[ia + ch], vb = B.value[ib + ch], vc = Cn.value[ic + ch];
            if (ga) ga[ia + ch] += g[ch] * vb * vc;
            if (gb) gb[ib + ch] += g[ch] * va * vc;
            if (gc) gc[ic + ch] += g[ch] * va * vb;
          }
        }
  });
}

// ---- losses ----------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const int64_t K = logits.dim(-1);
  const int64_t N = logits.numel() / K;
  if (static_cast<int64_t>(labels.size()) != N) throw ShapeError("cross_entropy: label count mismatch");
  auto soft = std::make_shared<std::vector<double>>(static_cast<size_t>(N * K));
  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  const auto lv = logits.data();
  for (int64_t n = 0; n < N; ++n) {
    const double* in = lv.data() + n * K;
    const double mx = *std::max_element(in, in + K);
    double s = 0.0;
    for (int64_t c = 0; c < K; ++c) s += ((*soft)[n * K + c] = std::exp(in[c] - mx));
    for (int64_t c = 0; c < K; ++c) (*soft)[n * K + c] /= s;
    if (lab[n] < 0 || lab[n] >= K) throw ShapeError("cross_entropy: label out of range");
    total -= in[lab[n]] - mx - std::log(s);
  }
  return make_result({}, {total / static_cast<double>(N)}, {logits},
                     [N, K, soft, lab = std::move(lab)](Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       const double gs = self.grad[0] / static_cast<double>(N);
                       for (int64_t n = 0; n < N; ++n) {
                         for (int64_t c = 0; c < K; ++c) {
                           g[n * K + c] += gs * ((*soft)[n * K + c] - (c == lab[n] ? 1.0 : 0.0));
                         }
                       }
                     });
}

std::vector<double> lovasz_grad(std::span<const double> sorted_fg) {
  const size_t p = sorted_fg.size();
  std::vector<double> jac(p);
  const double gts = std::accumulate(sorted_fg.begin(), sorted_fg.end(), 0.0);
  double cum_fg = 0.0, cum_bg = 0.0;
  for (size_t i = 0; i < p; ++i) {
    cum_fg += sorted_fg[i];
    cum_bg += 1.0 - sorted_fg[i];
    const double inter = gts - cum_fg;
    const double uni = gts + cum_bg;
    jac[i] = 1.0 - inter / uni;
  }
  for (size_t i = p; i-- > 1;) jac[i] -= jac[i - 1];
  return jac;
}

Tensor lovasz_softmax(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 3) throw ShapeError("lovasz_softmax expects (G, P, K)");
  const int64_t G = probs.dim(0), P = probs.dim(1), K = probs.dim(2);
  if (static_cast<int64_t>(labels.size()) != G * P) throw ShapeError("lovasz_softmax: label count mismatch");
  auto dloss = std::make_shared<std::vector<double>>(static_cast<size_t>(G * P * K), 0.0);
  const auto pv = probs.data();
  double total = 0.0;
  std::vector<int64_t> order(static_cast<size_t>(P));
  std::vector<double> err(static_cast<size_t>(P)), fg_sorted(static_cast<size_t>(P));
  std::vector<std::pair<double, int64_t>> keyed(static_cast<size_t>(P));
  for (int64_t g = 0; g < G; ++g) {
    std::vector<int> present;
    for (int64_t c = 0; c < K; ++c) {
      for (int64_t i = 0; i < P; ++i) {
        if (labels[g * P + i] == c) {
          present.push_back(static_cast<int>(c));
          break;
        }
      }
    }
    if (present.empty()) continue;
    const double wc = 1.0 / (static_cast<double>(present.size()) * static_cast<double>(G));
    for (int c : present) {
      for (int64_t i = 0; i < P; ++i) {
        const double fg = labels[g * P + i] == c ? 1.0 : 0.0;
        err[i] = std::abs(fg - pv[(g * P + i) * K + c]);
      }
      for (int64_t i = 0; i < P; ++i) keyed[i] = {-err[i], i};
      std::sort(keyed.begin(), keyed.end());  // descending error, index breaks ties
      for (int64_t i = 0; i < P; ++i) order[i] = keyed[i].second;
      for (int64_t r = 0; r < P; ++r) fg_sorted[r] = labels[g * P + order[r]] == c ? 1.0 : 0.0;
      const auto grad = lovasz_grad(fg_sorted);
      for (int64_t r = 0; r < P; ++r) {
        const int64_t i = order[r];
        total += wc * err[i] * grad[r];
        // d|fg - p|/dp = -1 for foreground (p <= 1), +1 otherwise.
        const double sign = fg_sorted[r] > 0.5 ? -1.0 : 1.0;
        (*dloss)[(g * P + i) * K + c] += wc * grad[r] * sign;
      }
    }
  }
  return make_result({}, {total}, {probs}, [dloss](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double gs = self.grad[0];
    for (size_t i = 0; i < g.size(); ++i) g[i] += gs * (*dloss)[i];
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const auto av = a.data();
  const auto bv = b.data();
  const auto n = static_cast<double>(av.size());
  double s = 0.0;
  for (size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return make_result({}, {s / n}, {a, b}, [n](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    const double gs = 2.0 * self.grad[0] / n;
    if (A.requires_grad) {
      auto& ga = A.grad_buffer();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += gs * (A.value[i] - B.value[i]);
    }
    if (B.requires_grad) {
      auto& gb = B.grad_buffer();
      for (size_t i = 0; i < gb.size(); ++i) gb[i] -= gs * (A.value[i] - B.value[i]);
    }
  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  const double keep = 1.0 - p;
  auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(x.numel()));
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const auto xv = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    out[i] = xv[i] * (*mask)[i];
  }
  return make_result(x.shape(), std::move(out), {x}, [mask](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

}  // namespace geniedrive::nn
