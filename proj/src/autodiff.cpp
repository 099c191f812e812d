#include "casd/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

namespace casd {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.ptr(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
void require_same_graph(const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) throw ContractError("operands belong to different graphs");
}

// Index mapping for a broadcast binary op; stride 0 marks a broadcast axis.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r - a.size(), 1), pb(r - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  plan.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    plan.out[i] = std::max(pa[i], pb[i]);
  }
  auto strides = [&](const Shape& p) {
    std::vector<std::size_t> s(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = r; i-- > 0;) {
      s[i] = p[i] == 1 ? 0 : acc;
      acc *= p[i];
    }
    return s;
  };
  plan.stride_a = strides(pa);
  plan.stride_b = strides(pb);
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
  const std::size_t n = shape_numel(plan.out);
  if (plan.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = plan.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += plan.stride_a[d];
      ib += plan.stride_b[d];
      if (idx[d] < plan.out[d]) break;
      ia -= plan.stride_a[d] * idx[d];
      ib -= plan.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { Add, Sub, Mul };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinaryKind kind) {
  require_same_graph(a, b);
  auto& g = a.graph();
  const auto plan = plan_broadcast(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  const auto& va = a.value();
  const auto& vb = b.value();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    switch (kind) {
      case BinaryKind::Add: out[o] = va[ia] + vb[ib]; break;
      case BinaryKind::Sub: out[o] = va[ia] - vb[ib]; break;
      case BinaryKind::Mul: out[o] = va[ia] * vb[ib]; break;
    }
  });
  const std::size_t ida = a.id(), idb = b.id();
  const OpKind op = kind == BinaryKind::Add   ? OpKind::Add
                    : kind == BinaryKind::Sub ? OpKind::Sub
                                              : OpKind::Mul;
  return g.record(op, {ida, idb}, std::move(out),
                  [ida, idb, plan, kind](Graph<T>& g, const Tensor<T>& go) {
                    const bool need_a = g.requires_grad(ida);
                    const bool need_b = g.requires_grad(idb);
                    Tensor<T>* ga = need_a ? &g.grad_buffer(ida) : nullptr;
                    Tensor<T>* gb = need_b ? &g.grad_buffer(idb) : nullptr;
                    const auto& va = g.value(ida);
                    const auto& vb = g.value(idb);
                    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                      const T d = go[o];
                      switch (kind) {
                        case BinaryKind::Add:
                          if (ga) (*ga)[ia] += d;
                          if (gb) (*gb)[ib] += d;
                          break;
                        case BinaryKind::Sub:
                          if (ga) (*ga)[ia] += d;
                          if (gb) (*gb)[ib] -= d;
                          break;
                        case BinaryKind::Mul:
                          if (ga) (*ga)[ia] += d * vb[ib];
                          if (gb) (*gb)[ib] += d * va[ia];
                          break;
                      }
                    });
                  });
}

// Applies f elementwise; df(x) is the local derivative at input x.
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, OpKind kind, F f, DF df) {
  auto& g = x.graph();
  const auto& v = x.value();
  Tensor<T> out(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = f(v[i]);
  const std::size_t id = x.id();
  return g.record(kind, {id}, std::move(out), [id, df](Graph<T>& g, const Tensor<T>& go) {
    const auto& xv = g.value(id);
    auto& gx = g.grad_buffer(id);
    for (std::size_t i = 0; i < xv.numel(); ++i) gx[i] += go[i] * df(xv[i]);
  });
}

std::size_t outer_size(const Shape& s, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < axis; ++i) n *= s[i];
  return n;
}

std::size_t inner_size(const Shape& s, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::MaxPool2d: return "maxpool2d";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::ChannelMean: return "channel_mean";
    case OpKind::SumAxis: return "sum_axis";
    case OpKind::Sum: return "sum";
    case OpKind::ElementwiseMax: return "elementwise_max";
    case OpKind::Mse: return "l2_norm_sq_mean";
    case OpKind::SmoothL1: return "smooth_l1";
    case OpKind::Detach: return "detach";
    case OpKind::Clamp: return "clamp";
    case OpKind::Log: return "log";
    case OpKind::Reshape: return "reshape";
    case OpKind::FlipW: return "flip_w";
    case OpKind::RoiPool: return "roi_pool";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Var<T> Graph<T>::input(Tensor<T> value, bool requires_grad) {
  Node n;
  n.kind = OpKind::Input;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::param(Parameter<T>& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var<T>(this, it->second);
  Node n;
  n.kind = OpKind::Param;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  param_ids_.emplace(&p, nodes_.size() - 1);
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::record(OpKind kind, std::vector<std::size_t> inputs, Tensor<T> value,
                        BackwardFn backward) {
  Node n;
  n.kind = kind;
  n.requires_grad = false;
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw ContractError("graph input id out of order");
    n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  }
  // A detached node keeps its provenance for inspection but is a gradient sink.
  if (kind == OpKind::Detach) n.requires_grad = false;
#ifndef NDEBUG
  if (!value.all_finite()) {
    throw ContractError(std::string("non-finite output from ") + std::string(op_name(kind)));
  }
#endif
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Graph<T>::accumulate(std::size_t id, const Tensor<T>& g) {
  if (!nodes_[id].requires_grad) return;
  auto& buf = grad_buffer(id);
  if (buf.shape() != g.shape()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match " +
                     shape_str(buf.shape()));
  }
  for (std::size_t i = 0; i < buf.numel(); ++i) buf[i] += g[i];
}

template <typename T>
void Graph<T>::backward(const Var<T>& loss) {
  if (&loss.graph() != this) throw ContractError("loss belongs to a different graph");
  if (loss.value().numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (consumed_) throw ContractError("backward already ran on this graph");
  consumed_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] = T(1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr) {
      auto& pg = n.param->grad;
      for (std::size_t j = 0; j < pg.numel(); ++j) pg[j] += n.grad[j];
    }
  }
  // Leaves the loss does not depend on still report a zero gradient.
  for (std::size_t i = 0; i <= loss.id(); ++i) {
    if (nodes_[i].kind == OpKind::Input && nodes_[i].requires_grad) grad_buffer(i);
  }
}

template class Graph<float>;
template class Graph<double>;

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::Add);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::Sub);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinaryKind::Mul);
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary(
      a, OpKind::Scale, [factor](T v) { return v * factor; }, [factor](T) { return factor; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  return unary(
      a, OpKind::AddScalar, [offset](T v) { return v + offset; }, [](T) { return T(1); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(
      x, OpKind::Relu, [](T v) { return v > T(0) ? v : T(0); },
      [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  auto s = [](T v) {
    // Split by sign so exp never overflows.
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  };
  return unary(x, OpKind::Sigmoid, s, [s](T v) {
    const T y = s(v);
    return y * (T(1) - y);
  });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return unary(
      x, OpKind::Clamp, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v) { return (v > lo && v < hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  for (auto v : x.value().data()) {
    if (!(v > T(0))) throw ContractError("log of non-positive value; clamp first");
  }
  return unary(
      x, OpKind::Log, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_same_graph(a, b);
  const auto& va = a.value();
  const auto& vb = b.value();
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
    throw ShapeError("matmul shape mismatch " + shape_str(va.shape()) + " x " +
                     shape_str(vb.shape()));
  }
  const std::size_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor<T> out({m, n});
  as_matrix(out, m, n).noalias() = as_matrix(va, m, k) * as_matrix(vb, k, n);
  const std::size_t ida = a.id(), idb = b.id();
  return a.graph().record(
      OpKind::MatMul, {ida, idb}, std::move(out),
      [ida, idb, m, k, n](Graph<T>& g, const Tensor<T>& go) {
        const auto dy = as_matrix(go, m, n);
        if (g.requires_grad(ida)) {
          as_matrix(g.grad_buffer(ida), m, k).noalias() +=
              dy * as_matrix(g.value(idb), k, n).transpose();
        }
        if (g.requires_grad(idb)) {
          as_matrix(g.grad_buffer(idb), k, n).noalias() +=
              as_matrix(g.value(ida), m, k).transpose() * dy;
        }
      });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  const auto& v = a.value();
  if (v.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(v.shape()));
  const std::size_t r = v.dim(0), c = v.dim(1);
  Tensor<T> out({c, r});
  as_matrix(out, c, r) = as_matrix(v, r, c).transpose();
  const std::size_t id = a.id();
  return a.graph().record(OpKind::Transpose, {id}, std::move(out),
                          [id, r, c](Graph<T>& g, const Tensor<T>& go) {
                            as_matrix(g.grad_buffer(id), r, c) += as_matrix(go, c, r).transpose();
                          });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride,
              std::size_t pad) {
  require_same_graph(x, w);
  require_same_graph(x, b);
  const auto& vx = x.value();
  const auto& vw = w.value();
  const auto& vb = b.value();
  if (vx.rank() != 3 || vw.rank() != 4 || vb.rank() != 1) {
    throw ShapeError("conv2d expects x[C,H,W], w[O,C,k,k], b[O]");
  }
  const std::size_t cin = vx.dim(0), h = vx.dim(1), wd = vx.dim(2);
  const std::size_t cout = vw.dim(0), ksz = vw.dim(2);
  if (vw.dim(1) != cin || vw.dim(3) != ksz || vb.dim(0) != cout) {
    throw ShapeError("conv2d weight " + shape_str(vw.shape()) + " incompatible with input " +
                     shape_str(vx.shape()));
  }
  if (ksz % 2 == 0) throw ShapeError("conv2d kernel size must be odd");
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  const long hp = static_cast<long>(h + 2 * pad) - static_cast<long>(ksz);
  const long wp = static_cast<long>(wd + 2 * pad) - static_cast<long>(ksz);
  if (hp < 0 || wp < 0) throw ShapeError("conv2d output would have negative size");
  const std::size_t ho = static_cast<std::size_t>(hp) / stride + 1;
  const std::size_t wo = static_cast<std::size_t>(wp) / stride + 1;
  const std::size_t patch = cin * ksz * ksz;
  const std::size_t npix = ho * wo;

  auto cols = std::make_shared<Tensor<T>>(Shape{patch, npix});
  {
    T* cp = cols->ptr();
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t ky = 0; ky < ksz; ++ky) {
        for (std::size_t kx = 0; kx < ksz; ++kx) {
          const std::size_t row = (c * ksz + ky) * ksz + kx;
          T* dst = cp + row * npix;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              dst[oy * wo + ox] = (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 &&
                                   ix < static_cast<long>(wd))
                                      ? vx.at(c, iy, ix)
                                      : T(0);
            }
          }
        }
      }
    }
  }
  Tensor<T> out({cout, ho, wo});
  auto ym = as_matrix(out, cout, npix);
  ym.noalias() = as_matrix(vw, cout, patch) * as_matrix(*cols, patch, npix);
  for (std::size_t o = 0; o < cout; ++o) ym.row(static_cast<Eigen::Index>(o)).array() += vb[o];

  const std::size_t idx = x.id(), idw = w.id(), idb = b.id();
  return x.graph().record(
      OpKind::Conv2d, {idx, idw, idb}, std::move(out),
      [=](Graph<T>& g, const Tensor<T>& go) {
        const auto dy = as_matrix(go, cout, npix);
        if (g.requires_grad(idw)) {
          as_matrix(g.grad_buffer(idw), cout, patch).noalias() +=
              dy * as_matrix(*cols, patch, npix).transpose();
        }
        if (g.requires_grad(idb)) {
          auto& gb = g.grad_buffer(idb);
          for (std::size_t o = 0; o < cout; ++o) gb[o] += dy.row(static_cast<Eigen::Index>(o)).sum();
        }
        if (g.requires_grad(idx)) {
          Tensor<T> dcols({patch, npix});
          as_matrix(dcols, patch, npix).noalias() =
              as_matrix(g.value(idw), cout, patch).transpose() * dy;
          auto& gx = g.grad_buffer(idx);
          for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t ky = 0; ky < ksz; ++ky) {
              for (std::size_t kx = 0; kx < ksz; ++kx) {
                const T* src = dcols.ptr() + ((c * ksz + ky) * ksz + kx) * npix;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                    if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                    gx.at(c, iy, ix) += src[oy * wo + ox];
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x) {
  const auto& v = x.value();
  if (v.rank() != 3) throw ShapeError("maxpool2d expects [C,H,W], got " + shape_str(v.shape()));
  const std::size_t c = v.dim(0), h = v.dim(1), w = v.dim(2);
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor<T> out({c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(c * ho * wo);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (ch * h + 2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (v[i] > v[best]) best = i;
          }
        }
        const std::size_t o = (ch * ho + oy) * wo + ox;
        out[o] = v[best];
        (*argmax)[o] = best;
      }
    }
  }
  const std::size_t id = x.id();
  return x.graph().record(OpKind::MaxPool2d, {id}, std::move(out),
                          [id, argmax](Graph<T>& g, const Tensor<T>& go) {
                            auto& gx = g.grad_buffer(id);
                            for (std::size_t o = 0; o < go.numel(); ++o) gx[(*argmax)[o]] += go[o];
                          });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const auto& v = x.value();
  if (axis >= v.rank()) throw ShapeError("softmax axis out of range for " + shape_str(v.shape()));
  const std::size_t outer = outer_size(v.shape(), axis);
  const std::size_t n = v.dim(axis);
  const std::size_t inner = inner_size(v.shape(), axis);
  Tensor<T> out(v.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = v[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, v[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(v[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  const std::size_t id = x.id();
  auto y = std::make_shared<Tensor<T>>(out);
  return x.graph().record(OpKind::Softmax, {id}, std::move(out),
                          [id, y, outer, n, inner](Graph<T>& g, const Tensor<T>& go) {
                            auto& gx = g.grad_buffer(id);
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t in = 0; in < inner; ++in) {
                                const std::size_t base = o * n * inner + in;
                                T dot = 0;
                                for (std::size_t j = 0; j < n; ++j) {
                                  dot += go[base + j * inner] * (*y)[base + j * inner];
                                }
                                for (std::size_t j = 0; j < n; ++j) {
                                  const std::size_t i = base + j * inner;
                                  gx[i] += (*y)[i] * (go[i] - dot);
                                }
                              }
                            }
                          });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x, std::size_t axis) {
  const auto& v = x.value();
  if (axis >= v.rank()) {
    throw ShapeError("log_softmax axis out of range for " + shape_str(v.shape()));
  }
  const std::size_t outer = outer_size(v.shape(), axis);
  const std::size_t n = v.dim(axis);
  const std::size_t inner = inner_size(v.shape(), axis);
  Tensor<T> out(v.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = v[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, v[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) total += std::exp(v[base + j * inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] = v[base + j * inner] - lse;
    }
  }
  const std::size_t id = x.id();
  auto y = std::make_shared<Tensor<T>>(out);
  return x.graph().record(OpKind::LogSoftmax, {id}, std::move(out),
                          [id, y, outer, n, inner](Graph<T>& g, const Tensor<T>& go) {
                            auto& gx = g.grad_buffer(id);
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t in = 0; in < inner; ++in) {
                                const std::size_t base = o * n * inner + in;
                                T total = 0;
                                for (std::size_t j = 0; j < n; ++j) total += go[base + j * inner];
                                for (std::size_t j = 0; j < n; ++j) {
                                  const std::size_t i = base + j * inner;
                                  gx[i] += go[i] - std::exp((*y)[i]) * total;
                                }
                              }
                            }
                          });
}

// ---------------------------------------------------------------------------
// Reductions

namespace {

template <typename T>
Var<T> reduce_axis(const Var<T>& x, std::size_t axis, T factor, OpKind kind) {
  const auto& v = x.value();
  if (axis >= v.rank()) throw ShapeError("reduction axis out of range for " + shape_str(v.shape()));
  const std::size_t outer = outer_size(v.shape(), axis);
  const std::size_t n = v.dim(axis);
  const std::size_t inner = inner_size(v.shape(), axis);
  Shape out_shape = v.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      const T* src = v.ptr() + (o * n + j) * inner;
      T* dst = out.ptr() + o * inner;
      for (std::size_t in = 0; in < inner; ++in) dst[in] += src[in];
    }
  }
  if (factor != T(1)) {
    for (auto& e : out.data()) e *= factor;
  }
  const std::size_t id = x.id();
  return x.graph().record(kind, {id}, std::move(out),
                          [id, outer, n, inner, factor](Graph<T>& g, const Tensor<T>& go) {
                            auto& gx = g.grad_buffer(id);
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t j = 0; j < n; ++j) {
                                T* dst = gx.ptr() + (o * n + j) * inner;
                                const T* src = go.ptr() + o * inner;
                                for (std::size_t in = 0; in < inner; ++in) dst[in] += factor * src[in];
                              }
                            }
                          });
}

}  // namespace

template <typename T>
Var<T> channel_mean(const Var<T>& x) {
  const auto& v = x.value();
  if (v.rank() != 3 && v.rank() != 4) {
    throw ShapeError("channel_mean expects [L,H,W] or [N,L,H,W], got " + shape_str(v.shape()));
  }
  const std::size_t axis = v.rank() - 3;
  if (v.dim(axis) == 0) throw ShapeError("channel_mean over zero channels");
  return reduce_axis(x, axis, T(1) / static_cast<T>(v.dim(axis)), OpKind::ChannelMean);
}

template <typename T>
Var<T> sum_axis(const Var<T>& x, std::size_t axis) {
  return reduce_axis(x, axis, T(1), OpKind::SumAxis);
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  const auto& v = x.value();
  T total = 0;
  for (auto e : v.data()) total += e;
  const std::size_t id = x.id();
  return x.graph().record(OpKind::Sum, {id}, Tensor<T>::scalar(total),
                          [id](Graph<T>& g, const Tensor<T>& go) {
                            auto& gx = g.grad_buffer(id);
                            for (auto& e : gx.data()) e += go[0];
                          });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const auto n = x.value().numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> elementwise_max(std::span<const Var<T>> xs) {
  if (xs.empty()) throw ShapeError("elementwise_max needs at least one tensor");
  const auto& shape = xs[0].shape();
  std::vector<std::size_t> ids;
  for (const auto& x : xs) {
    require_same_graph(xs[0], x);
    if (x.shape() != shape) {
      throw ShapeError("elementwise_max shape mismatch " + shape_str(shape) + " vs " +
                       shape_str(x.shape()));
    }
    ids.push_back(x.id());
  }
  Tensor<T> out = xs[0].value();
  auto winner = std::make_shared<std::vector<std::uint32_t>>(out.numel(), 0);
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const auto& v = xs[k].value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
      if (v[i] > out[i]) {
        out[i] = v[i];
        (*winner)[i] = static_cast<std::uint32_t>(k);
      }
    }
  }
  auto& g0 = xs[0].graph();
  return g0.record(OpKind::ElementwiseMax, ids, std::move(out),
                   [ids, winner](Graph<T>& g, const Tensor<T>& go) {
                     for (std::size_t i = 0; i < go.numel(); ++i) {
                       const std::size_t id = ids[(*winner)[i]];
                       if (g.requires_grad(id)) g.grad_buffer(id)[i] += go[i];
                     }
                   });
}

template <typename T>
Var<T> l2_norm_sq_mean(const Var<T>& a, const Var<T>& b) {
  require_same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError("l2_norm_sq_mean shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const auto& va = a.value();
  const auto& vb = b.value();
  const std::size_t n = va.numel();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = va[i] - vb[i];
    total += d * d;
  }
  const std::size_t ida = a.id(), idb = b.id();
  return a.graph().record(OpKind::Mse, {ida, idb}, Tensor<T>::scalar(total / static_cast<T>(n)),
                          [ida, idb, n](Graph<T>& g, const Tensor<T>& go) {
                            const auto& va = g.value(ida);
                            const auto& vb = g.value(idb);
                            const T c = T(2) * go[0] / static_cast<T>(n);
                            const bool na = g.requires_grad(ida), nb = g.requires_grad(idb);
                            for (std::size_t i = 0; i < n; ++i) {
                              const T d = c * (va[i] - vb[i]);
                              if (na) g.grad_buffer(ida)[i] += d;
                              if (nb) g.grad_buffer(idb)[i] -= d;
                            }
                          });
}

template <typename T>
Var<T> smooth_l1(const Var<T>& pred, const Var<T>& target) {
  require_same_graph(pred, target);
  if (pred.shape() != target.shape()) {
    throw ShapeError("smooth_l1 shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  const auto& vp = pred.value();
  const auto& vt = target.value();
  const std::size_t n = vp.numel();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = std::abs(vp[i] - vt[i]);
    total += d < T(1) ? T(0.5) * d * d : d - T(0.5);
  }
  const std::size_t idp = pred.id(), idt = target.id();
  return pred.graph().record(
      OpKind::SmoothL1, {idp, idt}, Tensor<T>::scalar(n ? total / static_cast<T>(n) : T(0)),
      [idp, idt, n](Graph<T>& g, const Tensor<T>& go) {
        const auto& vp = g.value(idp);
        const auto& vt = g.value(idt);
        const bool np = g.requires_grad(idp), nt = g.requires_grad(idt);
        for (std::size_t i = 0; i < n; ++i) {
          const T d = vp[i] - vt[i];
          const T local = std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1));
          const T v = go[0] * local / static_cast<T>(n);
          if (np) g.grad_buffer(idp)[i] += v;
          if (nt) g.grad_buffer(idt)[i] -= v;
        }
      });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> detach(const Var<T>& x) {
  return x.graph().record(OpKind::Detach, {x.id()}, x.value(), nullptr);
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t id = x.id();
  return x.graph().record(OpKind::Reshape, {id}, std::move(out),
                          [id](Graph<T>& g, const Tensor<T>& go) {
                            auto& gx = g.grad_buffer(id);
                            for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
                          });
}

template <typename T>
Var<T> flip_w(const Var<T>& x) {
  const auto& v = x.value();
  if (v.rank() == 0) throw ShapeError("flip_w on rank-0 tensor");
  const std::size_t w = v.shape().back();
  const std::size_t rows = w ? v.numel() / w : 0;
  Tensor<T> out(v.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = v[r * w + (w - 1 - c)];
  }
  const std::size_t id = x.id();
  return x.graph().record(OpKind::FlipW, {id}, std::move(out),
                          [id, rows, w](Graph<T>& g, const Tensor<T>& go) {
                            auto& gx = g.grad_buffer(id);
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t c = 0; c < w; ++c) {
                                gx[r * w + (w - 1 - c)] += go[r * w + c];
                              }
                            }
                          });
}

// ---------------------------------------------------------------------------
// Optimiser

template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, T lr, T momentum, T weight_decay) {
  for (auto* p : params) {
    auto& theta = p->value;
    auto& v = p->velocity;
    auto& g = p->grad;
    if (v.shape() != theta.shape()) v = Tensor<T>(theta.shape());
    if (g.shape() != theta.shape()) g = Tensor<T>(theta.shape());
    for (std::size_t i = 0; i < theta.numel(); ++i) {
      v[i] = momentum * v[i] + g[i] + weight_decay * theta[i];
      theta[i] -= lr * v[i];
      g[i] = T(0);
    }
  }
}

#define CASD_INSTANTIATE_OPS(T)                                                           \
  template Var<T> add(const Var<T>&, const Var<T>&);                                      \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                      \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale(const Var<T>&, T);                                                \
  template Var<T> add_scalar(const Var<T>&, T);                                           \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                   \
  template Var<T> transpose(const Var<T>&);                                               \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t,        \
                         std::size_t);                                                    \
  template Var<T> relu(const Var<T>&);                                                    \
  template Var<T> sigmoid(const Var<T>&);                                                 \
  template Var<T> maxpool2d(const Var<T>&);                                               \
  template Var<T> softmax(const Var<T>&, std::size_t);                                    \
  template Var<T> log_softmax(const Var<T>&, std::size_t);                                \
  template Var<T> channel_mean(const Var<T>&);                                            \
  template Var<T> sum_axis(const Var<T>&, std::size_t);                                   \
  template Var<T> sum(const Var<T>&);                                                     \
  template Var<T> mean(const Var<T>&);                                                    \
  template Var<T> elementwise_max(std::span<const Var<T>>);                               \
  template Var<T> l2_norm_sq_mean(const Var<T>&, const Var<T>&);                          \
  template Var<T> smooth_l1(const Var<T>&, const Var<T>&);                                \
  template Var<T> detach(const Var<T>&);                                                  \
  template Var<T> clamp(const Var<T>&, T, T);                                             \
  template Var<T> log(const Var<T>&);                                                     \
  template Var<T> reshape(const Var<T>&, Shape);                                          \
  template Var<T> flip_w(const Var<T>&);                                                  \
  template void sgd_step(std::span<Parameter<T>* const>, T, T, T);

CASD_INSTANTIATE_OPS(float)
CASD_INSTANTIATE_OPS(double)

#undef CASD_INSTANTIATE_OPS

}  // namespace casd
