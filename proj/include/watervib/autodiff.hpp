#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace watervib::ad {

// Minimal reverse-mode autodiff on a per-thread tape. Doubles throughout;
// no broadcasting beyond scalar-times-tensor, so every backward rule stays
// auditable. Values are indices into the tape; graphs are built eagerly, so
// creation order is a topological order.

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

struct Value {
  int i = -1;
  bool valid() const { return i >= 0; }
};

class Tape;

/// Backward rule of an op node; `self` is the node's own index.
using BackwardFn = std::function<void(Tape&, int self)>;

struct Node {
  Shape shape;
  std::vector<double> x;  // forward data
  std::vector<double> g;  // gradient, allocated lazily
  bool requires_grad = false;  // leaf that accumulates a user-visible gradient
  bool needs_grad = false;     // lies on a path to a requires_grad leaf
  BackwardFn backward;
};

class Tape {
 public:
  Value leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    if (data.size() != numel(shape)) throw std::invalid_argument("leaf: data/shape mismatch");
    Node n;
    n.shape = std::move(shape);
    n.x = std::move(data);
    n.requires_grad = requires_grad;
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

  Value constant(Shape shape, std::vector<double> data) {
    return leaf(std::move(shape), std::move(data), false);
  }

  Value scalar(double v) { return constant({1}, {v}); }

  Node& node(Value v) { return nodes_.at(static_cast<std::size_t>(v.i)); }
  const Node& node(Value v) const { return nodes_.at(static_cast<std::size_t>(v.i)); }

  const Shape& shape(Value v) const { return node(v).shape; }
  const std::vector<double>& data(Value v) const { return node(v).x; }
  const std::vector<double>& grad(Value v) const {
    const Node& n = node(v);
    if (n.g.empty()) throw std::runtime_error("grad: no gradient recorded (run backward first)");
    return n.g;
  }
  double scalar_value(Value v) const {
    const Node& n = node(v);
    if (n.x.size() != 1) throw std::runtime_error("scalar_value: tensor is not scalar");
    return n.x[0];
  }

  void ensure_grad(int i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.g.empty()) n.g.assign(n.x.size(), 0.0);
  }

  const std::vector<double>& out_grad(int self) const {
    return nodes_[static_cast<std::size_t>(self)].g;
  }

  /// Reverse sweep from a scalar root. Visits each node exactly once in
  /// reverse creation order.
  void backward(Value root) {
    Node& r = node(root);
    if (r.x.size() != 1) throw std::runtime_error("backward: root must be scalar");
    ensure_grad(root.i);
    r.g[0] += 1.0;
    for (int i = root.i; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.g.empty() && n.backward) n.backward(*this, i);
    }
  }

  int size() const { return static_cast<int>(nodes_.size()); }

  /// Registers an op node. prop_from lists the inputs whose needs_grad taints
  /// the output; backward is dropped entirely when no input needs gradients.
  Value make_op(Shape shape, std::vector<double> data, std::initializer_list<Value> prop_from,
                BackwardFn bw) {
    Node n;
    n.shape = std::move(shape);
    n.x = std::move(data);
    for (Value v : prop_from)
      if (node(v).needs_grad) n.needs_grad = true;
    if (n.needs_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

 private:
  // deque: growing the tape never invalidates references into earlier nodes
  std::deque<Node> nodes_;
};

namespace detail {
inline void check_same_shape(const Tape& t, Value a, Value b, const char* what) {
  if (t.shape(a) != t.shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}
inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

// --- elementwise ----------------------------------------------------------

inline Value add(Tape& t, Value a, Value b) {
  detail::check_same_shape(t, a, b, "add");
  std::vector<double> y = t.data(a);
  const std::vector<double>& xb = t.data(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += xb[i];
  return t.make_op(t.shape(a), std::move(y), {a, b}, [a, b](Tape& tp, int self) {
    const std::vector<double>& g = tp.out_grad(self);
    if (tp.node(a).needs_grad) {
      tp.ensure_grad(a.i);
      std::vector<double>& ga = tp.node(a).g;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.node(b).needs_grad) {
      tp.ensure_grad(b.i);
      std::vector<double>& gb = tp.node(b).g;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Value subtract(Tape& t, Value a, Value b) {
  detail::check_same_shape(t, a, b, "subtract");
  std::vector<double> y = t.data(a);
  const std::vector<double>& xb = t.data(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= xb[i];
  return t.make_op(t.shape(a), std::move(y), {a, b}, [a, b](Tape& tp, int self) {
    const std::vector<double>& g = tp.out_grad(self);
    if (tp.node(a).needs_grad) {
      tp.ensure_grad(a.i);
      std::vector<double>& ga = tp.node(a).g;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.node(b).needs_grad) {
      tp.ensure_grad(b.i);
      std::vector<double>& gb = tp.node(b).g;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Value multiply(Tape& t, Value a, Value b) {
  detail::check_same_shape(t, a, b, "multiply");
  std::vector<double> y = t.data(a);
  const std::vector<double>& xb = t.data(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= xb[i];
  return t.make_op(t.shape(a), std::move(y), {a, b}, [a, b](Tape& tp, int self) {
    const std::vector<double>& g = tp.out_grad(self);
    if (tp.node(a).needs_grad) {
      tp.ensure_grad(a.i);
      std::vector<double>& ga = tp.node(a).g;
      const std::vector<double>& xb2 = tp.data(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb2[i];
    }
    if (tp.node(b).needs_grad) {
      tp.ensure_grad(b.i);
      std::vector<double>& gb = tp.node(b).g;
      const std::vector<double>& xa = tp.data(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
    }
  });
}

/// Scalar-times-tensor (the only broadcasting allowed).
inline Value scale(Tape& t, Value a, double c) {
  std::vector<double> y = t.data(a);
  for (double& v : y) v *= c;
  return t.make_op(t.shape(a), std::move(y), {a}, [a, c](Tape& tp, int self) {
    if (!tp.node(a).needs_grad) return;
    const std::vector<double>& g = tp.out_grad(self);
    tp.ensure_grad(a.i);
    std::vector<double>& ga = tp.node(a).g;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

inline Value relu(Tape& t, Value a) {
  std::vector<double> y = t.data(a);
  for (double& v : y) v = v > 0.0 ? v : 0.0;
  return t.make_op(t.shape(a), std::move(y), {a}, [a](Tape& tp, int self) {
    if (!tp.node(a).needs_grad) return;
    const std::vector<double>& g = tp.out_grad(self);
    const std::vector<double>& x = tp.data(a);
    tp.ensure_grad(a.i);
    std::vector<double>& ga = tp.node(a).g;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

inline Value sigmoid(Tape& t, Value a) {
  std::vector<double> y = t.data(a);
  for (double& v : y) v = detail::stable_sigmoid(v);
  return t.make_op(t.shape(a), std::move(y), {a}, [a](Tape& tp, int self) {
    if (!tp.node(a).needs_grad) return;
    const std::vector<double>& g = tp.out_grad(self);
    const std::vector<double>& y2 = tp.data(Value{self});
    tp.ensure_grad(a.i);
    std::vector<double>& ga = tp.node(a).g;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y2[i] * (1.0 - y2[i]);
  });
}

inline Value exp_(Tape& t, Value a) {
  std::vector<double> y = t.data(a);
  for (double& v : y) v = std::exp(v);
  return t.make_op(t.shape(a), std::move(y), {a}, [a](Tape& tp, int self) {
    if (!tp.node(a).needs_grad) return;
    const std::vector<double>& g = tp.out_grad(self);
    const std::vector<double>& y2 = tp.data(Value{self});
    tp.ensure_grad(a.i);
    std::vector<double>& ga = tp.node(a).g;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y2[i];
  });
}

inline Value log_(Tape& t, Value a) {
  std::vector<double> y = t.data(a);
  for (double& v : y) {
    if (!(v > 0.0)) throw std::domain_error("log: nonpositive input");
    v = std::log(v);
  }
  return t.make_op(t.shape(a), std::move(y), {a}, [a](Tape& tp, int self) {
    if (!tp.node(a).needs_grad) return;
    const std::vector<double>& g = tp.out_grad(self);
    const std::vector<double>& x = tp.data(a);
    tp.ensure_grad(a.i);
    std::vector<double>& ga = tp.node(a).g;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

/// Clamp to [lo, hi]; gradient is 1 inside the interval and 0 outside.
inline Value clip(Tape& t, Value a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clip: lo > hi");
  std::vector<double> y = t.data(a);
  for (double& v : y) v = v < lo ? lo : (v > hi ? hi : v);
  return t.make_op(t.shape(a), std::move(y), {a}, [a, lo, hi](Tape& tp, int self) {
    if (!tp.node(a).needs_grad) return;
    const std::vector<double>& g = tp.out_grad(self);
    const std::vector<double>& x = tp.data(a);
    tp.ensure_grad(a.i);
    std::vector<double>& ga = tp.node(a).g;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] >= lo && x[i] <= hi) ga[i] += g[i];
  });
}

// --- reductions ------------------------------------------------------------

inline Value sum(Tape& t, Value a) {
  double s = 0.0;
  for (double v : t.data(a)) s += v;
  return t.make_op({1}, {s}, {a}, [a](Tape& tp, int self) {
    if (!tp.node(a).needs_grad) return;
    const double g = tp.out_grad(self)[0];
    tp.ensure_grad(a.i);
    for (double& v : tp.node(a).g) v += g;
  });
}

inline Value mean(Tape& t, Value a) {
  const std::size_t n = t.data(a).size();
  double s = 0.0;
  for (double v : t.data(a)) s += v;
  s /= static_cast<double>(n);
  return t.make_op({1}, {s}, {a}, [a, n](Tape& tp, int self) {
    if (!tp.node(a).needs_grad) return;
    const double g = tp.out_grad(self)[0] / static_cast<double>(n);
    tp.ensure_grad(a.i);
    for (double& v : tp.node(a).g) v += g;
  });
}

// --- linear algebra ---------------------------------------------------------

/// matmul of 2-D tensors: [m,k] x [k,n] -> [m,n].
inline Value matmul(Tape& t, Value a, Value b) {
  const Shape& sa = t.shape(a);
  const Shape& sb = t.shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw std::invalid_argument("matmul: incompatible shapes");
  const int m = sa[0], k = sa[1], n = sb[1];
  std::vector<double> y(static_cast<std::size_t>(m) * n, 0.0);
  {
    const std::vector<double>& xa = t.data(a);
    const std::vector<double>& xb = t.data(b);
    for (int i = 0; i < m; ++i)
      for (int l = 0; l < k; ++l) {
        const double av = xa[static_cast<std::size_t>(i) * k + l];
        const double* br = xb.data() + static_cast<std::size_t>(l) * n;
        double* yr = y.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) yr[j] += av * br[j];
      }
  }
  return t.make_op({m, n}, std::move(y), {a, b}, [a, b, m, k, n](Tape& tp, int self) {
    const std::vector<double>& g = tp.out_grad(self);
    if (tp.node(a).needs_grad) {
      tp.ensure_grad(a.i);
      std::vector<double>& ga = tp.node(a).g;
      const std::vector<double>& xb = tp.data(b);
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
          const double* gr = g.data() + static_cast<std::size_t>(i) * n;
          const double* br = xb.data() + static_cast<std::size_t>(l) * n;
          double s = 0.0;
          for (int j = 0; j < n; ++j) s += gr[j] * br[j];
          ga[static_cast<std::size_t>(i) * k + l] += s;
        }
    }
    if (tp.node(b).needs_grad) {
      tp.ensure_grad(b.i);
      std::vector<double>& gb = tp.node(b).g;
      const std::vector<double>& xa = tp.data(a);
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
          const double av = xa[static_cast<std::size_t>(i) * k + l];
          const double* gr = g.data() + static_cast<std::size_t>(i) * n;
          double* gbr = gb.data() + static_cast<std::size_t>(l) * n;
          for (int j = 0; j < n; ++j) gbr[j] += av * gr[j];
        }
    }
  });
}

/// Adds a [K] bias across the rows of a [R,K] tensor.
inline Value bias_add(Tape& t, Value x, Value b) {
  const Shape& sx = t.shape(x);
  const Shape& sb = t.shape(b);
  if (sx.size() != 2 || sb.size() != 1 || sb[0] != sx[1])
    throw std::invalid_argument("bias_add: incompatible shapes");
  const int r = sx[0], k = sx[1];
  std::vector<double> y = t.data(x);
  {
    const std::vector<double>& xb = t.data(b);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < k; ++j) y[static_cast<std::size_t>(i) * k + j] += xb[j];
  }
  return t.make_op(sx, std::move(y), {x, b}, [x, b, r, k](Tape& tp, int self) {
    const std::vector<double>& g = tp.out_grad(self);
    if (tp.node(x).needs_grad) {
      tp.ensure_grad(x.i);
      std::vector<double>& gx = tp.node(x).g;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.node(b).needs_grad) {
      tp.ensure_grad(b.i);
      std::vector<double>& gb = tp.node(b).g;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < k; ++j) gb[j] += g[static_cast<std::size_t>(i) * k + j];
    }
  });
}

inline Value linear(Tape& t, Value x, Value w, Value b) {
  return bias_add(t, matmul(t, x, w), b);
}

// --- convolution -------------------------------------------------------------

namespace detail {

// One kernel row applied to one source row: y[x] += w0*src[x-1] + w1*src[x]
// + w2*src[x+1], zero-padded at the ends. The interior loop is a contiguous
// 3-FMA pass the compiler vectorizes.
inline void conv3x3_accum_row(double* yr, const double* src, double w0, double w1, double w2,
                              int W) {
  yr[0] += w1 * src[0] + w2 * src[1];
  for (int x = 1; x < W - 1; ++x) yr[x] += w0 * src[x - 1] + w1 * src[x] + w2 * src[x + 1];
  yr[W - 1] += w0 * src[W - 2] + w1 * src[W - 1];
}

// 3x3, stride 1, zero padding. x: [B,C,H,W], w: [O,C,3,3], y: [B,O,H,W].
inline void conv3x3_forward(const double* x, const double* w, const double* b, double* y,
                            int B, int C, int O, int H, int W) {
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int bi = 0; bi < B; ++bi) {
    for (int o = 0; o < O; ++o) {
      double* yp = y + (static_cast<std::size_t>(bi) * O + o) * plane;
      const double bias = b ? b[o] : 0.0;
      for (std::size_t i = 0; i < plane; ++i) yp[i] = bias;
      for (int c = 0; c < C; ++c) {
        const double* xp = x + (static_cast<std::size_t>(bi) * C + c) * plane;
        const double* wk = w + (static_cast<std::size_t>(o) * C + c) * 9;
        for (int yy = 0; yy < H; ++yy) {
          double* yr = yp + static_cast<std::size_t>(yy) * W;
          if (yy > 0)
            conv3x3_accum_row(yr, xp + static_cast<std::size_t>(yy - 1) * W, wk[0], wk[1], wk[2], W);
          conv3x3_accum_row(yr, xp + static_cast<std::size_t>(yy) * W, wk[3], wk[4], wk[5], W);
          if (yy < H - 1)
            conv3x3_accum_row(yr, xp + static_cast<std::size_t>(yy + 1) * W, wk[6], wk[7], wk[8], W);
        }
      }
    }
  }
}

// Accumulates the 9 tap correlations of one (gy, x) plane pair into s9:
// s9[3*ky+kx] += sum over valid (y,x) of gy[y][x] * src[y+ky-1][x+kx-1].
// Lane-wise partial sums break the accumulation dependency so the loops
// vectorize; the summation order is fixed, keeping runs reproducible.
inline void conv3x3_wgrad_plane(const double* gyp, const double* xp, double* s9, int H, int W) {
  constexpr int L = 8;
  double lanes[9][L] = {};
  for (int yy = 0; yy < H; ++yy) {
    const double* gr = gyp + static_cast<std::size_t>(yy) * W;
    for (int r = 0; r < 3; ++r) {
      const int sy = yy + r - 1;
      if (sy < 0 || sy >= H) continue;
      const double* src = xp + static_cast<std::size_t>(sy) * W;
      double* l0 = lanes[3 * r + 0];
      double* l1 = lanes[3 * r + 1];
      double* l2 = lanes[3 * r + 2];
      s9[3 * r + 1] += gr[0] * src[0];
      s9[3 * r + 2] += gr[0] * src[1];
      s9[3 * r + 0] += gr[W - 1] * src[W - 2];
      s9[3 * r + 1] += gr[W - 1] * src[W - 1];
      int x = 1;
      for (; x + L <= W - 1; x += L)
        for (int j = 0; j < L; ++j) {
          l0[j] += gr[x + j] * src[x + j - 1];
          l1[j] += gr[x + j] * src[x + j];
          l2[j] += gr[x + j] * src[x + j + 1];
        }
      for (; x < W - 1; ++x) {
        l0[0] += gr[x] * src[x - 1];
        l1[0] += gr[x] * src[x];
        l2[0] += gr[x] * src[x + 1];
      }
    }
  }
  for (int t = 0; t < 9; ++t)
    for (int j = 0; j < L; ++j) s9[t] += lanes[t][j];
}

inline void conv3x3_backward(const double* x, const double* w, const double* gy,
                             double* gx, double* gw, double* gb,
                             int B, int C, int O, int H, int W) {
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int bi = 0; bi < B; ++bi) {
    for (int o = 0; o < O; ++o) {
      const double* gyp = gy + (static_cast<std::size_t>(bi) * O + o) * plane;
      if (gb) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += gyp[i];
        gb[o] += s;
      }
      for (int c = 0; c < C; ++c) {
        const double* xp = x + (static_cast<std::size_t>(bi) * C + c) * plane;
        const double* wk = w + (static_cast<std::size_t>(o) * C + c) * 9;
        if (gx) {
          // dX is the correlation of gy with the 180-degree-rotated kernel;
          // reuse the forward row pass with flipped taps.
          double* gxp = gx + (static_cast<std::size_t>(bi) * C + c) * plane;
          for (int yy = 0; yy < H; ++yy) {
            double* gxr = gxp + static_cast<std::size_t>(yy) * W;
            if (yy > 0)
              conv3x3_accum_row(gxr, gyp + static_cast<std::size_t>(yy - 1) * W, wk[8], wk[7],
                                wk[6], W);
            conv3x3_accum_row(gxr, gyp + static_cast<std::size_t>(yy) * W, wk[5], wk[4], wk[3], W);
            if (yy < H - 1)
              conv3x3_accum_row(gxr, gyp + static_cast<std::size_t>(yy + 1) * W, wk[2], wk[1],
                                wk[0], W);
          }
        }
        if (gw) {
          double* gwk = gw + (static_cast<std::size_t>(o) * C + c) * 9;
          double s[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
          conv3x3_wgrad_plane(gyp, xp, s, H, W);
          for (int k = 0; k < 9; ++k) gwk[k] += s[k];
        }
      }
    }
  }
}

}  // namespace detail

/// conv2d, fixed 3x3 kernel, stride 1, zero padding.
/// x: [B,C,H,W], w: [O,C,3,3], b: [O] (pass an invalid Value for no bias).
inline Value conv2d(Tape& t, Value x, Value w, Value b = Value{}) {
  const Shape& sx = t.shape(x);
  const Shape& sw = t.shape(w);
  if (sx.size() != 4 || sw.size() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != sx[1])
    throw std::invalid_argument("conv2d: expects x [B,C,H,W], w [O,C,3,3]");
  const int B = sx[0], C = sx[1], H = sx[2], W = sx[3], O = sw[0];
  const double* bias = nullptr;
  if (b.valid()) {
    const Shape& sb = t.shape(b);
    if (sb.size() != 1 || sb[0] != O) throw std::invalid_argument("conv2d: bias must be [O]");
    bias = t.data(b).data();
  }
  std::vector<double> y(static_cast<std::size_t>(B) * O * H * W);
  detail::conv3x3_forward(t.data(x).data(), t.data(w).data(), bias, y.data(), B, C, O, H, W);
  auto bw = [x, w, b, B, C, O, H, W](Tape& tp, int self) {
    const std::vector<double>& g = tp.out_grad(self);
    double* gx = nullptr;
    double* gw = nullptr;
    double* gb = nullptr;
    if (tp.node(x).needs_grad) {
      tp.ensure_grad(x.i);
      gx = tp.node(x).g.data();
    }
    if (tp.node(w).needs_grad) {
      tp.ensure_grad(w.i);
      gw = tp.node(w).g.data();
    }
    if (b.valid() && tp.node(b).needs_grad) {
      tp.ensure_grad(b.i);
      gb = tp.node(b).g.data();
    }
    detail::conv3x3_backward(tp.data(x).data(), tp.data(w).data(), g.data(), gx, gw, gb,
                             B, C, O, H, W);
  };
  if (b.valid()) return t.make_op({B, O, H, W}, std::move(y), {x, w, b}, bw);
  return t.make_op({B, O, H, W}, std::move(y), {x, w}, bw);
}

// --- losses -----------------------------------------------------------------

/// Binary cross-entropy from logits, mean over all entries, in the stable
/// softplus form: mean( max(l,0) - l*t + log1p(exp(-|l|)) ).
inline Value bce_with_logits(Tape& t, Value logits, const std::vector<double>& targets) {
  const std::vector<double>& l = t.data(logits);
  if (l.size() != targets.size()) throw std::invalid_argument("bce: length mismatch");
  for (double tv : targets)
    if (tv != 0.0 && tv != 1.0) throw std::invalid_argument("bce: targets must be 0/1");
  const std::size_t n = l.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double li = l[i];
    s += std::max(li, 0.0) - li * targets[i] + std::log1p(std::exp(-std::abs(li)));
  }
  s /= static_cast<double>(n);
  return t.make_op({1}, {s}, {logits}, [logits, targets, n](Tape& tp, int self) {
    if (!tp.node(logits).needs_grad) return;
    const double g = tp.out_grad(self)[0] / static_cast<double>(n);
    const std::vector<double>& l2 = tp.data(logits);
    tp.ensure_grad(logits.i);
    std::vector<double>& gl = tp.node(logits).g;
    for (std::size_t i = 0; i < n; ++i)
      gl[i] += g * (detail::stable_sigmoid(l2[i]) - targets[i]);
  });
}

/// KL( N(mu, exp(logvar)) || N(0, I) ) = 1/2 sum_d (mu^2 + e^lv - lv - 1),
/// averaged over rows when given a [B,D] batch. Callers clip logvar first.
inline Value gaussian_kl(Tape& t, Value mu, Value logvar) {
  detail::check_same_shape(t, mu, logvar, "gaussian_kl");
  const Shape& s = t.shape(mu);
  const std::size_t total = t.data(mu).size();
  const std::size_t rows = s.size() >= 2 ? total / static_cast<std::size_t>(s.back()) : 1;
  const std::vector<double>& m = t.data(mu);
  const std::vector<double>& lv = t.data(logvar);
  double acc = 0.0;
  for (std::size_t i = 0; i < total; ++i)
    acc += m[i] * m[i] + std::exp(lv[i]) - lv[i] - 1.0;
  acc *= 0.5 / static_cast<double>(rows);
  return t.make_op({1}, {acc}, {mu, logvar}, [mu, logvar, rows, total](Tape& tp, int self) {
    const double g = tp.out_grad(self)[0] / static_cast<double>(rows);
    if (tp.node(mu).needs_grad) {
      tp.ensure_grad(mu.i);
      std::vector<double>& gm = tp.node(mu).g;
      const std::vector<double>& m2 = tp.data(mu);
      for (std::size_t i = 0; i < total; ++i) gm[i] += g * m2[i];
    }
    if (tp.node(logvar).needs_grad) {
      tp.ensure_grad(logvar.i);
      std::vector<double>& glv = tp.node(logvar).g;
      const std::vector<double>& lv2 = tp.data(logvar);
      for (std::size_t i = 0; i < total; ++i) glv[i] += g * 0.5 * (std::exp(lv2[i]) - 1.0);
    }
  });
}

// --- spatial ops used by the watermark pipeline ------------------------------

/// Mean over each spatial quadrant: [B,C,H,W] -> [B, 4*C]
/// (per channel: top-left, top-right, bottom-left, bottom-right).
inline Value quadrant_pool(Tape& t, Value x) {
  const Shape& s = t.shape(x);
  if (s.size() != 4 || s[2] % 2 || s[3] % 2)
    throw std::invalid_argument("quadrant_pool: expects [B,C,H,W] with even H, W");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  const int hh = H / 2, hw = W / 2;
  const double inv = 1.0 / (static_cast<double>(hh) * hw);
  const std::vector<double>& xd = t.data(x);
  std::vector<double> y(static_cast<std::size_t>(B) * C * 4, 0.0);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* xp = xd.data() + (static_cast<std::size_t>(b) * C + c) * H * W;
      for (int q = 0; q < 4; ++q) {
        const int y0 = (q / 2) * hh, x0 = (q % 2) * hw;
        double acc = 0.0;
        for (int yy = y0; yy < y0 + hh; ++yy)
          for (int xx = x0; xx < x0 + hw; ++xx) acc += xp[static_cast<std::size_t>(yy) * W + xx];
        y[(static_cast<std::size_t>(b) * C + c) * 4 + q] = acc * inv;
      }
    }
  return t.make_op({B, C * 4}, std::move(y), {x}, [x, B, C, H, W, hh, hw, inv](Tape& tp, int self) {
    if (!tp.node(x).needs_grad) return;
    const std::vector<double>& g = tp.out_grad(self);
    tp.ensure_grad(x.i);
    std::vector<double>& gx = tp.node(x).g;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        double* gp = gx.data() + (static_cast<std::size_t>(b) * C + c) * H * W;
        for (int q = 0; q < 4; ++q) {
          const double gv = g[(static_cast<std::size_t>(b) * C + c) * 4 + q] * inv;
          const int y0 = (q / 2) * hh, x0 = (q % 2) * hw;
          for (int yy = y0; yy < y0 + hh; ++yy)
            for (int xx = x0; xx < x0 + hw; ++xx)
              gp[static_cast<std::size_t>(yy) * W + xx] += gv;
        }
      }
  });
}

namespace detail {

// Bilinear sample weights for 1-D resize (align_corners=false convention).
struct Lerp {
  int i0, i1;
  double w0, w1;
};

inline std::vector<Lerp> lerp_table(int in, int out) {
  std::vector<Lerp> tb(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double sx = (o + 0.5) * scale - 0.5;
    if (sx < 0.0) sx = 0.0;
    if (sx > in - 1.0) sx = in - 1.0;
    const int i0 = static_cast<int>(sx);
    const int i1 = std::min(i0 + 1, in - 1);
    const double f = sx - i0;
    tb[o] = {i0, i1, 1.0 - f, f};
  }
  return tb;
}

}  // namespace detail

/// Bilinear resize of [B,C,H,W] to [B,C,Ho,Wo].
inline Value resize_bilinear(Tape& t, Value x, int ho, int wo) {
  const Shape& s = t.shape(x);
  if (s.size() != 4) throw std::invalid_argument("resize_bilinear: expects [B,C,H,W]");
  if (ho < 1 || wo < 1) throw std::invalid_argument("resize_bilinear: bad output size");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  const auto ty = detail::lerp_table(H, ho);
  const auto tx = detail::lerp_table(W, wo);
  const std::vector<double>& xd = t.data(x);
  std::vector<double> y(static_cast<std::size_t>(B) * C * ho * wo);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* xp = xd.data() + (static_cast<std::size_t>(b) * C + c) * H * W;
      double* yp = y.data() + (static_cast<std::size_t>(b) * C + c) * ho * wo;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const auto& ly = ty[oy];
          const auto& lx = tx[ox];
          yp[static_cast<std::size_t>(oy) * wo + ox] =
              ly.w0 * (lx.w0 * xp[static_cast<std::size_t>(ly.i0) * W + lx.i0] +
                       lx.w1 * xp[static_cast<std::size_t>(ly.i0) * W + lx.i1]) +
              ly.w1 * (lx.w0 * xp[static_cast<std::size_t>(ly.i1) * W + lx.i0] +
                       lx.w1 * xp[static_cast<std::size_t>(ly.i1) * W + lx.i1]);
        }
    }
  return t.make_op({B, C, ho, wo}, std::move(y), {x},
                   [x, B, C, H, W, ho, wo, ty, tx](Tape& tp, int self) {
    if (!tp.node(x).needs_grad) return;
    const std::vector<double>& g = tp.out_grad(self);
    tp.ensure_grad(x.i);
    std::vector<double>& gx = tp.node(x).g;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        double* gp = gx.data() + (static_cast<std::size_t>(b) * C + c) * H * W;
        const double* gyp = g.data() + (static_cast<std::size_t>(b) * C + c) * ho * wo;
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const auto& ly = ty[oy];
            const auto& lx = tx[ox];
            const double gv = gyp[static_cast<std::size_t>(oy) * wo + ox];
            gp[static_cast<std::size_t>(ly.i0) * W + lx.i0] += gv * ly.w0 * lx.w0;
            gp[static_cast<std::size_t>(ly.i0) * W + lx.i1] += gv * ly.w0 * lx.w1;
            gp[static_cast<std::size_t>(ly.i1) * W + lx.i0] += gv * ly.w1 * lx.w0;
            gp[static_cast<std::size_t>(ly.i1) * W + lx.i1] += gv * ly.w1 * lx.w1;
          }
      }
  });
}

namespace detail {

// Separable Gaussian, radius 2 (5 taps), sigma 1, reflect-101 padding.
inline const double* blur5_kernel() {
  static const double k[5] = {0.054488684549643486, 0.24420134200323349,
                              0.40261994689424603, 0.24420134200323349,
                              0.054488684549643486};
  return k;
}

inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

// adjoint=false: y[o] += k[d] x[reflect(o+d)]; adjoint=true scatters instead.
inline void blur5_plane(const double* x, double* y, int H, int W, bool adjoint,
                        std::vector<double>& tmp) {
  const double* k = blur5_kernel();
  tmp.assign(static_cast<std::size_t>(H) * W, 0.0);
  for (int yy = 0; yy < H; ++yy) {
    const double* xr = x + static_cast<std::size_t>(yy) * W;
    double* tr = tmp.data() + static_cast<std::size_t>(yy) * W;
    for (int xx = 0; xx < W; ++xx)
      for (int d = -2; d <= 2; ++d) {
        if (!adjoint)
          tr[xx] += k[d + 2] * xr[reflect101(xx + d, W)];
        else
          tr[reflect101(xx + d, W)] += k[d + 2] * xr[xx];
      }
  }
  for (int yy = 0; yy < H; ++yy)
    for (int xx = 0; xx < W; ++xx)
      for (int d = -2; d <= 2; ++d) {
        if (!adjoint)
          y[static_cast<std::size_t>(yy) * W + xx] +=
              k[d + 2] * tmp[static_cast<std::size_t>(reflect101(yy + d, H)) * W + xx];
        else
          y[static_cast<std::size_t>(reflect101(yy + d, H)) * W + xx] +=
              k[d + 2] * tmp[static_cast<std::size_t>(yy) * W + xx];
      }
}

}  // namespace detail

/// 5-tap separable Gaussian blur (sigma 1, reflect padding) of [B,C,H,W].
inline Value gaussian_blur5(Tape& t, Value x) {
  const Shape& s = t.shape(x);
  if (s.size() != 4) throw std::invalid_argument("gaussian_blur5: expects [B,C,H,W]");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::vector<double>& xd = t.data(x);
  std::vector<double> y(xd.size(), 0.0);
  std::vector<double> tmp;
  for (int p = 0; p < B * C; ++p)
    detail::blur5_plane(xd.data() + p * plane, y.data() + p * plane, H, W, false, tmp);
  return t.make_op(s, std::move(y), {x}, [x, B, C, H, W, plane](Tape& tp, int self) {
    if (!tp.node(x).needs_grad) return;
    const std::vector<double>& g = tp.out_grad(self);
    tp.ensure_grad(x.i);
    std::vector<double>& gx = tp.node(x).g;
    std::vector<double> tmp2;
    for (int p = 0; p < B * C; ++p)
      detail::blur5_plane(g.data() + p * plane, gx.data() + p * plane, H, W, true, tmp2);
  });
}

namespace detail {

inline const std::vector<int>& zigzag8() {
  static const std::vector<int> order = [] {
    std::vector<int> o;
    o.reserve(64);
    for (int s = 0; s < 15; ++s) {
      if (s % 2 == 0) {  // up-right
        for (int y = std::min(s, 7); y >= std::max(0, s - 7); --y) o.push_back(y * 8 + (s - y));
      } else {  // down-left
        for (int y = std::max(0, s - 7); y <= std::min(s, 7); ++y) o.push_back(y * 8 + (s - y));
      }
    }
    return o;
  }();
  return order;
}

inline const double* dct8_matrix() {
  static const std::vector<double> d = [] {
    std::vector<double> m(64);
    const double pi = 3.14159265358979323846;
    for (int j = 0; j < 8; ++j) {
      const double cj = j == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int n = 0; n < 8; ++n) m[j * 8 + n] = cj * std::cos(pi * (2 * n + 1) * j / 16.0);
    }
    return m;
  }();
  return d.data();
}

// In-place on one 8x8 block: DCT, zero all but the first `keep` zigzag
// coefficients, inverse DCT. Orthonormal + diagonal mask => self-adjoint.
inline void dct8_mask_block(double* blk, int keep) {
  const double* D = dct8_matrix();
  double t[64], f[64];
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      double s = 0.0;
      for (int n = 0; n < 8; ++n) s += D[i * 8 + n] * blk[n * 8 + j];
      t[i * 8 + j] = s;
    }
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      double s = 0.0;
      for (int n = 0; n < 8; ++n) s += t[i * 8 + n] * D[j * 8 + n];
      f[i * 8 + j] = s;
    }
  const auto& zz = zigzag8();
  for (int k = keep; k < 64; ++k) f[zz[k]] = 0.0;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      double s = 0.0;
      for (int n = 0; n < 8; ++n) s += D[n * 8 + i] * f[n * 8 + j];
      t[i * 8 + j] = s;
    }
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      double s = 0.0;
      for (int n = 0; n < 8; ++n) s += t[i * 8 + n] * D[n * 8 + j];
      blk[i * 8 + j] = s;
    }
}

inline void dct8_mask_plane(const double* x, double* y, int H, int W, int keep) {
  double blk[64];
  for (int by = 0; by < H; by += 8)
    for (int bx = 0; bx < W; bx += 8) {
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
          blk[i * 8 + j] = x[static_cast<std::size_t>(by + i) * W + bx + j];
      dct8_mask_block(blk, keep);
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
          y[static_cast<std::size_t>(by + i) * W + bx + j] = blk[i * 8 + j];
    }
}

}  // namespace detail

/// Per-8x8-block DCT coefficient masking: keeps the first `keep` zigzag
/// coefficients. Requires H, W divisible by 8. Linear and self-adjoint.
inline Value dct8_mask(Tape& t, Value x, int keep) {
  const Shape& s = t.shape(x);
  if (s.size() != 4 || s[2] % 8 || s[3] % 8)
    throw std::invalid_argument("dct8_mask: expects [B,C,H,W] with H, W divisible by 8");
  if (keep < 1 || keep > 64) throw std::invalid_argument("dct8_mask: keep must be in [1,64]");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::vector<double>& xd = t.data(x);
  std::vector<double> y(xd.size());
  for (int p = 0; p < B * C; ++p)
    detail::dct8_mask_plane(xd.data() + p * plane, y.data() + p * plane, H, W, keep);
  return t.make_op(s, std::move(y), {x}, [x, B, C, H, W, keep, plane](Tape& tp, int self) {
    if (!tp.node(x).needs_grad) return;
    const std::vector<double>& g = tp.out_grad(self);
    tp.ensure_grad(x.i);
    std::vector<double>& gx = tp.node(x).g;
    std::vector<double> tmp(plane);
    for (int p = 0; p < B * C; ++p) {
      detail::dct8_mask_plane(g.data() + p * plane, tmp.data(), H, W, keep);
      double* gp = gx.data() + p * plane;
      for (std::size_t i = 0; i < plane; ++i) gp[i] += tmp[i];
    }
  });
}

// --- finite-difference validation --------------------------------------------

/// Central-difference check of a scalar-valued composition against the tape
/// gradient. Returns the max relative error over every coordinate of every
/// input; reports rather than throws on mismatch.
inline double grad_check(
    const std::function<Value(Tape&, const std::vector<Value>&)>& f,
    const std::vector<std::pair<Shape, std::vector<double>>>& inputs, double h = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    Tape t;
    std::vector<Value> leaves;
    leaves.reserve(inputs.size());
    for (const auto& [shape, data] : inputs) leaves.push_back(t.leaf(shape, data, true));
    Value out = f(t, leaves);
    if (t.data(out).size() != 1) throw std::invalid_argument("grad_check: f must be scalar");
    t.backward(out);
    for (Value v : leaves) {
      const Node& n = t.node(v);
      analytic.push_back(n.g.empty() ? std::vector<double>(n.x.size(), 0.0) : n.g);
    }
  }
  auto eval = [&](const std::vector<std::vector<double>>& xs) {
    Tape t;
    std::vector<Value> leaves;
    for (std::size_t k = 0; k < inputs.size(); ++k)
      leaves.push_back(t.constant(inputs[k].first, xs[k]));
    return t.scalar_value(f(t, leaves));
  };
  std::vector<std::vector<double>> xs;
  for (const auto& [shape, data] : inputs) xs.push_back(data);
  double max_rel = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      const double x0 = xs[k][i];
      xs[k][i] = x0 + h;
      const double fp = eval(xs);
      xs[k][i] = x0 - h;
      const double fm = eval(xs);
      xs[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace watervib::ad
