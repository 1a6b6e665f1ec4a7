#include "lglab/tape.hpp"

#include <algorithm>
#include <cmath>

#include "lglab/errors.hpp"

namespace lglab::ad {
namespace {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C) {
  for (int i = 0; i < M; ++i) {
    T* c = C + static_cast<std::size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const T a = A[static_cast<std::size_t>(i) * K + k];
      const T* b = B + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<std::size_t>(i) * K;
    for (int j = 0; j < N; ++j) {
      const T* b = B + static_cast<std::size_t>(j) * K;
      T s = 0;
      for (int k = 0; k < K; ++k) s += a[k] * b[k];
      C[static_cast<std::size_t>(i) * N + j] += s;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C) {
  for (int k = 0; k < K; ++k) {
    const T* b = B + static_cast<std::size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      const T a = A[static_cast<std::size_t>(k) * M + i];
      T* c = C + static_cast<std::size_t>(i) * N;
      for (int j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

struct ConvGeometry {
  int channels, height, width;   // image side
  int kernel, stride, padding;
  int out_h, out_w;              // column grid
  int rows() const { return channels * kernel * kernel; }
  int cols() const { return out_h * out_w; }
};

// cols[(c*k + ky)*k + kx, oy*out_w + ox] = img[c, oy*s + ky - p, ox*s + kx - p]
template <typename T>
void im2col(const ConvGeometry& g, const T* img, T* cols) {
  const int k = g.kernel;
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * g.cols();
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride + ky - g.padding;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride + kx - g.padding;
            row[oy * g.out_w + ox] =
                (iy >= 0 && iy < g.height && ix >= 0 && ix < g.width)
                    ? img[(static_cast<std::size_t>(c) * g.height + iy) * g.width + ix]
                    : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back onto the image.
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* img) {
  const int k = g.kernel;
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * g.cols();
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride + ky - g.padding;
          if (iy < 0 || iy >= g.height) continue;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride + kx - g.padding;
            if (ix < 0 || ix >= g.width) continue;
            img[(static_cast<std::size_t>(c) * g.height + iy) * g.width + ix] +=
                row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw ValidationError(std::string(op) + ": " + detail);
}

void require_same(std::string_view op, const Shape& a, const Shape& b) {
  if (a != b) shape_error(op, "shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::variable: return "variable";
    case OpKind::parameter: return "parameter";
    case OpKind::dense: return "dense";
    case OpKind::conv2d: return "conv2d";
    case OpKind::conv2d_transpose: return "conv2d_transpose";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::affine: return "affine";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::clamp: return "clamp";
    case OpKind::gaussian_sample: return "gaussian_sample";
  }
  return "unknown";
}

template <typename T>
Var Tape<T>::push(OpKind kind, std::vector<int> inputs, Tensor<T> value,
                  std::function<void(Tape&, int)> pullback) {
  if (!value.all_finite()) {
    throw OverflowError(std::string(to_string(kind)) + " produced non-finite values");
  }
  Node n;
  n.kind = kind;
  n.tracks = kind == OpKind::variable || kind == OpKind::parameter;
  for (const int in : inputs) n.tracks = n.tracks || nodes_[in].tracks;
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  n.pullback = std::move(pullback);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw ValidationError("variable does not belong to this tape");
  }
  return nodes_[v.id];
}

template <typename T>
Tensor<T>& Tape<T>::accumulate(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  return push(OpKind::constant, {}, std::move(value), nullptr);
}

template <typename T>
Var Tape<T>::variable(Tensor<T> value) {
  return push(OpKind::variable, {}, std::move(value), nullptr);
}

template <typename T>
Var Tape<T>::param(const ParamStore<T>& store, const std::string& name) {
  if (store_ == nullptr) store_ = &store;
  if (store_ != &store) throw ValidationError("tape is bound to a different parameter store");
  if (const auto it = param_nodes_.find(name); it != param_nodes_.end()) {
    return Var{it->second};
  }
  const Var v = push(OpKind::parameter, {}, store.at(name), nullptr);
  nodes_[v.id].param_name = name;
  param_nodes_[name] = v.id;
  return v;
}

template <typename T>
Var Tape<T>::dense(Var x, Var weight, Var bias) {
  const auto& xs = node(x).value.shape();
  const auto& ws = node(weight).value.shape();
  const auto& bs = node(bias).value.shape();
  if (xs.size() != 2 || ws.size() != 2 || bs.size() != 1 || xs[1] != ws[1] ||
      bs[0] != ws[0]) {
    shape_error("dense", "x " + shape_string(xs) + ", weight " + shape_string(ws) +
                             ", bias " + shape_string(bs));
  }
  const int n = xs[0], in = xs[1], out = ws[0];
  Tensor<T> y({n, out});
  for (int i = 0; i < n; ++i) {
    std::copy_n(node(bias).value.data(), out, y.data() + static_cast<std::size_t>(i) * out);
  }
  gemm_nt(n, out, in, node(x).value.data(), node(weight).value.data(), y.data());
  return push(OpKind::dense, {x.id, weight.id, bias.id}, std::move(y),
              [n, in, out](Tape& t, int self) {
                const Node& me = t.nodes_[self];
                const int xi = me.inputs[0], wi = me.inputs[1], bi = me.inputs[2];
                const T* dy = me.grad.data();
                if (t.wants(xi)) {
                  gemm_nn(n, in, out, dy, t.nodes_[wi].value.data(), t.accumulate(xi).data());
                }
                if (t.wants(wi)) {
                  gemm_tn(out, in, n, dy, t.nodes_[xi].value.data(), t.accumulate(wi).data());
                }
                if (t.wants(bi)) {
                  T* db = t.accumulate(bi).data();
                  for (int i = 0; i < n; ++i) {
                    for (int o = 0; o < out; ++o) db[o] += dy[static_cast<std::size_t>(i) * out + o];
                  }
                }
              });
}

template <typename T>
Var Tape<T>::conv2d(Var x, Var weight, Var bias, int stride, int padding) {
  const auto& xs = node(x).value.shape();
  const auto& ws = node(weight).value.shape();
  const auto& bs = node(bias).value.shape();
  if (xs.size() != 4 || ws.size() != 4 || bs.size() != 1 || ws[1] != xs[1] ||
      ws[2] != ws[3] || bs[0] != ws[0] || stride < 1 || padding < 0) {
    shape_error("conv2d", "x " + shape_string(xs) + ", weight " + shape_string(ws) +
                              ", bias " + shape_string(bs));
  }
  const int n = xs[0], out_c = ws[0];
  ConvGeometry g{xs[1], xs[2], xs[3], ws[2], stride, padding, 0, 0};
  g.out_h = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel) / stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) shape_error("conv2d", "kernel larger than padded input");

  Tensor<T> y({n, out_c, g.out_h, g.out_w});
  std::vector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
  const std::size_t in_stride = static_cast<std::size_t>(g.channels) * g.height * g.width;
  const std::size_t out_stride = static_cast<std::size_t>(out_c) * g.cols();
  const T* w = node(weight).value.data();
  const T* b = node(bias).value.data();
  for (int i = 0; i < n; ++i) {
    im2col(g, node(x).value.data() + i * in_stride, cols.data());
    T* out = y.data() + i * out_stride;
    for (int o = 0; o < out_c; ++o) std::fill_n(out + static_cast<std::size_t>(o) * g.cols(), g.cols(), b[o]);
    gemm_nn(out_c, g.cols(), g.rows(), w, cols.data(), out);
  }
  return push(OpKind::conv2d, {x.id, weight.id, bias.id}, std::move(y),
              [g, n, out_c, in_stride, out_stride](Tape& t, int self) {
                const Node& me = t.nodes_[self];
                const int xi = me.inputs[0], wi = me.inputs[1], bi = me.inputs[2];
                std::vector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
                const T* w = t.nodes_[wi].value.data();
                for (int i = 0; i < n; ++i) {
                  const T* dy = me.grad.data() + i * out_stride;
                  if (t.wants(wi)) {
                    im2col(g, t.nodes_[xi].value.data() + i * in_stride, cols.data());
                    gemm_nt(out_c, g.rows(), g.cols(), dy, cols.data(), t.accumulate(wi).data());
                  }
                  if (t.wants(bi)) {
                    T* db = t.accumulate(bi).data();
                    for (int o = 0; o < out_c; ++o) {
                      const T* row = dy + static_cast<std::size_t>(o) * g.cols();
                      for (int p = 0; p < g.cols(); ++p) db[o] += row[p];
                    }
                  }
                  if (t.wants(xi)) {
                    std::fill(cols.begin(), cols.end(), T(0));
                    gemm_tn(g.rows(), g.cols(), out_c, w, dy, cols.data());
                    col2im(g, cols.data(), t.accumulate(xi).data() + i * in_stride);
                  }
                }
              });
}

template <typename T>
Var Tape<T>::conv2d_transpose(Var x, Var weight, Var bias, int stride, int padding) {
  const auto& xs = node(x).value.shape();
  const auto& ws = node(weight).value.shape();
  const auto& bs = node(bias).value.shape();
  if (xs.size() != 4 || ws.size() != 4 || bs.size() != 1 || ws[0] != xs[1] ||
      ws[2] != ws[3] || bs[0] != ws[1] || stride < 1 || padding < 0) {
    shape_error("conv2d_transpose", "x " + shape_string(xs) + ", weight " +
                                        shape_string(ws) + ", bias " + shape_string(bs));
  }
  const int n = xs[0], in_c = xs[1];
  const int out_c = ws[1], k = ws[2];
  const int out_h = (xs[2] - 1) * stride - 2 * padding + k;
  const int out_w = (xs[3] - 1) * stride - 2 * padding + k;
  if (out_h <= 0 || out_w <= 0) shape_error("conv2d_transpose", "empty output");
  // The output image plays the role of the convolution input.
  const ConvGeometry g{out_c, out_h, out_w, k, stride, padding, xs[2], xs[3]};
  if ((out_h + 2 * padding - k) / stride + 1 != xs[2] ||
      (out_w + 2 * padding - k) / stride + 1 != xs[3]) {
    shape_error("conv2d_transpose", "geometry does not invert");
  }
  Tensor<T> y({n, out_c, out_h, out_w});
  const std::size_t in_stride = static_cast<std::size_t>(in_c) * g.cols();
  const std::size_t out_stride = static_cast<std::size_t>(out_c) * out_h * out_w;
  std::vector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
  const T* w = node(weight).value.data();
  const T* b = node(bias).value.data();
  for (int i = 0; i < n; ++i) {
    std::fill(cols.begin(), cols.end(), T(0));
    gemm_tn(g.rows(), g.cols(), in_c, w, node(x).value.data() + i * in_stride, cols.data());
    T* out = y.data() + i * out_stride;
    for (int o = 0; o < out_c; ++o) {
      std::fill_n(out + static_cast<std::size_t>(o) * out_h * out_w, out_h * out_w, b[o]);
    }
    col2im(g, cols.data(), out);
  }
  return push(OpKind::conv2d_transpose, {x.id, weight.id, bias.id}, std::move(y),
              [g, n, in_c, out_c, in_stride, out_stride](Tape& t, int self) {
                const Node& me = t.nodes_[self];
                const int xi = me.inputs[0], wi = me.inputs[1], bi = me.inputs[2];
                std::vector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
                const T* w = t.nodes_[wi].value.data();
                const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
                for (int i = 0; i < n; ++i) {
                  const T* dy = me.grad.data() + i * out_stride;
                  if (t.wants(bi)) {
                    T* db = t.accumulate(bi).data();
                    for (int o = 0; o < out_c; ++o) {
                      const T* row = dy + o * plane;
                      for (std::size_t p = 0; p < plane; ++p) db[o] += row[p];
                    }
                  }
                  if (!t.wants(xi) && !t.wants(wi)) continue;
                  im2col(g, dy, cols.data());
                  if (t.wants(xi)) {
                    gemm_nn(in_c, g.cols(), g.rows(), w, cols.data(),
                            t.accumulate(xi).data() + i * in_stride);
                  }
                  if (t.wants(wi)) {
                    gemm_nt(in_c, g.rows(), g.cols(), t.nodes_[xi].value.data() + i * in_stride,
                            cols.data(), t.accumulate(wi).data());
                  }
                }
              });
}

// Elementwise unary op with derivative expressed through input and output.
#define LGLAB_UNARY(NAME, KIND, FORWARD, DERIV)                                \
  template <typename T>                                                        \
  Var Tape<T>::NAME(Var x) {                                                   \
    Tensor<T> y = node(x).value;                                               \
    for (T& v : y.values()) {                                                  \
      const T in = v;                                                          \
      (void)in;                                                                \
      v = (FORWARD);                                                           \
    }                                                                          \
    return push(OpKind::KIND, {x.id}, std::move(y), [](Tape& t, int self) {    \
      const Node& me = t.nodes_[self];                                         \
      const int xi = me.inputs[0];                                             \
      if (!t.wants(xi)) return;                                                \
      const T* xv = t.nodes_[xi].value.data();                                 \
      const T* yv = me.value.data();                                           \
      const T* dy = me.grad.data();                                            \
      T* dx = t.accumulate(xi).data();                                         \
      for (std::size_t i = 0; i < me.value.size(); ++i) {                      \
        const T in = xv[i];                                                    \
        const T out = yv[i];                                                   \
        (void)in;                                                              \
        (void)out;                                                             \
        dx[i] += dy[i] * (DERIV);                                              \
      }                                                                        \
    });                                                                        \
  }

LGLAB_UNARY(sigmoid, sigmoid, stable_sigmoid(in), out * (T(1) - out))
LGLAB_UNARY(tanh, tanh, std::tanh(in), T(1) - out * out)
LGLAB_UNARY(exp, exp, std::exp(in), out)
LGLAB_UNARY(square, square, in * in, T(2) * in)

#undef LGLAB_UNARY

template <typename T>
Var Tape<T>::leaky_relu(Var x, T slope) {
  Tensor<T> y = node(x).value;
  for (T& v : y.values()) v = v > 0 ? v : slope * v;
  const Var out = push(OpKind::leaky_relu, {x.id}, std::move(y), [slope](Tape& t, int self) {
    const Node& me = t.nodes_[self];
    const int xi = me.inputs[0];
    if (!t.wants(xi)) return;
    const T* xv = t.nodes_[xi].value.data();
    const T* dy = me.grad.data();
    T* dx = t.accumulate(xi).data();
    for (std::size_t i = 0; i < me.value.size(); ++i) dx[i] += xv[i] > 0 ? dy[i] : slope * dy[i];
  });
  return out;
}

template <typename T>
Var Tape<T>::log(Var x, T eps) {
  Tensor<T> y = node(x).value;
  for (T& v : y.values()) v = std::log(std::max(v, eps));
  const Var out = push(OpKind::log, {x.id}, std::move(y), [eps](Tape& t, int self) {
    const Node& me = t.nodes_[self];
    const int xi = me.inputs[0];
    if (!t.wants(xi)) return;
    const T* xv = t.nodes_[xi].value.data();
    const T* dy = me.grad.data();
    T* dx = t.accumulate(xi).data();
    for (std::size_t i = 0; i < me.value.size(); ++i) {
      if (xv[i] > eps) dx[i] += dy[i] / xv[i];
    }
  });
  nodes_[out.id].lo = nodes_[out.id].hi = eps;
  return out;
}

template <typename T>
Var Tape<T>::clamp(Var x, T lo, T hi) {
  if (!(lo <= hi)) throw ValidationError("clamp: lo must not exceed hi");
  Tensor<T> y = node(x).value;
  for (T& v : y.values()) v = std::clamp(v, lo, hi);
  const Var out = push(OpKind::clamp, {x.id}, std::move(y), [lo, hi](Tape& t, int self) {
    const Node& me = t.nodes_[self];
    const int xi = me.inputs[0];
    if (!t.wants(xi)) return;
    const T* xv = t.nodes_[xi].value.data();
    const T* dy = me.grad.data();
    T* dx = t.accumulate(xi).data();
    for (std::size_t i = 0; i < me.value.size(); ++i) {
      if (xv[i] >= lo && xv[i] <= hi) dx[i] += dy[i];
    }
  });
  nodes_[out.id].lo = lo;
  nodes_[out.id].hi = hi;
  return out;
}

template <typename T>
std::uint64_t Tape<T>::branch_signature() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) { h = (h ^ v) * 0x100000001b3ULL; };
  for (const Node& n : nodes_) {
    if (n.kind != OpKind::leaky_relu && n.kind != OpKind::clamp && n.kind != OpKind::log) continue;
    for (const T v : nodes_[n.inputs[0]].value.values()) {
      mix(static_cast<std::uint64_t>((v > n.lo) + (v > n.hi)));
    }
  }
  return h;
}

template <typename T>
Var Tape<T>::affine(Var x, T scale, T shift) {
  Tensor<T> y = node(x).value;
  for (T& v : y.values()) v = scale * v + shift;
  return push(OpKind::affine, {x.id}, std::move(y), [scale](Tape& t, int self) {
    const Node& me = t.nodes_[self];
    const int xi = me.inputs[0];
    if (!t.wants(xi)) return;
    const T* dy = me.grad.data();
    T* dx = t.accumulate(xi).data();
    for (std::size_t i = 0; i < me.value.size(); ++i) dx[i] += scale * dy[i];
  });
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  require_same("add", node(a).value.shape(), node(b).value.shape());
  Tensor<T> y = node(a).value;
  const T* bv = node(b).value.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return push(OpKind::add, {a.id, b.id}, std::move(y), [](Tape& t, int self) {
    const Node& me = t.nodes_[self];
    for (const int in : me.inputs) {
      if (!t.wants(in)) continue;
      T* d = t.accumulate(in).data();
      for (std::size_t i = 0; i < me.value.size(); ++i) d[i] += me.grad[i];
    }
  });
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
  require_same("sub", node(a).value.shape(), node(b).value.shape());
  Tensor<T> y = node(a).value;
  const T* bv = node(b).value.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return push(OpKind::sub, {a.id, b.id}, std::move(y), [](Tape& t, int self) {
    const Node& me = t.nodes_[self];
    const int ai = me.inputs[0], bi = me.inputs[1];
    if (t.wants(ai)) {
      T* d = t.accumulate(ai).data();
      for (std::size_t i = 0; i < me.value.size(); ++i) d[i] += me.grad[i];
    }
    if (t.wants(bi)) {
      T* d = t.accumulate(bi).data();
      for (std::size_t i = 0; i < me.value.size(); ++i) d[i] -= me.grad[i];
    }
  });
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  require_same("mul", node(a).value.shape(), node(b).value.shape());
  Tensor<T> y = node(a).value;
  const T* bv = node(b).value.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return push(OpKind::mul, {a.id, b.id}, std::move(y), [](Tape& t, int self) {
    const Node& me = t.nodes_[self];
    const int ai = me.inputs[0], bi = me.inputs[1];
    const T* av = t.nodes_[ai].value.data();
    const T* bv = t.nodes_[bi].value.data();
    if (t.wants(ai)) {
      T* d = t.accumulate(ai).data();
      for (std::size_t i = 0; i < me.value.size(); ++i) d[i] += me.grad[i] * bv[i];
    }
    if (t.wants(bi)) {
      T* d = t.accumulate(bi).data();
      for (std::size_t i = 0; i < me.value.size(); ++i) d[i] += me.grad[i] * av[i];
    }
  });
}

template <typename T>
Var Tape<T>::sum(Var x) {
  T total = 0;
  for (const T v : node(x).value.values()) total += v;
  return push(OpKind::sum, {x.id}, Tensor<T>({1}, total), [](Tape& t, int self) {
    const Node& me = t.nodes_[self];
    const int xi = me.inputs[0];
    if (!t.wants(xi)) return;
    Tensor<T>& dx = t.accumulate(xi);
    for (T& v : dx.values()) v += me.grad[0];
  });
}

template <typename T>
Var Tape<T>::mean(Var x) {
  T total = 0;
  for (const T v : node(x).value.values()) total += v;
  const T count = static_cast<T>(node(x).value.size());
  return push(OpKind::mean, {x.id}, Tensor<T>({1}, total / count), [count](Tape& t, int self) {
    const Node& me = t.nodes_[self];
    const int xi = me.inputs[0];
    if (!t.wants(xi)) return;
    Tensor<T>& dx = t.accumulate(xi);
    for (T& v : dx.values()) v += me.grad[0] / count;
  });
}

template <typename T>
Var Tape<T>::reshape(Var x, Shape shape) {
  if (shape_size(shape) != node(x).value.size()) {
    shape_error("reshape", shape_string(node(x).value.shape()) + " -> " + shape_string(shape));
  }
  Tensor<T> y(std::move(shape), std::vector<T>(node(x).value.values().begin(),
                                                node(x).value.values().end()));
  return push(OpKind::reshape, {x.id}, std::move(y), [](Tape& t, int self) {
    const Node& me = t.nodes_[self];
    const int xi = me.inputs[0];
    if (!t.wants(xi)) return;
    T* d = t.accumulate(xi).data();
    for (std::size_t i = 0; i < me.value.size(); ++i) d[i] += me.grad[i];
  });
}

namespace {
// Splits a shape around `axis` into (outer, axis length, inner) block sizes.
struct AxisSplit {
  std::size_t outer = 1, inner = 1;
};
AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit a;
  for (int i = 0; i < axis; ++i) a.outer *= static_cast<std::size_t>(s[i]);
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= static_cast<std::size_t>(s[i]);
  return a;
}
}  // namespace

template <typename T>
Var Tape<T>::concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  Shape shape = node(parts[0]).value.shape();
  if (axis < 0 || axis >= static_cast<int>(shape.size())) shape_error("concat", "bad axis");
  std::vector<int> ids;
  std::vector<int> lengths;
  int total = 0;
  for (const Var p : parts) {
    Shape s = node(p).value.shape();
    const int len = s.at(axis);
    s[axis] = shape[axis];
    if (s != shape) shape_error("concat", "incompatible part " + shape_string(node(p).value.shape()));
    ids.push_back(p.id);
    lengths.push_back(len);
    total += len;
  }
  shape[axis] = total;
  const AxisSplit split = split_axis(shape, axis);
  Tensor<T> y(shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const std::size_t block = lengths[k] * split.inner;
    const T* src = nodes_[ids[k]].value.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src + o * block, block, y.data() + o * total * split.inner + offset);
    }
    offset += block;
  }
  return push(OpKind::concat, ids, std::move(y),
              [lengths, split, total](Tape& t, int self) {
                const Node& me = t.nodes_[self];
                std::size_t offset = 0;
                for (std::size_t k = 0; k < me.inputs.size(); ++k) {
                  const std::size_t block = lengths[k] * split.inner;
                  if (t.wants(me.inputs[k])) {
                    T* d = t.accumulate(me.inputs[k]).data();
                    for (std::size_t o = 0; o < split.outer; ++o) {
                      const T* g = me.grad.data() + o * total * split.inner + offset;
                      for (std::size_t i = 0; i < block; ++i) d[o * block + i] += g[i];
                    }
                  }
                  offset += block;
                }
              });
}

template <typename T>
Var Tape<T>::slice(Var x, int axis, int begin, int end) {
  const Shape& in_shape = node(x).value.shape();
  if (axis < 0 || axis >= static_cast<int>(in_shape.size()) || begin < 0 ||
      end > in_shape[axis] || begin >= end) {
    shape_error("slice", "bad range on " + shape_string(in_shape));
  }
  Shape shape = in_shape;
  shape[axis] = end - begin;
  const AxisSplit split = split_axis(in_shape, axis);
  const std::size_t in_block = in_shape[axis] * split.inner;
  const std::size_t out_block = (end - begin) * split.inner;
  const std::size_t start = begin * split.inner;
  Tensor<T> y(shape);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(node(x).value.data() + o * in_block + start, out_block, y.data() + o * out_block);
  }
  return push(OpKind::slice, {x.id}, std::move(y),
              [split, in_block, out_block, start](Tape& t, int self) {
                const Node& me = t.nodes_[self];
                const int xi = me.inputs[0];
                if (!t.wants(xi)) return;
                T* d = t.accumulate(xi).data();
                for (std::size_t o = 0; o < split.outer; ++o) {
                  for (std::size_t i = 0; i < out_block; ++i) {
                    d[o * in_block + start + i] += me.grad[o * out_block + i];
                  }
                }
              });
}

template <typename T>
Var Tape<T>::gaussian_sample(Var mu, Var logvar, Tensor<T> noise) {
  require_same("gaussian_sample", node(mu).value.shape(), node(logvar).value.shape());
  require_same("gaussian_sample", node(mu).value.shape(), noise.shape());
  Tensor<T> z = node(mu).value;
  const T* lv = node(logvar).value.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += std::exp(T(0.5) * lv[i]) * noise[i];
  return push(OpKind::gaussian_sample, {mu.id, logvar.id}, std::move(z),
              [noise = std::move(noise)](Tape& t, int self) {
                const Node& me = t.nodes_[self];
                const int mi = me.inputs[0], li = me.inputs[1];
                if (t.wants(mi)) {
                  T* d = t.accumulate(mi).data();
                  for (std::size_t i = 0; i < me.value.size(); ++i) d[i] += me.grad[i];
                }
                if (t.wants(li)) {
                  const T* lv = t.nodes_[li].value.data();
                  T* d = t.accumulate(li).data();
                  for (std::size_t i = 0; i < me.value.size(); ++i) {
                    d[i] += me.grad[i] * T(0.5) * std::exp(T(0.5) * lv[i]) * noise[i];
                  }
                }
              });
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  return node(v).value;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == n.value.size()) return n.grad;
  return Tensor<T>(n.value.shape());
}

template <typename T>
OpKind Tape<T>::kind(Var v) const {
  return node(v).kind;
}

template <typename T>
GradMap<T> Tape<T>::backward(Var loss, const ParamFilter& select) {
  const Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ValidationError("backward: loss must be scalar, got shape " +
                          shape_string(root.value.shape()));
  }
  auto selected = [&](const std::string& name) { return !select || select(name); };

  // A node is active when it leads to a selected parameter or a variable.
  active_.assign(nodes_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    n.grad = Tensor<T>();
    if (n.kind == OpKind::variable) {
      active_[i] = 1;
    } else if (n.kind == OpKind::parameter) {
      active_[i] = selected(n.param_name);
    } else {
      for (const int in : n.inputs) active_[i] = active_[i] || active_[in];
    }
  }

  accumulate(loss.id)[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!active_[i] || !n.pullback || n.grad.size() == 0) continue;
    n.pullback(*this, i);
  }

  GradMap<T> grads;
  if (store_ != nullptr) {
    for (const auto& [name, value] : *store_) {
      if (!selected(name)) continue;
      const auto it = param_nodes_.find(name);
      if (it != param_nodes_.end() && nodes_[it->second].grad.size() == value.size()) {
        grads.emplace(name, nodes_[it->second].grad);
      } else {
        grads.emplace(name, Tensor<T>(value.shape()));
      }
    }
  }
  return grads;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace lglab::ad
