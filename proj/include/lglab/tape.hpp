#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lglab/tensor.hpp"

// Reverse-mode automatic differentiation over a recorded tape of tensor ops.
namespace lglab::ad {

enum class OpKind {
  constant,
  variable,
  parameter,
  dense,
  conv2d,
  conv2d_transpose,
  leaky_relu,
  sigmoid,
  tanh,
  exp,
  log,
  square,
  add,
  sub,
  mul,
  affine,
  sum,
  mean,
  reshape,
  concat,
  slice,
  clamp,
  gaussian_sample,
};

std::string_view to_string(OpKind kind);

// Handle to a node on a tape.
struct Var {
  int id = -1;
};

using ParamFilter = std::function<bool(const std::string&)>;

template <typename T>
class Tape {
 public:
  // Leaves. Constants never receive gradients; variables do.
  Var constant(Tensor<T> value);
  Var variable(Tensor<T> value);
  // Parameter leaf; repeated calls for the same name return the same node.
  // A tape binds to the first store it sees.
  Var param(const ParamStore<T>& store, const std::string& name);

  // x [N, in], weight [out, in], bias [out] -> [N, out]
  Var dense(Var x, Var weight, Var bias);
  // x [N, C, H, W], weight [O, C, k, k], bias [O]
  Var conv2d(Var x, Var weight, Var bias, int stride, int padding);
  // x [N, C, H, W], weight [C, O, k, k], bias [O];
  // output side (H - 1) * stride - 2 * padding + k
  Var conv2d_transpose(Var x, Var weight, Var bias, int stride, int padding);

  Var leaky_relu(Var x, T slope);
  Var sigmoid(Var x);
  Var tanh(Var x);
  Var exp(Var x);
  // log(max(x, eps)); zero gradient where the clamp is active.
  Var log(Var x, T eps);
  Var square(Var x);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  // scale * x + shift
  Var affine(Var x, T scale, T shift);
  Var sum(Var x);
  Var mean(Var x);
  Var reshape(Var x, Shape shape);
  Var concat(std::span<const Var> parts, int axis);
  Var slice(Var x, int axis, int begin, int end);
  Var clamp(Var x, T lo, T hi);
  // mu + exp(logvar / 2) * noise; noise is a constant.
  Var gaussian_sample(Var mu, Var logvar, Tensor<T> noise);

  const Tensor<T>& value(Var v) const;
  // Gradient from the most recent backward(); zeros if none reached v.
  Tensor<T> grad(Var v) const;
  OpKind kind(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }

  // Hash of which side of every non-differentiable point (leaky_relu at 0,
  // clamp bounds, log eps floor) each recorded input lies on. Two tapes of
  // the same graph share a signature iff they took the same branches.
  std::uint64_t branch_signature() const;

  // Reverse sweep from a scalar loss. Returns the gradient of every
  // parameter of the bound store accepted by `select` (all when empty), in
  // store order; unreachable parameters get zeros. Callable repeatedly with
  // different losses on the same tape.
  GradMap<T> backward(Var loss, const ParamFilter& select = {});

 private:
  struct Node {
    OpKind kind = OpKind::constant;
    std::vector<int> inputs;
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    bool tracks = false;  // some input (transitively) is a variable/parameter
    std::string param_name;
    T lo = 0, hi = 0;  // branch points of leaky_relu / clamp / log
    std::function<void(Tape&, int)> pullback;
  };

  Var push(OpKind kind, std::vector<int> inputs, Tensor<T> value,
           std::function<void(Tape&, int)> pullback);
  const Node& node(Var v) const;
  Tensor<T>& accumulate(int id);
  bool wants(int id) const { return active_[id]; }

  std::vector<Node> nodes_;
  const ParamStore<T>* store_ = nullptr;
  std::map<std::string, int> param_nodes_;
  std::vector<char> active_;  // per-node relevance during backward
};

}  // namespace lglab::ad
