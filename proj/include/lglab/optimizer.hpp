#pragma once

#include <cstdint>
#include <string>

#include "lglab/tensor.hpp"

namespace lglab::ad {

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct OptimizerState {
  OptimizerConfig config;
  std::int64_t step = 0;
  GradMap<T> first_moment;
  GradMap<T> second_moment;
};

// Updates the parameters named in `grads` (other parameters are left alone)
// and advances the step counter. Adam uses bias-corrected moments; sgd is
// plain gradient descent. Throws OverflowError naming the parameter on a
// non-finite gradient, before anything is modified.
template <typename T>
void optimizer_step(ParamStore<T>& params, const GradMap<T>& grads,
                    OptimizerState<T>& state);

}  // namespace lglab::ad
