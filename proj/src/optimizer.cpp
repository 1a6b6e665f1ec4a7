#include "lglab/optimizer.hpp"

#include <cmath>

#include "lglab/errors.hpp"

namespace lglab::ad {

template <typename T>
void optimizer_step(ParamStore<T>& params, const GradMap<T>& grads,
                    OptimizerState<T>& state) {
  for (const auto& [name, g] : grads) {
    if (g.shape() != params.at(name).shape()) {
      throw ValidationError("gradient shape mismatch for parameter '" + name + "'");
    }
    if (!g.all_finite()) {
      throw OverflowError("non-finite gradient for parameter '" + name + "'");
    }
  }
  ++state.step;
  const OptimizerConfig& cfg = state.config;
  if (cfg.kind == OptimizerKind::sgd) {
    for (const auto& [name, g] : grads) {
      auto p = params.mutable_values(name);
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] -= static_cast<T>(cfg.learning_rate) * g[i];
      }
    }
    return;
  }
  const double correction1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(cfg.learning_rate / correction1);
  const T sqrt_c2 = static_cast<T>(std::sqrt(correction2));
  const T eps = static_cast<T>(cfg.epsilon);
  for (const auto& [name, g] : grads) {
    auto& m = state.first_moment.try_emplace(name, g.shape()).first->second;
    auto& v = state.second_moment.try_emplace(name, g.shape()).first->second;
    auto p = params.mutable_values(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      p[i] -= step_size * m[i] / (std::sqrt(v[i]) / sqrt_c2 + eps);
    }
  }
}

template void optimizer_step<float>(ParamStore<float>&, const GradMap<float>&,
                                    OptimizerState<float>&);
template void optimizer_step<double>(ParamStore<double>&, const GradMap<double>&,
                                     OptimizerState<double>&);

}  // namespace lglab::ad
