#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "lglab/tape.hpp"

namespace lglab::ad {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t probes = 0;
  std::size_t reduced_step = 0;  // probes that needed a smaller step
  std::size_t kink_skipped = 0;  // probes straddling a branch point at every step
};

// Builds the loss from the store on a fresh tape.
using LossBuilder = std::function<Var(Tape<double>&, const ParamStore<double>&)>;

// Compares reverse-mode gradients with central differences
// (L(theta + h) - L(theta - h)) / 2h. Every scalar of tensors with at most
// `samples_per_tensor` entries is probed; larger tensors get a seeded random
// subsample of that size. Relative error per coordinate is
// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
// A difference quotient is only valid when both perturbed evaluations take
// the same branches (Tape::branch_signature) as the unperturbed one. Such
// probes are retried at h/2, h/4, h/8 and h/16, and skipped and counted when every
// step still straddles a branch point.
GradCheckReport grad_check(const LossBuilder& build_loss,
                           ParamStore<double>& params, double h,
                           std::size_t samples_per_tensor = 50,
                           std::uint64_t seed = 0);

}  // namespace lglab::ad
