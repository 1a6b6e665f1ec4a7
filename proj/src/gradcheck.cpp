#include "lglab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lglab/errors.hpp"
#include "lglab/rng.hpp"

namespace lglab::ad {

GradCheckReport grad_check(const LossBuilder& build_loss,
                           ParamStore<double>& params, double h,
                           std::size_t samples_per_tensor, std::uint64_t seed) {
  if (!(h >= 1e-6 && h <= 1e-3)) {
    throw ValidationError("grad_check: h must lie in [1e-6, 1e-3]");
  }
  if (samples_per_tensor < 1) throw ValidationError("grad_check: need at least one sample");

  GradMap<double> analytic;
  std::uint64_t base_signature = 0;
  {
    Tape<double> tape;
    const Var loss = build_loss(tape, params);
    base_signature = tape.branch_signature();
    analytic = tape.backward(loss);
  }
  // Loss value, and whether the evaluation took the unperturbed branches.
  auto evaluate = [&] {
    Tape<double> tape;
    const double value = tape.value(build_loss(tape, params))[0];
    if (!std::isfinite(value)) throw OverflowError("grad_check: non-finite loss while probing");
    return std::pair{value, tape.branch_signature() == base_signature};
  };

  GradCheckReport report;
  Rng rng(mix_seed(seed, 0x6C0DEULL));
  for (const std::string& name : params.names()) {
    auto values = params.mutable_values(name);
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > samples_per_tensor) {
      shuffle(coords, rng);
      coords.resize(samples_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    const Tensor<double>& g = analytic.at(name);
    for (const std::size_t i : coords) {
      const double saved = values[i];
      double fd = 0.0;
      bool smooth = false;
      double step = h;
      for (int attempt = 0; attempt < 5 && !smooth; ++attempt, step /= 2.0) {
        values[i] = saved + step;
        const auto [plus, plus_ok] = evaluate();
        values[i] = saved - step;
        const auto [minus, minus_ok] = evaluate();
        values[i] = saved;
        fd = (plus - minus) / (2.0 * step);
        smooth = plus_ok && minus_ok;
        if (smooth && attempt > 0) ++report.reduced_step;
      }
      if (!smooth) {
        ++report.kink_skipped;
        continue;
      }
      const double err = std::abs(g[i] - fd) / std::max(1e-8, std::abs(g[i]) + std::abs(fd));
      ++report.probes;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_parameter = name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace lglab::ad
